import pytest

from sfgpi.env import HypercubeMdp
from sfgpi.features import BinGrid, hypercube_features
from sfgpi.sf import FULL, build_exact_sf_matrix

GAMMA = 0.9


@pytest.fixture(scope="session")
def exact_matrices():
    """Exact SF matrices keyed by (k, m, mode) on the hypercube, built once."""
    cache = {}

    def get(k, m, mode=FULL):
        key = (k, m, mode)
        if key not in cache:
            mdp = HypercubeMdp(k, m, GAMMA)
            fm = hypercube_features(mdp)
            cache[key] = (mdp, fm, build_exact_sf_matrix(mdp, fm, BinGrid(m), GAMMA, mode))
        return cache[key]

    return get



ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
