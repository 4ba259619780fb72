"""Successor-feature matrices: exact dynamic programming and tabular TD learning.

Policy ``p`` and cumulant ``c`` are both flat ids ``i * m + (j - 1)`` over
(feature ``i``, bin ``j``). The matrix stores ``psi[p][c](s, a)``, the
discounted sum of cumulant ``c`` when taking ``a`` in ``s`` and following the
feature-control policy ``p`` afterwards. Cumulants are read at the current
state of each transition, so ``psi(s, a) = phi(s) + gamma * psi(s', pi(s'))``.

Two storage modes:

``full``
    ``stored[p, s, a, c]`` for every policy/cumulant pair.
``off_diagonal_analytic``
    only the same-feature block ``stored[i, j, s, a, h]`` (policy ``(i, j)``,
    cumulant ``(i, h)``); cross-feature entries are computed on read as
    ``phi[c](s) / (1 - gamma)``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import DeterministicMdp, check_cap
from .features import BinGrid, FeatureMap, bin_table, cumulant_table

FULL = "full"
OFF_DIAGONAL = "off_diagonal_analytic"
MODES = (FULL, OFF_DIAGONAL)

EXACT_TOL = 1e-10
# Exact values that tie in real arithmetic can differ by a few ulps of the
# convergence tolerance; genuine action gaps are orders of magnitude larger.
EXACT_TIE_TOL = 1e-8

FORMAT_VERSION = 1


def tie_argmax(q: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Lowest action index whose value is within ``tol`` of the row maximum."""
    q = np.asarray(q)
    best = q.max(axis=-1, keepdims=True)
    return np.argmax(q >= best - tol, axis=-1)


def _sweeps_until(gamma: float, tol: float):
    # stop once the contraction bound gamma/(1-gamma)*|delta| is within tol
    scale = gamma / (1.0 - gamma) if gamma > 0 else 0.0
    return lambda delta: delta * scale <= tol


@dataclass(frozen=True)
class GreedyPolicy:
    """Explicit action table of one feature-control policy."""

    policy_id: int
    actions: np.ndarray

    def __call__(self, state: int) -> int:
        return int(self.actions[state])


def exact_optimal_policy(
    mdp: DeterministicMdp,
    cumulant: np.ndarray,
    gamma: float,
    tol: float = EXACT_TOL,
    policy_id: int = -1,
) -> tuple[GreedyPolicy, np.ndarray]:
    """Value iteration on Q* for reward ``cumulant[s]``; returns (policy, Q*).

    ``cumulant`` is the per-state reward column, shape ``(state_count,)``.
    Greedy ties go to the lowest action index.
    """
    check_cap(mdp.state_count)
    t = mdp.transitions
    r = np.asarray(cumulant, dtype=np.float64)
    done = _sweeps_until(gamma, tol)
    q = np.zeros((mdp.state_count, mdp.action_count))
    while True:
        q_new = r[:, None] + gamma * q.max(axis=1)[t]
        delta = np.abs(q_new - q).max()
        q = q_new
        if done(delta):
            break
    return GreedyPolicy(policy_id, tie_argmax(q, EXACT_TIE_TOL)), q


def exact_policy_evaluation(
    mdp: DeterministicMdp,
    policy: np.ndarray,
    cumulants: np.ndarray,
    gamma: float,
    tol: float = EXACT_TOL,
) -> np.ndarray:
    """SF vectors of a deterministic policy for all cumulants, shape ``(S, A, n)``."""
    check_cap(mdp.state_count)
    t = mdp.transitions
    phi = np.asarray(cumulants, dtype=np.float64)
    pol = np.asarray(policy, dtype=np.int64)
    if pol.shape != (mdp.state_count,):
        raise ValueError("policy must give one action per state")
    nxt = t[np.arange(mdp.state_count), pol]
    done = _sweeps_until(gamma, tol)
    v = np.zeros_like(phi)
    while True:
        v_new = phi + gamma * v[nxt]
        delta = np.abs(v_new - v).max() if v.size else 0.0
        v = v_new
        if done(delta):
            break
    return phi[:, None, :] + gamma * v[t]


@dataclass
class SfMatrix:
    k: int
    m: int
    gamma: float
    mode: str
    stored: np.ndarray
    cumulants: np.ndarray  # (state_count, n) indicator table used for analytic reads

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        s, a = self.state_count, self.action_count
        n, k, m = self.n, self.k, self.m
        want = (n, s, a, n) if self.mode == FULL else (k, m, s, a, m)
        if self.stored.shape != want:
            raise ValueError(f"stored entries have shape {self.stored.shape}, expected {want}")
        if self.cumulants.shape != (s, n):
            raise ValueError("cumulant table does not match matrix dimensions")

    @property
    def n(self) -> int:
        return self.k * self.m

    @property
    def state_count(self) -> int:
        return self.cumulants.shape[0]

    @property
    def action_count(self) -> int:
        return self.stored.shape[2] if self.mode == FULL else self.stored.shape[3]

    @property
    def stored_per_state_action(self) -> int:
        return stored_entries_per_state_action(self.k, self.m, self.mode)

    def diagonal(self, policy: int) -> np.ndarray:
        """``psi[p][p](s, a)`` for all states and actions."""
        if self.mode == FULL:
            return self.stored[policy, :, :, policy]
        i, j = divmod(policy, self.m)
        return self.stored[i, j, :, :, j]

    def diagonals(self) -> np.ndarray:
        """Stacked diagonals, shape ``(n, S, A)``."""
        return np.stack([self.diagonal(p) for p in range(self.n)])

    def policy_block(self, policy: int) -> np.ndarray:
        """Full SF vectors ``psi[p][:](s, a)``, shape ``(S, A, n)``."""
        if self.mode == FULL:
            return self.stored[policy]
        i, j = divmod(policy, self.m)
        block = np.repeat(
            (self.cumulants / (1.0 - self.gamma))[:, None, :], self.action_count, axis=1
        )
        block[:, :, i * self.m:(i + 1) * self.m] = self.stored[i, j]
        return block

    def full(self) -> np.ndarray:
        """Materialised ``(n, S, A, n)`` tensor regardless of storage mode."""
        if self.mode == FULL:
            return self.stored
        return np.stack([self.policy_block(p) for p in range(self.n)])

    def entry(self, policy: int, cumulant: int, state: int, action: int) -> float:
        if self.mode == FULL:
            return float(self.stored[policy, state, action, cumulant])
        i, j = divmod(policy, self.m)
        l, h = divmod(cumulant, self.m)
        if l != i:
            return apply_off_diagonal_read(self, cumulant, policy, state, action)
        return float(self.stored[i, j, state, action, h])

    def greedy_policy(self, policy: int, tol: float = EXACT_TIE_TOL) -> GreedyPolicy:
        return GreedyPolicy(policy, tie_argmax(self.diagonal(policy), tol))


def stored_entries_per_state_action(k: int, m: int, mode: str) -> int:
    if mode == FULL:
        return (k * m) ** 2
    if mode == OFF_DIAGONAL:
        return k * m * m
    raise ValueError(f"unknown mode {mode!r}")


def apply_off_diagonal_read(
    matrix: SfMatrix, cumulant: int, policy: int, state: int, action: int
) -> float:
    """Closed-form cross-feature entry ``phi_c(s) / (1 - gamma)``.

    ``action`` is accepted for interface symmetry; the closed form does not
    depend on it.
    """
    if matrix.mode != OFF_DIAGONAL:
        raise ValueError("analytic reads need a matrix in off_diagonal_analytic mode")
    if cumulant // matrix.m == policy // matrix.m:
        raise ValueError("cumulant and policy share a feature; read the stored entry")
    return float(matrix.cumulants[state, cumulant] / (1.0 - matrix.gamma))


def _empty_storage(k, m, s, a, mode) -> np.ndarray:
    n = k * m
    return np.zeros((n, s, a, n) if mode == FULL else (k, m, s, a, m))


def build_exact_sf_matrix(
    mdp: DeterministicMdp,
    feature_map: FeatureMap,
    grid: BinGrid,
    gamma: float,
    mode: str = FULL,
    tol: float = EXACT_TOL,
    workers: int = 1,
) -> SfMatrix:
    """Optimal policy per cumulant (value iteration), then SF vectors for all cumulants."""
    check_cap(mdp.state_count)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if feature_map.state_count != mdp.state_count:
        raise ValueError("feature map and MDP disagree on state count")
    phi = cumulant_table(feature_map, grid)
    k, m = feature_map.k, grid.m
    stored = _empty_storage(k, m, mdp.state_count, mdp.action_count, mode)

    def solve(p: int) -> tuple[int, np.ndarray]:
        pol, _ = exact_optimal_policy(mdp, phi[:, p], gamma, tol, policy_id=p)
        if mode == FULL:
            return p, exact_policy_evaluation(mdp, pol.actions, phi, gamma, tol)
        i = p // m
        return p, exact_policy_evaluation(mdp, pol.actions, phi[:, i * m:(i + 1) * m], gamma, tol)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, range(k * m)))
    else:
        results = [solve(p) for p in range(k * m)]
    for p, block in results:
        if mode == FULL:
            stored[p] = block
        else:
            i, j = divmod(p, m)
            stored[i, j] = block
    return SfMatrix(k, m, gamma, mode, stored, phi)


@dataclass(frozen=True)
class TdSchedule:
    steps: int = 200_000
    alpha: float = 0.1
    epsilon: float = 0.2
    episode_length: int = 20
    tie_tol: float = 1e-3
    update: str = "all"  # "all" policies per transition, or only the "behavior" policy
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if self.tie_tol < 0:
            raise ValueError("tie_tol must be >= 0")
        if self.update not in ("all", "behavior"):
            raise ValueError("update must be 'all' or 'behavior'")


def td_learn_sf(
    mdp: DeterministicMdp,
    feature_map: FeatureMap,
    grid: BinGrid,
    gamma: float,
    schedule: TdSchedule,
    mode: str = FULL,
) -> SfMatrix:
    """Tabular TD(0) on the stored SF entries from epsilon-greedy rollouts.

    Each episode draws a policy id uniformly and acts epsilon-greedily on its
    diagonal entry. The TD target for policy ``p`` bootstraps from ``p``'s own
    greedy action at ``s'``. Because transitions are deterministic, a sample
    ``(s, a, s')`` is a valid update for every policy; ``update="all"`` uses it
    for all of them, ``update="behavior"`` only for the acting one.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    phi = cumulant_table(feature_map, grid)
    k, m = feature_map.k, grid.m
    n = k * m
    s_count, a_count = mdp.state_count, mdp.action_count
    stored = _empty_storage(k, m, s_count, a_count, mode)
    matrix = SfMatrix(k, m, gamma, mode, stored, phi)
    if schedule.steps == 0:
        return matrix

    t = mdp.transitions
    rng = np.random.default_rng(schedule.seed)
    explore = rng.random(schedule.steps) < schedule.epsilon
    random_actions = rng.integers(a_count, size=schedule.steps)
    alpha, tol = schedule.alpha, schedule.tie_tol
    all_p = np.arange(n)
    if mode == OFF_DIAGONAL:
        fi, fj = np.divmod(all_p, m)
        phi_blocks = phi.reshape(s_count, k, m)

    p = s = 0
    for step in range(schedule.steps):
        if step % schedule.episode_length == 0:
            p = int(rng.integers(n))
            s = mdp.sample_state(rng)
        if explore[step]:
            a = int(random_actions[step])
        else:
            if mode == FULL:
                q = stored[p, s, :, p]
            else:
                q = stored[p // m, p % m, s, :, p % m]
            a = int(np.argmax(q >= q.max() - tol))
        s2 = int(t[s, a])

        if mode == FULL:
            if schedule.update == "all":
                q2 = stored[all_p, s2, :, all_p]
                a_star = tie_argmax(q2, tol)
                target = phi[s][None, :] + gamma * stored[all_p, s2, a_star, :]
                stored[:, s, a, :] += alpha * (target - stored[:, s, a, :])
            else:
                q2 = stored[p, s2, :, p]
                a2 = int(np.argmax(q2 >= q2.max() - tol))
                row = stored[p, s, a]
                row += alpha * (phi[s] + gamma * stored[p, s2, a2] - row)
        else:
            if schedule.update == "all":
                q2 = stored[fi, fj, s2, :, fj]
                a_star = tie_argmax(q2, tol)
                target = phi_blocks[s][fi] + gamma * stored[fi, fj, s2, a_star, :]
                cur = stored[fi, fj, s, a, :]
                stored[fi, fj, s, a, :] = cur + alpha * (target - cur)
            else:
                i, j = divmod(p, m)
                q2 = stored[i, j, s2, :, j]
                a2 = int(np.argmax(q2 >= q2.max() - tol))
                row = stored[i, j, s, a]
                row += alpha * (phi_blocks[s][i] + gamma * stored[i, j, s2, a2] - row)
        s = s2
    return matrix


def bellman_residual(
    matrix: SfMatrix, mdp: DeterministicMdp, states=None, tol: float = EXACT_TIE_TOL
) -> float:
    """Sup-norm Bellman residual of the stored SF entries over ``states``."""
    t = mdp.transitions
    states = np.arange(mdp.state_count) if states is None else np.asarray(states)
    worst = 0.0
    for p in range(matrix.n):
        block = matrix.policy_block(p)
        greedy = tie_argmax(matrix.diagonal(p), tol)
        nxt = t[states]  # (len, A)
        target = matrix.cumulants[states][:, None, :] + matrix.gamma * block[nxt, greedy[nxt]]
        gap = np.abs(block[states] - target)
        if matrix.mode == OFF_DIAGONAL:
            # analytic cross-feature reads are not stored, so they have no residual
            i = p // matrix.m
            gap = gap[..., i * matrix.m:(i + 1) * matrix.m]
        worst = max(worst, float(gap.max()))
    return worst


def sup_norm_gap(a: SfMatrix, b: SfMatrix) -> float:
    """Largest absolute difference between two matrices over all entries."""
    if (a.k, a.m, a.state_count, a.action_count) != (b.k, b.m, b.state_count, b.action_count):
        raise ValueError("matrices have different dimensions")
    return max(float(np.abs(a.policy_block(p) - b.policy_block(p)).max()) for p in range(a.n))


def save_sf_matrix(path: str | Path, matrix: SfMatrix) -> Path:
    """Write a versioned ``.npz`` archive; stored entries round-trip bit-exactly."""
    path = Path(path)
    header = {
        "format": "sfgpi.sf_matrix",
        "version": FORMAT_VERSION,
        "k": matrix.k,
        "m": matrix.m,
        "state_count": matrix.state_count,
        "action_count": matrix.action_count,
        "gamma": matrix.gamma,
        "mode": matrix.mode,
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            stored=matrix.stored,
            cumulants=matrix.cumulants.astype(np.uint8),
        )
    return path


def load_sf_matrix(path: str | Path) -> SfMatrix:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != "sfgpi.sf_matrix":
            raise ValueError(f"{path} is not an SF matrix file")
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported SF matrix format version {header['version']}")
        stored = data["stored"]
        phi = data["cumulants"].astype(np.float64)
    matrix = SfMatrix(header["k"], header["m"], header["gamma"], header["mode"], stored, phi)
    if (matrix.state_count, matrix.action_count) != (header["state_count"], header["action_count"]):
        raise ValueError("SF matrix file header does not match its arrays")
    return matrix


def oic_violations(
    mdp: DeterministicMdp,
    feature_map: FeatureMap,
    grid: BinGrid,
    gamma: float,
    limit: int = 10,
) -> list[dict]:
    """Exhaustive check that each optimal feature-control policy leaves other features' bins alone.

    With deterministic dynamics a one-step check per state suffices: if no
    on-policy step changes another feature's bin, no trajectory does.
    Returns up to ``limit`` counterexamples; an empty list means OIC holds.
    """
    check_cap(mdp.state_count)
    phi = cumulant_table(feature_map, grid)
    bins = bin_table(feature_map.values, grid.m)
    t = mdp.transitions
    states = np.arange(mdp.state_count)
    found = []
    for p in range(feature_map.k * grid.m):
        i, j = divmod(p, grid.m)
        pol, _ = exact_optimal_policy(mdp, phi[:, p], gamma)
        nxt_bins = bins[t[states, pol.actions]]
        changed = nxt_bins != bins
        changed[:, i] = False
        for s in np.flatnonzero(changed.any(axis=1)):
            found.append({
                "policy": [i, j + 1],
                "state": int(s),
                "action": int(pol.actions[s]),
                "features_changed": np.flatnonzero(changed[s]).tolist(),
            })
            if len(found) >= limit:
                return found
    return found
