"""Few-shot transfer with GPE/GPI over feature-control policies.

Weights are ``(k, m)`` matrices over (feature, bin) cumulants. All table
functions are vectorised over the full enumerated state space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .env import DeterministicMdp, check_cap
from .features import BinGrid, FeatureMap, cumulant_table
from .sf import FULL, SfMatrix, exact_policy_evaluation, tie_argmax

DEFAULT_RIDGE = 1e-6
# Relative to the largest |Q| in the table, so scaling w never changes tie sets.
GPI_REL_TIE_TOL = 1e-9


@dataclass(frozen=True)
class GoalRegion:
    """Per-feature allowed bins (1-based); ``None`` is a wildcard."""

    allowed: tuple[frozenset[int] | None, ...]

    @classmethod
    def from_bins(cls, bins: Sequence[int | Sequence[int] | None]) -> "GoalRegion":
        out = []
        for b in bins:
            if b is None:
                out.append(None)
            elif isinstance(b, (int, np.integer)):
                out.append(frozenset([int(b)]))
            else:
                if not b:
                    raise ValueError("a constrained feature needs at least one allowed bin")
                out.append(frozenset(int(x) for x in b))
        return cls(tuple(out))

    @property
    def k(self) -> int:
        return len(self.allowed)

    @property
    def is_single_bin(self) -> bool:
        return all(a is None or len(a) == 1 for a in self.allowed)

    def target_bin(self, feature: int) -> int | None:
        a = self.allowed[feature]
        if a is None:
            return None
        if len(a) != 1:
            raise ValueError(f"feature {feature} allows several bins")
        return next(iter(a))

    def contains(self, bins: Sequence[int]) -> bool:
        return all(a is None or int(b) in a for a, b in zip(self.allowed, bins, strict=True))

    def mask(self, bins: np.ndarray) -> np.ndarray:
        """Membership for every row of a ``(state_count, k)`` bin table."""
        out = np.ones(bins.shape[0], dtype=bool)
        for i, a in enumerate(self.allowed):
            if a is not None:
                out &= np.isin(bins[:, i], sorted(a))
        return out


def all_goals(k: int, m: int, wildcards: bool = True) -> list[GoalRegion]:
    """Every single-bin goal, optionally with wildcard variants ((m+1)^k total)."""
    choices: list[int | None] = list(range(1, m + 1)) + ([None] if wildcards else [])
    goals = [()]
    for _ in range(k):
        goals = [g + (c,) for g in goals for c in choices]
    return [GoalRegion.from_bins(g) for g in goals]


def analytic_goal_weights(goal: GoalRegion, m: int) -> np.ndarray:
    """Binary weights selecting every allowed bin; wildcard rows stay zero."""
    w = np.zeros((goal.k, m))
    for i, allowed in enumerate(goal.allowed):
        if allowed is None:
            continue
        for j in allowed:
            if not 1 <= j <= m:
                raise ValueError(f"bin {j} outside 1..{m}")
            w[i, j - 1] = 1.0
    return w


def _check_weights(matrix: SfMatrix, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (matrix.k, matrix.m):
        raise ValueError(f"weights have shape {w.shape}, matrix expects {(matrix.k, matrix.m)}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w


def gpe_table(matrix: SfMatrix, w: np.ndarray) -> np.ndarray:
    """``Q_w`` of every stored policy, shape ``(n, S, A)``."""
    w = _check_weights(matrix, w)
    if matrix.mode == FULL:
        return np.einsum("psac,c->psa", matrix.stored, w.ravel())
    k, m = matrix.k, matrix.m
    s = matrix.state_count
    same = np.einsum("ijsah,ih->ijsa", matrix.stored, w)
    per_feature = (matrix.cumulants.reshape(s, k, m) * w).sum(axis=2)  # (S, k)
    cross = (per_feature.sum(axis=1)[:, None] - per_feature) / (1.0 - matrix.gamma)
    q = same + cross.T[:, None, :, None]
    return q.reshape(k * m, s, matrix.action_count)


def gpe(matrix: SfMatrix, w: np.ndarray, state: int, action: int, policy: int) -> float:
    w = _check_weights(matrix, w)
    return float(
        sum(
            w.flat[c] * matrix.entry(policy, c, state, action)
            for c in range(matrix.n)
            if w.flat[c] != 0.0
        )
    )


def gpi_q(matrix: SfMatrix, w: np.ndarray, policies: Sequence[int] | None = None) -> np.ndarray:
    """``max_p Q_w^p(s, a)``, shape ``(S, A)``."""
    q = gpe_table(matrix, w)
    if policies is not None:
        q = q[list(policies)]
    return q.max(axis=0)


def gpi_policy(
    matrix: SfMatrix,
    w: np.ndarray,
    policies: Sequence[int] | None = None,
    rel_tol: float = GPI_REL_TIE_TOL,
) -> np.ndarray:
    """GPI action for every state; ties resolve to the lowest action index."""
    q = gpi_q(matrix, w, policies)
    return tie_argmax(q, rel_tol * float(np.abs(q).max(initial=0.0)))


def gpi_action(matrix: SfMatrix, w: np.ndarray, state: int) -> int:
    return int(gpi_policy(matrix, w)[state])


def policy_values(
    mdp: DeterministicMdp, policy: np.ndarray, reward: np.ndarray, gamma: float
) -> np.ndarray:
    """Exact ``V^pi`` of a deterministic policy for per-state reward ``reward``."""
    psi = exact_policy_evaluation(mdp, policy, np.asarray(reward)[:, None], gamma)
    return psi[np.arange(mdp.state_count), np.asarray(policy), 0]


def gpi_value_of_policy(
    mdp: DeterministicMdp, matrix: SfMatrix, w: np.ndarray, gamma: float | None = None
) -> np.ndarray:
    """Exact per-state value of the GPI policy under reward ``phi . w``."""
    check_cap(mdp.state_count)
    w = _check_weights(matrix, w)
    gamma = matrix.gamma if gamma is None else gamma
    reward = matrix.cumulants @ w.ravel()
    return policy_values(mdp, gpi_policy(matrix, w), reward, gamma)


def fit_weights(
    samples: Sequence[tuple[int, int, float]] | np.ndarray,
    feature_map: FeatureMap,
    grid: BinGrid,
    ridge: float = DEFAULT_RIDGE,
    cumulants: np.ndarray | None = None,
) -> np.ndarray:
    """Ridge least squares of rewards on cumulants via the normal equations.

    ``samples`` holds ``(state, action, reward)`` rows. The action column is
    carried for the record; cumulants depend on the state only.
    """
    rows = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    if rows.shape[0] == 0:
        raise ValueError("fit_weights needs at least one sample")
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    phi = cumulant_table(feature_map, grid) if cumulants is None else cumulants
    x = phi[rows[:, 0].astype(np.int64)]
    y = rows[:, 2]
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, x.T @ y)
    return w.reshape(feature_map.k, grid.m)


def unachieved_features(goal: GoalRegion, bins: Sequence[int]) -> list[int]:
    return [
        i for i, a in enumerate(goal.allowed) if a is not None and int(bins[i]) not in a
    ]


def simplified_qmax_table(matrix: SfMatrix, goal: GoalRegion, bins: np.ndarray) -> np.ndarray:
    """Max diagonal SF over not-yet-achieved goal features, shape ``(S, A)``.

    Equals the GPI objective up to a per-state constant on OIC features;
    states already inside the goal get 0 everywhere.
    """
    if not goal.is_single_bin:
        raise ValueError("simplified Q_max is defined for single-bin goals")
    out = np.full((matrix.state_count, matrix.action_count), -np.inf)
    for i, allowed in enumerate(goal.allowed):
        if allowed is None:
            continue
        b = goal.target_bin(i)
        missing = (bins[:, i] != b)[:, None]
        diag = matrix.diagonal(i * matrix.m + (b - 1))
        out = np.maximum(out, np.where(missing, diag, -np.inf))
    out[np.isneginf(out)] = 0.0
    return out


def simplified_qmax(
    matrix: SfMatrix, goal: GoalRegion, bins: np.ndarray, state: int, action: int
) -> float:
    return float(simplified_qmax_table(matrix, goal, bins)[state, action])


def _as_table(policy, state_count: int) -> np.ndarray:
    if callable(policy):
        return np.array([policy(s) for s in range(state_count)], dtype=np.int64)
    return np.asarray(policy, dtype=np.int64)


def achievement_failures(
    mdp: DeterministicMdp,
    policy: np.ndarray | Callable[[int], int],
    goal_mask: np.ndarray,
    horizon: int | None = None,
) -> np.ndarray:
    """Start states from which rolling ``policy`` never enters the goal."""
    check_cap(mdp.state_count)
    horizon = mdp.state_count if horizon is None else horizon
    pol = _as_table(policy, mdp.state_count)
    goal_mask = np.asarray(goal_mask, dtype=bool)
    t = mdp.transitions
    nxt = t[np.arange(mdp.state_count), pol]
    cur = np.arange(mdp.state_count)
    reached = goal_mask[cur].copy()
    for _ in range(horizon):
        if reached.all():
            break
        cur = nxt[cur]
        reached |= goal_mask[cur]
    return np.flatnonzero(~reached)


def achieves(
    mdp: DeterministicMdp,
    policy: np.ndarray | Callable[[int], int],
    goal_mask: np.ndarray,
    horizon: int | None = None,
) -> bool:
    """True iff the goal is reached from every start within ``horizon`` steps."""
    return achievement_failures(mdp, policy, goal_mask, horizon).size == 0


def success_rate(
    mdp: DeterministicMdp,
    policy: np.ndarray,
    goal_mask: np.ndarray,
    starts: np.ndarray,
    horizon: int,
) -> float:
    """Fraction of rollouts from ``starts`` that enter the goal within ``horizon`` steps.

    A start already inside the goal counts as a success.
    """
    starts = np.asarray(starts, dtype=np.int64)
    if starts.size == 0:
        return 0.0
    nxt = mdp.transitions[np.arange(mdp.state_count), np.asarray(policy, dtype=np.int64)]
    cur = starts.copy()
    reached = goal_mask[cur].copy()
    for _ in range(horizon):
        cur = nxt[cur]
        reached |= goal_mask[cur]
    return float(reached.mean())
