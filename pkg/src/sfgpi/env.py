"""Deterministic tabular MDPs and the synthetic hypercube environment.

Every environment here is finite and deterministic, so the complete
transition function can be materialised as an integer table of shape
``(state_count, action_count)``. The exact oracles in :mod:`sfgpi.sf` and
:mod:`sfgpi.gpi` work directly on that table.
"""

from __future__ import annotations

from collections import deque
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

EXACT_STATE_CAP = 10**7


class StateSpaceTooLarge(ValueError):
    """Raised when an exact (enumerating) operation exceeds the state cap."""


def check_cap(state_count: int, cap: int = EXACT_STATE_CAP) -> None:
    if state_count > cap:
        raise StateSpaceTooLarge(
            f"state space too large for exact mode: {state_count} states > cap {cap}"
        )


class DeterministicMdp:
    """Base class for finite deterministic MDPs.

    Subclasses implement :meth:`step_id`; the transition table is built
    lazily by enumerating every (state, action) pair once.
    """

    state_count: int
    action_count: int
    discount: float = 0.9

    def step_id(self, state: int, action: int) -> int:
        raise NotImplementedError

    @cached_property
    def transitions(self) -> np.ndarray:
        check_cap(self.state_count)
        table = np.empty((self.state_count, self.action_count), dtype=np.int64)
        for s in range(self.state_count):
            for a in range(self.action_count):
                table[s, a] = self.step_id(s, a)
        table.setflags(write=False)
        return table

    def sample_state(self, rng: np.random.Generator) -> int:
        """Uniform draw over the enumerable states."""
        return int(rng.integers(self.state_count))


class TabularMdp(DeterministicMdp):
    """A deterministic MDP given directly by its transition table."""

    def __init__(self, transitions: np.ndarray, discount: float = 0.9):
        table = np.asarray(transitions, dtype=np.int64)
        if table.ndim != 2:
            raise ValueError("transition table must be 2-D (state, action)")
        if table.min() < 0 or table.max() >= table.shape[0]:
            raise ValueError("transition table refers to unknown states")
        if not 0.0 <= discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        self.state_count, self.action_count = table.shape
        self.discount = discount
        table = table.copy()
        table.setflags(write=False)
        self.__dict__["transitions"] = table

    def step_id(self, state: int, action: int) -> int:
        return int(self.transitions[state, action])


def enumerate_states(mdp: DeterministicMdp, cap: int = EXACT_STATE_CAP) -> range:
    """All state ids exactly once, in canonical (row-major) order."""
    check_cap(mdp.state_count, cap)
    return range(mdp.state_count)


def successor_closure(mdp: DeterministicMdp, start: int, horizon: int) -> set[int]:
    """States reachable from ``start`` with at most ``horizon`` actions (BFS)."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    seen = {start}
    frontier = deque([(start, 0)])
    while frontier:
        s, depth = frontier.popleft()
        if depth == horizon:
            continue
        for a in range(mdp.action_count):
            nxt = mdp.step_id(s, a)
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, depth + 1))
    return seen


class HypercubeMdp(DeterministicMdp):
    """Grid over ``k`` coordinates, each in ``1..m``, moved one edge at a time.

    Action layout: ``0`` stays put; ``1 + 2*i`` increments coordinate ``i``
    and ``2 + 2*i`` decrements it. Moves saturate at the boundaries 1 and m.
    State ids are row-major over the coordinate tuple (first coordinate is
    the most significant digit).

    The stay action is what makes the coordinate features optimally
    independently controllable: without it a policy that has reached a
    middle bin cannot hold it without moving another coordinate.
    """

    def __init__(self, k: int, m: int, discount: float = 0.9):
        if k < 1 or m < 1:
            raise ValueError("hypercube needs k >= 1 and m >= 1")
        if not 0.0 <= discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        self.k = k
        self.m = m
        self.discount = discount
        self.state_count = m**k
        self.action_count = 2 * k + 1

    STAY = 0

    @staticmethod
    def inc(dim: int) -> int:
        return 1 + 2 * dim

    @staticmethod
    def dec(dim: int) -> int:
        return 2 + 2 * dim

    def coords(self, state: int) -> tuple[int, ...]:
        if not 0 <= state < self.state_count:
            raise IndexError(f"state {state} out of range")
        digits = []
        for _ in range(self.k):
            state, r = divmod(state, self.m)
            digits.append(r + 1)
        return tuple(reversed(digits))

    def state_id(self, coords: Sequence[int]) -> int:
        if len(coords) != self.k:
            raise ValueError(f"expected {self.k} coordinates, got {len(coords)}")
        idx = 0
        for c in coords:
            if not 1 <= c <= self.m:
                raise ValueError(f"coordinate {c} outside 1..{self.m}")
            idx = idx * self.m + (c - 1)
        return idx

    def step_coords(self, coords: Sequence[int], action: int) -> tuple[int, ...]:
        return hypercube_step(coords, action, self.m)

    def step_id(self, state: int, action: int) -> int:
        return self.state_id(self.step_coords(self.coords(state), action))

    @cached_property
    def coordinate_table(self) -> np.ndarray:
        """Coordinates of every state, shape ``(state_count, k)``."""
        check_cap(self.state_count)
        table = np.array([self.coords(s) for s in range(self.state_count)], dtype=np.int64)
        return table.reshape(self.state_count, self.k)

    def all_coords(self) -> Iterable[tuple[int, ...]]:
        return (self.coords(s) for s in range(self.state_count))


def hypercube_step(coords: Sequence[int], action: int, m: int) -> tuple[int, ...]:
    k = len(coords)
    if not 0 <= action < 2 * k + 1:
        raise ValueError(f"action {action} outside 0..{2 * k}")
    out = list(coords)
    if action == HypercubeMdp.STAY:
        return tuple(out)
    dim, direction = divmod(action - 1, 2)
    delta = 1 if direction == 0 else -1
    out[dim] = min(m, max(1, out[dim] + delta))
    return tuple(out)
