"""Discrete Spriteworld: an obstacle-free room with an agent and draggable objects.

Coordinates are integer grid cells ``(x, y)`` with ``0 <= x, y < N``; ``y``
grows upward, so "up" increments ``y``. Actions:

====  ===========  ==================================
idx   name         effect
====  ===========  ==================================
0     up           agent ``y += move_step``
1     down         agent ``y -= move_step``
2     left         agent ``x -= move_step``
3     right        agent ``x += move_step``
4-7   drag-<dir>   agent moves ``drag_step``; every object on the
                   agent's starting cell moves with it
====  ===========  ==================================

Moves that would leave the room are clamped to the wall.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .env import DeterministicMdp, check_cap

ACTION_NAMES = (
    "up", "down", "left", "right",
    "drag-up", "drag-down", "drag-left", "drag-right",
)
OBJECT_NAMES = ("square", "circle")

_DIRECTIONS = ((0, 1), (0, -1), (-1, 0), (1, 0))


@dataclass(frozen=True)
class SpriteworldConfig:
    grid_size: int = 5
    object_count: int = 1
    move_step: int = 2
    drag_step: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.grid_size < 3:
            raise ValueError("grid_size must be >= 3")
        if self.object_count not in (0, 1, 2):
            raise ValueError("object_count must be 0, 1 or 2")
        if self.drag_step < 1 or self.drag_step * 2 != self.move_step:
            raise ValueError("drag_step must be positive and exactly half of move_step")
        if self.move_step >= self.grid_size:
            raise ValueError("move_step must be smaller than grid_size")

    @property
    def feature_count(self) -> int:
        return 2 + 2 * self.object_count


@dataclass(frozen=True)
class SpriteState:
    agent: tuple[int, int]
    objects: tuple[tuple[int, int], ...] = field(default_factory=tuple)


def _clamp(v: int, n: int) -> int:
    return min(n - 1, max(0, v))


class Spriteworld(DeterministicMdp):
    """Pure-function dynamics plus canonical state enumeration.

    State ids are row-major over ``(agent x, agent y, obj1 x, obj1 y, ...)``.
    """

    action_count = len(ACTION_NAMES)

    def __init__(self, config: SpriteworldConfig | None = None, discount: float = 0.9):
        self.config = config or SpriteworldConfig()
        self.discount = discount
        self.n = self.config.grid_size
        self.state_count = self.n ** (2 * (1 + self.config.object_count))

    def reset(self, episode_seed: int) -> SpriteState:
        rng = np.random.default_rng([self.config.seed, episode_seed])
        cells = rng.integers(self.n, size=2 * (1 + self.config.object_count))
        pairs = [(int(cells[i]), int(cells[i + 1])) for i in range(0, len(cells), 2)]
        return SpriteState(agent=pairs[0], objects=tuple(pairs[1:]))

    def step(self, state: SpriteState, action: int) -> SpriteState:
        if not 0 <= action < self.action_count:
            raise ValueError(f"invalid action {action}; expected 0..{self.action_count - 1}")
        n = self.n
        ax, ay = state.agent
        if action < 4:
            dx, dy = _DIRECTIONS[action]
            dx, dy = dx * self.config.move_step, dy * self.config.move_step
            return SpriteState((_clamp(ax + dx, n), _clamp(ay + dy, n)), state.objects)

        dx, dy = _DIRECTIONS[action - 4]
        dx, dy = dx * self.config.drag_step, dy * self.config.drag_step
        carried = [o == state.agent for o in state.objects]
        # joint clamp: truncate the displacement so no moved sprite leaves the room
        movers = [state.agent] + [o for o, c in zip(state.objects, carried, strict=True) if c]
        for px, py in movers:
            dx = _clamp(px + dx, n) - px
            dy = _clamp(py + dy, n) - py
        objects = tuple(
            (ox + dx, oy + dy) if c else (ox, oy)
            for (ox, oy), c in zip(state.objects, carried, strict=True)
        )
        return SpriteState((ax + dx, ay + dy), objects)

    def observe(self, state: SpriteState) -> np.ndarray:
        flat = [state.agent[0], state.agent[1]]
        for ox, oy in state.objects:
            flat += [ox, oy]
        return np.asarray(flat, dtype=np.float64) / self.n

    # -- enumeration -----------------------------------------------------

    def state_id(self, state: SpriteState) -> int:
        idx = 0
        for v in (*state.agent, *(c for o in state.objects for c in o)):
            if not 0 <= v < self.n:
                raise ValueError(f"coordinate {v} outside grid")
            idx = idx * self.n + v
        return idx

    def state_of(self, state_id: int) -> SpriteState:
        if not 0 <= state_id < self.state_count:
            raise IndexError(f"state {state_id} out of range")
        digits = []
        for _ in range(2 * (1 + self.config.object_count)):
            state_id, r = divmod(state_id, self.n)
            digits.append(r)
        digits.reverse()
        pairs = [(digits[i], digits[i + 1]) for i in range(0, len(digits), 2)]
        return SpriteState(pairs[0], tuple(pairs[1:]))

    def step_id(self, state: int, action: int) -> int:
        return self.state_id(self.step(self.state_of(state), action))

    @cached_property
    def transitions(self) -> np.ndarray:
        check_cap(self.state_count)
        table = np.empty((self.state_count, self.action_count), dtype=np.int64)
        for s in range(self.state_count):
            st = self.state_of(s)
            for a in range(self.action_count):
                table[s, a] = self.state_id(self.step(st, a))
        table.setflags(write=False)
        return table

    @cached_property
    def observation_table(self) -> np.ndarray:
        """``observe`` for every state id, shape ``(state_count, feature_count)``."""
        check_cap(self.state_count)
        dims = 2 * (1 + self.config.object_count)
        grid = np.indices((self.n,) * dims).reshape(dims, -1).T
        return grid.astype(np.float64) / self.n

    def sample_state(self, rng: np.random.Generator) -> int:
        cells = rng.integers(self.n, size=2 * (1 + self.config.object_count))
        idx = 0
        for v in cells:
            idx = idx * self.n + int(v)
        return idx
