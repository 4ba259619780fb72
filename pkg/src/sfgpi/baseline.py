"""Per-task tabular Q-learning from scratch, the transfer baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import DeterministicMdp
from .gpi import success_rate

EVAL_STREAM = 7


@dataclass(frozen=True)
class QSchedule:
    steps: int = 100_000
    alpha: float = 0.5
    epsilon: float = 0.2
    gamma: float = 0.9
    eval_every: int = 1000
    eval_episodes: int = 100
    horizon: int = 80

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.eval_every < 1 or self.eval_episodes < 1 or self.horizon < 1:
            raise ValueError("eval_every, eval_episodes and horizon must be >= 1")


def evaluation_starts(mdp: DeterministicMdp, seed: int, point: int, episodes: int) -> np.ndarray:
    """Fresh reset states for one evaluation point; shared by every method."""
    rng = np.random.default_rng([seed, EVAL_STREAM, point])
    return np.array([mdp.sample_state(rng) for _ in range(episodes)], dtype=np.int64)


def q_learning_run(
    mdp: DeterministicMdp,
    goal_mask: np.ndarray,
    schedule: QSchedule,
    seed: int,
) -> list[tuple[int, float]]:
    """Epsilon-greedy Q-learning; returns ``(step, greedy success rate)`` pairs.

    Reward is 1 on entering the goal, which ends the episode. Episodes that
    start inside the goal end before any step is taken. Evaluations run at
    step 0 and every ``eval_every`` steps thereafter.
    """
    goal_mask = np.asarray(goal_mask, dtype=bool)
    s_count, a_count = mdp.state_count, mdp.action_count
    q = np.zeros((s_count, a_count))
    t = mdp.transitions
    rng = np.random.default_rng(seed)

    def evaluate(point: int) -> float:
        starts = evaluation_starts(mdp, seed, point, schedule.eval_episodes)
        return success_rate(mdp, q.argmax(axis=1), goal_mask, starts, schedule.horizon)

    curve = [(0, evaluate(0))]
    if goal_mask.all():
        # every reset is already a success; nothing to learn
        curve += [(p * schedule.eval_every, 1.0)
                  for p in range(1, schedule.steps // schedule.eval_every + 1)]
        return curve

    gamma, alpha, eps = schedule.gamma, schedule.alpha, schedule.epsilon
    s, age = -1, 0
    for step in range(1, schedule.steps + 1):
        if s < 0 or age >= schedule.horizon:
            s = mdp.sample_state(rng)
            while goal_mask[s]:
                s = mdp.sample_state(rng)
            age = 0
        a = int(rng.integers(a_count)) if rng.random() < eps else int(q[s].argmax())
        s2 = int(t[s, a])
        if goal_mask[s2]:
            q[s, a] += alpha * (1.0 - q[s, a])
            s = -1
        else:
            q[s, a] += alpha * (gamma * q[s2].max() - q[s, a])
            s = s2
        age += 1
        if step % schedule.eval_every == 0:
            curve.append((step, evaluate(step // schedule.eval_every)))
    return curve


def steps_to_threshold(curve, threshold: float = 0.5) -> int | None:
    """First curve step whose success rate reaches ``threshold``, else None."""
    for step, rate in curve:
        if rate >= threshold:
            return int(step)
    return None
