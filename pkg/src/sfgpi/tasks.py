"""Goal-phrase task language.

Grammar (keywords case-insensitive, AND binds tighter than OR)::

    task  := conj ("OR" conj)*
    conj  := atom ("AND" atom)*
    atom  := entity place+
    entity:= agent | square | circle
    place := top | middle | bottom | left | centre | center | right

Places name thirds of the room. ``y`` grows upward, so ``top`` is
``y in [2/3, 1)``; ``left`` is ``x in [0, 1/3)``. Intervals are left-closed
and right-open.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gpi import GoalRegion
from .spriteworld import OBJECT_NAMES, Spriteworld

ENTITIES = ("agent",) + OBJECT_NAMES
VERTICAL = {"bottom": 0, "middle": 1, "top": 2}
HORIZONTAL = {"left": 0, "centre": 1, "center": 1, "right": 2}
KEYWORDS = ("and", "or")

CATEGORIES = (
    "agent-easy",
    "agent-hard",
    "object-easy",
    "object-hard",
    "disjunction-easy",
    "disjunction-hard",
    "conjunction",
)

# Grid positions like c / N sit exactly on third boundaries up to an ulp.
_SLACK = 1e-9


class TaskParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TaskCompileError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    entity: str
    vertical: str | None = None
    horizontal: str | None = None


@dataclass(frozen=True)
class Task:
    """Disjunction of conjunctions of atoms."""

    conjuncts: tuple[tuple[Atom, ...], ...]

    def __str__(self) -> str:
        return format_task(self)


def _tokens(text: str) -> list[tuple[str, int]]:
    data = text.encode("utf-8")
    return [
        (m.group().decode("utf-8").lower(), m.start())
        for m in re.finditer(rb"\S+", data)
    ]


def parse(text: str) -> Task:
    toks = _tokens(text)
    end = len(text.encode("utf-8"))
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, end)

    def atom() -> Atom:
        nonlocal pos
        word, off = peek()
        if word is None:
            raise TaskParseError("expected an entity", off)
        if word in KEYWORDS:
            raise TaskParseError(f"expected an entity, found operator {word.upper()}", off)
        if word not in ENTITIES:
            raise TaskParseError(f"unknown entity {word!r}", off)
        entity = word
        pos += 1
        vertical = horizontal = None
        while True:
            word, off = peek()
            if word is None or word in KEYWORDS:
                break
            if word in VERTICAL:
                if vertical is not None:
                    raise TaskParseError(f"second vertical place {word!r}", off)
                vertical = word
            elif word in HORIZONTAL:
                if horizontal is not None:
                    raise TaskParseError(f"second horizontal place {word!r}", off)
                horizontal = "centre" if word == "center" else word
            elif word in ENTITIES:
                if vertical is horizontal is None:
                    break
                raise TaskParseError(f"expected AND or OR before {word!r}", off)
            else:
                raise TaskParseError(f"unknown place {word!r}", off)
            pos += 1
        if vertical is None and horizontal is None:
            raise TaskParseError(f"entity {entity!r} needs a place", peek()[1])
        return Atom(entity, vertical, horizontal)

    def conj() -> tuple[Atom, ...]:
        nonlocal pos
        atoms = [atom()]
        while peek()[0] == "and":
            pos += 1
            atoms.append(atom())
        return tuple(atoms)

    if not toks:
        raise TaskParseError("empty task", 0)
    conjuncts = [conj()]
    while peek()[0] == "or":
        pos += 1
        conjuncts.append(conj())
    word, off = peek()
    if word is not None:
        raise TaskParseError(f"unexpected {word!r}", off)
    return Task(tuple(conjuncts))


def format_task(task: Task) -> str:
    def atom(a: Atom) -> str:
        return " ".join(x for x in (a.entity, a.vertical, a.horizontal) if x)

    return " OR ".join(" AND ".join(atom(a) for a in c) for c in task.conjuncts)


def categorize(task: Task) -> str:
    atoms = [a for c in task.conjuncts for a in c]
    hard = any(a.vertical and a.horizontal for a in atoms)
    if len(task.conjuncts) > 1:
        return "disjunction-hard" if hard else "disjunction-easy"
    if len(atoms) > 1:
        return "conjunction"
    who = "agent" if atoms[0].entity == "agent" else "object"
    return f"{who}-{'hard' if hard else 'easy'}"


# -- compilation ---------------------------------------------------------


def _third(values: np.ndarray) -> np.ndarray:
    return np.minimum(2, np.floor(np.asarray(values) * 3 + _SLACK).astype(np.int64))


def place_bins(third: int, m: int, aligned: bool) -> frozenset[int]:
    """Bins (1-based) of ``m`` uniform bins covering the given third of ``[0, 1)``."""
    if aligned and m % 3:
        raise TaskCompileError(
            f"place boundaries at thirds do not coincide with {m}-bin boundaries (aligned mode)"
        )
    # bin j spans [(j-1)/m, j/m); it meets [t/3, (t+1)/3) iff both strict inequalities hold
    return frozenset(
        j for j in range(1, m + 1) if 3 * (j - 1) < (third + 1) * m and 3 * j > third * m
    )


@dataclass(frozen=True)
class CompiledTask:
    task: Task
    mask: np.ndarray  # reward predicate over state ids
    regions: tuple[GoalRegion, ...]
    weight_source: str  # "analytic" | "regression"

    @property
    def text(self) -> str:
        return format_task(self.task)

    @property
    def category(self) -> str:
        return categorize(self.task)

    def reward(self, state: int) -> int:
        return int(self.mask[state])

    achieved = reward


def _entity_index(entity: str, object_count: int) -> int:
    idx = ENTITIES.index(entity)
    if idx > object_count:
        raise TaskCompileError(f"entity {entity!r} not present (object_count={object_count})")
    return idx


def compile_task(
    task: Task | str,
    env: Spriteworld,
    m: int,
    alignment: str = "unaligned",
) -> CompiledTask:
    """Reward mask from true positions, goal regions as disentangled position bins."""
    if isinstance(task, str):
        task = parse(task)
    if alignment not in ("aligned", "unaligned"):
        raise ValueError("alignment must be 'aligned' or 'unaligned'")
    aligned = alignment == "aligned"
    positions = env.observation_table
    thirds = _third(positions)
    k = positions.shape[1]

    mask = np.zeros(env.state_count, dtype=bool)
    regions = []
    for conjunct in task.conjuncts:
        inside = np.ones(env.state_count, dtype=bool)
        allowed: list[frozenset[int] | None] = [None] * k
        for a in conjunct:
            e = _entity_index(a.entity, env.config.object_count)
            for feature, third in ((2 * e, HORIZONTAL.get(a.horizontal)),
                                   (2 * e + 1, VERTICAL.get(a.vertical))):
                if third is None:
                    continue
                inside &= thirds[:, feature] == third
                bins = place_bins(third, m, aligned)
                prev = allowed[feature]
                allowed[feature] = bins if prev is None else prev & bins
                if not allowed[feature]:
                    raise TaskCompileError(f"conjunct {conjunct} constrains a feature to nothing")
        mask |= inside
        regions.append(GoalRegion(tuple(allowed)))

    single = len(regions) == 1 and regions[0].is_single_bin
    return CompiledTask(task, mask, tuple(regions), "analytic" if single else "regression")


def load_task_file(path: str | Path) -> list[tuple[int, str]]:
    """``(line number, phrase)`` pairs; blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.strip()
        if text and not text.startswith("#"):
            out.append((lineno, text))
    return out
