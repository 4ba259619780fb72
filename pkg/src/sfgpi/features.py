"""Feature maps, uniform binning and indicator cumulants.

A feature map assigns each enumerable state ``k`` values in ``[0, 1)``. Each
value is discretised into ``m`` left-closed bins numbered ``1..m``; the
cumulant vector has one indicator per (feature, bin) pair, flattened as
``i * m + (j - 1)`` for feature ``i`` (0-based) and bin ``j`` (1-based).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import HypercubeMdp
from .spriteworld import Spriteworld

# Products like (c / N) * m can land one ulp below an exact bin boundary.
_BOUNDARY_SLACK = 1e-9
# Rescaled entangled features stay strictly below 1.
_UPPER_MARGIN = 1e-9


@dataclass(frozen=True)
class BinGrid:
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def boundaries(self) -> np.ndarray:
        return np.arange(self.m + 1) / self.m

    def index(self, value: float) -> int:
        return bin_index(value, self.m)


def bin_index(value: float, m: int) -> int:
    """1-based bin of ``value`` among ``m`` uniform bins on ``[0, 1)``."""
    if not 0.0 <= value < 1.0:
        raise ValueError(f"feature value {value} outside [0, 1)")
    return min(m, int(math.floor(value * m + _BOUNDARY_SLACK)) + 1)


def bin_table(values: np.ndarray, m: int) -> np.ndarray:
    """Vectorised :func:`bin_index` over an array of feature values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() >= 1.0):
        raise ValueError("feature values must lie in [0, 1)")
    return np.minimum(m, np.floor(values * m + _BOUNDARY_SLACK).astype(np.int64) + 1)


@dataclass(frozen=True)
class FeatureMap:
    """Feature values for every state id, shape ``(state_count, k)``."""

    values: np.ndarray
    kind: str = "disentangled"
    rotation: tuple[tuple[int, int, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("feature values must be a (state_count, k) table")
        if vals.size and (vals.min() < 0.0 or vals.max() >= 1.0):
            raise ValueError("feature values must lie in [0, 1)")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def state_count(self) -> int:
        return self.values.shape[0]

    def __call__(self, state: int) -> np.ndarray:
        return self.values[state]


def hypercube_features(mdp: HypercubeMdp) -> FeatureMap:
    """Canonical features ``(c_i - 0.5) / m``, landing coordinate ``c_i`` in bin ``c_i``."""
    return FeatureMap((mdp.coordinate_table - 0.5) / mdp.m)


def spriteworld_features(env: Spriteworld) -> FeatureMap:
    """Ground-truth positions (the observation vector) as disentangled features."""
    return FeatureMap(env.observation_table)


def cumulant_index(feature: int, bin_: int, m: int) -> int:
    return feature * m + (bin_ - 1)


def cumulants(state: int, feature_map: FeatureMap, grid: BinGrid) -> np.ndarray:
    """Binary cumulant vector of length ``k * m`` for one state."""
    out = np.zeros(feature_map.k * grid.m)
    for i, v in enumerate(feature_map(state)):
        out[cumulant_index(i, bin_index(float(v), grid.m), grid.m)] = 1.0
    return out


def cumulant_table(feature_map: FeatureMap, grid: BinGrid) -> np.ndarray:
    """Cumulant vectors for all states, shape ``(state_count, k * m)``."""
    bins = bin_table(feature_map.values, grid.m)
    s, k = bins.shape
    table = np.zeros((s, k * grid.m))
    cols = np.arange(k) * grid.m + (bins - 1)
    table[np.arange(s)[:, None], cols] = 1.0
    return table


def rotation_matrix(k: int, rotation: Sequence[tuple[int, int, float]]) -> np.ndarray:
    """Product of Givens rotations; each entry is ``(i, i2, degrees)``."""
    r = np.eye(k)
    for i, i2, degrees in rotation:
        if not (0 <= i < k and 0 <= i2 < k) or i == i2:
            raise ValueError(f"invalid rotation plane ({i}, {i2}) for k={k}")
        theta = math.radians(degrees)
        g = np.eye(k)
        c, s = math.cos(theta), math.sin(theta)
        g[i, i], g[i, i2], g[i2, i], g[i2, i2] = c, -s, s, c
        r = g @ r
    return r


def consecutive_pairs(k: int, degrees: float = 45.0) -> tuple[tuple[int, int, float], ...]:
    return tuple((i, i + 1, degrees) for i in range(0, k - 1, 2))


def entangle(feature_map: FeatureMap, rotation: Sequence[tuple[int, int, float]]) -> FeatureMap:
    """Rotate centred features and, if needed, rescale them back into ``[0, 1)``.

    The rotation is applied as ``f + (R - I)(f - 0.5)`` so an identity
    rotation reproduces the input bit for bit. Any feature that leaves
    ``[0, 1)`` is rescaled affinely using its min/max over all enumerated
    states; in-range features are left untouched.
    """
    rotation = tuple((int(i), int(i2), float(d)) for i, i2, d in rotation)
    r = rotation_matrix(feature_map.k, rotation)
    f = feature_map.values
    g = f + (f - 0.5) @ (r - np.eye(feature_map.k)).T
    for col in range(g.shape[1]):
        lo, hi = g[:, col].min(), g[:, col].max()
        if lo < 0.0 or hi >= 1.0:
            span = hi - lo
            g[:, col] = (g[:, col] - lo) / span * (1.0 - _UPPER_MARGIN) if span > 0 else 0.0
    return FeatureMap(g, kind="entangled", rotation=rotation)
