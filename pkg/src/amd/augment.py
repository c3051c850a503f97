"""Seeded trajectory augmentations used to build positive views.

All four operations take an observed state sequence of shape (T, 5) with
columns (x, y, vx, vy, heading) and return a sequence of the same length, so
encoder shapes never change. The last observed position is preserved by
simplify, mask and subset; shift may move it by at most the clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trajdata import kinematics, wrap_angle

METHODS = ("simplify", "shift", "mask", "subset")


@dataclass(frozen=True)
class AugmentPolicy:
    simplify_epsilon: float = 0.2
    shift_sigma: float = 0.2
    shift_clamp: float = 0.5
    mask_ratio: float = 0.25
    subset_min_len: int = 0  # 0 means ceil(T / 2) for a length-T sequence
    method_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        w = self.method_weights
        if len(w) != 4 or min(w) < 0 or sum(w) <= 0:
            raise ValueError("method_weights needs 4 non-negative values with a positive sum")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.subset_min_len == 1 or self.subset_min_len < 0:
            raise ValueError("subset_min_len must be >= 2 (or 0 for the default)")
        if self.simplify_epsilon < 0 or self.shift_sigma < 0 or self.shift_clamp < 0:
            raise ValueError("epsilon, sigma and clamp must be non-negative")


def _chord_distance(p, a, b):
    ab = b - a
    n = math.hypot(ab[0], ab[1])
    if n == 0.0:
        return math.hypot(p[0] - a[0], p[1] - a[1])
    return abs(ab[0] * (p[1] - a[1]) - ab[1] * (p[0] - a[0])) / n


def simplify_indices(xy, epsilon: float) -> list[int]:
    """Indices kept by recursive farthest-point (Douglas-Peucker) simplification."""
    xy = np.asarray(xy, dtype=np.float64)
    n = len(xy)
    if n <= 2:
        return list(range(n))
    keep = {0, n - 1}
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        best, far = -1.0, -1
        for k in range(i + 1, j):
            d = _chord_distance(xy[k], xy[i], xy[j])
            if d > best:
                best, far = d, k
        if far >= 0 and best > epsilon:
            keep.add(far)
            stack.append((i, far))
            stack.append((far, j))
    return sorted(keep)


def simplify(states, epsilon: float, out_len: int | None = None, dt: float = 0.5) -> np.ndarray:
    """Drop points within ``epsilon`` of the simplified polyline, then re-sample at the original times."""
    states = np.asarray(states, dtype=np.float64)
    n = len(states)
    if out_len is not None and out_len != n:
        raise ValueError("simplify keeps the input length")
    if epsilon == 0:
        return states.copy()
    kept = simplify_indices(states[:, :2], epsilon)
    t = np.arange(n, dtype=np.float64)
    xy = np.column_stack([np.interp(t, kept, states[kept, 0]), np.interp(t, kept, states[kept, 1])])
    xy[kept] = states[kept, :2]
    return kinematics(xy, dt, heading0=states[0, 4])


def shift(states, sigma: float, clamp: float, seed, dt: float = 0.5) -> np.ndarray:
    """Add clamped i.i.d. Gaussian offsets to every position; velocity and heading are re-derived."""
    states = np.asarray(states, dtype=np.float64)
    if sigma == 0:
        return states.copy()
    rng = np.random.default_rng(seed)
    offsets = np.clip(rng.normal(0.0, sigma, size=(len(states), 2)), -clamp, clamp)
    return kinematics(states[:, :2] + offsets, dt, heading0=states[0, 4])


def _interpolate(states, known):
    t = np.arange(len(states), dtype=np.float64)
    out = states.copy()
    for c in range(4):
        out[:, c] = np.interp(t, known, states[known, c])
    out[:, 4] = wrap_angle(np.interp(t, known, np.unwrap(states[known, 4])))
    out[known] = states[known]
    return out


def mask(states, ratio: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Blank out floor(ratio * (T - 1)) interior steps and fill them by linear interpolation.

    The first and last steps are never masked. Returns (states, masked flags).
    """
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    states = np.asarray(states, dtype=np.float64)
    n = len(states)
    count = min(math.floor(ratio * (n - 1)), max(n - 2, 0))
    flags = np.zeros(n, dtype=bool)
    if count == 0:
        return states.copy(), flags
    rng = np.random.default_rng(seed)
    flags[1 + rng.choice(n - 2, size=count, replace=False)] = True
    return _interpolate(states, np.flatnonzero(~flags)), flags


def subset(states, min_len: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Keep a random-length suffix window and left-pad it with its first state.

    Returns (states, padded flags).
    """
    states = np.asarray(states, dtype=np.float64)
    n = len(states)
    if not 1 <= min_len <= n:
        raise ValueError(f"min_len must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    length = int(rng.integers(min_len, n + 1))
    pad = n - length
    out = states.copy()
    out[:pad] = states[pad]
    flags = np.zeros(n, dtype=bool)
    flags[:pad] = True
    return out, flags


def pick_method(policy: AugmentPolicy, rng) -> str:
    w = np.asarray(policy.method_weights, dtype=np.float64)
    u = rng.random() * w.sum()
    idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
    # never land on a zero-weight method at the upper edge
    while w[min(idx, 3)] == 0:
        idx -= 1
    return METHODS[min(idx, 3)]


def random_augment(states, policy: AugmentPolicy, seed, dt: float = 0.5) -> np.ndarray:
    """Apply one augmentation chosen by the normalized method weights."""
    states = np.asarray(states, dtype=np.float64)
    rng = np.random.default_rng(seed)
    method = pick_method(policy, rng)
    sub = int(rng.integers(2**63 - 1))
    if method == "simplify":
        return simplify(states, policy.simplify_epsilon, dt=dt)
    if method == "shift":
        return shift(states, policy.shift_sigma, policy.shift_clamp, sub, dt=dt)
    if method == "mask":
        return mask(states, policy.mask_ratio, sub)[0]
    min_len = policy.subset_min_len or math.ceil(len(states) / 2)
    return subset(states, min(max(min_len, 2), len(states)), sub)[0]
