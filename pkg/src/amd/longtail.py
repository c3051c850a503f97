"""Long-tail subset criteria: error percentiles, time-to-collision risk, and vehicle-state labels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trajdata import Dataset, Scene

DEFAULT_FRACTIONS = (0.01, 0.02, 0.03, 0.04, 0.05)
COLLISION_RADIUS = 2.0
STATE_LABELS = ("RA", "RD", "SLC", "ST", "Normal")


@dataclass(frozen=True)
class StateThresholds:
    accel_long: float = 2.5  # m/s^2
    decel_long: float = 3.0  # m/s^2
    lat_speed: float = 1.0  # m/s
    yaw_rate: float = 0.3  # rad/s

    def __post_init__(self):
        if min(self.accel_long, self.decel_long, self.lat_speed, self.yaw_rate) <= 0:
            raise ValueError("state thresholds must be strictly positive")


@dataclass(frozen=True)
class SubsetSpec:
    criterion: str  # error | risk | state
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    thresholds: StateThresholds = StateThresholds()

    def __post_init__(self):
        if self.criterion not in ("error", "risk", "state"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        check_fractions(self.fractions)


@dataclass(frozen=True)
class RiskScore:
    ttc: float
    inv_ttc: float

    @classmethod
    def from_ttc(cls, ttc: float) -> "RiskScore":
        return cls(ttc, 0.0 if math.isinf(ttc) else 1.0 / ttc if ttc > 0 else math.inf)


def check_fractions(fractions):
    f = list(fractions)
    if not f or any(not 0 < x <= 1 for x in f) or any(b <= a for a, b in zip(f, f[1:])):
        raise ValueError(f"fractions must be strictly increasing values in (0, 1], got {f}")


def subset_name(fraction: float) -> str:
    return f"Top {fraction * 100:g}%"


def top_subsets(order, fractions) -> dict[str, list[int]]:
    """Nested Top-f tiers from a ranking (most extreme first), plus Rest and All.

    Tier sizes are ceil(f * N); Rest is everything outside the largest tier.
    """
    check_fractions(fractions)
    order = [int(i) for i in order]
    n = len(order)
    if n == 0:
        raise ValueError("cannot split an empty sample set")
    out = {}
    for f in fractions:
        # guard against 0.07 * 100 style float noise before the ceiling
        k = math.ceil(round(f * n, 9))
        out[subset_name(f)] = sorted(order[:k])
    out["Rest"] = sorted(order[math.ceil(round(fractions[-1] * n, 9)):])
    out["All"] = list(range(n))
    return out


def split_by_error(per_sample_fde, fractions=DEFAULT_FRACTIONS) -> dict[str, list[int]]:
    """Tiers of the largest errors; ties go to the lower index."""
    err = np.asarray(per_sample_fde, dtype=np.float64)
    if err.size == 0:
        raise ValueError("cannot split an empty error list")
    order = sorted(range(len(err)), key=lambda i: (-err[i], i))
    return top_subsets(order, fractions)


def time_to_collision(p_a, v_a, p_b, v_b, radius: float = COLLISION_RADIUS) -> float:
    """First tau >= 0 with |(p_b - p_a) + (v_b - v_a) tau| <= radius under constant velocity."""
    rx, ry = p_b[0] - p_a[0], p_b[1] - p_a[1]
    wx, wy = v_b[0] - v_a[0], v_b[1] - v_a[1]
    c = rx * rx + ry * ry - radius * radius
    if c <= 0:
        return 0.0
    a = wx * wx + wy * wy
    b = rx * wx + ry * wy
    if a == 0.0 or b >= 0:
        return math.inf
    disc = b * b - a * c
    if disc < 0:
        return math.inf
    # smaller root of a tau^2 + 2 b tau + c, written to avoid cancellation (b < 0)
    return c / (-b + math.sqrt(disc))


def compute_ttc(scene: Scene, at_step: int | None = None, radius: float = COLLISION_RADIUS) -> RiskScore:
    k = scene.t_hist if at_step is None else at_step
    if not 0 <= k <= scene.t_hist:
        raise ValueError(f"at_step {k} outside observed history [0, {scene.t_hist}]")
    tgt = scene.target.states[k]
    best = math.inf
    for nb in scene.neighbors:
        st = nb.states[k]
        best = min(best, time_to_collision(tgt[0:2], tgt[2:4], st[0:2], st[2:4], radius))
    return RiskScore.from_ttc(best)


def rank_by_risk(dataset: Dataset, fractions=DEFAULT_FRACTIONS, at_step=None,
                 radius: float = COLLISION_RADIUS) -> dict[str, list[int]]:
    ttc = [compute_ttc(s, at_step, radius).ttc for s in dataset]
    if not ttc:
        raise ValueError("cannot rank an empty dataset")
    order = sorted(range(len(ttc)), key=lambda i: (ttc[i], i))
    return top_subsets(order, fractions)


def _heading_series(vel):
    return np.arctan2(vel[:, 1], vel[:, 0])


def classify_vehicle_state(positions, dt: float, thresholds: StateThresholds = StateThresholds(),
                           min_speed: float = 1.0) -> set[str]:
    """Maneuver labels of a position sequence.

    Velocities and accelerations come from central differences. Yaw rate is
    only measured where the agent moves faster than ``min_speed`` so that
    stationary jitter does not read as turning. Lateral speed is measured in
    the frame of the initial direction of travel.
    """
    xy = np.asarray(positions, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] < 2 or len(xy) < 3:
        raise ValueError("need at least 3 positions to classify vehicle state")
    xy = xy[:, :2]
    vel = np.gradient(xy, dt, axis=0)
    acc = np.gradient(vel, dt, axis=0)
    speed = np.hypot(vel[:, 0], vel[:, 1])
    moving = speed > min_speed
    labels = set()
    if moving.any():
        unit = vel[moving] / speed[moving, None]
        a_long = (acc[moving] * unit).sum(axis=1)
        if a_long.max() > thresholds.accel_long:
            labels.add("RA")
        if a_long.min() < -thresholds.decel_long:
            labels.add("RD")
    head = _heading_series(vel)
    yaw = []
    for k in range(1, len(xy) - 1):
        if moving[k - 1] and moving[k] and moving[k + 1]:
            d = math.remainder(head[k + 1] - head[k - 1], 2 * math.pi)
            yaw.append(abs(d) / (2 * dt))
    sharp_turn = bool(yaw) and max(yaw) > thresholds.yaw_rate
    if sharp_turn:
        labels.add("ST")
    first = np.flatnonzero(moving)
    if len(first):
        h0 = head[first[0]]
        lat = -math.sin(h0) * vel[:, 0] + math.cos(h0) * vel[:, 1]
        if not sharp_turn and np.abs(lat[moving]).max() > thresholds.lat_speed:
            labels.add("SLC")
    if not labels:
        labels.add("Normal")
    return labels


def scene_state_labels(scene: Scene, thresholds: StateThresholds = StateThresholds(),
                       segment: str = "both") -> set[str]:
    """Labels of the target from its history, its future, or both joined."""
    hist = scene.target.states[:, :2]
    if segment == "history":
        xy = hist
    elif segment == "future":
        xy = scene.future
    elif segment == "both":
        xy = np.vstack([hist, scene.future])
    else:
        raise ValueError(f"unknown segment {segment!r}")
    return classify_vehicle_state(xy, scene.dt, thresholds)


def split_by_state(dataset: Dataset, thresholds: StateThresholds = StateThresholds(),
                   segment: str = "both") -> dict[str, list[int]]:
    """Index sets per state label (labels co-occur), plus All."""
    out = {name: [] for name in STATE_LABELS}
    for i, scene in enumerate(dataset):
        for lab in scene_state_labels(scene, thresholds, segment):
            out[lab].append(i)
    out["All"] = list(range(len(dataset)))
    return out
