"""Scene data model, agent-centric normalization, JSONL I/O and a seeded scenario generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError

VEHICLE = "vehicle"
PEDESTRIAN = "pedestrian"
KINDS = (VEHICLE, PEDESTRIAN)
MANEUVERS = ("cruise", "turn_left", "turn_right", "lane_change", "hard_accel", "hard_brake")
SPLITS = ("train", "val", "test")


class SchemaError(ValueError):
    """A scene file line does not follow the JSONL scene schema."""


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), 2 * math.pi)


def kinematics(xy: np.ndarray, dt: float, heading0: float | None = None, min_speed: float = 0.3) -> np.ndarray:
    """Build (x, y, vx, vy, heading) rows from positions by backward differences.

    The first row reuses the first forward difference. Heading is held from
    the previous step while speed is below ``min_speed``.
    """
    xy = np.asarray(xy, dtype=np.float64)
    n = len(xy)
    vel = np.zeros((n, 2))
    if n > 1:
        vel[1:] = np.diff(xy, axis=0) / dt
        vel[0] = vel[1]
    heading = np.zeros(n)
    prev = 0.0 if heading0 is None else float(heading0)
    for k in range(n):
        if math.hypot(vel[k, 0], vel[k, 1]) >= min_speed:
            prev = math.atan2(vel[k, 1], vel[k, 0])
        heading[k] = prev
    return np.column_stack([xy, vel, wrap_angle(heading)])


@dataclass(eq=False)
class AgentTrack:
    kind: str
    states: np.ndarray  # (T_h + 1, 5): x, y, vx, vy, heading

    def __eq__(self, other):
        return (isinstance(other, AgentTrack) and self.kind == other.kind
                and np.array_equal(self.states, other.states))


@dataclass(eq=False)
class LaneGraph:
    nodes: np.ndarray  # (N, 2)
    adj: np.ndarray  # (N, N) of 0/1, row i -> column j means j follows i

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64).reshape(-1, 2)
        self.adj = np.asarray(self.adj, dtype=np.int8).reshape(len(self.nodes), len(self.nodes))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros((0, 0)))

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        return (isinstance(other, LaneGraph) and np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.adj, other.adj))


@dataclass(eq=False)
class Scene:
    target: AgentTrack
    neighbors: list[AgentTrack]
    lanes: LaneGraph
    future: np.ndarray  # (T_f, 2)
    dt: float
    meta: str = ""
    split: str = "train"
    # (x0, y0, theta) of the agent frame expressed in world coordinates, if normalized
    frame: tuple[float, float, float] | None = None

    @property
    def t_hist(self) -> int:
        return len(self.target.states) - 1

    @property
    def t_fut(self) -> int:
        return len(self.future)

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.target == other.target
                and len(self.neighbors) == len(other.neighbors)
                and all(a == b for a, b in zip(self.neighbors, other.neighbors))
                and self.lanes == other.lanes and np.array_equal(self.future, other.future)
                and self.dt == other.dt and self.meta == other.meta and self.split == other.split
                and self.frame == other.frame)


@dataclass
class Dataset:
    scenes: list[Scene] = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    def __iter__(self):
        return iter(self.scenes)

    def indices(self, split: str | None) -> list[int]:
        if split in (None, "all"):
            return list(range(len(self.scenes)))
        return [i for i, s in enumerate(self.scenes) if s.split == split]

    def subset(self, split: str | None) -> "Dataset":
        return Dataset([self.scenes[i] for i in self.indices(split)])


# -- agent frame --------------------------------------------------------------------


def _rigid(points: np.ndarray, x0, y0, theta, inverse=False):
    c, s = math.cos(theta), math.sin(theta)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if inverse:
        return np.column_stack([c * p[:, 0] - s * p[:, 1] + x0, s * p[:, 0] + c * p[:, 1] + y0])
    dx, dy = p[:, 0] - x0, p[:, 1] - y0
    return np.column_stack([c * dx + s * dy, -s * dx + c * dy])


def _rotate(vec: np.ndarray, theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.column_stack([c * vec[:, 0] - s * vec[:, 1], s * vec[:, 0] + c * vec[:, 1]])


def _transform_scene(scene: Scene, x0, y0, theta, inverse: bool) -> Scene:
    rot = theta if inverse else -theta

    def track(t: AgentTrack) -> AgentTrack:
        st = t.states
        out = np.empty_like(st)
        out[:, :2] = _rigid(st[:, :2], x0, y0, theta, inverse)
        out[:, 2:4] = _rotate(st[:, 2:4], rot)
        out[:, 4] = wrap_angle(st[:, 4] + rot)
        return AgentTrack(t.kind, out)

    lanes = LaneGraph(_rigid(scene.lanes.nodes, x0, y0, theta, inverse) if len(scene.lanes) else scene.lanes.nodes,
                      scene.lanes.adj.copy())
    return replace(scene, target=track(scene.target), neighbors=[track(n) for n in scene.neighbors],
                   lanes=lanes, future=_rigid(scene.future, x0, y0, theta, inverse))


def to_agent_frame(scene: Scene) -> Scene:
    """Move the target's last observed pose to the origin with zero heading.

    The world pose of the frame is stored in ``frame`` so ``from_agent_frame``
    can undo it; normalizing an already-normalized scene composes the frames.
    """
    x0, y0, _, _, theta = scene.target.states[-1]
    out = _transform_scene(scene, x0, y0, theta, inverse=False)
    if scene.frame is None:
        frame = (float(x0), float(y0), float(theta))
    else:
        fx, fy, ft = scene.frame
        wx, wy = _rigid(np.array([[x0, y0]]), fx, fy, ft, inverse=True)[0]
        frame = (float(wx), float(wy), float(wrap_angle(ft + theta)))
    out.frame = frame
    return out


def from_agent_frame(scene: Scene) -> Scene:
    if scene.frame is None:
        return scene
    out = _transform_scene(scene, *scene.frame, inverse=True)
    out.frame = None
    return out


# -- JSONL ----------------------------------------------------------------------------


def _track_json(t: AgentTrack):
    return {"kind": t.kind, "states": t.states.tolist()}


def scene_to_json(scene: Scene) -> dict:
    d = {
        "dt": scene.dt,
        "meta": scene.meta,
        "target": _track_json(scene.target),
        "neighbors": [_track_json(n) for n in scene.neighbors],
        "lanes": {"nodes": scene.lanes.nodes.tolist(), "adj": scene.lanes.adj.astype(int).tolist()},
        "future": scene.future.tolist(),
        "split": scene.split,
    }
    if scene.frame is not None:
        d["frame"] = list(scene.frame)
    return d


def _req(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def _matrix(value, cols, where):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: not a numeric matrix") from None
    if arr.size == 0:
        return arr.reshape(0, cols)
    if arr.ndim != 2 or arr.shape[1] != cols:
        raise SchemaError(f"{where}: expected rows of {cols} numbers, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise SchemaError(f"{where}: non-finite values")
    return arr


def _track_from_json(obj, where, length=None):
    kind = _req(obj, "kind", where)
    if kind not in KINDS:
        raise SchemaError(f"{where}: unknown agent kind {kind!r}")
    states = _matrix(_req(obj, "states", where), 5, where + ".states")
    if len(states) < 1 or (length is not None and len(states) != length):
        raise SchemaError(f"{where}: expected {length} states, got {len(states)}")
    return AgentTrack(kind, states)


def scene_from_json(obj, lineno: int = 0) -> Scene:
    where = f"line {lineno}"
    dt = _req(obj, "dt", where)
    if not isinstance(dt, (int, float)) or not dt > 0:
        raise SchemaError(f"{where}: dt must be a positive number")
    meta = _req(obj, "meta", where)
    target = _track_from_json(_req(obj, "target", where), where + ".target")
    length = len(target.states)
    nbrs = _req(obj, "neighbors", where)
    if not isinstance(nbrs, list):
        raise SchemaError(f"{where}: neighbors must be a list")
    neighbors = [_track_from_json(n, f"{where}.neighbors[{i}]", length) for i, n in enumerate(nbrs)]
    lanes_obj = _req(obj, "lanes", where)
    nodes = _matrix(_req(lanes_obj, "nodes", where + ".lanes"), 2, where + ".lanes.nodes")
    adj = np.asarray(_req(lanes_obj, "adj", where + ".lanes"))
    if len(nodes) == 0 and adj.size == 0:
        adj = np.zeros((0, 0))
    if adj.shape != (len(nodes), len(nodes)):
        raise SchemaError(f"{where}.lanes.adj: expected {len(nodes)}x{len(nodes)}, got shape {adj.shape}")
    if not np.isin(adj, (0, 1)).all() or (len(nodes) and np.diag(adj).any()):
        raise SchemaError(f"{where}.lanes.adj: entries must be 0/1 with an empty diagonal")
    future = _matrix(_req(obj, "future", where), 2, where + ".future")
    if len(future) < 1:
        raise SchemaError(f"{where}.future: empty")
    split = obj.get("split", "train")
    if split not in SPLITS:
        raise SchemaError(f"{where}: unknown split {split!r}")
    frame = obj.get("frame")
    if frame is not None:
        if len(frame) != 3:
            raise SchemaError(f"{where}.frame: expected [x, y, theta]")
        frame = tuple(float(v) for v in frame)
    return Scene(target, neighbors, LaneGraph(nodes, adj), future, float(dt), str(meta), split, frame)


def save_scenes(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for scene in dataset:
            fh.write(json.dumps(scene_to_json(scene), separators=(",", ":")))
            fh.write("\n")


def load_scenes(path) -> Dataset:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            scenes.append(scene_from_json(obj, lineno))
    if scenes:
        th, tf, dt = scenes[0].t_hist, scenes[0].t_fut, scenes[0].dt
        for i, s in enumerate(scenes):
            if (s.t_hist, s.t_fut, s.dt) != (th, tf, dt):
                raise SchemaError(f"scene {i + 1}: horizons/dt differ from the first scene")
    return Dataset(scenes)


# -- synthetic generator -------------------------------------------------------------


@dataclass
class GenConfig:
    scenes: int = 200
    t_hist: int = 4
    t_fut: int = 8
    dt: float = 0.5
    mix_cruise: float = 0.55
    mix_turn_left: float = 0.15
    mix_turn_right: float = 0.15
    mix_lane_change: float = 0.10
    mix_hard_accel: float = 0.025
    mix_hard_brake: float = 0.025
    neighbors_min: int = 0
    neighbors_max: int = 4
    pedestrian_fraction: float = 0.3
    noise: float = 0.02  # position noise std in m, clipped at 3 sigma
    speed_min: float = 6.0
    speed_max: float = 12.0
    accel: float = 4.0  # hard-accel magnitude, m/s^2
    brake: float = 5.0  # hard-brake magnitude, m/s^2
    yaw_rate_min: float = 0.4
    yaw_rate_max: float = 0.6
    lane_width: float = 3.5
    lane_change_time: float = 4.0
    lane_nodes: int = 8
    lane_length: float = 80.0
    split_train: float = 0.7
    split_val: float = 0.15
    split_test: float = 0.15

    @property
    def mix(self) -> dict[str, float]:
        return {m: getattr(self, "mix_" + m) for m in MANEUVERS}

    def validate(self):
        mix = self.mix
        if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ConfigError(f"maneuver proportions must be non-negative and sum to 1, got {sum(mix.values())!r}")
        sp = (self.split_train, self.split_val, self.split_test)
        if any(v < 0 for v in sp) or abs(sum(sp) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be non-negative and sum to 1")
        if self.scenes < 1 or self.t_hist < 1 or self.t_fut < 1 or not self.dt > 0:
            raise ConfigError("scenes, t_hist, t_fut must be >= 1 and dt > 0")
        if not 0 <= self.neighbors_min <= self.neighbors_max:
            raise ConfigError("need 0 <= neighbors_min <= neighbors_max")
        if self.lane_nodes < 2:
            raise ConfigError("lane_nodes must be >= 2")


def apportion(n: int, weights) -> list[int]:
    """Integer counts proportional to weights summing to n (largest remainder, ties by order)."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w / w.sum() * n
    base = np.floor(raw + 1e-9).astype(int)
    rem = raw - base
    for i in sorted(range(len(w)), key=lambda i: (-rem[i], i))[: n - base.sum()]:
        base[i] += 1
    return base.tolist()


class _Path:
    """Arc-length parametrized planar curve integrated from a heading profile."""

    def __init__(self, heading_of_s, s_min, s_max, ds=0.05):
        s = np.arange(s_min, s_max + ds, ds)
        mid = heading_of_s(s[:-1] + ds / 2)
        steps = np.column_stack([np.cos(mid), np.sin(mid)]) * ds
        xy = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
        # shift so that s = 0 is the origin
        i0 = int(round(-s_min / ds))
        self.s = s
        self.xy = xy - xy[i0]
        self.heading_of_s = heading_of_s

    def at(self, s, lateral=0.0):
        s = np.asarray(s, dtype=np.float64)
        x = np.interp(s, self.s, self.xy[:, 0])
        y = np.interp(s, self.s, self.xy[:, 1])
        h = self.heading_of_s(s)
        lat = np.broadcast_to(np.asarray(lateral, dtype=np.float64), s.shape)
        return np.column_stack([x - np.sin(h) * lat, y + np.cos(h) * lat])


def _clipped_noise(rng, sigma, shape):
    return np.clip(rng.normal(0.0, 1.0, size=shape), -3.0, 3.0) * sigma


def _target_motion(maneuver: str, cfg: GenConfig, rng):
    """Return (path, arc length s(t), lateral offset d(t), lane offsets) on the time grid."""
    n = cfg.t_hist + cfg.t_fut + 1
    t = np.arange(n) * cfg.dt
    v0 = rng.uniform(cfg.speed_min, cfg.speed_max)
    t_on = rng.uniform(0.0, cfg.t_hist * cfg.dt)
    tau = np.maximum(t - t_on, 0.0)
    if maneuver == "hard_accel":
        a = cfg.accel * rng.uniform(1.0, 1.25)
        s = v0 * t + 0.5 * a * tau ** 2
    elif maneuver == "hard_brake":
        b = cfg.brake * rng.uniform(1.0, 1.25)
        tau = np.minimum(tau, v0 / b)
        s = v0 * np.minimum(t, t_on + v0 / b) - 0.5 * b * tau ** 2
        s = np.where(t >= t_on + v0 / b, v0 * t_on + v0 ** 2 / (2 * b), s)
    else:
        a = rng.uniform(-0.4, 0.4) if maneuver == "cruise" else 0.0
        s = v0 * t + 0.5 * a * t ** 2
    lateral = np.zeros(n)
    side = 1.0 if rng.random() < 0.5 else -1.0
    if maneuver in ("turn_left", "turn_right"):
        omega = rng.uniform(cfg.yaw_rate_min, cfg.yaw_rate_max)
        kappa = omega / v0
        sign = 1.0 if maneuver == "turn_left" else -1.0
        s_on = v0 * t_on
        s_end = s_on + (math.pi / 2) / kappa

        def heading(q):
            return sign * kappa * (np.clip(q, s_on, s_end) - s_on)
    else:
        def heading(q):
            return np.zeros_like(np.asarray(q, dtype=np.float64))
    if maneuver == "lane_change":
        u = np.clip((t - t_on) / cfg.lane_change_time, 0.0, 1.0)
        lateral = side * cfg.lane_width * (1.0 - np.cos(math.pi * u)) / 2.0
    path = _Path(heading, -20.0, max(cfg.lane_length, float(s[-1])) + 5.0)
    return path, s, lateral, side


def _neighbor(kind, cfg: GenConfig, rng, target_xy_last, target_heading_last):
    n = cfg.t_hist + 1
    t_rel = (np.arange(n) - cfg.t_hist) * cfg.dt
    c, s = math.cos(target_heading_last), math.sin(target_heading_last)
    if kind == VEHICLE:
        across = rng.choice([-cfg.lane_width, 0.0, cfg.lane_width]) + rng.normal(0.0, 0.3)
        along = rng.uniform(-30.0, 40.0)
        while math.hypot(along, across) < 8.0:
            along = rng.uniform(-30.0, 40.0)
        speed = rng.uniform(2.0, cfg.speed_max)
        head = target_heading_last + rng.normal(0.0, 0.1)
        if rng.random() < 0.15:
            head += math.pi
    else:
        along = rng.uniform(-10.0, 30.0)
        across = rng.uniform(4.0, 15.0) * rng.choice([-1.0, 1.0])
        speed = rng.uniform(0.5, 2.0)
        head = rng.uniform(-math.pi, math.pi)
    p_last = target_xy_last + np.array([c * along - s * across, s * along + c * across])
    vel = speed * np.array([math.cos(head), math.sin(head)])
    xy = p_last + t_rel[:, None] * vel
    xy = xy + _clipped_noise(rng, cfg.noise, xy.shape)
    return AgentTrack(kind, kinematics(xy, cfg.dt, heading0=head))


def _lanes(path: _Path, side: float, cfg: GenConfig, to_world) -> LaneGraph:
    s_nodes = np.linspace(-10.0, cfg.lane_length, cfg.lane_nodes)
    lanes = [path.at(s_nodes, 0.0), path.at(s_nodes, side * cfg.lane_width)]
    nodes = np.vstack([to_world(l) for l in lanes])
    m = cfg.lane_nodes
    adj = np.zeros((2 * m, 2 * m), dtype=np.int8)
    for k in range(2):
        for i in range(m - 1):
            adj[k * m + i, k * m + i + 1] = 1
    return LaneGraph(nodes, adj)


def generate_scene(maneuver: str, cfg: GenConfig, rng) -> Scene:
    path, s, lateral, side = _target_motion(maneuver, cfg, rng)
    clean = path.at(s, lateral)
    theta = rng.uniform(-math.pi, math.pi)
    origin = rng.uniform(-100.0, 100.0, size=2)
    c, sn = math.cos(theta), math.sin(theta)

    def to_world(p):
        p = np.asarray(p, dtype=np.float64)
        return np.column_stack([c * p[:, 0] - sn * p[:, 1], sn * p[:, 0] + c * p[:, 1]]) + origin

    xy = to_world(clean) + _clipped_noise(rng, cfg.noise, clean.shape)
    hist, fut = xy[: cfg.t_hist + 1], xy[cfg.t_hist + 1:]
    target = AgentTrack(VEHICLE, kinematics(hist, cfg.dt, heading0=theta))
    n_nbr = int(rng.integers(cfg.neighbors_min, cfg.neighbors_max + 1))
    neighbors = []
    for _ in range(n_nbr):
        kind = PEDESTRIAN if rng.random() < cfg.pedestrian_fraction else VEHICLE
        neighbors.append(_neighbor(kind, cfg, rng, hist[-1], target.states[-1, 4]))
    lanes = _lanes(path, side, cfg, to_world)
    return Scene(target, neighbors, lanes, fut, float(cfg.dt), maneuver)


def generate_synthetic(cfg: GenConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset; maneuver counts follow the mix exactly (rounded)."""
    cfg.validate()
    counts = apportion(cfg.scenes, [cfg.mix[m] for m in MANEUVERS])
    labels = [m for m, c in zip(MANEUVERS, counts) for _ in range(c)]
    rng = np.random.default_rng(seed)
    labels = [labels[i] for i in rng.permutation(len(labels))]
    split_counts = apportion(cfg.scenes, [cfg.split_train, cfg.split_val, cfg.split_test])
    splits = [sp for sp, c in zip(SPLITS, split_counts) for _ in range(c)]
    splits = [splits[i] for i in rng.permutation(len(splits))]
    scenes = []
    for i, (label, split) in enumerate(zip(labels, splits)):
        scene = generate_scene(label, cfg, np.random.default_rng([seed, i]))
        scene.split = split
        scenes.append(scene)
    return Dataset(scenes)


def load_gen_config(path) -> GenConfig:
    from .config import build, read_kv

    cfg = build(GenConfig, read_kv(path))
    cfg.validate()
    return cfg
