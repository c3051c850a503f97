"""Encoders, scene fusion and the multi-modal Laplace mixture decoder, built on ndgrad.

A batch of agent-frame scenes is encoded by one static graph. Neighbor and
lane slots are padded to fixed counts per graph and padded slots are removed
from attention with a large negative bias, so padding never changes the
result for the real rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .ndgrad import Graph, ShapeError, evaluate
from .trajdata import PEDESTRIAN, AgentTrack, LaneGraph, Scene

NEG = -1e9
TRACK_FEATURES = 7  # x, y, vx, vy, cos h, sin h, is_pedestrian
LANE_FEATURES = 4  # x, y, dx, dy of the segment ending at the node
LANE_STEPS = 2  # predecessor point, node point


@dataclass(frozen=True)
class Arch:
    d: int = 32
    heads: int = 4
    k_modes: int = 5
    t_hist: int = 4
    t_fut: int = 8
    ffn: int = 64
    pos_scale: float = 10.0  # metres per unit of network input/output
    vel_scale: float = 10.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ShapeError(f"heads ({self.heads}) must divide d ({self.d})")
        if min(self.d, self.heads, self.k_modes, self.t_hist, self.t_fut, self.ffn) < 1:
            raise ShapeError("architecture sizes must be positive")


@dataclass
class ModePrediction:
    mu: np.ndarray  # (K, T_f, 2) metres
    scale: np.ndarray  # (K, T_f, 2) metres, > 0
    probs: np.ndarray  # (K,)


# -- graph pieces -----------------------------------------------------------------------


class Net:
    """Helper that emits the layers of the network into a Graph."""

    def __init__(self, g: Graph, arch: Arch):
        self.g = g
        self.a = arch

    def p(self, name, shape):
        node = self.g.params.get(name)
        return node if node is not None else self.g.param(name, shape)

    def linear(self, x, name, din, dout):
        g = self.g
        return g.bias_add(g.matmul(x, self.p(name + ".w", (din, dout))), self.p(name + ".b", (dout,)))

    def mlp(self, x, name, din):
        d = self.a.d
        return self.linear(self.g.relu(self.linear(x, name + ".l1", din, d)), name + ".l2", d, d)

    def mha(self, q_in, kv_in, name, bias=None):
        """Multi-head attention; q_in (B, Lq, d), kv_in (B, Lk, d), bias (B*h, Lq, Lk)."""
        g, d, h = self.g, self.a.d, self.a.heads
        dh = d // h
        b, lq = q_in.shape[0], q_in.shape[1]
        lk = kv_in.shape[1]

        def heads(x, n, which):
            y = self.linear(x, f"{name}.{which}", d, d)
            y = g.transpose(g.reshape(y, (b, n, h, dh)), (0, 2, 1, 3))
            return g.reshape(y, (b * h, n, dh))

        q = heads(q_in, lq, "q")
        k = heads(kv_in, lk, "k")
        v = heads(kv_in, lk, "v")
        s = g.scale(g.matmul(q, g.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        if bias is not None:
            s = g.add(s, bias)
        att = g.softmax(s)
        o = g.matmul(att, v)
        o = g.reshape(g.transpose(g.reshape(o, (b, h, lq, dh)), (0, 2, 1, 3)), (b, lq, d))
        return self.linear(o, name + ".o", d, d), att

    def transformer(self, x, name):
        g, d = self.g, self.a.d
        att, _ = self.mha(x, x, name + ".att")
        x1 = g.layer_norm(g.add(x, att), self.p(name + ".ln1.g", (d,)), self.p(name + ".ln1.b", (d,)))
        ff = self.linear(g.relu(self.linear(x1, name + ".ff1", d, self.a.ffn)), name + ".ff2", self.a.ffn, d)
        return g.layer_norm(g.add(x1, ff), self.p(name + ".ln2.g", (d,)), self.p(name + ".ln2.b", (d,)))

    def gru(self, steps, name, din, h0=None):
        """Run a GRU over a list of (M, din) inputs; returns the final hidden state.

        ``steps`` may repeat the same node (constant input rollout). Returns the
        list of hidden states.
        """
        g, d = self.g, self.a.d
        w = self.p(name + ".wx", (din, 3 * d))
        bx = self.p(name + ".bx", (3 * d,))
        u_rz = self.p(name + ".u_rz", (d, 2 * d))
        u_n = self.p(name + ".u_n", (d, d))
        b_hn = self.p(name + ".b_hn", (d,))
        proj = {}
        h = h0
        out = []
        for x in steps:
            if x.index not in proj:
                proj[x.index] = g.bias_add(g.matmul(x, w), bx)
            xp = proj[x.index]
            xr, xz, xn = (g.slice(xp, 1, i * d, (i + 1) * d) for i in range(3))
            if h is None:
                z = g.sigmoid(xz)
                n = g.tanh(xn)
                h = g.sub(n, g.mul(z, n))
            else:
                hp = g.matmul(h, u_rz)
                r = g.sigmoid(g.add(xr, g.slice(hp, 1, 0, d)))
                z = g.sigmoid(g.add(xz, g.slice(hp, 1, d, 2 * d)))
                hn = g.bias_add(g.matmul(h, u_n), b_hn)
                n = g.tanh(g.add(xn, g.mul(r, hn)))
                h = g.add(n, g.mul(z, g.sub(h, n)))
            out.append(h)
        return out

    def encode_track(self, x, prefix):
        """Eq. 1/2 pipeline on (M, T, F) features; returns (M, d) final GRU states."""
        g = self.g
        m, t = x.shape[0], x.shape[1]
        e = self.mlp(x, prefix + ".mlp", TRACK_FEATURES)
        u = g.add(self.transformer(e, prefix + ".trf"), e)
        steps = [g.reshape(g.slice(u, 1, i, i + 1), (m, self.a.d)) for i in range(t)]
        return self.gru(steps, prefix + ".gru", self.a.d)[-1]

    def encode_lanes(self, seq, adj_bias, b, n_nodes):
        """Eq. 3 pipeline: node MLP, GRU over each node's segment, masked graph attention."""
        g, d = self.g, self.a.d
        e = self.mlp(seq, "lane.mlp", LANE_FEATURES)
        m = seq.shape[0]
        steps = [g.reshape(g.slice(e, 1, i, i + 1), (m, d)) for i in range(seq.shape[1])]
        h = g.reshape(self.gru(steps, "lane.gru", d)[-1], (b, n_nodes, d))
        q = self.linear(h, "lane.gat.q", d, d)
        k = self.linear(h, "lane.gat.k", d, d)
        v = self.linear(h, "lane.gat.v", d, d)
        s = g.add(g.scale(g.matmul(q, g.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d)), adj_bias)
        o = self.linear(g.matmul(g.softmax(s), v), "lane.gat.o", d, d)
        return g.add(h, g.relu(o))

    def fuse(self, blocks, key_bias, b, mode_pos):
        """Eq. 4: learned mode queries plus positional code attend over target/neighbor/lane rows."""
        g, a = self.g, self.a
        kv = g.concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]
        hq = g.add(self.p("fuse.h_mode", (a.k_modes, a.d)), mode_pos)
        q = g.tile(g.reshape(hq, (1, a.k_modes, a.d)), (b, 1, 1))
        return self.mha(q, kv, "fuse.mha", key_bias)

    def decode(self, f_cross, cv_prior, b):
        """Per-mode GRU rollout from F_cross rows, Laplace location/scale per step, mode softmax."""
        g, a = self.g, self.a
        x = g.reshape(f_cross, (b * a.k_modes, a.d))
        hs = self.gru([x] * a.t_fut, "dec.gru", a.d, h0=x)
        w_out = self.p("dec.out.w", (a.d, 4))
        b_out = self.p("dec.out.b", (4,))
        rows = [g.reshape(g.bias_add(g.matmul(h, w_out), b_out), (b * a.k_modes, 1, 4)) for h in hs]
        raw = g.reshape(g.concat(rows, axis=1), (b, a.k_modes, a.t_fut, 4))
        mu = g.add(g.scale(g.slice(raw, 3, 0, 2), a.pos_scale), cv_prior)
        scale = g.softplus(g.slice(raw, 3, 2, 4))
        logits = g.reshape(self.linear(f_cross, "dec.pi", a.d, 1), (b, a.k_modes))
        return mu, scale, g.softmax(logits)


def mode_positions(k: int, d: int) -> np.ndarray:
    pos = np.zeros((k, d))
    idx = np.arange(k)[:, None]
    div = np.power(10000.0, np.arange(0, d, 2) / d)
    pos[:, 0::2] = np.sin(idx / div)
    pos[:, 1::2] = np.cos(idx / div)[:, : d // 2]
    return pos


# -- batch graph --------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphSpec:
    batch: int
    n_slots: int
    n_lanes: int
    with_aug: bool = False
    with_moco: bool = False
    with_dcl: bool = False
    with_losses: bool = False
    queue: int = 1
    tau_moco: float = 0.07
    tau_dcl: float = 0.1


@lru_cache(maxsize=64)
def build_scene_graph(arch: Arch, spec: GraphSpec) -> Graph:
    """Full encode -> fuse -> decode graph for a padded batch, optionally with the training losses."""
    g = Graph()
    net = Net(g, arch)
    b, n, nl = spec.batch, spec.n_slots, spec.n_lanes
    t = arch.t_hist + 1
    tar = g.input("tar", (b, t, TRACK_FEATURES))
    f_tar = net.encode_track(tar, "tar")
    g.output("f_tar", f_tar)
    blocks = [g.reshape(f_tar, (b, 1, arch.d))]
    if n:
        nbr = g.input("nbr", (b * n, t, TRACK_FEATURES))
        f_nbr = net.encode_track(nbr, "nbr")
        g.output("f_nbr", f_nbr)
        blocks.append(g.reshape(f_nbr, (b, n, arch.d)))
    if nl:
        seq = g.input("lane_seq", (b * nl, LANE_STEPS, LANE_FEATURES))
        adj = g.input("lane_adj_bias", (b, nl, nl))
        f_lane = net.encode_lanes(seq, adj, b, nl)
        g.output("f_lane", f_lane)
        blocks.append(f_lane)
    key_bias = g.input("key_bias", (b * arch.heads, arch.k_modes, 1 + n + nl))
    mode_pos = g.input("mode_pos", (arch.k_modes, arch.d))
    f_cross, att = net.fuse(blocks, key_bias, b, mode_pos)
    g.output("f_cross", f_cross)
    g.output("attn", att)
    cv = g.input("cv_prior", (b, arch.k_modes, arch.t_fut, 2))
    mu, scale, pi = net.decode(f_cross, cv, b)
    g.output("mu", mu)
    g.output("scale", scale)
    g.output("pi", pi)
    z = g.output("z", g.l2_normalize(f_tar))
    if spec.with_aug:
        z_aug = g.output("z_aug", g.l2_normalize(net.encode_track(g.input("tar_aug", (b, t, TRACK_FEATURES)), "tar")))
    if spec.with_losses:
        _add_losses(g, arch, spec, mu, scale, pi, z, z_aug if spec.with_aug else None)
    return g


def _add_losses(g: Graph, arch: Arch, spec: GraphSpec, mu, scale, pi, z, z_aug):
    b = spec.batch
    shape4 = (b, arch.k_modes, arch.t_fut, 2)
    gt = g.input("gt", shape4)
    wta = g.input("sel_wta", shape4)  # one-hot closest mode, pre-divided by B * T_f * 2
    top = g.input("sel_top", shape4)  # one-hot most probable mode, pre-divided by B * T_f
    cls = g.input("sel_cls", (b, arch.k_modes))
    diff = g.sub(mu, gt)
    l_target = g.output("L_target", g.reduce_sum(g.mul(g.mul(diff, diff), top)))
    nll = g.add(g.log(g.scale(scale, 2.0)), g.div(g.abs(diff), scale))
    l_reg = g.output("L_reg", g.reduce_sum(g.mul(nll, wta)))
    l_cls = g.output("L_cls", g.scale(g.reduce_mean(g.log(g.reduce_sum(g.mul(pi, cls), axis=1))), -1.0))
    terms = [(l_target, None), (l_reg, "w_reg"), (l_cls, "w_cls")]
    task = l_target
    for node, w in terms[1:]:
        task = g.add(task, g.mul(node, g.input(w, ())))
    g.output("L_task", task)
    total = task
    if spec.with_moco:
        keys = g.input("moco_keys", (b, arch.d))
        queue = g.input("moco_queue", (arch.d, spec.queue))
        bias = g.input("moco_bias", (b, spec.queue))
        row_w = g.input("moco_rows", (b,))
        s_pos = g.reshape(g.reduce_sum(g.mul(z, keys), axis=1), (b, 1))
        s_neg = g.add(g.matmul(z, queue), bias)
        p0 = g.reshape(g.slice(g.softmax(g.scale(g.concat([s_pos, s_neg], 1), 1.0 / spec.tau_moco)), 1, 0, 1), (b,))
        l_moco = g.output("L_moco", g.scale(g.reduce_sum(g.mul(g.log(p0), row_w)), -1.0))
        total = g.add(total, g.mul(l_moco, g.input("w_moco", ())))
    if spec.with_dcl:
        bias = g.input("dcl_bias", (b, 1 + b))
        weights = g.input("dcl_w", (b, 1 + b))
        anchor = g.input("dcl_anchor", (b,))
        inv = g.input("dcl_inv", (b,))
        s_pos = g.reshape(g.reduce_sum(g.mul(z, z_aug), axis=1), (b, 1))
        sims = g.scale(g.concat([s_pos, g.matmul(z, g.transpose(z, (1, 0)))], 1), 1.0 / spec.tau_dcl)
        p0 = g.reshape(g.slice(g.softmax(g.add(sims, bias)), 1, 0, 1), (b,))
        lse = g.sub(g.reshape(g.slice(sims, 1, 0, 1), (b,)), g.log(p0))
        num = g.reduce_sum(g.mul(sims, weights), axis=1)
        l_dcl = g.output("L_dcl", g.sub(g.reduce_sum(g.mul(lse, anchor)), g.reduce_sum(g.mul(num, inv))))
        total = g.add(total, g.mul(l_dcl, g.input("w_dcl", ())))
    g.output("L", total)


@lru_cache(maxsize=16)
def build_key_graph(arch: Arch, batch: int) -> Graph:
    """Target-encoder-only graph used with the momentum (key) parameters."""
    g = Graph()
    net = Net(g, arch)
    x = g.input("tar", (batch, arch.t_hist + 1, TRACK_FEATURES))
    g.output("k", g.l2_normalize(net.encode_track(x, "tar")))
    return g


# -- parameters -------------------------------------------------------------------------


def param_shapes(arch: Arch) -> dict[str, tuple[int, ...]]:
    g = build_scene_graph(arch, GraphSpec(batch=1, n_slots=1, n_lanes=2))
    return {name: node.shape for name, node in g.params.items()}


def init_params(arch: Arch, seed: int) -> dict[str, np.ndarray]:
    """Seeded initialization: scaled normal weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g") and len(shape) == 1:
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name == "fuse.h_mode":
            params[name] = rng.normal(0.0, 1.0, size=shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if leaf == "w" and name.startswith("dec.out"):
                std *= 0.1
            params[name] = rng.normal(0.0, std, size=shape)
    return params


def key_param_names(params) -> list[str]:
    return [k for k in params if k.startswith("tar.")]


def check_params(arch: Arch, params) -> None:
    expected = param_shapes(arch)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"checkpoint does not match architecture (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, shape in expected.items():
        if tuple(params[k].shape) != shape:
            raise ShapeError(f"checkpoint parameter {k} has shape {params[k].shape}, architecture needs {shape}")


# -- feature extraction -------------------------------------------------------------------


def track_features(track: AgentTrack, arch: Arch) -> np.ndarray:
    st = track.states
    kind = 1.0 if track.kind == PEDESTRIAN else 0.0
    return np.column_stack([
        st[:, 0] / arch.pos_scale, st[:, 1] / arch.pos_scale,
        st[:, 2] / arch.vel_scale, st[:, 3] / arch.vel_scale,
        np.cos(st[:, 4]), np.sin(st[:, 4]), np.full(len(st), kind),
    ])


def states_features(states: np.ndarray, kind: str, arch: Arch) -> np.ndarray:
    return track_features(AgentTrack(kind, states), arch)


def lane_features(lanes: LaneGraph, arch: Arch) -> np.ndarray:
    """(N, 2, 4): for each node the segment from its predecessor (or itself) to the node."""
    n = len(lanes)
    out = np.zeros((n, LANE_STEPS, LANE_FEATURES))
    for i in range(n):
        preds = np.flatnonzero(lanes.adj[:, i])
        j = int(preds[0]) if len(preds) else i
        seg = (lanes.nodes[i] - lanes.nodes[j]) / arch.pos_scale
        out[i, 0, :2] = lanes.nodes[j] / arch.pos_scale
        out[i, 1, :2] = lanes.nodes[i] / arch.pos_scale
        out[i, :, 2:] = seg
    return out


def lane_bias(lanes: LaneGraph, n_slots: int) -> np.ndarray:
    """Additive attention mask: a node attends to itself and its graph neighbors."""
    bias = np.full((n_slots, n_slots), NEG)
    n = len(lanes)
    if n:
        conn = (lanes.adj + lanes.adj.T + np.eye(n, dtype=np.int8)) > 0
        bias[:n, :n] = np.where(conn, 0.0, NEG)
    for i in range(n, n_slots):
        bias[i, i] = 0.0
    return bias


def cv_prior(scene: Scene, arch: Arch) -> np.ndarray:
    """Constant-velocity rollout of the last observed state, (T_f, 2)."""
    last = scene.target.states[-1]
    steps = np.arange(1, arch.t_fut + 1)[:, None] * scene.dt
    return last[None, 0:2] + steps * last[None, 2:4]


@dataclass
class SceneArrays:
    tar: np.ndarray
    nbr: np.ndarray  # (n, T, F)
    lane_seq: np.ndarray  # (N, 2, 4)
    lanes: LaneGraph
    cv: np.ndarray
    gt: np.ndarray


def scene_arrays(scene: Scene, arch: Arch) -> SceneArrays:
    if scene.t_hist != arch.t_hist or scene.t_fut != arch.t_fut:
        raise ShapeError(f"scene horizons ({scene.t_hist}, {scene.t_fut}) do not match architecture "
                         f"({arch.t_hist}, {arch.t_fut})")
    nbr = (np.stack([track_features(t, arch) for t in scene.neighbors]) if scene.neighbors
           else np.zeros((0, arch.t_hist + 1, TRACK_FEATURES)))
    return SceneArrays(track_features(scene.target, arch), nbr, lane_features(scene.lanes, arch),
                       scene.lanes, cv_prior(scene, arch), np.asarray(scene.future, dtype=np.float64))


def batch_feeds(items: list[SceneArrays], arch: Arch, n_slots: int, n_lanes: int) -> dict[str, np.ndarray]:
    b = len(items)
    t = arch.t_hist + 1
    feeds = {"tar": np.stack([it.tar for it in items])}
    valid = np.zeros((b, 1 + n_slots + n_lanes), dtype=bool)
    valid[:, 0] = True
    if n_slots:
        nbr = np.zeros((b, n_slots, t, TRACK_FEATURES))
        for i, it in enumerate(items):
            k = len(it.nbr)
            if k > n_slots:
                raise ShapeError(f"scene has {k} neighbors but the graph has {n_slots} slots")
            nbr[i, :k] = it.nbr
            valid[i, 1:1 + k] = True
        feeds["nbr"] = nbr.reshape(b * n_slots, t, TRACK_FEATURES)
    if n_lanes:
        seq = np.zeros((b, n_lanes, LANE_STEPS, LANE_FEATURES))
        adj = np.zeros((b, n_lanes, n_lanes))
        for i, it in enumerate(items):
            k = len(it.lane_seq)
            if k > n_lanes:
                raise ShapeError(f"scene has {k} lane nodes but the graph has {n_lanes} slots")
            seq[i, :k] = it.lane_seq
            adj[i] = lane_bias(it.lanes, n_lanes)
            valid[i, 1 + n_slots:1 + n_slots + k] = True
        feeds["lane_seq"] = seq.reshape(b * n_lanes, LANE_STEPS, LANE_FEATURES)
        feeds["lane_adj_bias"] = adj
    kb = np.where(valid, 0.0, NEG)[:, None, None, :]
    feeds["key_bias"] = np.broadcast_to(kb, (b, arch.heads, arch.k_modes, kb.shape[-1])).reshape(
        b * arch.heads, arch.k_modes, kb.shape[-1]).copy()
    feeds["mode_pos"] = mode_positions(arch.k_modes, arch.d)
    feeds["cv_prior"] = np.broadcast_to(np.stack([it.cv for it in items])[:, None],
                                        (b, arch.k_modes, arch.t_fut, 2)).copy()
    return feeds


# -- per-scene API --------------------------------------------------------------------------


def _run_track(arch, params, feats, prefix):
    m = len(feats)
    g = _track_graph(arch, m, prefix)
    return evaluate(g, {"x": feats}, params)["h"]


@lru_cache(maxsize=32)
def _track_graph(arch, m, prefix):
    g = Graph()
    g.output("h", Net(g, arch).encode_track(g.input("x", (m, arch.t_hist + 1, TRACK_FEATURES)), prefix))
    return g


def encode_target(track: AgentTrack, params, arch: Arch, prefix: str = "tar") -> np.ndarray:
    """F_tar, shape (d,)."""
    return _run_track(arch, params, track_features(track, arch)[None], prefix)[0]


def encode_neighbors(tracks: list[AgentTrack], params, arch: Arch) -> np.ndarray:
    """F_nbr, shape (n, d); shared neighbor weights, one row per neighbor."""
    if not tracks:
        return np.zeros((0, arch.d))
    return _run_track(arch, params, np.stack([track_features(t, arch) for t in tracks]), "nbr")


@lru_cache(maxsize=32)
def _lane_graph(arch, n):
    g = Graph()
    net = Net(g, arch)
    f = net.encode_lanes(g.input("seq", (n, LANE_STEPS, LANE_FEATURES)), g.input("adj", (1, n, n)), 1, n)
    g.output("f", g.reshape(f, (n, arch.d)))
    return g


def encode_lanes(lanes: LaneGraph, params, arch: Arch) -> np.ndarray:
    """F_lane, shape (N, d)."""
    n = len(lanes)
    if n == 0:
        return np.zeros((0, arch.d))
    feeds = {"seq": lane_features(lanes, arch), "adj": lane_bias(lanes, n)[None]}
    return evaluate(_lane_graph(arch, n), feeds, params)["f"]


@lru_cache(maxsize=32)
def _fuse_graph(arch, rows):
    g = Graph()
    net = Net(g, arch)
    kv = g.input("kv", (1, rows, arch.d))
    f, att = net.fuse([kv], None, 1, g.input("mode_pos", (arch.k_modes, arch.d)))
    g.output("f_cross", g.reshape(f, (arch.k_modes, arch.d)))
    g.output("attn", att)
    return g


def fuse(f_tar, f_nbr, f_lane, params, arch: Arch, return_attention: bool = False):
    """F_cross (K, d) from the row-concatenation of target, neighbor and lane features."""
    f_tar = np.asarray(f_tar, dtype=np.float64).reshape(1, -1)
    f_nbr = np.asarray(f_nbr, dtype=np.float64).reshape(-1, f_tar.shape[1])
    f_lane = np.asarray(f_lane, dtype=np.float64).reshape(-1, f_tar.shape[1])
    if f_tar.shape[1] != arch.d:
        raise ShapeError(f"feature width {f_tar.shape[1]} does not match d={arch.d}")
    kv = np.vstack([f_tar, f_nbr, f_lane])
    tr = evaluate(_fuse_graph(arch, len(kv)), {"kv": kv[None], "mode_pos": mode_positions(arch.k_modes, arch.d)},
                  params)
    if return_attention:
        return tr["f_cross"], tr["attn"]
    return tr["f_cross"]


@lru_cache(maxsize=8)
def _decode_graph(arch):
    g = Graph()
    net = Net(g, arch)
    f = g.input("f_cross", (1, arch.k_modes, arch.d))
    mu, scale, pi = net.decode(f, g.input("cv_prior", (1, arch.k_modes, arch.t_fut, 2)), 1)
    g.output("mu", mu)
    g.output("scale", scale)
    g.output("pi", pi)
    return g


def decode(f_cross, params, arch: Arch, prior=None) -> ModePrediction:
    """Mode trajectories from F_cross; ``prior`` is the (T_f, 2) rollout the locations are offset from."""
    prior = np.zeros((arch.t_fut, 2)) if prior is None else np.asarray(prior, dtype=np.float64)
    feeds = {"f_cross": np.asarray(f_cross, dtype=np.float64).reshape(1, arch.k_modes, arch.d),
             "cv_prior": np.broadcast_to(prior, (1, arch.k_modes, arch.t_fut, 2)).copy()}
    tr = evaluate(_decode_graph(arch), feeds, params)
    return ModePrediction(tr["mu"][0], tr["scale"][0], tr["pi"][0])


def predict_batch(scenes: list[Scene], params, arch: Arch, batch: int = 64) -> list[ModePrediction]:
    """Predictions for agent-frame scenes, batched with padding."""
    out = []
    arrays = [scene_arrays(s, arch) for s in scenes]
    n_slots = max((len(a.nbr) for a in arrays), default=0)
    n_lanes = max((len(a.lane_seq) for a in arrays), default=0)
    for start in range(0, len(arrays), batch):
        chunk = arrays[start:start + batch]
        g = build_scene_graph(arch, GraphSpec(len(chunk), n_slots, n_lanes))
        tr = evaluate(g, batch_feeds(chunk, arch, n_slots, n_lanes), params, ["mu", "scale", "pi"])
        for i in range(len(chunk)):
            out.append(ModePrediction(tr["mu"][i].copy(), tr["scale"][i].copy(), tr["pi"][i].copy()))
    return out


def target_features(scenes: list[Scene], params, arch: Arch, batch: int = 256) -> np.ndarray:
    """F_tar rows for agent-frame scenes."""
    rows = []
    for start in range(0, len(scenes), batch):
        feats = np.stack([track_features(s.target, arch) for s in scenes[start:start + batch]])
        rows.append(_run_track(arch, params, feats, "tar"))
    return np.vstack(rows) if rows else np.zeros((0, arch.d))
