"""Momentum contrast with hard negatives, K-means pseudo-labels and the decoupled contrastive loss.

The scalar loss functions here are the reference forms. Training evaluates
the same quantities inside the model graph; the helpers at the bottom build
the masks and weights that graph needs for one batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ndgrad import NumericError, ShapeError

log = logging.getLogger(__name__)

NEG = -1e9
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class MomentumSchedule:
    m_e: float = 0.95
    m_m: float = 0.99
    m_l: float = 0.999
    b1: float = 1.0 / 3.0
    b2: float = 2.0 / 3.0

    def __post_init__(self):
        if not all(0 < m < 1 for m in (self.m_e, self.m_m, self.m_l)):
            raise ValueError("momentum coefficients must lie in (0, 1)")
        if not self.m_e <= self.m_m <= self.m_l:
            raise ValueError("momentum coefficients must satisfy m_e <= m_m <= m_l")
        if not 0 <= self.b1 <= self.b2 <= 1:
            raise ValueError("stage boundaries must satisfy 0 <= b1 <= b2 <= 1")


@dataclass(frozen=True)
class DclConfig:
    alpha: float = 0.5
    tau: float = 0.1

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def momentum_coefficient(t: int, total: int, sched: MomentumSchedule = MomentumSchedule()) -> float:
    """Staged momentum: m_e, then m_m, then m_l as training progresses."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    frac = t / total
    if frac < sched.b1:
        return sched.m_e
    if frac < sched.b2:
        return sched.m_m
    return sched.m_l


def ema_update(key_params: dict, query_params: dict, m: float) -> dict:
    """k <- m k + (1 - m) q for every key parameter; returns a new dict."""
    if set(key_params) - set(query_params):
        raise ShapeError(f"query parameters missing {sorted(set(key_params) - set(query_params))[:3]}")
    out = {}
    for name, k in key_params.items():
        q = query_params[name]
        if np.shape(k) != np.shape(q):
            raise ShapeError(f"{name}: key shape {np.shape(k)} != query shape {np.shape(q)}")
        out[name] = m * k + (1.0 - m) * q
    return out


class MomentumQueue:
    """Fixed-capacity FIFO of unit-norm key embeddings, stored as a ring buffer."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim))
        self._head = 0  # slot of the oldest entry
        self._len = 0

    def __len__(self):
        return self._len

    def push(self, keys) -> None:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ShapeError(f"key width {keys.shape[1]} != queue width {self.dim}")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("queue entries must have unit L2 norm")
        for row in keys:
            slot = (self._head + self._len) % self.capacity
            self._buf[slot] = row
            if self._len < self.capacity:
                self._len += 1
            else:
                self._head = (self._head + 1) % self.capacity

    def entries(self) -> np.ndarray:
        """All entries, oldest first."""
        idx = (self._head + np.arange(self._len)) % self.capacity
        return self._buf[idx]


def topk_indices(q, entries, k: int) -> np.ndarray:
    """Positions (oldest-first) of the k most similar entries; ties go to the older entry."""
    if len(entries) == 0:
        raise ValueError("cannot mine negatives from an empty queue")
    if k < 1:
        raise ValueError("K must be at least 1")
    sims = np.asarray(entries) @ np.asarray(q)
    return np.argsort(-sims, kind="stable")[:k]


def topk_hard_negatives(q, queue: MomentumQueue, k: int) -> np.ndarray:
    entries = queue.entries()
    return entries[topk_indices(q, entries, k)]


def moco_dt_loss(q, k_pos, hard_negs, tau: float = 0.07) -> float:
    """-log softmax of the positive against the mined negatives, temperature tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = np.asarray(q, dtype=np.float64)
    logits = np.concatenate([[np.dot(q, k_pos)], np.asarray(hard_negs, dtype=np.float64).reshape(-1, q.size) @ q])
    logits = logits / tau
    loss = float(np.logaddexp.reduce(logits) - logits[0])
    if not math.isfinite(loss):
        raise NumericError("non-finite MoCo loss")
    return loss


# -- clustering ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: list[float]  # after each assignment step
    iterations: int


def _sqdist(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans(features, k: int, seed, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm from a seeded farthest-point start.

    Runs until the assignment stops changing or ``max_iter`` rounds. Empty
    clusters keep their previous center. Labels are renumbered so cluster ids
    follow the index of each cluster's first member.
    """
    x = np.asarray(features, dtype=np.float64)
    m = len(x)
    if k < 1:
        raise ValueError("k must be at least 1")
    if m < k:
        raise ValueError(f"need at least {k} features to form {k} clusters, got {m}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(m))]
    dmin = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dmin))
        if dmin[nxt] == 0:
            # duplicates only: fall back to the first point not yet chosen
            nxt = next(i for i in range(m) if i not in chosen)
        chosen.append(nxt)
        dmin = np.minimum(dmin, ((x - x[nxt]) ** 2).sum(axis=1))
    centers = x[chosen].copy()
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sqdist(x, centers)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(m), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
    # canonical ids: order clusters by their first member
    order = []
    for lab in labels:
        if lab not in order:
            order.append(int(lab))
    remap = {old: new for new, old in enumerate(order)}
    unused = [c for c in range(k) if c not in remap]
    for c in unused:
        remap[c] = len(remap)
    canon = np.array([remap[int(v)] for v in labels], dtype=np.int64)
    new_centers = np.zeros_like(centers)
    for old, new in remap.items():
        new_centers[new] = centers[old]
    return KMeansResult(canon, new_centers, history, it)


@dataclass
class PseudoLabelStore:
    k_clusters: int = 6
    refresh_interval: int = 1
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.k_clusters < 1 or self.refresh_interval < 1:
            raise ValueError("k_clusters and refresh_interval must be positive")


def refresh_pseudo_labels(store: PseudoLabelStore, seed) -> np.ndarray:
    store.labels = kmeans(store.features, store.k_clusters, seed).labels
    return store.labels


# -- decoupled contrastive loss ---------------------------------------------------------------


def dcl_weight(is_anchor_positive: bool, p_size: int, alpha: float) -> float:
    if p_size < 0:
        raise ValueError("|P| must be non-negative")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if is_anchor_positive:
        return alpha * (p_size + 1)
    if p_size == 0:
        raise ValueError("member weight is undefined when P is empty")
    return (1.0 - alpha) * (p_size + 1) / p_size


def dcl_loss(q_i, q_pos, positives, others, cfg: DclConfig = DclConfig()) -> float | None:
    """Decoupled contrastive loss of one anchor.

    ``positives`` holds same-cluster features (P), ``others`` the features of
    other clusters (U). Returns None, with a warning, when both are empty.
    """
    q = np.asarray(q_i, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64).reshape(-1, q.size)
    oth = np.asarray(others, dtype=np.float64).reshape(-1, q.size)
    if len(pos) == 0 and len(oth) == 0:
        log.warning("DCL anchor has no cluster-mates and no other-cluster features; skipped")
        return None
    s_pos = float(np.dot(q, q_pos)) / cfg.tau
    lse = float(np.logaddexp.reduce(np.concatenate([[s_pos], oth @ q / cfg.tau])))
    num = dcl_weight(True, len(pos), cfg.alpha) * s_pos
    if len(pos):
        num += dcl_weight(False, len(pos), cfg.alpha) * float(np.sum(pos @ q)) / cfg.tau
    loss = lse - num / (len(pos) + 1)
    if not math.isfinite(loss):
        raise NumericError("non-finite DCL loss")
    return loss


def dcl_batch_loss(z, z_aug, labels, cfg: DclConfig = DclConfig()) -> float:
    """Mean anchor loss where P and U are taken from the other rows of the batch."""
    labels = np.asarray(labels)
    vals = []
    for i in range(len(z)):
        others = np.arange(len(z)) != i
        same = others & (labels == labels[i])
        diff = others & (labels != labels[i])
        v = dcl_loss(z[i], z_aug[i], z[same], z[diff], cfg)
        if v is not None:
            vals.append(v)
    return float(np.mean(vals)) if vals else 0.0


# -- graph inputs for one batch -----------------------------------------------------------------


def dcl_batch_inputs(labels, alpha: float) -> dict[str, np.ndarray]:
    """Masks and weights realizing ``dcl_batch_loss`` inside the model graph.

    Column 0 is the anchor-positive; column 1 + j is batch row j.
    """
    labels = np.asarray(labels)
    b = len(labels)
    bias = np.full((b, 1 + b), NEG)
    w = np.zeros((b, 1 + b))
    inv = np.zeros(b)
    anchor = np.zeros(b)
    bias[:, 0] = 0.0
    valid = []
    for i in range(b):
        others = np.arange(b) != i
        same = np.flatnonzero(others & (labels == labels[i]))
        diff = np.flatnonzero(others & (labels != labels[i]))
        if len(same) == 0 and len(diff) == 0:
            continue
        valid.append(i)
        bias[i, 1 + diff] = 0.0
        w[i, 0] = dcl_weight(True, len(same), alpha)
        if len(same):
            w[i, 1 + same] = dcl_weight(False, len(same), alpha)
        inv[i] = 1.0 / (len(same) + 1)
    if valid:
        anchor[valid] = 1.0 / len(valid)
        inv *= anchor
    return {"dcl_bias": bias, "dcl_w": w, "dcl_anchor": anchor, "dcl_inv": inv}


def moco_batch_inputs(z, queue: MomentumQueue, k: int) -> dict[str, np.ndarray]:
    """Queue matrix, Top-K selection bias and row weights for the in-graph MoCo loss.

    An empty queue yields all-masked negatives and zero row weights, so the loss is 0.
    """
    z = np.asarray(z)
    b = len(z)
    qmat = np.zeros((queue.dim, queue.capacity))
    bias = np.full((b, queue.capacity), NEG)
    rows = np.zeros(b)
    if len(queue):
        entries = queue.entries()
        qmat[:, :len(entries)] = entries.T
        for i in range(b):
            bias[i, topk_indices(z[i], entries, k)] = 0.0
        rows[:] = 1.0 / b
    return {"moco_queue": qmat, "moco_bias": bias, "moco_rows": rows}
