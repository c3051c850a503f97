"""Task and total losses, the training configuration, and the deterministic training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .augment import AugmentPolicy, random_augment
from .contrastive import (DclConfig, MomentumQueue, MomentumSchedule, PseudoLabelStore, dcl_batch_inputs,
                          ema_update, moco_batch_inputs, momentum_coefficient, refresh_pseudo_labels)
from .model import (Arch, GraphSpec, ModePrediction, batch_feeds, build_key_graph, build_scene_graph, init_params,
                    key_param_names, predict_batch, scene_arrays, states_features, target_features)
from .ndgrad import NumericError, backward, evaluate, save_params
from .trajdata import Dataset, load_scenes, to_agent_frame

LOG_COLUMNS = ("epoch", "L_target", "L_reg", "L_cls", "L_moco", "L_dcl", "L_task", "L", "val_minADE", "val_minFDE")
COMPONENTS = ("L_target", "L_reg", "L_cls", "L_moco", "L_dcl")


@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 1.0
    gamma2: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be finite and non-negative, got {v}")


# -- reference losses on a single prediction ---------------------------------------------------


def best_mode(pred: ModePrediction, gt) -> int:
    """Mode with the smallest final displacement; ties go to the lower index."""
    d = np.linalg.norm(pred.mu[:, -1] - np.asarray(gt)[-1], axis=1)
    return int(np.argmin(d))


def laplace_nll(pred: ModePrediction, gt, mode: int) -> float:
    if not 0 <= mode < len(pred.probs):
        raise IndexError(f"mode {mode} outside [0, {len(pred.probs)})")
    b = pred.scale[mode]
    return float(np.mean(np.log(2 * b) + np.abs(np.asarray(gt) - pred.mu[mode]) / b))


def mode_cls_loss(pred: ModePrediction, gt) -> float:
    return float(-np.log(pred.probs[best_mode(pred, gt)]))


def target_loss(pred: ModePrediction, gt) -> float:
    """Mean squared displacement of the most probable mode."""
    top = int(np.argmax(pred.probs))
    diff = pred.mu[top] - np.asarray(gt)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> tuple[float, float]:
    """(L_task, L) from L_target, L_reg, L_cls, L_moco and L_dcl; absent components count as 0."""
    c = {name: float(components.get(name, 0.0)) for name in COMPONENTS}
    for name, v in c.items():
        if not math.isfinite(v):
            raise NumericError(f"loss component {name} is not finite ({v})")
    task = c["L_target"] + weights.gamma1 * c["L_reg"] + weights.gamma2 * c["L_cls"]
    return task, task + weights.lambda1 * c["L_moco"] + weights.lambda2 * c["L_dcl"]


# -- configuration ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    data: str = ""
    train_split: str = "train"
    val_split: str = "val"
    # architecture
    d: int = 32
    heads: int = 4
    k_modes: int = 5
    ffn: int = 64
    # augmentation (augment = false gives the identity view)
    augment: bool = True
    simplify_epsilon: float = 0.2
    shift_sigma: float = 0.2
    shift_clamp: float = 0.5
    mask_ratio: float = 0.25
    subset_min_len: int = 0
    # contrastive branches
    moco: bool = True
    dcl: bool = True
    iterative_clustering: bool = True
    tau_moco: float = 0.07
    tau_dcl: float = 0.1
    top_k: int = 16
    queue: int = 1024
    alpha: float = 0.5
    k_clusters: int = 6
    refresh_interval: int = 1
    m_e: float = 0.95
    m_m: float = 0.99
    m_l: float = 0.999
    # loss weights
    gamma1: float = 1.0
    gamma2: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.1
    # optimization
    epochs: int = 500
    batch: int = 16
    lr: float = 1e-2
    optimizer: str = "sgd"  # sgd | adam
    lr_schedule: str = "constant"  # constant | cosine (decays to zero over all steps)
    clip_norm: float = 5.0  # global gradient-norm clip, 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise cfgmod.ConfigError("epochs and batch must be at least 1")
        if self.lr < 0 or self.clip_norm < 0:
            raise cfgmod.ConfigError("lr and clip_norm must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise cfgmod.ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise cfgmod.ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.top_k < 1 or self.queue < 1:
            raise cfgmod.ConfigError("top_k and queue must be at least 1")
        # delegate range checks to the component dataclasses
        try:
            self.weights()
            self.policy()
            self.schedule()
            self.dcl_config()
        except ValueError as exc:
            raise cfgmod.ConfigError(str(exc)) from None

    def weights(self) -> LossWeights:
        l1 = self.lambda1 if self.moco else 0.0
        l2 = self.lambda2 if self.dcl else 0.0
        return LossWeights(self.gamma1, self.gamma2, l1, l2)

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.simplify_epsilon, self.shift_sigma, self.shift_clamp, self.mask_ratio,
                             self.subset_min_len)

    def schedule(self) -> MomentumSchedule:
        return MomentumSchedule(self.m_e, self.m_m, self.m_l)

    def dcl_config(self) -> DclConfig:
        return DclConfig(self.alpha, self.tau_dcl)

    def arch(self, t_hist: int, t_fut: int) -> Arch:
        return Arch(self.d, self.heads, self.k_modes, t_hist, t_fut, self.ffn)


def load_train_config(path, **overrides) -> TrainConfig:
    values = cfgmod.read_kv(path)
    cfg = cfgmod.build(TrainConfig, values)
    if cfg.data and not Path(cfg.data).is_absolute():
        cfg = replace(cfg, data=str((Path(path).parent / cfg.data).resolve()))
    return replace(cfg, **overrides) if overrides else cfg


# -- training log -----------------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in rec.items()})
        return cls(rows)


# -- the loop -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    key_params: dict
    log: TrainLog
    arch: Arch
    labels: np.ndarray


def min_ade_fde(preds, scenes, k: int) -> tuple[float, float]:
    """Mean minADE_k / minFDE_k over the k most probable modes."""
    ades, fdes = [], []
    for p, s in zip(preds, scenes):
        top = np.argsort(-p.probs, kind="stable")[:k]
        err = np.linalg.norm(p.mu[top] - s.future[None], axis=2)
        ades.append(err.mean(axis=1).min())
        fdes.append(err[:, -1].min())
    return float(np.mean(ades)), float(np.mean(fdes))


def _selection(mu, pi, gt, t_fut):
    b, k = pi.shape
    fde = np.linalg.norm(mu[:, :, -1] - gt[:, None, -1], axis=2)
    wta = np.argmin(fde, axis=1)
    top = np.argmax(pi, axis=1)
    eye = np.eye(k)
    sel_w = np.broadcast_to(eye[wta][:, :, None, None], mu.shape) / (b * t_fut * 2)
    sel_t = np.broadcast_to(eye[top][:, :, None, None], mu.shape) / (b * t_fut)
    return {"sel_wta": sel_w.copy(), "sel_top": sel_t.copy(), "sel_cls": eye[wta]}


def train(cfg: TrainConfig, dataset: Dataset | None = None, progress=None) -> TrainResult:
    """Run the full training loop; deterministic for a given config and dataset."""
    if dataset is None:
        if not cfg.data:
            raise ValueError("no dataset given and config has no data path")
        dataset = load_scenes(cfg.data)
    train_set = [to_agent_frame(s) for s in dataset.subset(cfg.train_split)]
    if not train_set:
        raise ValueError(f"dataset has no scenes in split {cfg.train_split!r}")
    val_set = [to_agent_frame(s) for s in dataset.subset(cfg.val_split)]
    arch = cfg.arch(train_set[0].t_hist, train_set[0].t_fut)
    arrays = [scene_arrays(s, arch) for s in train_set]
    n_slots = max(len(a.nbr) for a in arrays)
    n_lanes = max(len(a.lane_seq) for a in arrays)
    weights = cfg.weights()
    policy = cfg.policy()
    sched = cfg.schedule()
    use_moco, use_dcl = cfg.moco, cfg.dcl

    params = init_params(arch, cfg.seed)
    key_params = {k: params[k].copy() for k in key_param_names(params)}
    queue = MomentumQueue(cfg.queue, arch.d)
    store = PseudoLabelStore(min(cfg.k_clusters, len(train_set)), cfg.refresh_interval)
    labels = np.zeros(len(train_set), dtype=np.int64)

    opt = Adam() if cfg.optimizer == "adam" else Sgd()
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    rows = []
    for epoch in range(cfg.epochs):
        refresh = epoch == 0 or (cfg.iterative_clustering and epoch % cfg.refresh_interval == 0)
        if use_dcl and refresh:
            feats = target_features(train_set, params, arch)
            store.features = feats / np.linalg.norm(feats, axis=1, keepdims=True)
            labels = refresh_pseudo_labels(store, [cfg.seed, epoch])
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = dict.fromkeys(COMPONENTS + ("L_task", "L"), 0.0)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch:(s + 1) * cfg.batch]
            b = len(idx)
            chunk = [arrays[i] for i in idx]
            spec = GraphSpec(b, n_slots, n_lanes, with_aug=use_dcl, with_moco=use_moco, with_dcl=use_dcl,
                             with_losses=True, queue=cfg.queue, tau_moco=cfg.tau_moco, tau_dcl=cfg.tau_dcl)
            g = build_scene_graph(arch, spec)
            feeds = batch_feeds(chunk, arch, n_slots, n_lanes)
            gt = np.stack([a.gt for a in chunk])
            feeds["gt"] = np.broadcast_to(gt[:, None], (b, arch.k_modes, arch.t_fut, 2)).copy()
            feeds["w_reg"] = np.array(weights.gamma1)
            feeds["w_cls"] = np.array(weights.gamma2)
            if use_moco or use_dcl:
                aug = np.stack([_view(train_set[i], policy, cfg, epoch, s, j) for j, i in enumerate(idx)])
                aug_feats = np.stack([states_features(v, train_set[i].target.kind, arch) for v, i in zip(aug, idx)])
            if use_dcl:
                feeds["tar_aug"] = aug_feats
                feeds.update(dcl_batch_inputs(labels[idx], cfg.alpha))
                feeds["w_dcl"] = np.array(weights.lambda2)
            try:
                tr = evaluate(g, feeds, params, ["mu", "pi", "z"])
                feeds = _selection(tr["mu"], tr["pi"], gt, arch.t_fut)
                if use_moco:
                    keys = evaluate(build_key_graph(arch, b), {"tar": aug_feats}, key_params)["k"]
                    feeds["moco_keys"] = keys
                    feeds.update(moco_batch_inputs(tr["z"], queue, cfg.top_k))
                    feeds["w_moco"] = np.array(weights.lambda1)
                tr.extend(feeds, ["L"])
                if not math.isfinite(float(tr["L"])):
                    raise NumericError("loss is not finite")
                grads = backward(tr, {"L": np.array(1.0)})
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch + 1}, step {s + 1}: {exc}") from None
            rate = cfg.lr
            if cfg.lr_schedule == "cosine":
                rate *= 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            if cfg.clip_norm:
                norm = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
                if norm > cfg.clip_norm:
                    grads = {k: v * (cfg.clip_norm / norm) for k, v in grads.items()}
            opt.step(params, grads, rate)
            step += 1
            if use_moco:
                queue.push(keys)
                m = momentum_coefficient(step, total_steps, sched)
                key_params = ema_update(key_params, {k: params[k] for k in key_params}, m)
            for name in sums:
                if name in g.outputs:
                    sums[name] += b * float(tr[name])
        row = {"epoch": epoch + 1}
        row.update({k: v / n for k, v in sums.items()})
        if val_set:
            row["val_minADE"], row["val_minFDE"] = min_ade_fde(predict_batch(val_set, params, arch), val_set,
                                                               arch.k_modes)
        else:
            row["val_minADE"] = row["val_minFDE"] = math.nan
        rows.append(row)
        if progress:
            progress(row)
    return TrainResult(params, key_params, TrainLog(rows), arch, labels)


class Sgd:
    def step(self, params, grads, rate):
        for name in params:
            params[name] = params[name] - rate * grads[name]


class Adam:
    """Bias-corrected Adam with the usual defaults."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads, rate):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name in params:
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            params[name] = params[name] - rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _view(scene, policy, cfg, epoch, step, j):
    st = scene.target.states
    if not cfg.augment:
        return st.copy()
    return random_augment(st, policy, [cfg.seed, epoch, step, j], dt=scene.dt)


def write_run(out_dir, cfg: TrainConfig, result: TrainResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "checkpoint.amdc", result.params)
    (out / "trainlog.csv").write_text(result.log.to_csv(), encoding="utf-8")
    lines = cfgmod.dump(cfg) + [f"t_hist = {result.arch.t_hist}", f"t_fut = {result.arch.t_fut}"]
    (out / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
