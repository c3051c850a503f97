"""Displacement metrics, long-tail reports, feature export and the ablation grid."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .contrastive import kmeans
from .longtail import DEFAULT_FRACTIONS, SubsetSpec, rank_by_risk, split_by_error, split_by_state
from .model import Arch, ModePrediction, predict_batch, target_features
from .trainkit import TrainConfig, train
from .trajdata import Dataset, to_agent_frame

MISS_THRESHOLD = 2.0


def _pair(pred_traj, gt):
    p = np.asarray(pred_traj, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or len(p) == 0:
        raise ValueError(f"trajectory shapes differ or are empty: {p.shape} vs {g.shape}")
    return np.linalg.norm(p - g, axis=1)


def ade(pred_traj, gt) -> float:
    return float(_pair(pred_traj, gt).mean())


def fde(pred_traj, gt) -> float:
    return float(_pair(pred_traj, gt)[-1])


def top_modes(pred: ModePrediction, k: int) -> np.ndarray:
    """Indices of the k most probable modes; equal probabilities keep index order."""
    if not 1 <= k <= len(pred.probs):
        raise ValueError(f"k must lie in [1, {len(pred.probs)}], got {k}")
    return np.argsort(-np.asarray(pred.probs), kind="stable")[:k]


def min_over_modes(pred: ModePrediction, gt, k: int) -> tuple[float, float]:
    """(minADE_k, minFDE_k), each minimized independently over the k most probable modes."""
    errs = [_pair(pred.mu[m], gt) for m in top_modes(pred, k)]
    return min(float(e.mean()) for e in errs), min(float(e[-1]) for e in errs)


def miss_rate(preds, gts, k: int, threshold: float = MISS_THRESHOLD) -> float:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if len(preds) == 0:
        raise ValueError("miss rate of an empty set is undefined")
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truths differ in length")
    misses = sum(min_over_modes(p, g, k)[1] > threshold for p, g in zip(preds, gts))
    return misses / len(preds)


@dataclass
class MetricRow:
    subset: str
    count: int
    minADE: float
    minFDE: float
    MR: float


@dataclass
class LongTailReport:
    criterion: str
    horizon: float
    rows: list[MetricRow]

    def row(self, name) -> MetricRow:
        for r in self.rows:
            if r.subset == name:
                return r
        raise KeyError(name)


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def rows_to_csv(rows: list[MetricRow], lead: dict | None = None, miss_rate: bool = True) -> str:
    lead = lead or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(lead) + ["subset", "count", "minADE", "minFDE"] + (["MR"] if miss_rate else []))
    for r in rows:
        tail = [_fmt(r.MR)] if miss_rate else []
        w.writerow(list(lead.values()) + [r.subset, r.count, _fmt(r.minADE), _fmt(r.minFDE)] + tail)
    return buf.getvalue()


def subset_rows(subsets: dict[str, list[int]], ade_k, fde_k, threshold=MISS_THRESHOLD) -> list[MetricRow]:
    rows = []
    for name, idx in subsets.items():
        if len(idx) == 0 or ade_k is None:
            rows.append(MetricRow(name, len(idx), math.nan, math.nan, math.nan))
            continue
        a = np.asarray(ade_k)[idx]
        f = np.asarray(fde_k)[idx]
        rows.append(MetricRow(name, len(idx), float(a.mean()), float(f.mean()), float(np.mean(f > threshold))))
    return rows


def criterion_subsets(dataset: Dataset, spec: SubsetSpec, fde_k=None) -> dict[str, list[int]]:
    if spec.criterion == "error":
        if fde_k is None:
            raise ValueError("the error criterion needs predictions")
        return split_by_error(fde_k, spec.fractions)
    if spec.criterion == "risk":
        return rank_by_risk(dataset, spec.fractions)
    return split_by_state(dataset, spec.thresholds)


def longtail_report(dataset: Dataset, predictions, spec: SubsetSpec, horizon: float | None = None, k: int = 5,
                    threshold: float = MISS_THRESHOLD) -> LongTailReport:
    """Metrics per long-tail subset; ``predictions`` live in the same frame as each scene's future."""
    scenes = list(dataset)
    if len(predictions) != len(scenes):
        raise ValueError(f"{len(predictions)} predictions for {len(scenes)} scenes")
    pairs = [min_over_modes(p, s.future, k) for p, s in zip(predictions, scenes)]
    ade_k = [a for a, _ in pairs]
    fde_k = [f for _, f in pairs]
    if horizon is None:
        horizon = scenes[0].t_fut * scenes[0].dt if scenes else 0.0
    rows = subset_rows(criterion_subsets(dataset, spec, fde_k), ade_k, fde_k, threshold)
    return LongTailReport(spec.criterion, horizon, rows)


def error_curve(fde_k, percents=range(1, 101)) -> list[tuple[float, float]]:
    """(percentile, mean minFDE over the worst p% of samples) pairs for plotting."""
    err = np.sort(np.asarray(fde_k, dtype=np.float64))[::-1]
    out = []
    for p in percents:
        n = max(1, math.ceil(round(p / 100 * len(err), 9)))
        out.append((float(p), float(err[:n].mean())))
    return out


def predict_dataset(dataset: Dataset, params, arch: Arch) -> tuple[list, list[ModePrediction]]:
    """Agent-frame scenes and their predictions."""
    scenes = [to_agent_frame(s) for s in dataset]
    return scenes, predict_batch(scenes, params, arch)


def export_features(params, arch: Arch, dataset: Dataset, k_clusters: int = 6, seed: int = 0) -> str:
    """CSV of F_tar per scene plus a K-means pseudo-label over the normalized features."""
    scenes = [to_agent_frame(s) for s in dataset]
    feats = target_features(scenes, params, arch)
    z = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    labels = kmeans(z, min(k_clusters, len(z)), seed).labels if len(z) else np.zeros(0, dtype=int)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(arch.d)] + ["label"])
    for row, lab in zip(feats, labels):
        w.writerow([repr(float(v)) for v in row] + [int(lab)])
    return buf.getvalue()


# Table 6 grid: (TA, MoCo-DT, IC, DCL)
VARIANTS = {
    "A": (False, False, False, False),
    "B": (False, True, True, True),
    "C": (True, False, True, True),
    "D": (True, True, False, True),
    "E": (True, True, True, False),
    "F": (True, True, True, True),
}


def variant_config(cfg: TrainConfig, name: str) -> TrainConfig:
    ta, moco, ic, dcl = VARIANTS[name]
    return replace(cfg, augment=ta, moco=moco, iterative_clustering=ic, dcl=dcl)


@dataclass
class AblationResult:
    variant: str
    report: LongTailReport
    log: object


def run_ablation(cfg: TrainConfig, dataset: Dataset, variants=tuple(VARIANTS), split: str = "test", k: int = 5,
                 fractions=DEFAULT_FRACTIONS, progress=None) -> list[AblationResult]:
    """Train every variant with the same seed and report error-criterion metrics on ``split``."""
    evaluation = dataset.subset(split)
    if len(evaluation) == 0:
        raise ValueError(f"dataset has no scenes in split {split!r}")
    out = []
    for name in variants:
        vcfg = variant_config(cfg, name)
        result = train(vcfg, dataset)
        scenes, preds = predict_dataset(evaluation, result.params, result.arch)
        report = longtail_report(Dataset(scenes), preds, SubsetSpec("error", fractions), k=k)
        out.append(AblationResult(name, report, result.log))
        if progress:
            progress(name, report)
    return out


def ablation_csv(results: list[AblationResult]) -> str:
    parts = []
    for i, res in enumerate(results):
        ta, moco, ic, dcl = VARIANTS[res.variant]
        lead = {"variant": res.variant, "TA": int(ta), "MoCo": int(moco), "IC": int(ic), "DCL": int(dcl)}
        text = rows_to_csv(res.report.rows, lead)
        parts.append(text if i == 0 else text.split("\n", 1)[1])
    return "".join(parts)
