"""Command line entry point: ``amd <verb> ...``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .evalcli import (MISS_THRESHOLD, ablation_csv, error_curve, export_features, longtail_report,
                      min_over_modes, predict_dataset, rows_to_csv, run_ablation, subset_rows, criterion_subsets,
                      VARIANTS)
from .longtail import DEFAULT_FRACTIONS, StateThresholds, SubsetSpec
from .model import Arch, check_params
from .ndgrad import load_params
from .trainkit import load_train_config, train, write_run
from .trajdata import Dataset, generate_synthetic, load_gen_config, GenConfig, load_scenes, save_scenes


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def _dataset(path, split):
    ds = load_scenes(path)
    return ds if split in (None, "all") else ds.subset(split)


def load_model(checkpoint, t_hist, t_fut, heads=None):
    """Parameters and architecture; sizes come from parameter shapes, head count from the run's config.txt."""
    params = load_params(checkpoint)
    if heads is None:
        cfg_path = Path(checkpoint).with_name("config.txt")
        heads = int(cfgmod.read_kv(cfg_path).get("heads", 4)) if cfg_path.exists() else 4
    try:
        arch = Arch(d=params["tar.mlp.l1.w"].shape[1], heads=heads, k_modes=params["fuse.h_mode"].shape[0],
                    t_hist=t_hist, t_fut=t_fut, ffn=params["tar.trf.ff1.w"].shape[1])
    except KeyError as exc:
        raise SystemExit(f"checkpoint {checkpoint} lacks parameter {exc}") from None
    check_params(arch, params)
    return params, arch


def _model_for(args, ds):
    s = ds.scenes[0]
    return load_model(args.checkpoint, s.t_hist, s.t_fut, args.heads)


def cmd_generate(args):
    cfg = load_gen_config(args.config) if args.config else GenConfig()
    if args.scenes:
        cfg = replace(cfg, scenes=args.scenes)
    save_scenes(generate_synthetic(cfg, args.seed), args.out)


def cmd_train(args):
    overrides = {}
    if args.data:
        overrides["data"] = str(Path(args.data).resolve())
    if args.epochs:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_train_config(args.config, **overrides)

    def progress(row):
        if args.verbose:
            print(f"epoch {row['epoch']}: L_task={row['L_task']:.4f} L={row['L']:.4f}", file=sys.stderr)

    write_run(args.out, cfg, train(cfg, progress=progress))


def cmd_evaluate(args):
    ds = _dataset(args.data, args.split)
    params, arch = _model_for(args, ds)
    scenes, preds = predict_dataset(ds, params, arch)
    pairs = [min_over_modes(p, s.future, args.k) for p, s in zip(preds, scenes)]
    rows = subset_rows({"All": list(range(len(scenes)))}, [a for a, _ in pairs], [f for _, f in pairs],
                       args.threshold)
    _write(args.out, rows_to_csv(rows, {"k": args.k}))


def cmd_report(args):
    ds = _dataset(args.data, args.split)
    params, arch = _model_for(args, ds)
    scenes, preds = predict_dataset(ds, params, arch)
    spec = SubsetSpec(args.criterion, args.fractions, StateThresholds(*args.thresholds))
    rep = longtail_report(Dataset(scenes), preds, spec, k=args.k, threshold=args.threshold)
    _write(args.out, rows_to_csv(rep.rows, {"criterion": rep.criterion, "horizon": repr(rep.horizon)}))
    if args.curve:
        fdes = [min_over_modes(p, s.future, args.k)[1] for p, s in zip(preds, scenes)]
        lines = ["percentile,minFDE"] + [f"{p!r},{v!r}" for p, v in error_curve(fdes)]
        _write(args.curve, "\n".join(lines) + "\n")


def cmd_audit(args):
    ds = _dataset(args.data, args.split)
    spec = SubsetSpec(args.criterion, args.fractions, StateThresholds(*args.thresholds))
    ade_k = fde_k = None
    if args.checkpoint:
        params, arch = _model_for(args, ds)
        scenes, preds = predict_dataset(ds, params, arch)
        pairs = [min_over_modes(p, s.future, args.k) for p, s in zip(preds, scenes)]
        ade_k, fde_k = [a for a, _ in pairs], [f for _, f in pairs]
    elif args.criterion == "error":
        raise SystemExit("the error criterion needs --checkpoint")
    rows = subset_rows(criterion_subsets(ds, spec, fde_k), ade_k, fde_k)
    _write(args.out, rows_to_csv(rows, miss_rate=False))


def cmd_ablate(args):
    overrides = {}
    if args.data:
        overrides["data"] = str(Path(args.data).resolve())
    if args.epochs:
        overrides["epochs"] = args.epochs
    cfg = load_train_config(args.config, **overrides)
    ds = load_scenes(cfg.data)

    def progress(name, rep):
        if args.verbose:
            print(f"variant {name}: All minFDE={rep.row('All').minFDE:.4f}", file=sys.stderr)

    results = run_ablation(cfg, ds, tuple(args.variants.split(",")), split=args.split, k=args.k,
                           progress=progress)
    _write(args.out, ablation_csv(results))


def cmd_export(args):
    ds = _dataset(args.data, args.split)
    params, arch = _model_for(args, ds)
    _write(args.out, export_features(params, arch, ds, args.k_clusters, args.seed))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amd", description="Long-tail trajectory prediction toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="write a synthetic scene dataset as JSONL")
    g.add_argument("--config", help="key = value generator config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, help="override the scene count")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model from a key = value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", help="override the dataset path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    def model_args(q, need_checkpoint=True):
        q.add_argument("--checkpoint", required=need_checkpoint)
        q.add_argument("--data", required=True)
        q.add_argument("--split", default="all", help="scene split to use, or 'all'")
        q.add_argument("--heads", type=int, help="attention heads (default: from the run's config.txt)")
        q.add_argument("--k", type=int, default=5)
        q.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="minADE/minFDE/MR over a dataset")
    model_args(e)
    e.add_argument("--threshold", type=float, default=MISS_THRESHOLD)
    e.set_defaults(func=cmd_evaluate)

    for name, func, need in (("report", cmd_report, True), ("audit", cmd_audit, False)):
        r = sub.add_parser(name, help="long-tail subset table" if name == "report" else "long-tail subset audit")
        model_args(r, need)
        r.add_argument("--criterion", choices=("error", "risk", "state"), required=True)
        r.add_argument("--fractions", type=_floats, default=DEFAULT_FRACTIONS)
        r.add_argument("--thresholds", type=_floats, default=tuple(vars(StateThresholds()).values()),
                       help="accel_long,decel_long,lat_speed,yaw_rate")
        r.add_argument("--threshold", type=float, default=MISS_THRESHOLD)
        if name == "report":
            r.add_argument("--curve", help="also write (percentile, minFDE) pairs here")
        r.set_defaults(func=func)

    a = sub.add_parser("ablate", help="train and compare the component-ablation variants")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--data", help="override the dataset path")
    a.add_argument("--variants", default=",".join(VARIANTS))
    a.add_argument("--split", default="test")
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--epochs", type=int)
    a.add_argument("-v", "--verbose", action="store_true")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-features", help="write target features and pseudo-labels as CSV")
    model_args(x)
    x.add_argument("--k-clusters", type=int, default=6)
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"amd {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
