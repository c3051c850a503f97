"""The twelve acceptance criteria, one test each, at their stated tolerances.

Each test records a pass/fail line that is printed in the terminal summary.
The two training runs (overfit and ablation) are marked slow.
"""

import csv
import io
import math
import shutil
import time
from collections import deque
from pathlib import Path

import mpmath as mp
import numpy as np
import pytest

from amd.cli import load_model, main
from amd.contrastive import (DclConfig, MomentumQueue, dcl_loss, dcl_weight, ema_update, kmeans, moco_dt_loss,
                             topk_indices)
from amd.evalcli import ade, fde, min_over_modes, miss_rate
from amd.longtail import split_by_error, time_to_collision
from amd.model import GraphSpec, ModePrediction, batch_feeds, build_scene_graph, predict_batch, scene_arrays
from amd.ndgrad import grad_check
from amd.trainkit import TrainLog, min_ade_fde
from amd.trajdata import load_scenes, to_agent_frame

from test_contrastive import dcl_oracle, moco_oracle, unit_rows
from test_longtail import ttc_scan
from test_model import SMALL, loss_feeds, small_params, small_scenes
from test_ndgrad import OP_CASES

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
mp.mp.dps = 50


def test_01_gradient_correctness(criterion):
    start = time.perf_counter()
    worst_op = 0.0
    for name in sorted(OP_CASES):
        for seed in range(3):
            g, params = OP_CASES[name](np.random.default_rng(seed))
            worst_op = max(worst_op, grad_check(g, {}, params, "y", step=1e-5))
    g, feeds = loss_feeds(SMALL, small_scenes(3, seed=2), use_contrastive=True)
    worst_net = grad_check(g, feeds, small_params(5), output="L")
    sc = small_scenes(2)
    arrays = [scene_arrays(s, SMALL) for s in sc]
    n_slots, n_lanes = max(len(a.nbr) for a in arrays), max(len(a.lane_seq) for a in arrays)
    g = build_scene_graph(SMALL, GraphSpec(2, n_slots, n_lanes))
    worst_net = max(worst_net, grad_check(g, batch_feeds(arrays, SMALL, n_slots, n_lanes), small_params(), "mu"))
    elapsed = time.perf_counter() - start
    criterion(1, "gradient correctness", worst_op < 1e-4 and worst_net < 1e-4 and elapsed < 120,
              f"ops {worst_op:.2e}, full graph {worst_net:.2e} (< 1e-4), {elapsed:.0f} s (< 120 s)")


def test_02_loss_oracles(criterion):
    rng = np.random.default_rng(100)
    worst_moco = worst_dcl = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 24))
        q, kp = unit_rows(rng, 2)
        negs = unit_rows(rng, k)
        tau = float(rng.uniform(0.05, 1.0))
        worst_moco = max(worst_moco, abs(moco_dt_loss(q, kp, negs, tau) - float(moco_oracle(q, kp, negs, mp.mpf(tau)))))
    for _ in range(100):
        n_pos, n_neg = int(rng.integers(0, 6)), int(rng.integers(1, 8))
        q, qp = unit_rows(rng, 2)
        pos, neg = unit_rows(rng, n_pos), unit_rows(rng, n_neg)
        alpha, tau = float(rng.uniform(0, 1)), float(rng.uniform(0.05, 1.0))
        got = dcl_loss(q, qp, pos, neg, DclConfig(alpha, tau))
        worst_dcl = max(worst_dcl, abs(got - float(dcl_oracle(q, qp, pos, neg, alpha, mp.mpf(tau)))))
    criterion(2, "loss oracles", worst_moco < 1e-9 and worst_dcl < 1e-9,
              f"MoCo {worst_moco:.1e}, DCL {worst_dcl:.1e} (< 1e-9, 100 cases each)")


def test_03_dcl_weight_identity(criterion):
    worst = max(abs(dcl_weight(True, p, a) + p * dcl_weight(False, p, a) - (p + 1))
                for a in (0.0, 0.25, 0.5, 0.75, 1.0) for p in range(1, 51))
    criterion(3, "DCL weight identity", worst <= 1e-12, f"max deviation {worst:.1e} (<= 1e-12)")


def test_04_ema_closed_form(criterion):
    worst = 0.0
    for m in (0.95, 0.99, 0.999):
        for n in (1, 10, 100):
            rng = np.random.default_rng(n)
            k0, q0 = {"w": rng.normal(size=(4, 6))}, {"w": rng.normal(size=(4, 6))}
            k = k0
            for _ in range(n):
                k = ema_update(k, q0, m)
            worst = max(worst, float(np.abs(k["w"] - (m ** n * k0["w"] + (1 - m ** n) * q0["w"])).max()))
    criterion(4, "EMA closed form", worst <= 1e-12, f"max deviation {worst:.1e} (<= 1e-12)")


def test_05_queue_and_topk(criterion):
    rng = np.random.default_rng(5)
    q, ref = MomentumQueue(50, 4), deque(maxlen=50)
    fifo_ok = True
    for _ in range(10_000):
        if rng.random() < 0.7:
            rows = unit_rows(rng, int(rng.integers(1, 6)), 4)
            q.push(rows)
            ref.extend(rows)
        elif len(ref):
            fifo_ok &= np.array_equal(q.entries(), np.array(ref))
    topk_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        entries = unit_rows(rng, n, 6)
        if n > 4:
            entries[rng.integers(n)] = entries[rng.integers(n)]
        query = unit_rows(rng, 1, 6)[0]
        k = int(rng.integers(1, 20))
        sims = entries @ query
        topk_ok &= topk_indices(query, entries, k).tolist() == sorted(range(n), key=lambda i: (-sims[i], i))[:k]
    criterion(5, "queue FIFO and Top-K", fifo_ok and topk_ok,
              f"FIFO trace {'equal' if fifo_ok else 'differs'} over 1e4 ops, "
              f"Top-K {'equal' if topk_ok else 'differs'} over 1e3 queries")


def test_06_clustering(criterion):
    rng = np.random.default_rng(6)
    x = np.vstack([rng.normal(0, 1, (50, 2)), rng.normal(0, 1, (50, 2)) + [10.0, 0.0]])
    truth = np.array([0] * 50 + [1] * 50)
    labels = kmeans(x, 2, 0).labels
    purity = max(np.mean(labels == truth), np.mean(labels == 1 - truth))
    monotone = True
    for seed in range(50):
        r = np.random.default_rng(seed)
        hist = kmeans(r.normal(size=(150, 3)) + r.integers(0, 4, (150, 1)), 6, seed).inertia
        monotone &= all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    criterion(6, "clustering", purity == 1.0 and monotone,
              f"purity {purity:.3f} on 10-sigma blobs, inertia non-increasing on 50 seeds: {monotone}")


def test_07_metrics(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    preds, gts, oracle_fde = [], [], []
    for _ in range(1000):
        mu = rng.normal(size=(5, 6, 2)) * 2
        probs = rng.dirichlet(np.ones(5))
        gt = rng.normal(size=(6, 2))
        k = int(rng.integers(1, 6))
        chosen = sorted(range(5), key=lambda m: (-probs[m], m))[:k]
        per = [[math.hypot(*(mu[m, t] - gt[t])) for t in range(6)] for m in chosen]
        p = ModePrediction(mu, np.ones_like(mu), probs)
        got = min_over_modes(p, gt, k)
        worst = max(worst, abs(got[0] - min(sum(r) / 6 for r in per)), abs(got[1] - min(r[-1] for r in per)),
                    abs(ade(mu[chosen[0]], gt) - sum(per[0]) / 6), abs(fde(mu[chosen[0]], gt) - per[0][-1]))
        if k == 5:
            preds.append(p)
            gts.append(gt)
            oracle_fde.append(min(r[-1] for r in per))
    mr_dev = max(abs(miss_rate(preds, gts, 5, th) - sum(f > th for f in oracle_fde) / len(preds))
                 for th in (0.5, 1.0, 2.0, 3.0))
    mono = True
    for p, gt in zip(preds, gts):
        vals = [min_over_modes(p, gt, k) for k in range(1, 6)]
        mono &= all(b[0] <= a[0] and b[1] <= a[1] for a, b in zip(vals, vals[1:]))
    rates = [miss_rate(preds, gts, 5, th) for th in np.linspace(0.1, 5, 25)]
    mono &= all(b <= a for a, b in zip(rates, rates[1:]))
    ok = worst < 1e-9 and mr_dev < 1e-9 and mono
    criterion(7, "metrics", ok, f"max oracle deviation {worst:.1e}, MR {mr_dev:.1e} (< 1e-9), monotone: {mono}")


def test_08_ttc(criterion):
    rng = np.random.default_rng(8)
    worst, hits = 0.0, 0
    ok = True
    for case in range(1000):
        p_a, p_b = rng.uniform(-30, 30, 2), rng.uniform(-30, 30, 2)
        v_a, v_b = rng.uniform(-10, 10, 2), rng.uniform(-10, 10, 2)
        if case % 2:
            v_b = v_a + (p_a - p_b) / rng.uniform(1, 20) + rng.normal(0, 0.3, 2)
        r = rng.uniform(0.5, 3.0)
        got, want = time_to_collision(p_a, v_a, p_b, v_b, r), ttc_scan(p_a, v_a, p_b, v_b, r)
        if math.isinf(want):
            ok &= got > 60.0 - 1e-3
        else:
            hits += 1
            worst = max(worst, abs(got - want))
    criterion(8, "TTC", ok and worst <= 1e-3,
              f"max |closed form - 1 ms scan| {worst:.1e} s over {hits} collisions (<= 1e-3), misses agree: {ok}")


def test_09_longtail_splits(criterion):
    ok = True
    for n in (100, 200, 1000):
        out = split_by_error(np.random.default_rng(n).random(n))
        prev = set()
        for f in (0.01, 0.02, 0.03, 0.04, 0.05):
            cur = set(out[f"Top {f * 100:g}%"])
            ok &= len(cur) == math.ceil(f * n - 1e-9) and prev <= cur
            prev = cur
    criterion(9, "long-tail splits", ok, "sizes ceil(f N) and nested for N in {100, 200, 1000}")


@pytest.mark.slow
def test_10_overfit(criterion, tmp_path):
    data, run_dir = tmp_path / "overfit.jsonl", tmp_path / "run"
    assert main(["generate", "--config", str(CONFIGS / "overfit_data.cfg"), "--seed", "0", "--out", str(data)]) == 0
    start = time.perf_counter()
    assert main(["train", "--config", str(CONFIGS / "overfit.cfg"), "--data", str(data), "--out", str(run_dir)]) == 0
    elapsed = time.perf_counter() - start
    log = TrainLog.from_csv((run_dir / "trainlog.csv").read_text())
    first, last = log.rows[0]["L_task"], log.rows[-1]["L_task"]
    scenes = [to_agent_frame(s) for s in load_scenes(data).subset("train")]
    params, arch = load_model(run_dir / "checkpoint.amdc", scenes[0].t_hist, scenes[0].t_fut)
    min_ade, min_fde = min_ade_fde(predict_batch(scenes, params, arch), scenes, 5)
    ok = len(log.rows) == 500 and last < 0.1 * first and min_ade < 0.1 and elapsed < 600
    criterion(10, "overfit", ok,
              f"L_task {first:.3f} -> {last:.3f} (< 10%), train minADE5 {min_ade:.4f} m (< 0.1), "
              f"minFDE5 {min_fde:.4f} m, {elapsed:.0f} s (< 600 s)")


@pytest.mark.slow
def test_11_ablation_direction(criterion, tmp_path):
    data, out = tmp_path / "ablation.jsonl", tmp_path / "ablation.csv"
    assert main(["generate", "--config", str(CONFIGS / "ablation_data.cfg"), "--seed", "0", "--out", str(data)]) == 0
    start = time.perf_counter()
    assert main(["ablate", "--config", str(CONFIGS / "ablation.cfg"), "--data", str(data), "--out", str(out)]) == 0
    elapsed = time.perf_counter() - start
    shutil.copy(out, Path(__file__).resolve().parent.parent / "ablation_result.csv")
    rows = {(r["variant"], r["subset"]): r for r in csv.DictReader(io.StringIO(out.read_text()))}
    top_f, top_a = float(rows["F", "Top 5%"]["minFDE"]), float(rows["A", "Top 5%"]["minFDE"])
    all_f, all_a = float(rows["F", "All"]["minFDE"]), float(rows["A", "All"]["minFDE"])
    ok = top_f <= top_a and all_f <= 1.05 * all_a and elapsed < 3600
    criterion(11, "ablation direction", ok,
              f"Top 5% minFDE F {top_f:.3f} vs A {top_a:.3f}; All F {all_f:.3f} vs 1.05 x A {1.05 * all_a:.3f}; "
              f"{elapsed / 60:.1f} min (< 60)")


GEN = "scenes = 24\nt_hist = 2\nt_fut = 3\nlane_nodes = 4\nneighbors_max = 2\n"
TRAIN = "data = data.jsonl\nd = 8\nheads = 2\nk_modes = 3\nffn = 8\nepochs = 2\nbatch = 4\nk_clusters = 3\nqueue = 8\ntop_k = 4\n"


def test_12_cli_determinism(criterion, tmp_path):
    (tmp_path / "gen.cfg").write_text(GEN)
    (tmp_path / "train.cfg").write_text(TRAIN)
    data = tmp_path / "data.jsonl"
    gen = ["generate", "--config", str(tmp_path / "gen.cfg"), "--seed", "5"]
    assert main(gen + ["--out", str(data)]) == 0
    model = ["--checkpoint", str(tmp_path / "train0" / "checkpoint.amdc"), "--data", str(data), "--k", "3"]
    verbs = {
        "generate": gen,
        "train": ["train", "--config", str(tmp_path / "train.cfg")],
        "evaluate": ["evaluate"] + model,
        "report": ["report", "--criterion", "error"] + model,
        "audit": ["audit", "--criterion", "state", "--data", str(data)],
        "ablate": ["ablate", "--config", str(tmp_path / "train.cfg"), "--variants", "A,F", "--split", "val",
                   "--k", "3", "--epochs", "1"],
        "export-features": ["export-features", "--k-clusters", "3"] + model,
    }
    same = {}
    for verb, argv in verbs.items():
        blobs = []
        for i in range(2):
            out = tmp_path / f"{verb}{i}"
            extra = ["--curve", f"{out}.curve"] if verb == "report" else []
            assert main(argv + extra + ["--out", str(out)]) == 0
            if verb == "train":
                paths = [out / name for name in ("checkpoint.amdc", "trainlog.csv", "config.txt")]
            else:
                paths = [out] + ([Path(f"{out}.curve")] if extra else [])
            blobs.append([p.read_bytes() for p in paths])
        same[verb] = blobs[0] == blobs[1]
    criterion(12, "CLI determinism", all(same.values()),
              ", ".join(f"{v} {'identical' if s else 'DIFFERS'}" for v, s in same.items()))
