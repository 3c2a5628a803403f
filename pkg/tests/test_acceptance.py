"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected and repeated in the pytest terminal summary, so a
plain ``pytest -v`` run ends with the full criterion table.  Criterion 8
(end-to-end training, about an hour on one CPU core) can be skipped with
``S2NECK_SKIP_E2E=1`` for quick iterations; it runs by default.
"""

import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from s2neck import ops
from s2neck.checks import CHECKS, run_check
from s2neck.cli import main as cli
from s2neck.config import RunConfig
from s2neck.data import Annotation, DatasetManifest, GroundTruthSet, generate_dataset
from s2neck.detector import Detector
from s2neck.evaluation import bench_runtime, count_params, read_ablation, run_ablation
from s2neck.metrics import DetectionSet, ap_table, evaluate_ap
from s2neck.neck import (PyramidFeatures, S2Config, S2Module, apply_s2_module, build_general_view, fuse_s2,
                         make_adapter, s2_param_count)
from s2neck.scalespace import gaussian_blur, gaussian_kernel
from s2neck.tensor import Parameter, Rng, Tensor

from reference import (avgpool_levels_loops, batch_norm_two_pass, conv2d_loops, conv3d_loops, reference_ap,
                       resize_bilinear_loops)

RESULTS: list[str] = []


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}  {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------------

def test_01_kernels_match_oracles():
    t0 = time.perf_counter()
    g = np.random.default_rng(101)
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), float(err))

    for _ in range(100):
        b, ci, co = (int(v) for v in g.integers(1, 3, size=3))
        k = int(g.choice([1, 3]))
        h, w = (int(v) for v in g.integers(k, 9, size=2))
        s, p = int(g.integers(1, 3)), int(g.integers(0, 2))
        x, wt, bias = g.normal(size=(b, ci, h, w)), g.normal(size=(co, ci, k, k)), g.normal(size=co)
        note("conv2d", np.abs(ops.conv2d(Tensor(x), Tensor(wt), Tensor(bias), s, p).data
                              - conv2d_loops(x, wt, bias, s, p)).max())

        l = int(g.integers(1, 4))
        kl = 3 if l + 2 * p >= 3 else 1
        h, w = (int(v) for v in g.integers(3, 6, size=2))
        x, wt, bias = g.normal(size=(1, ci, l, h, w)), g.normal(size=(co, ci, kl, 3, 3)), g.normal(size=co)
        note("conv3d", np.abs(ops.conv3d(Tensor(x), Tensor(wt), Tensor(bias), 1, p).data
                              - conv3d_loops(x, wt, bias, 1, p)).max())

        x = g.normal(loc=g.normal(), scale=g.uniform(0.5, 3), size=(int(g.integers(1, 4)), 3, 4, 4))
        gamma, beta = g.normal(size=3), g.normal(size=3)
        y = ops.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), np.zeros(3), np.ones(3), eps=1e-5)
        note("batch_norm", np.abs(y.data - batch_norm_two_pass(x, gamma, beta, 1e-5)).max())

        x = g.normal(size=(1, 2, int(g.integers(1, 7)), int(g.integers(1, 7))))
        oh, ow = (int(v) for v in g.integers(1, 10, size=2))
        note("resize_bilinear", np.abs(ops.resize_bilinear(Tensor(x), oh, ow).data
                                       - resize_bilinear_loops(x, oh, ow)).max())

        x = g.normal(size=(1, 2, int(g.integers(1, 5)), 3, 3))
        note("avgpool_levels", np.abs(ops.avgpool_levels(Tensor(x)).data - avgpool_levels_loops(x)).max())
    dt = time.perf_counter() - t0
    ok = all(v <= 1e-10 for v in worst.values()) and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, "kernels vs brute-force oracles (100 cases each, <=1e-10, <1 min)", ok, f"{detail}; {dt:.1f}s")


# 2 -------------------------------------------------------------------------------

def test_02_gradient_checks():
    t0 = time.perf_counter()
    errs = {name: max(run_check(name, seed, 1e-5) for seed in range(3)) for name in CHECKS}
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(e < 1e-4 for e in errs.values()) and dt < 300
    report(2, "grad_check of every op and the S2 pipeline (<1e-4, eps 1e-5, <5 min)", ok,
           f"{len(errs)} checks x 3 seeds, worst {worst} {errs[worst]:.1e}; {dt:.1f}s")


# 3 -------------------------------------------------------------------------------

def test_03_s2_shape_contract():
    t0 = time.perf_counter()
    g = np.random.default_rng(303)
    bad = []
    for i in range(50):
        b, c = int(g.integers(1, 3)), int(g.integers(1, 9))
        h, w = (int(v) for v in g.integers(1, 17, size=2))
        n_levels = int(g.integers(1, 5))
        levels, hh, ww = [], h, w
        for _ in range(n_levels):
            levels.append(Tensor(g.normal(size=(b, c, hh, ww))))
            hh, ww = math.ceil(hh / 2), math.ceil(ww / 2)
        view = build_general_view(PyramidFeatures(levels))
        s2 = apply_s2_module(view, S2Config(), S2Module(c, S2Config(), Rng(i)))
        one = fuse_s2(levels[0], s2)
        two = fuse_s2(levels[0], s2, "two_stage", make_adapter(c, Rng(i)))
        if s2.shape != levels[0].shape or one.shape[1] != 2 * c or two.shape != levels[0].shape:
            bad.append((b, c, h, w, n_levels))
    dt = time.perf_counter() - t0
    report(3, "S2 output dims equal P3 dims; fuse gives 2C / C (50 geometries, <1 min)", not bad and dt < 60,
           f"{50 - len(bad)}/50 geometries ok; {dt:.1f}s")


# 4 -------------------------------------------------------------------------------

def test_04_level_participation():
    g = np.random.default_rng(404)
    min_grad, min_perm = math.inf, math.inf
    for seed in range(10):
        c = int(g.integers(2, 6))
        levels = [Parameter(g.normal(size=(2, c, s, s))) for s in (8, 4, 2)]
        m = S2Module(c, S2Config(), Rng(seed))
        ops.sum_all(m(build_general_view(PyramidFeatures(levels)))).backward()
        min_grad = min(min_grad, min(float(np.abs(p.grad).max()) for p in levels))
        view = build_general_view(PyramidFeatures([Tensor(p.data) for p in levels])).tensor
        ref = m(view).data
        for perm in ([1, 0, 2], [2, 1, 0], [0, 2, 1]):
            moved = m(Tensor(view.data[:, :, perm].copy())).data
            min_perm = min(min_perm, float(np.abs(moved - ref).max()))
    ok = min_grad > 0 and min_perm > 1e-6
    report(4, "every level gets gradient; level order changes S2 output (>1e-6)", ok,
           f"min per-level max|grad| {min_grad:.2e}, min permutation diff {min_perm:.2e}")


# 5 -------------------------------------------------------------------------------

def test_05_scale_space_oracle():
    sigmas = [0.3, 0.5, 0.6, 0.8, 1.0, 1.5, 2.0, 3.0]
    norm_err = max(abs(gaussian_kernel(s).data.sum() - 1.0) for s in sigmas)

    g = np.random.default_rng(505)
    pairs = [(0.6, 0.8), (0.8, 0.6), (1.0, 1.0), (0.5, 1.5), (1.5, 2.0), (2.0, 2.0), (1.0, 2.0)]
    semi = {}
    for s1, s2 in pairs:
        worst = 0.0
        for _ in range(3):
            f = Tensor(g.uniform(size=(64, 64)))
            twice = gaussian_blur(gaussian_blur(f, s1), s2).data
            once = gaussian_blur(f, math.hypot(s1, s2)).data
            worst = max(worst, float(np.abs(twice - once).max()))
        semi[(s1, s2)] = worst

    imp_err = 0.0
    for s in (0.6, 1.0, 2.0):
        img = np.zeros((41, 41))
        img[20, 20] = 1.0
        k = gaussian_kernel(s).data
        r = k.shape[0] // 2
        out = gaussian_blur(Tensor(img), s).data
        imp_err = max(imp_err, float(np.abs(out[20 - r:21 + r, 20 - r:21 + r] - k).max()))
    worst_pair = max(semi, key=semi.get)
    ok = norm_err <= 1e-12 and all(v < 1e-3 for v in semi.values()) and imp_err <= 1e-12
    report(5, "kernel sum (1e-12), semigroup on 64x64 noise (<1e-3), impulse response", ok,
           f"sum err {norm_err:.1e}; semigroup worst {worst_pair} {semi[worst_pair]:.2e} "
           f"({sum(v < 1e-3 for v in semi.values())}/{len(semi)} pairs ok: "
           + " ".join(f"{a}+{b}={v:.1e}" for (a, b), v in semi.items()) + f"); impulse err {imp_err:.1e}")


# 6 -------------------------------------------------------------------------------

def _random_instance(g):
    n_images = int(g.integers(1, 6))
    gts = {i: [] for i in range(n_images)}
    dets = {i: [] for i in range(n_images)}
    placed = []
    for _ in range(int(g.integers(0, 7))):
        i = int(g.integers(0, n_images))
        side = float(g.uniform(3, 24))
        box = (float(g.uniform(0, 100)), float(g.uniform(0, 100)), side, side * float(g.uniform(0.7, 1.4)))
        gts[i].append((int(g.integers(0, 3)), box))
        placed.append((i, box))
    for _ in range(int(g.integers(0, 9))):
        if placed and g.uniform() < 0.7:
            i, b = placed[int(g.integers(0, len(placed)))]
            s = float(g.uniform(0.8, 1.25))
            box = (b[0] + float(g.normal(0, 2)), b[1] + float(g.normal(0, 2)), b[2] * s, b[3] * s)
        else:
            i = int(g.integers(0, n_images))
            box = (float(g.uniform(0, 100)), float(g.uniform(0, 100)), float(g.uniform(3, 24)),
                   float(g.uniform(3, 24)))
        dets[i].append((int(g.integers(0, 3)), box, float(g.uniform(0.01, 1.0))))
    return dets, gts


def _sets(dets, gts):
    return ([DetectionSet(i, d) for i, d in dets.items()],
            [GroundTruthSet(i, [Annotation(c, b) for c, b in v]) for i, v in gts.items()])


def test_06_ap_evaluator():
    g = np.random.default_rng(606)
    ranges = [(0.0, math.inf), (0.0, 64.0), (64.0, 256.0), (256.0, math.inf)]
    thresholds = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
    worst, n_cmp = 0.0, 0
    for _ in range(500):
        dets, gts = _random_instance(g)
        ds, gs = _sets(dets, gts)
        for rng in ranges:
            table = ap_table(ds, gs, thresholds, rng)
            for ti, t in enumerate(thresholds):
                row = table[ti][table[ti] > -1]
                mine = float(row.mean()) if row.size else -1.0
                worst = max(worst, abs(mine - reference_ap(dets, gts, float(t), rng)))
                n_cmp += 1
    gt = (10.0, 10.0, 20.0, 20.0)
    tp, fp = (11.0, 10.0, 20.0, 20.0), (60.0, 60.0, 20.0, 20.0)
    perfect = evaluate_ap(*_sets({0: [(0, gt, 0.9)]}, {0: [(0, gt)]})).AP
    ordered = evaluate_ap(*_sets({0: [(0, tp, 0.9), (0, fp, 0.8)]}, {0: [(0, gt)]})).AP50
    swapped = evaluate_ap(*_sets({0: [(0, tp, 0.8), (0, fp, 0.9)]}, {0: [(0, gt)]})).AP50
    # "equals" read at the same 1e-10 bar as the kernel criterion; the mean over
    # thresholds sums in a different order from the reference, so last-bit noise remains
    ok = worst <= 1e-10 and perfect == 1.0 and ordered == 1.0 and swapped == 0.5
    report(6, "AP equals brute-force reference; hand PR cases exact", ok,
           f"{n_cmp} comparisons, max diff {worst:.1e}; perfect {perfect}, TP-first {ordered}, FP-first {swapped}")


# 7 -------------------------------------------------------------------------------

def test_07_parameter_accounting():
    cfg = RunConfig()
    base = Detector(cfg.detector())
    with_s2 = Detector(cfg.with_overrides({"model.s2": True}).detector())
    n_base, _ = count_params(base)
    n_s2, groups = count_params(with_s2)
    c, hw = cfg["model.neck_width"], cfg["model.head_width"]
    theta = s2_param_count(c, c)
    head_delta = 3 * 3 * c * hw  # the P3 head conv reads 2C channels instead of C
    delta = n_s2 - n_base
    t_base = bench_runtime(base, batch=8, iterations=10, warmup=2).median_ms
    t_s2 = bench_runtime(with_s2, batch=8, iterations=10, warmup=2).median_ms
    # the delta is asserted against the closed form alone, as stated; one-stage
    # fusion also widens the P3 head input, so the decomposition is printed too
    ok = theta == 6960 and groups["s2"] == theta and delta == theta and t_s2 - t_base > 0
    report(7, "param delta equals closed-form S2 count; positive S2 runtime overhead", ok,
           f"delta {delta} vs {theta} (s2 group {groups['s2']}, P3 head input +{head_delta}, "
           f"delta - s2 - head = {delta - theta - head_delta}); {t_base:.2f} -> {t_s2:.2f} ms/img "
           f"({t_s2 - t_base:+.2f})")


# 8 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_dataset(tmp_path_factory):
    path = Path(os.environ.get("S2NECK_DATA", tmp_path_factory.mktemp("default") / "data"))
    if not (path / "manifest.json").exists():
        generate_dataset(RunConfig().manifest(), path)
    return path


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("S2NECK_SKIP_E2E") == "1", reason="S2NECK_SKIP_E2E=1")
def test_08_end_to_end_toy_experiment(default_dataset, tmp_path):
    cfg = RunConfig({"data.path": str(default_dataset)})
    t0 = time.perf_counter()
    table = run_ablation("s2", cfg, [0, 1, 2], tmp_path)
    minutes = (time.perf_counter() - t0) / 60
    runs = [r for r in table if r["seed"] != "mean"]
    means = {r["variant"]: r for r in table if r["seed"] == "mean"}
    rows = read_ablation(tmp_path / "ablation.csv")
    logged = {r["variant"]: float(r["delta_AP_S"]) for r in rows if r["seed"] == "mean"}
    delta = means["PAN+S2"]["AP_S"] - means["PAN"]["AP_S"]
    min_ap = min(r["AP"] for r in runs)
    ok_a = len(runs) == 6 and min_ap >= 0.50
    ok_b = delta >= -0.005
    ok_c = abs(logged["PAN+S2"] - delta) < 1e-6
    aps = ", ".join(f"{r['variant']}/s{r['seed']} {r['AP']:.3f}" for r in runs)
    report(8, "toy PAN vs PAN+S2, 3 seeds: AP >= 0.50, AP_S non-inferior, < 60 min",
           ok_a and ok_b and ok_c and minutes < 60,
           f"AP {aps}; mean AP_S {means['PAN']['AP_S']:.3f} -> {means['PAN+S2']['AP_S']:.3f} "
           f"(delta {delta:+.3f}, logged {logged['PAN+S2']:+.3f}); {minutes:.1f} min")


# 9 -------------------------------------------------------------------------------

def _tiny_args(data_dir):
    return ["--data", str(data_dir), "--set", "data.n_train=24", "--set", "data.n_val=8", "--set", "data.seed=11",
            "--set", "train.batch_size=4", "--set", "train.max_iters=3", "--set", "train.warmup_iters=1"]


def test_09_ablation_tables(tiny_data_dir, tmp_path):
    shapes, same_batches = {}, True
    for axis, want in (("concat-position", ["baseline", "P3+S2", "P3,P4+S2", "P3,P4,P5+S2"]),
                       ("neck", ["PAN", "FPN+S2", "PAN+S2"])):
        out = tmp_path / axis
        code = cli(["ablate", "--axis", axis, "--seeds", "2", "--out", str(out)] + _tiny_args(tiny_data_dir))
        with open(out / "ablation.csv") as f:
            rows = list(csv.DictReader(f))
        means = [r["variant"] for r in rows if r["seed"] == "mean"]
        has_cols = all(k in rows[0] for k in ("AP", "AP_S", "AP_M", "AP_L"))
        shapes[axis] = (code == 0 and means == want and has_cols, len(means))
        for seed in (0, 1):
            logs = {p.read_text() for p in out.glob(f"*_seed{seed}/batches.csv")}
            same_batches &= len(logs) == 1 and len(list(out.glob(f"*_seed{seed}/batches.csv"))) == len(want)
    ok = all(v[0] for v in shapes.values()) and same_batches
    report(9, "concat-position gives 4 rows, neck gives 3; batch-id logs equal across variants", ok,
           f"rows {shapes['concat-position'][1]} / {shapes['neck'][1]}; identical batch logs {same_batches}")


# 10 ------------------------------------------------------------------------------

def test_10_determinism(tiny_data_dir, tmp_path):
    files = ("checkpoint.s2ckpt", "losses.csv", "batches.csv")
    same = {}
    for s2 in ("off", "on"):
        dirs = [tmp_path / f"{s2}{k}" for k in range(2)]
        for d in dirs:
            assert cli(["train", "--s2", s2, "--seed", "5", "--out", str(d), "--no-eval"]
                       + _tiny_args(tiny_data_dir)) == 0
        for name in files:
            same[f"{s2}:{name}"] = (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
    report(10, "repeated train runs give byte-identical checkpoints and loss CSVs", all(same.values()),
           ", ".join(f"{k} {'same' if v else 'DIFFERENT'}" for k, v in same.items()))
