"""Parameter accounting, runtime benchmarking and the ablation runner."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import Module
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")

CONCAT_VARIANTS = {
    "baseline": {"model.s2": False},
    "P3+S2": {"model.s2": True, "model.s2_targets": [3]},
    "P3,P4+S2": {"model.s2": True, "model.s2_targets": [3, 4]},
    "P3,P4,P5+S2": {"model.s2": True, "model.s2_targets": [3, 4, 5]},
}
NECK_VARIANTS = {
    "PAN": {"model.neck": "pan", "model.s2": False},
    "FPN+S2": {"model.neck": "fpn", "model.s2": True, "model.s2_targets": [3]},
    "PAN+S2": {"model.neck": "pan", "model.s2": True, "model.s2_targets": [3]},
}
S2_VARIANTS = {
    "PAN": {"model.neck": "pan", "model.s2": False},
    "PAN+S2": {"model.neck": "pan", "model.s2": True, "model.s2_targets": [3]},
}
AXES = {"concat-position": CONCAT_VARIANTS, "neck": NECK_VARIANTS, "s2": S2_VARIANTS}


def count_params(model: Module | None) -> tuple[int, dict[str, int]]:
    """Total trainable scalars and a breakdown by top-level submodule path."""
    if model is None:
        return 0, {}
    groups: dict[str, int] = defaultdict(int)
    total = 0
    for name, p in model.named_parameters():
        n = int(np.prod(p.shape))
        total += n
        groups[name.split(".")[0]] += n
    return total, dict(groups)


@dataclass
class BenchResult:
    label: str
    batch: int
    median_ms: float
    p95_ms: float


def bench_runtime(model, batch: int = 8, iterations: int = 10, warmup: int = 2, image_size: int = 128,
                  label: str = "model", seed: int = 0) -> BenchResult:
    """Forward-only wallclock per image (median and 95th percentile) in eval mode."""
    x = Tensor(np.random.default_rng(seed).uniform(size=(batch, 3, image_size, image_size)))
    was_training = model.training
    model.eval()
    times = []
    with no_grad():
        for i in range(warmup + iterations):
            t = time.perf_counter()
            model(x)
            dt = (time.perf_counter() - t) * 1000.0 / batch
            if i >= warmup:
                times.append(dt)
    model.train(was_training)
    return BenchResult(label, batch, float(np.median(times)), float(np.percentile(times, 95)))


def write_bench_csv(path: Path, results: Sequence[BenchResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "batch", "median_ms_per_image", "p95_ms_per_image"])
        for r in results:
            w.writerow([r.label, r.batch, f"{r.median_ms:.4f}", f"{r.p95_ms:.4f}"])


# -- ablation ------------------------------------------------------------------

def _run_variant(job: tuple) -> dict:
    """Train and evaluate one (variant, seed) pair; runs in a worker process when parallel."""
    from .config import RunConfig
    from .runner import run_training

    name, overrides, base_values, seed, out_dir = job
    cfg = RunConfig(dict(base_values)).with_overrides(overrides).with_overrides({"seed": seed})
    result = run_training(cfg, Path(out_dir))
    row = {"variant": name, "seed": seed}
    row.update({k: result["report"][k] for k in METRIC_COLUMNS})
    row["params"] = result["params"]
    return row


def run_ablation(axis: str, base_config, seeds: Sequence[int], out_dir: str | Path, workers: int = 1) -> list[dict]:
    """Train every variant of ``axis`` for every seed; writes ``ablation.csv``.

    Rows are one per (variant, seed) followed by one seed-mean row per
    variant.  Partial results are written if a variant fails.
    """
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    variants = AXES[axis]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(name, ov, base_config.values, seed, str(out / f"{_slug(name)}_seed{seed}"))
            for seed in seeds for name, ov in variants.items()]
    rows: list[dict] = []
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_run_variant, jobs))
        else:
            for job in jobs:
                rows.append(_run_variant(job))
    except Exception:
        _write_ablation(out / "ablation.csv", rows, variants, partial=True)
        raise
    order = {n: i for i, n in enumerate(variants)}
    rows.sort(key=lambda r: (order[r["variant"]], r["seed"]))
    table = _write_ablation(out / "ablation.csv", rows, variants)
    try:
        from .plots import ablation_bars
        ablation_bars(out / "ablation.svg", [r for r in table if r["seed"] == "mean"])
    except ImportError:  # plotting is optional
        pass
    return table


def _slug(name: str) -> str:
    return name.replace("+", "_").replace(",", "-")


def _write_ablation(path: Path, rows: list[dict], variants: dict, partial: bool = False) -> list[dict]:
    table = list(rows)
    baseline_name = next(iter(variants))
    means = {}
    for name in variants:
        sel = [r for r in rows if r["variant"] == name]
        if not sel:
            continue
        mean = {"variant": name, "seed": "mean"}
        for k in METRIC_COLUMNS:
            mean[k] = float(np.mean([r[k] for r in sel]))
        mean["params"] = sel[0]["params"]
        means[name] = mean
    for name, mean in means.items():
        base = means.get(baseline_name)
        mean["delta_AP_S"] = mean["AP_S"] - base["AP_S"] if base else float("nan")
        table.append(mean)
    cols = ["variant", "seed", *METRIC_COLUMNS, "params", "delta_AP_S"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in table:
            w.writerow([_fmt(r.get(c, "")) for c in cols])
        if partial:
            w.writerow(["# partial results: a variant failed"] + [""] * (len(cols) - 1))
    return table


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def read_ablation(path: str | Path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f))
