"""Deterministic SGD training loop for the toy detector."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .detector import Detector, LossWeights, assign_targets, compute_loss, predict
from .metrics import EvalReport, detections_from_predictions, evaluate_ap
from .optim import SGD
from .serialize import save_checkpoint
from .tensor import Rng

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "loss_total", "loss_obj", "loss_cls", "loss_box", "wallclock_ms")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_iters: int = 100
    decay_at: tuple[float, float] = (2 / 3, 5 / 6)
    max_iters: int | None = None
    thresholds: tuple[float, float] = (8, 16)
    loss: LossWeights = field(default_factory=LossWeights)

    def total_iters(self, n_images: int) -> int:
        per_epoch = -(-n_images // self.batch_size)
        total = self.epochs * per_epoch
        return total if self.max_iters is None else min(total, self.max_iters)

    def lr_at(self, it: int, total: int) -> float:
        """Linear warmup, then step decay x0.1 at each ``decay_at`` fraction of training."""
        lr = self.lr
        if self.warmup_iters and it < self.warmup_iters:
            lr *= (it + 1) / self.warmup_iters
        for frac in self.decay_at:
            if it >= int(frac * total):
                lr *= 0.1
        return lr


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled minibatches for one epoch; depends only on ``(seed, epoch)``."""
    perm = Rng(seed).derive(0xDA7A, epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model: Detector, dataset: Dataset, schedule: TrainSchedule, seed: int,
          out_dir: str | Path | None = None, config_echo: dict | None = None) -> list[dict]:
    """Train in place; returns the per-iteration log.

    With ``out_dir`` the log goes to ``train_log.csv``, the same log minus
    the wallclock column to ``losses.csv`` (byte-stable across reruns), the
    image ids of every batch to ``batches.csv`` and the final weights to
    ``checkpoint.s2ckpt``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model.train()
    params = model.parameters()
    opt = SGD(params, schedule.momentum, schedule.weight_decay)
    total = schedule.total_iters(len(dataset))
    size = dataset.manifest.image_size
    records, batches = [], []
    it = 0
    t0 = time.perf_counter()
    epoch = 0
    while it < total:
        for idx in batch_order(len(dataset), schedule.batch_size, seed, epoch):
            if it >= total:
                break
            images = dataset.batch(idx)
            assignment = assign_targets([dataset.gts[i] for i in idx], size, schedule.thresholds)
            model.zero_grad()
            try:
                loss, parts = compute_loss(model(images), assignment, schedule.loss)
                finite = bool(np.isfinite(parts["total"]))
                if finite:
                    loss.backward()
            except ValueError as err:
                # checked mode rejects non-finite tensors as soon as they appear
                if "non-finite" not in str(err):
                    raise
                finite = False
            if not finite:
                bad = [dataset.ids[i] for i in idx]
                if out is not None:
                    (out / "nonfinite_batch.json").write_text(json.dumps({"iter": it, "image_ids": bad}))
                raise TrainingError(f"non-finite loss at iteration {it} (batch image ids {bad})")
            lr = schedule.lr_at(it, total)
            if lr > 0:
                opt.step(lr)
            rec = {"iter": it, "lr": lr, "loss_total": parts["total"], "loss_obj": parts["obj"],
                   "loss_cls": parts["cls"], "loss_box": parts["box"],
                   "wallclock_ms": (time.perf_counter() - t0) * 1000.0}
            records.append(rec)
            batches.append([dataset.ids[i] for i in idx])
            if it % 50 == 0:
                log.info("iter %d/%d lr %.4g loss %.4f (obj %.4f cls %.4f box %.4f)", it, total, lr,
                         parts["total"], parts["obj"], parts["cls"], parts["box"])
            it += 1
        epoch += 1
    if out is not None:
        write_log(out / "train_log.csv", records)
        write_log(out / "losses.csv", records, wallclock=False)
        with open(out / "batches.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iter", "image_ids"])
            for i, ids in enumerate(batches):
                w.writerow([i, " ".join(map(str, ids))])
        save_checkpoint(out / "checkpoint.s2ckpt", model, config_echo)
    return records


def write_log(path: Path, records: list[dict], wallclock: bool = True) -> None:
    cols = LOG_COLUMNS if wallclock else LOG_COLUMNS[:-1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            row = [r["iter"], repr(r["lr"])] + [repr(r[k]) for k in LOG_COLUMNS[2:6]]
            if wallclock:
                row.append(f"{r['wallclock_ms']:.3f}")
            w.writerow(row)


def evaluate_model(model: Detector, dataset: Dataset, batch_size: int = 32, score_threshold: float = 0.01,
                   nms_iou: float = 0.5) -> EvalReport:
    preds = []
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        preds += predict(model, dataset.batch(idx), score_threshold, nms_iou)
    dets = detections_from_predictions(dataset.ids, preds)
    return evaluate_ap(dets, dataset.gts, bucket_thresholds=dataset.manifest.bucket_thresholds)
