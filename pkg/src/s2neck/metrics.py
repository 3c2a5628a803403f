"""COCO-protocol average precision with area buckets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import BUCKETS, GroundTruthSet

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class DetectionSet:
    """Detections of one image: ``(class, (x, y, w, h), score)`` triples."""

    image_id: int
    detections: list[tuple[int, tuple[float, float, float, float], float]] = field(default_factory=list)

    def __post_init__(self):
        for cls, box, score in self.detections:
            if not np.isfinite(score) or not all(np.isfinite(box)):
                raise ValueError("non-finite detection")
            if box[2] <= 0 or box[3] <= 0:
                raise ValueError(f"invalid box {box}")


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    AP_S: float
    AP_M: float
    AP_L: float
    per_class: dict
    counts: dict

    def to_json(self) -> dict:
        return asdict(self)


def compute_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    iw = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        raise ValueError("zero-area union")
    return inter / union


def _iou_matrix(d: np.ndarray, g: np.ndarray) -> np.ndarray:
    if not len(d) or not len(g):
        return np.zeros((len(d), len(g)))
    iw = np.minimum(d[:, None, 0] + d[:, None, 2], g[None, :, 0] + g[None, :, 2]) - np.maximum(d[:, None, 0], g[None, :, 0])
    ih = np.minimum(d[:, None, 1] + d[:, None, 3], g[None, :, 1] + g[None, :, 3]) - np.maximum(d[:, None, 1], g[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (d[:, 2] * d[:, 3])[:, None] + (g[:, 2] * g[:, 3])[None] - inter
    return inter / union


def _match_image(dboxes, dscores, gboxes, g_ignore, thresholds, area_rng, max_dets):
    """Greedy COCO matching for one image/class/area range.

    Returns (scores, tp[T, D], ignore[T, D]) for the kept detections.
    """
    order = np.argsort(-dscores, kind="mergesort")[:max_dets]
    dboxes, dscores = dboxes[order], dscores[order]
    # non-ignored ground truth first, as the COCO evaluator does
    gorder = np.argsort(g_ignore, kind="mergesort")
    gboxes, g_ignore = gboxes[gorder], g_ignore[gorder]
    ious = _iou_matrix(dboxes, gboxes)
    T, D, G = len(thresholds), len(dboxes), len(gboxes)
    tp = np.zeros((T, D), dtype=bool)
    ign = np.zeros((T, D), dtype=bool)
    d_area = dboxes[:, 2] * dboxes[:, 3] if D else np.zeros(0)
    d_out = (d_area < area_rng[0]) | (d_area >= area_rng[1])
    for ti, t in enumerate(thresholds):
        g_taken = np.zeros(G, dtype=bool)
        for di in range(D):
            best, m = min(t, 1 - 1e-10), -1
            for gi in range(G):
                if g_taken[gi]:
                    continue
                if m > -1 and not g_ignore[m] and g_ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best, m = ious[di, gi], gi
            if m == -1:
                ign[ti, di] = d_out[di]
                continue
            g_taken[m] = True
            ign[ti, di] = g_ignore[m]
            tp[ti, di] = not g_ignore[m]
    return dscores, tp, ign


def _interpolated_precision(tp: np.ndarray, fp: np.ndarray, n_pos: int) -> np.ndarray:
    tps, fps = np.cumsum(tp), np.cumsum(fp)
    rc = tps / n_pos
    pr = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    pr = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    ok = idx < len(pr)
    q[ok] = pr[idx[ok]]
    return q


def _as_rows(items, with_score: bool):
    out = {}
    for s in items:
        rows = s.detections if with_score else [(a.cls, a.box, 1.0) for a in s.objects]
        out[s.image_id] = rows
    return out


def ap_table(dets: Sequence[DetectionSet], gts: Sequence[GroundTruthSet], iou_thresholds=IOU_THRESHOLDS,
             area_range=(0.0, float("inf")), max_dets: int = 100, curves: dict | None = None) -> np.ndarray:
    """``T x K`` array of APs (``-1`` where a class has no ground truth in range).

    If ``curves`` is a dict it receives ``(threshold_index, class)`` ->
    interpolated precision at the 101 recall points.
    """
    d_rows, g_rows = _as_rows(dets, True), _as_rows(gts, False)
    classes = sorted({r[0] for rows in g_rows.values() for r in rows} | {r[0] for rows in d_rows.values() for r in rows})
    n_cls = max(classes) + 1 if classes else 0
    out = -np.ones((len(iou_thresholds), n_cls))
    for k in classes:
        scores, tps, igns, n_pos = [], [], [], 0
        for image_id in sorted(set(d_rows) | set(g_rows)):
            g = [r for r in g_rows.get(image_id, []) if r[0] == k]
            d = [r for r in d_rows.get(image_id, []) if r[0] == k]
            gboxes = np.array([r[1] for r in g], dtype=np.float64).reshape(-1, 4)
            g_area = gboxes[:, 2] * gboxes[:, 3]
            g_ignore = (g_area < area_range[0]) | (g_area >= area_range[1])
            n_pos += int((~g_ignore).sum())
            if not d:
                continue
            dboxes = np.array([r[1] for r in d], dtype=np.float64).reshape(-1, 4)
            dscores = np.array([r[2] for r in d], dtype=np.float64)
            s, tp, ig = _match_image(dboxes, dscores, gboxes, g_ignore, iou_thresholds, area_range, max_dets)
            scores.append(s)
            tps.append(tp)
            igns.append(ig)
        if n_pos == 0:
            continue
        if not scores:
            out[:, k] = 0.0
            if curves is not None:
                for ti in range(len(iou_thresholds)):
                    curves[ti, k] = np.zeros(len(RECALL_POINTS))
            continue
        s = np.concatenate(scores)
        order = np.argsort(-s, kind="mergesort")
        tp = np.concatenate(tps, axis=1)[:, order]
        ig = np.concatenate(igns, axis=1)[:, order]
        for ti in range(len(iou_thresholds)):
            keep = ~ig[ti]
            q = _interpolated_precision(tp[ti][keep], ~tp[ti][keep], n_pos)
            out[ti, k] = float(q.mean())
            if curves is not None:
                curves[ti, k] = q
    return out


def _mean_valid(a: np.ndarray) -> float:
    v = a[a > -1]
    return float(v.mean()) if v.size else -1.0


def evaluate_ap(dets: Sequence[DetectionSet], gts: Sequence[GroundTruthSet], iou_thresholds=IOU_THRESHOLDS,
                bucket_thresholds=(64, 256), max_dets: int = 100) -> EvalReport:
    """COCO-style AP summary; empty buckets give ``-1``."""
    iou_thresholds = tuple(iou_thresholds)
    full = ap_table(dets, gts, iou_thresholds, max_dets=max_dets)
    ranges = {"small": (0.0, bucket_thresholds[0]), "medium": (bucket_thresholds[0], bucket_thresholds[1]),
              "large": (bucket_thresholds[1], float("inf"))}
    by_bucket = {b: _mean_valid(ap_table(dets, gts, iou_thresholds, ranges[b], max_dets)) for b in BUCKETS}

    def at(t):
        if t not in iou_thresholds:
            return -1.0
        return _mean_valid(full[iou_thresholds.index(t)])

    counts = {b: 0 for b in BUCKETS}
    for g in gts:
        for a in g.objects:
            for b in BUCKETS:
                if ranges[b][0] <= a.area < ranges[b][1]:
                    counts[b] += 1
    per_class = {str(k): _mean_valid(full[:, k]) for k in range(full.shape[1])}
    return EvalReport(_mean_valid(full), at(0.5), at(0.75), by_bucket["small"], by_bucket["medium"],
                      by_bucket["large"], per_class, counts)


def detections_from_predictions(image_ids: Sequence[int], preds) -> list[DetectionSet]:
    return [DetectionSet(i, [(d.cls, d.box, d.score) for d in p]) for i, p in zip(image_ids, preds)]


def pr_curves(dets: Sequence[DetectionSet], gts: Sequence[GroundTruthSet], iou_threshold: float = 0.5) -> dict[int, np.ndarray]:
    """Per-class interpolated precision at the 101 recall points for one IoU threshold."""
    curves: dict = {}
    ap_table(dets, gts, (iou_threshold,), curves=curves)
    return {k: q for (_, k), q in curves.items()}
