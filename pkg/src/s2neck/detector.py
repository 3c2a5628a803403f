"""Tiny backbone, anchor-free center-cell head, target assignment, loss, decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .neck import (FPN, PAN, GeneralView, PyramidFeatures, S2Config, S2Module, attach_s2_to_levels,
                   build_general_view, fuse_s2, make_adapter)
from .nn import Conv2d, ConvBlock, Module
from .tensor import Rng, Tensor

STRIDES = (8, 16, 32)
LEVELS = (3, 4, 5)


@dataclass
class BackboneConfig:
    stem: int = 8
    widths: tuple[int, ...] = (16, 24, 32, 48)  # strides 4, 8, 16, 32
    extra_blocks: tuple[int, ...] = (0, 1, 1, 0)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.extra_blocks = tuple(self.extra_blocks)
        if len(self.widths) != 4 or len(self.extra_blocks) != 4:
            raise ValueError("backbone needs four stages (strides 4, 8, 16, 32)")


@dataclass
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    neck: str = "pan"
    neck_normalized: bool = False
    neck_width: int = 16
    head_width: int = 16
    num_classes: int = 3
    s2: bool = False
    s2_cfg: S2Config = field(default_factory=S2Config)
    s2_targets: tuple[int, ...] = (3,)
    fusion: str = "one_stage"
    obj_prior: float = 0.01

    def __post_init__(self):
        if self.neck not in ("fpn", "pan"):
            raise ValueError(f"unknown neck {self.neck!r}")
        if self.fusion not in ("one_stage", "two_stage"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        self.s2_targets = tuple(sorted(set(self.s2_targets)))


@dataclass
class HeadOutputs:
    objectness: list[Tensor]
    class_logits: list[Tensor]
    box: list[Tensor]
    strides: tuple[int, ...] = STRIDES


@dataclass
class TargetAssignment:
    """One entry per object (flattened over the batch)."""

    image_index: np.ndarray  # int, batch position
    level_index: np.ndarray  # int, 0 for P3
    row: np.ndarray
    col: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray  # N x 4 (x, y, w, h) pixels
    offsets: np.ndarray  # N x 4 (tx, ty, tw, th)

    def __len__(self) -> int:
        return len(self.labels)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: Rng):
        self.cfg = cfg
        self.stem = ConvBlock(3, cfg.stem, 3, rng.derive(0), stride=2)
        stages = []
        cin = cfg.stem
        for i, (w, extra) in enumerate(zip(cfg.widths, cfg.extra_blocks)):
            blocks = [ConvBlock(cin, w, 3, rng.derive(1, i, 0), stride=2)]
            blocks += [ConvBlock(w, w, 3, rng.derive(1, i, j + 1)) for j in range(extra)]
            stages.append(blocks)
            cin = w
        self.stages = [b for s in stages for b in s]
        self._stage_ends = np.cumsum([1 + e for e in cfg.extra_blocks]).tolist()

    @property
    def out_channels(self) -> tuple[int, int, int]:
        return tuple(self.cfg.widths[1:])

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected B x 3 x S x S image, got {image.shape}")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ValueError("input size must be divisible by 32")
        x = self.stem(image)
        feats = []
        for i, block in enumerate(self.stages):
            x = block(x)
            if i + 1 in self._stage_ends[1:]:
                feats.append(x)
        return tuple(feats)


def backbone_forward(image: Tensor, params: Backbone) -> tuple[Tensor, Tensor, Tensor]:
    return params(image)


class Detector(Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        self.cfg = cfg
        rng = Rng(seed)
        self.backbone = Backbone(cfg.backbone, rng.derive(1))
        neck_cls = PAN if cfg.neck == "pan" else FPN
        self.neck = neck_cls(self.backbone.out_channels, cfg.neck_width, rng.derive(2), cfg.neck_normalized)
        c = cfg.neck_width
        head_in = {lvl: c for lvl in LEVELS}
        self.s2 = None
        self.adapters = {}
        if cfg.s2:
            self.s2 = S2Module(c, cfg.s2_cfg, rng.derive(3))
            s2_out = cfg.s2_cfg.out_channels or c
            for lvl in cfg.s2_targets:
                if cfg.fusion == "one_stage":
                    head_in[lvl] = c + s2_out
                else:
                    self.adapters[str(lvl)] = make_adapter(c, rng.derive(4, lvl))
        k = cfg.num_classes
        self.head_conv = [ConvBlock(head_in[lvl], cfg.head_width, 3, rng.derive(5, lvl)) for lvl in LEVELS]
        self.head_pred = [Conv2d(cfg.head_width, 1 + k + 4, 1, rng.derive(6, lvl)) for lvl in LEVELS]
        prior = -math.log((1 - cfg.obj_prior) / cfg.obj_prior)
        for pred in self.head_pred:
            pred.bias.data[0] = prior

    def pyramid(self, images: Tensor) -> PyramidFeatures:
        feats = self.backbone(images)
        pyr = self.neck(feats)
        if self.s2 is None:
            return pyr
        view = build_general_view(pyr, self.cfg.s2_cfg.basis_level, self.cfg.s2_cfg.resize_mode)
        s2 = self.s2(view)
        if self.cfg.fusion == "one_stage":
            return attach_s2_to_levels(pyr, s2, self.cfg.s2_targets, self.cfg.s2_cfg.resize_mode)
        levels = []
        for lvl, p in zip(pyr.level_ids, pyr.levels):
            if lvl in self.cfg.s2_targets:
                s = ops.resize(s2, p.shape[2], p.shape[3], self.cfg.s2_cfg.resize_mode)
                p = fuse_s2(p, s, "two_stage", self.adapters[str(lvl)])
            levels.append(p)
        return PyramidFeatures(levels)

    def forward(self, images: Tensor) -> HeadOutputs:
        pyr = self.pyramid(images)
        k = self.cfg.num_classes
        obj, cls, box = [], [], []
        for conv, pred, p in zip(self.head_conv, self.head_pred, pyr.levels):
            out = pred(conv(p))
            obj.append(_channels(out, 0, 1))
            cls.append(_channels(out, 1, 1 + k))
            box.append(_channels(out, 1 + k, 5 + k))
        return HeadOutputs(obj, cls, box)


def _channels(x: Tensor, start: int, stop: int) -> Tensor:
    return ops.take(x, (slice(None), slice(start, stop)))


# -- targets --------------------------------------------------------------

def level_for_size(w: float, h: float, thresholds: Sequence[float] = (8, 16)) -> int:
    """Level index (0 = P3) by ``sqrt(area)``; intervals are lower-bound inclusive."""
    if w <= 0 or h <= 0:
        raise ValueError("degenerate box")
    side = math.sqrt(w * h)
    for i, t in enumerate(thresholds):
        if side < t:
            return i
    return len(thresholds)


def assign_targets(gts: Sequence, image_size: int, thresholds: Sequence[float] = (8, 16),
                   strides: Sequence[int] = STRIDES) -> TargetAssignment:
    """Assign every box of every image to one level and its center cell.

    ``gts`` is a sequence (one per batch image) of ``GroundTruthSet`` or of
    lists of ``(class, x, y, w, h)``.
    """
    if list(thresholds) != sorted(thresholds) or len(thresholds) != len(strides) - 1:
        raise ValueError("thresholds must ascend and number one fewer than the levels")
    cols = {k: [] for k in ("img", "lvl", "row", "col", "lab", "box", "off")}
    for b, gt in enumerate(gts):
        objects = gt.objects if hasattr(gt, "objects") else gt
        for obj in objects:
            cls, x, y, w, h = _unpack(obj)
            if w <= 0 or h <= 0:
                raise ValueError(f"degenerate box {obj}")
            lvl = level_for_size(w, h, thresholds)
            s = strides[lvl]
            n = image_size // s
            cx, cy = x + w / 2.0, y + h / 2.0
            c = min(int(cx // s), n - 1)
            r = min(int(cy // s), n - 1)
            cols["img"].append(b)
            cols["lvl"].append(lvl)
            cols["row"].append(r)
            cols["col"].append(c)
            cols["lab"].append(cls)
            cols["box"].append((x, y, w, h))
            cols["off"].append((cx / s - c - 0.5, cy / s - r - 0.5, math.log(w / s), math.log(h / s)))
    as_int = lambda v: np.asarray(v, dtype=np.int64)
    return TargetAssignment(
        as_int(cols["img"]), as_int(cols["lvl"]), as_int(cols["row"]), as_int(cols["col"]),
        as_int(cols["lab"]), np.asarray(cols["box"], dtype=np.float64).reshape(-1, 4),
        np.asarray(cols["off"], dtype=np.float64).reshape(-1, 4),
    )


def _unpack(obj):
    if hasattr(obj, "box"):
        return (obj.cls, *obj.box)
    return tuple(obj)


# -- loss -------------------------------------------------------------------

@dataclass
class LossWeights:
    obj: float = 1.0
    cls: float = 1.0
    box: float = 1.0
    obj_pos_weight: float = 1.0


def decode_cells(box: Tensor, rows, cols, stride: int):
    """Differentiable decode of gathered box channels into ``(x1, y1, x2, y2)`` tensors."""
    tx, ty, tw, th = (ops.take(box, (slice(None), i)) for i in range(4))
    cx = (tx + (cols + 0.5)) * stride
    cy = (ty + (rows + 0.5)) * stride
    w = ops.exp(tw) * stride
    h = ops.exp(th) * stride
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def iou_xyxy(a, b):
    ix1, iy1 = ops.maximum(a[0], b[0]), ops.maximum(a[1], b[1])
    ix2, iy2 = ops.minimum(a[2], b[2]), ops.minimum(a[3], b[3])
    iw = ops.maximum(ix2 - ix1, 0.0)
    ih = ops.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def compute_loss(outputs: HeadOutputs, assignment: TargetAssignment,
                 weights: LossWeights | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of objectness BCE (mean over all cells), class CE and ``1 - IoU`` (mean over positives)."""
    weights = weights or LossWeights()
    obj_terms, n_cells = [], 0
    cls_terms, box_terms = [], []
    for li, (obj, cls, box, stride) in enumerate(zip(outputs.objectness, outputs.class_logits,
                                                     outputs.box, outputs.strides)):
        sel = assignment.level_index == li
        target = np.zeros(obj.shape)
        b, r, c = assignment.image_index[sel], assignment.row[sel], assignment.col[sel]
        target[b, 0, r, c] = 1.0
        bce = ops.bce_with_logits(obj, target)
        if weights.obj_pos_weight != 1.0:
            bce = bce * (1.0 + (weights.obj_pos_weight - 1.0) * target)
        obj_terms.append(ops.sum_all(bce))
        n_cells += obj.size
        if sel.any():
            logits = ops.take(cls, (b, slice(None), r, c))
            cls_terms.append(ops.cross_entropy_rows(logits, assignment.labels[sel]))
            gathered = ops.take(box, (b, slice(None), r, c))
            pred = decode_cells(gathered, Tensor(r.astype(float)), Tensor(c.astype(float)), stride)
            tb = assignment.boxes[sel]
            tgt = tuple(Tensor(v) for v in (tb[:, 0], tb[:, 1], tb[:, 0] + tb[:, 2], tb[:, 1] + tb[:, 3]))
            box_terms.append(1.0 - iou_xyxy(pred, tgt))
    loss_obj = _sum(obj_terms) / float(n_cells)
    n_pos = len(assignment)
    if n_pos:
        loss_cls = _sum([ops.sum_all(t) for t in cls_terms]) / float(n_pos)
        loss_box = _sum([ops.sum_all(t) for t in box_terms]) / float(n_pos)
    else:
        loss_cls = loss_box = Tensor(0.0)
    total = loss_obj * weights.obj + loss_cls * weights.cls + loss_box * weights.box
    parts = {
        "total": total.item(), "obj": loss_obj.item(), "cls": loss_cls.item(), "box": loss_box.item(),
        "num_pos": n_pos, "no_positives": n_pos == 0,
    }
    return total, parts


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# -- inference ----------------------------------------------------------------

@dataclass
class Detection:
    cls: int
    box: tuple[float, float, float, float]  # x, y, w, h
    score: float


def decode_outputs(outputs: HeadOutputs, image_index: int, score_threshold: float):
    """All cells of one image scoring above the threshold as ``(cls, x, y, w, h, score)`` rows."""
    rows = []
    for obj, cls, box, s in zip(outputs.objectness, outputs.class_logits, outputs.box, outputs.strides):
        o = obj.data[image_index, 0]
        z = cls.data[image_index]
        p = np.exp(z - z.max(axis=0))
        p /= p.sum(axis=0)
        label = p.argmax(axis=0)
        score = 1.0 / (1.0 + np.exp(-o)) * p.max(axis=0)
        r, c = np.nonzero(score >= score_threshold)
        if not len(r):
            continue
        t = box.data[image_index][:, r, c]
        cx = (c + 0.5 + t[0]) * s
        cy = (r + 0.5 + t[1]) * s
        w = np.exp(t[2]) * s
        h = np.exp(t[3]) * s
        rows.append(np.stack([label[r, c], cx - w / 2, cy - h / 2, w, h, score[r, c]], axis=1))
    return np.concatenate(rows) if rows else np.zeros((0, 6))


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between ``x, y, w, h`` rows of ``a`` and ``b``."""
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return inter / union


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = box_iou_matrix(boxes, boxes) if len(boxes) else None
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return keep


def predict(model: Detector, images: Tensor, score_threshold: float = 0.05, nms_iou: float = 0.5,
            max_detections: int = 100) -> list[list[Detection]]:
    """Decode, per-class greedy NMS, keep the top ``max_detections`` per image."""
    from .tensor import no_grad

    was_training = model.training
    model.eval()
    with no_grad():
        outputs = model(images)
    model.train(was_training)
    results = []
    for i in range(images.shape[0]):
        rows = decode_outputs(outputs, i, score_threshold)
        dets = []
        for k in np.unique(rows[:, 0]).astype(int) if len(rows) else []:
            sub = rows[rows[:, 0] == k]
            for j in nms(sub[:, 1:5], sub[:, 5], nms_iou):
                dets.append(Detection(int(k), tuple(float(v) for v in sub[j, 1:5]), float(sub[j, 5])))
        dets.sort(key=lambda d: -d.score)
        results.append(dets[:max_detections])
    return results
