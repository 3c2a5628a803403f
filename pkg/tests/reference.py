"""Slow, obviously-correct reference implementations used as test oracles.

Written with explicit loops over plain Python / numpy scalars so that they
share no code path with the vectorized kernels under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.zeros((B, Ci, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(Ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def conv3d_loops(x, w, b, stride=1, padding=0):
    B, Ci, L, H, W = x.shape
    Co, _, kl, kh, kw = w.shape
    p = padding
    xp = np.zeros((B, Ci, L + 2 * p, H + 2 * p, W + 2 * p))
    xp[:, :, p:p + L, p:p + H, p:p + W] = x
    Lo = (L + 2 * p - kl) // stride + 1
    Ho = (H + 2 * p - kh) // stride + 1
    Wo = (W + 2 * p - kw) // stride + 1
    out = np.zeros((B, Co, Lo, Ho, Wo))
    for n, o, a, i, j in itertools.product(range(B), range(Co), range(Lo), range(Ho), range(Wo)):
        acc = 0.0 if b is None else float(b[o])
        for c, t, u, v in itertools.product(range(Ci), range(kl), range(kh), range(kw)):
            acc += xp[n, c, a * stride + t, i * stride + u, j * stride + v] * w[o, c, t, u, v]
        out[n, o, a, i, j] = acc
    return out


def batch_norm_two_pass(x, gamma, beta, eps):
    """Training-mode batch norm with explicit per-channel two-pass statistics."""
    out = np.empty_like(x)
    C = x.shape[1]
    for c in range(C):
        vals = np.moveaxis(x, 1, 0)[c].ravel()
        n = len(vals)
        mean = sum(float(v) for v in vals) / n
        var = sum((float(v) - mean) ** 2 for v in vals) / n
        sl = (slice(None), c)
        out[sl] = (x[sl] - mean) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def bilinear_point(img, sy, sx):
    """Sample a 2-D array at continuous source coordinates with edge clamping."""
    H, W = img.shape
    sy = min(max(sy, 0.0), H - 1)
    sx = min(max(sx, 0.0), W - 1)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    fy, fx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear_loops(x, oh, ow):
    B, C, H, W = x.shape
    out = np.zeros((B, C, oh, ow))
    for n, c, i, j in itertools.product(range(B), range(C), range(oh), range(ow)):
        sy = (i + 0.5) * H / oh - 0.5
        sx = (j + 0.5) * W / ow - 0.5
        out[n, c, i, j] = bilinear_point(x[n, c], sy, sx)
    return out


def avgpool_levels_loops(x):
    B, C, L, H, W = x.shape
    out = np.zeros((B, C, H, W))
    for n, c, i, j in itertools.product(range(B), range(C), range(H), range(W)):
        out[n, c, i, j] = sum(x[n, c, l, i, j] for l in range(L)) / L
    return out


# -- average precision ---------------------------------------------------------

def iou(a, b):
    iw = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _pr_to_ap(matches, n_pos):
    """101-point interpolated AP from a score-ordered list of True/False."""
    tp = fp = 0
    points = []
    for m in matches:
        tp += m
        fp += not m
        points.append((tp / n_pos, tp / (tp + fp)))
    total = 0.0
    # the recall grid is part of the protocol, including its float rounding
    for r in np.linspace(0.0, 1.0, 101):
        best = 0.0
        for rc, pr in points:
            if rc >= r and pr > best:
                best = pr
        total += best
    return total / 101


def reference_ap(dets, gts, threshold, area_range=(0.0, math.inf)):
    """Mean AP over classes for one IoU threshold and GT area range.

    ``dets``: {image_id: [(cls, box, score)]}; ``gts``: {image_id: [(cls, box)]}.
    Detections are processed image by image in descending score order; each
    takes the best-IoU free ground truth at or above the threshold, preferring
    in-range ground truth.  Matches to out-of-range ground truth, and unmatched
    out-of-range detections, are dropped.  Returns -1 when no class has
    in-range ground truth.
    """
    classes = sorted({g[0] for v in gts.values() for g in v} | {d[0] for v in dets.values() for d in v})
    aps = []
    for k in classes:
        n_pos = 0
        scored = []
        for image_id in set(gts) | set(dets):
            g = [box for c, box in gts.get(image_id, []) if c == k]
            inside = [area_range[0] <= b[2] * b[3] < area_range[1] for b in g]
            n_pos += sum(inside)
            d = sorted([(s, box) for c, box, s in dets.get(image_id, []) if c == k], key=lambda t: -t[0])
            taken = [False] * len(g)
            for s, box in d:
                best_j, best_iou = -1, min(threshold, 1 - 1e-10)
                for want_inside in (True, False):
                    for j, gb in enumerate(g):
                        if taken[j] or inside[j] != want_inside:
                            continue
                        v = iou(box, gb)
                        if v >= best_iou:
                            best_j, best_iou = j, v
                    if best_j >= 0:
                        break
                if best_j >= 0:
                    taken[best_j] = True
                    if inside[best_j]:
                        scored.append((s, True))
                    continue
                area = box[2] * box[3]
                if area_range[0] <= area < area_range[1]:
                    scored.append((s, False))
        if n_pos == 0:
            continue
        scored.sort(key=lambda t: -t[0])
        aps.append(_pr_to_ap([m for _, m in scored], n_pos))
    return sum(aps) / len(aps) if aps else -1.0
