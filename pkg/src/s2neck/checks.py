"""Named gradient checks on randomized small instances (used by the CLI and tests)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .detector import Detector, DetectorConfig, BackboneConfig, assign_targets, compute_loss
from .gradcheck import grad_check
from .neck import PyramidFeatures, S2Config, S2Module, build_general_view, fuse_s2, make_adapter
from .tensor import Rng, Tensor


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # random weights make the scalar sensitive to every output coordinate
    return ops.sum_all(ops.mul(y, Tensor(w)))


def _case(name: str, seed: int):
    g = np.random.default_rng(seed)
    t = lambda *shape: Tensor(g.normal(size=shape))
    if name == "conv2d":
        x, w, b = t(2, 3, 6, 5), t(4, 3, 3, 3), t(4)
        stride = int(g.integers(1, 3))
        probe = g.normal(size=ops.conv2d(x, w, b, stride, 1).shape)
        return (lambda: _weighted_sum(ops.conv2d(x, w, b, stride, 1), probe)), [x, w, b]
    if name == "conv3d":
        x, w, b = t(1, 2, 3, 5, 5), t(2, 2, 3, 3, 3), t(2)
        probe = g.normal(size=(1, 2, 3, 5, 5))
        return (lambda: _weighted_sum(ops.conv3d(x, w, b, 1, 1), probe)), [x, w, b]
    if name == "batch_norm":
        x, gamma, beta = t(2, 3, 4, 4), t(3), t(3)
        rm, rv = np.zeros(3), np.ones(3)
        probe = g.normal(size=x.shape)
        return (lambda: _weighted_sum(ops.batch_norm(x, gamma, beta, rm, rv), probe)), [x, gamma, beta]
    if name == "batch_norm3d":
        x, gamma, beta = t(2, 2, 3, 3, 3), t(2), t(2)
        rm, rv = np.zeros(2), np.ones(2)
        probe = g.normal(size=x.shape)
        return (lambda: _weighted_sum(ops.batch_norm(x, gamma, beta, rm, rv), probe)), [x, gamma, beta]
    if name == "leaky_relu":
        x = t(2, 3, 4, 4)
        probe = g.normal(size=x.shape)
        return (lambda: _weighted_sum(ops.leaky_relu(x, 0.1), probe)), [x]
    if name == "resize_bilinear":
        x = t(1, 2, 3, 5)
        oh, ow = int(g.integers(1, 9)), int(g.integers(1, 9))
        probe = g.normal(size=(1, 2, oh, ow))
        return (lambda: _weighted_sum(ops.resize_bilinear(x, oh, ow), probe)), [x]
    if name == "resize_nearest":
        x = t(1, 2, 3, 4)
        probe = g.normal(size=(1, 2, 6, 8))
        return (lambda: _weighted_sum(ops.resize_nearest(x, 6, 8), probe)), [x]
    if name == "stack_levels":
        maps = [t(1, 2, 3, 3) for _ in range(3)]
        probe = g.normal(size=(1, 2, 3, 3, 3))
        return (lambda: _weighted_sum(ops.stack_levels(maps), probe)), maps
    if name == "concat_channels":
        a, b = t(1, 2, 3, 3), t(1, 3, 3, 3)
        probe = g.normal(size=(1, 5, 3, 3))
        return (lambda: _weighted_sum(ops.concat_channels(a, b), probe)), [a, b]
    if name == "avgpool_levels":
        x = t(1, 2, 4, 3, 3)
        probe = g.normal(size=(1, 2, 3, 3))
        return (lambda: _weighted_sum(ops.avgpool_levels(x), probe)), [x]
    if name == "s2":
        return _s2_case(g, seed, pipeline=False)
    if name == "pipeline":
        return _s2_case(g, seed, pipeline=True)
    if name == "detector":
        return _detector_case(seed)
    raise KeyError(name)


def _s2_case(g, seed, pipeline: bool):
    c = 3
    levels = [Tensor(g.normal(size=(2, c, n, n))) for n in (4, 2, 1)]
    s2 = S2Module(c, S2Config(), Rng(seed))
    s2.bn.gamma.data[:] = g.uniform(0.5, 1.5, size=c)
    s2.bn.beta.data[:] = g.normal(size=c)
    adapter = make_adapter(c, Rng(seed).derive(1))
    probe = g.normal(size=(2, c if pipeline else c, 4, 4))

    def fn():
        view = build_general_view(PyramidFeatures(levels))
        out = s2(view)
        if pipeline:
            out = fuse_s2(levels[0], out, "two_stage", adapter)
        return _weighted_sum(out, probe)

    inputs = levels + [s2.conv.weight, s2.conv.bias, s2.bn.gamma, s2.bn.beta]
    if pipeline:
        inputs += [adapter.weight, adapter.bias]
    return fn, inputs


def tiny_detector_config(s2: bool = True) -> DetectorConfig:
    return DetectorConfig(backbone=BackboneConfig(4, (4, 4, 4, 4), (0, 0, 0, 0)), neck_width=4, head_width=4, s2=s2)


def _detector_case(seed: int):
    model = Detector(tiny_detector_config(), seed=seed)
    g = np.random.default_rng(seed)
    images = Tensor(g.uniform(size=(2, 3, 32, 32)))
    gts = [[(0, 2, 3, 5, 6), (1, 14, 12, 12, 10)], [(2, 8, 4, 20, 18)]]
    assignment = assign_targets(gts, 32)
    fn = lambda: compute_loss(model(images), assignment)[0]
    return fn, model.parameters()


CHECKS = ("conv2d", "conv3d", "batch_norm", "batch_norm3d", "leaky_relu", "resize_bilinear", "resize_nearest",
          "stack_levels", "concat_channels", "avgpool_levels", "s2", "pipeline", "detector")


def run_check(name: str, seed: int = 0, epsilon: float = 1e-5) -> float:
    """Max relative gradient error of one named check."""
    fn, inputs = _case(name, seed)
    return grad_check(fn, inputs, epsilon)
