"""Pyramid necks (FPN, PAN) and the scale-sequence (S2) feature.

The S2 feature treats the pyramid's level axis like a time axis: every
level is resized to the basis level's resolution, the maps are stacked
into a ``B x C x L x H x W`` general view, and one 3D convolution block
(conv3d, 3D batch norm, leaky ReLU) followed by a mean over levels maps the
view back to a ``B x C x H x W`` feature aligned with the basis level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .nn import BatchNorm, Conv2d, Conv3d, ConvBlock, Module
from .tensor import Rng, Tensor


@dataclass
class PyramidFeatures:
    """Levels ``P_first .. P_L`` with ``P_first`` the highest resolution."""

    levels: list[Tensor]
    first_level: int = 3

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        c = self.levels[0].shape[1]
        for lo, hi in zip(self.levels, self.levels[1:]):
            if hi.shape[2] != math.ceil(lo.shape[2] / 2) or hi.shape[3] != math.ceil(lo.shape[3] / 2):
                raise ValueError(f"level sizes must halve: {lo.shape} -> {hi.shape}")
        self.uniform_width = all(t.shape[1] == c for t in self.levels)

    @property
    def neck_width(self) -> int:
        return self.levels[0].shape[1]

    @property
    def level_ids(self) -> list[int]:
        return list(range(self.first_level, self.first_level + len(self.levels)))

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level - self.first_level]

    def __len__(self) -> int:
        return len(self.levels)


@dataclass
class GeneralView:
    tensor: Tensor
    basis_level: int = 3


@dataclass
class S2Config:
    kernel: tuple[int, int, int] = (3, 3, 3)
    out_channels: int | None = None  # None: neck width
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    leaky_slope: float = 0.1
    two_stage_adapter: bool = False
    basis_level: int = 3
    resize_mode: str = "bilinear"

    def __post_init__(self):
        self.kernel = tuple(int(k) for k in self.kernel)
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel dims must be odd and positive, got {self.kernel}")
        if self.out_channels is not None and self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")


def _check_backbone(feats: Sequence[Tensor]) -> None:
    if not feats:
        raise ValueError("no backbone features")
    for lo, hi in zip(feats, feats[1:]):
        if hi.shape[2:] != (math.ceil(lo.shape[2] / 2), math.ceil(lo.shape[3] / 2)):
            raise ValueError(f"backbone strides must double per level: {lo.shape} -> {hi.shape}")


def _smoothing(width: int, rng: Rng, normalized: bool) -> Module:
    return ConvBlock(width, width, 3, rng) if normalized else Conv2d(width, width, 3, rng)


class FPN(Module):
    """Top-down pyramid.

    ``M_top = lateral(C_top)``; ``M_i = lateral(C_i) + up2(topdown_i(M_{i+1}))``;
    ``P_i = smooth_i(M_i)``.  Laterals and top-down projections are 1x1 convs,
    the smoothing convs 3x3; upsampling is nearest neighbour.  With
    ``normalized`` the smoothing convs are conv + batch norm + leaky ReLU
    blocks instead of plain biased convs.
    """

    def __init__(self, in_channels: Sequence[int], width: int, rng: Rng, normalized: bool = False):
        n = len(in_channels)
        self.width = width
        self.lateral = [Conv2d(c, width, 1, rng.derive(0, i)) for i, c in enumerate(in_channels)]
        self.topdown = [Conv2d(width, width, 1, rng.derive(1, i)) for i in range(n - 1)]
        self.smooth = [_smoothing(width, rng.derive(2, i), normalized) for i in range(n)]

    def forward(self, feats: Sequence[Tensor]) -> PyramidFeatures:
        _check_backbone(feats)
        if len(feats) != len(self.lateral):
            raise ValueError(f"expected {len(self.lateral)} backbone features, got {len(feats)}")
        merged = [None] * len(feats)
        merged[-1] = self.lateral[-1](feats[-1])
        for i in range(len(feats) - 2, -1, -1):
            h, w = feats[i].shape[2:]
            top = ops.resize_nearest(self.topdown[i](merged[i + 1]), h, w)
            merged[i] = ops.add(self.lateral[i](feats[i]), top)
        return PyramidFeatures([s(m) for s, m in zip(self.smooth, merged)])


class PAN(Module):
    """FPN followed by a bottom-up path.

    ``N_first = P_first``; ``N_{i+1} = smooth_{i+1}(P_{i+1} + down_i(N_i))``
    where ``down_i`` is a stride-2 3x3 conv.
    """

    def __init__(self, in_channels: Sequence[int], width: int, rng: Rng, normalized: bool = False):
        n = len(in_channels)
        self.fpn = FPN(in_channels, width, rng.derive(0), normalized)
        self.down = [Conv2d(width, width, 3, rng.derive(1, i), stride=2) for i in range(n - 1)]
        self.smooth = [_smoothing(width, rng.derive(2, i), normalized) for i in range(n - 1)]

    def forward(self, feats: Sequence[Tensor]) -> PyramidFeatures:
        p = self.fpn(feats).levels
        out = [p[0]]
        for i in range(len(p) - 1):
            out.append(self.smooth[i](ops.add(p[i + 1], self.down[i](out[i]))))
        return PyramidFeatures(out)


def build_fpn(backbone_feats: Sequence[Tensor], neck_width: int, neck: FPN | None = None,
              rng: Rng | None = None) -> PyramidFeatures:
    _check_backbone(backbone_feats)
    neck = neck or FPN([f.shape[1] for f in backbone_feats], neck_width, rng or Rng(0))
    return neck(backbone_feats)


def build_pan(backbone_feats: Sequence[Tensor], neck_width: int, neck: PAN | None = None,
              rng: Rng | None = None) -> PyramidFeatures:
    _check_backbone(backbone_feats)
    neck = neck or PAN([f.shape[1] for f in backbone_feats], neck_width, rng or Rng(0))
    return neck(backbone_feats)


def build_general_view(pyramid: PyramidFeatures, basis_level: int = 3, mode: str = "bilinear") -> GeneralView:
    """Resize every level to the basis level's size and stack in ascending level order."""
    if pyramid is None or len(pyramid) == 0:
        raise ValueError("empty pyramid")
    if basis_level not in pyramid.level_ids:
        raise ValueError(f"basis level {basis_level} not in pyramid levels {pyramid.level_ids}")
    h, w = pyramid[basis_level].shape[2:]
    maps = [ops.resize(p, h, w, mode) for p in pyramid.levels]
    return GeneralView(ops.stack_levels(maps), basis_level)


class S2Module(Module):
    """One 3D convolution block plus level-axis average pooling."""

    def __init__(self, in_channels: int, cfg: S2Config, rng: Rng):
        self.cfg = cfg
        out = cfg.out_channels or in_channels
        self.conv = Conv3d(in_channels, out, cfg.kernel, rng)
        self.bn = BatchNorm(out, cfg.bn_eps, cfg.bn_momentum)

    def forward(self, view: GeneralView | Tensor) -> Tensor:
        x = view.tensor if isinstance(view, GeneralView) else view
        if x.ndim != 5 or x.shape[1] != self.conv.weight.shape[1]:
            raise ValueError(f"general view {x.shape} does not match S2 input channels "
                             f"{self.conv.weight.shape[1]}")
        y = ops.leaky_relu(self.bn(self.conv(x)), self.cfg.leaky_slope)
        return ops.avgpool_levels(y)


def apply_s2_module(view: GeneralView, cfg: S2Config, params: S2Module) -> Tensor:
    if params.cfg.kernel != cfg.kernel:
        raise ValueError("config kernel does not match module parameters")
    return params(view)


def fuse_s2(p3: Tensor, s2: Tensor, mode: str = "one_stage", adapter: Conv2d | None = None) -> Tensor:
    """Concatenate ``p3`` (first) with the S2 feature; ``two_stage`` adds a 1x1 conv back to C."""
    if p3.shape[0] != s2.shape[0] or p3.shape[2:] != s2.shape[2:]:
        raise ValueError(f"spatial mismatch: {p3.shape} vs {s2.shape}")
    cat = ops.concat_channels(p3, s2)
    if mode == "one_stage":
        return cat
    if mode == "two_stage":
        if adapter is None:
            raise ValueError("two_stage fusion needs a 1x1 adapter")
        return adapter(cat)
    raise ValueError(f"unknown fusion mode {mode!r}")


def make_adapter(width: int, rng: Rng) -> Conv2d:
    return Conv2d(2 * width, width, 1, rng)


def attach_s2_to_levels(pyramid: PyramidFeatures, s2: Tensor, targets: Iterable[int] = (3,),
                        mode: str = "bilinear") -> PyramidFeatures:
    """Concatenate the (resized) S2 feature onto each target level."""
    targets = set(targets)
    if not targets:
        raise ValueError("empty target set")
    unknown = targets - set(pyramid.level_ids)
    if unknown:
        raise ValueError(f"targets {sorted(unknown)} not in pyramid")
    out = []
    for level, p in zip(pyramid.level_ids, pyramid.levels):
        if level in targets:
            out.append(ops.concat_channels(p, ops.resize(s2, p.shape[2], p.shape[3], mode)))
        else:
            out.append(p)
    return PyramidFeatures(out, pyramid.first_level)


def s2_param_count(in_channels: int, out_channels: int, kernel: Sequence[int] = (3, 3, 3)) -> int:
    """Closed-form parameter count of one S2 block: conv weights + bias + BN affine."""
    return int(np.prod(kernel)) * in_channels * out_channels + out_channels + 2 * out_channels
