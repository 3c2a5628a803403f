"""Gaussian scale-space: sampled 2D Gaussian kernels and blurred image stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class ScaleSpace:
    base: Tensor
    sigmas: list[float]
    slices: list[Tensor]

    def __post_init__(self):
        if len(self.slices) != len(self.sigmas):
            raise ValueError("one slice per sigma")
        if any(b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError("sigmas must be strictly increasing")
        for s in self.slices:
            if s.shape[-2:] != self.base.shape[-2:]:
                raise ValueError("slices must keep the base resolution")


def default_radius(sigma: float) -> int:
    return max(1, math.ceil(3.0 * sigma))


def gaussian_kernel(sigma: float, radius: int | None = None, normalize: bool = True) -> Tensor:
    """Sample ``exp(-(x^2 + y^2) / 2 sigma^2) / (2 pi sigma^2)`` on the integer grid.

    With ``normalize`` (the default) the samples are rescaled to sum to one,
    which compensates for truncation at ``radius``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = default_radius(sigma) if radius is None else int(radius)
    if r < 0:
        raise ValueError("radius must be non-negative")
    x = np.arange(-r, r + 1, dtype=np.float64)
    sq = x[:, None] ** 2 + x[None, :] ** 2
    g = np.exp(-sq / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)
    if normalize:
        g = g / g.sum()
    return Tensor(g)


def _as_image4(image: Tensor) -> Tensor:
    if image.ndim == 2:
        return Tensor(image.data[None, None])
    if image.ndim == 4 and image.shape[:2] == (1, 1):
        return image
    raise ValueError(f"expected H x W or 1 x 1 x H x W image, got {image.shape}")


def gaussian_blur(image: Tensor, sigma: float, radius: int | None = None) -> Tensor:
    """Convolve with the normalized sampled Gaussian, mirror-padding the border.

    The padding repeats the edge sample (half-sample symmetric), which makes
    the operator doubly stochastic, so the image mean is preserved.  The
    output has the input's shape.
    """
    k = gaussian_kernel(sigma, radius)
    r = k.shape[0] // 2
    img = _as_image4(image)
    h, w = img.shape[-2:]
    if r >= min(h, w):
        raise ValueError("kernel radius must be smaller than the image")
    padded = Tensor(np.pad(img.data, ((0, 0), (0, 0), (r, r), (r, r)), mode="symmetric"))
    # symmetric kernel: cross-correlation equals convolution
    out = ops.conv2d(padded, Tensor(k.data[None, None]))
    return Tensor(out.data.reshape(image.shape), image.layout)


def build_scale_space(image: Tensor, sigmas: Sequence[float]) -> ScaleSpace:
    if not sigmas:
        raise ValueError("need at least one sigma")
    sigmas = [float(s) for s in sigmas]
    return ScaleSpace(image, sigmas, [gaussian_blur(image, s) for s in sigmas])


def total_variation(image: Tensor) -> float:
    a = image.data.reshape(image.shape[-2:])
    return float(np.abs(np.diff(a, axis=0)).sum() + np.abs(np.diff(a, axis=1)).sum())
