"""Differentiable operators over :class:`~s2neck.tensor.Tensor`.

Every function returns a new tensor and, when any input requires
gradients, registers a backward closure returning one gradient per parent.
Convolutions are cross-correlations (no kernel flip) with zero padding.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _same_layout(a: Tensor, b: Tensor, out_shape):
    if a.shape == tuple(out_shape):
        return a.layout
    if b.shape == tuple(out_shape):
        return b.layout
    return None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        _same_layout(a, b, out.shape),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        _same_layout(a, b, out.shape),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        _same_layout(a, b, out.shape),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        _same_layout(a, b, out.shape),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), x.layout)


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,), x.layout)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), x.layout)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data)
    pick_a = a.data >= b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        _same_layout(a, b, out.shape),
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.data, b.data)
    pick_a = a.data <= b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        _same_layout(a, b, out.shape),
    )


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """``x`` where ``x >= 0`` and ``slope * x`` elsewhere."""
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return Tensor.from_op(out, (x,), lambda g: (np.where(pos, g, slope * g),), x.layout)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(x.data * pos, (x,), lambda g: (g * pos,), x.layout)


# -- reductions and shape ---------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor.from_op(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor.from_op(np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def take(x: Tensor, index) -> Tensor:
    """Advanced-index gather ``x[index]``; the backward scatter-adds."""
    out = x.data[index]
    shape = x.shape

    basic = all(isinstance(i, (slice, int)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(out, (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor.from_op(
        out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), tensors[0].layout)


# -- convolution -------------------------------------------------------------

def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(u) for u in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def _convnd(x: Tensor, w: Tensor, b: Tensor | None, stride, padding, nsp: int) -> Tensor:
    if x.ndim != nsp + 2 or w.ndim != nsp + 2:
        raise ValueError(f"conv{nsp}d expects {nsp + 2}-axis input and weight, got {x.shape} and {w.shape}")
    cout, cin = w.shape[:2]
    if x.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {cin}")
    stride = _tuple(stride, nsp)
    padding = _tuple(padding, nsp)
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise ValueError("stride must be >= 1 and padding >= 0")
    ksize = w.shape[2:]
    in_sp = x.shape[2:]
    padded = [n + 2 * p for n, p in zip(in_sp, padding)]
    if any(k > n for k, n in zip(ksize, padded)):
        raise ValueError(f"kernel {ksize} larger than padded input {tuple(padded)}")
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(padded, ksize, stride))
    if any(o < 1 for o in out_sp):
        raise ValueError(f"non-positive output size {out_sp}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")

    sp_axes = tuple(range(2, 2 + nsp))
    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in padding)) if any(padding) else x.data
    bsz = x.shape[0]
    taps = list(np.ndindex(*ksize))
    windows = [tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sp)) for off in taps]
    # im2col buffer laid out (Cin, *k, B, *out) so each tap is one strided block copy
    xt = np.moveaxis(xp, 1, 0)
    cols = np.empty((cin,) + tuple(ksize) + (bsz,) + out_sp)
    for off, win in zip(taps, windows):
        cols[(slice(None),) + off] = xt[(slice(None), slice(None)) + win]
    cols2 = cols.reshape(cin * int(np.prod(ksize)), -1)
    wmat = w.data.reshape(cout, -1)
    out = (wmat @ cols2).reshape((cout, bsz) + out_sp)
    if b is not None:
        out += b.data.reshape((cout, 1) + (1,) * nsp)
    out = np.ascontiguousarray(np.moveaxis(out, 0, 1))

    def backward(g):
        gw = gx = gb = None
        gt = np.ascontiguousarray(np.moveaxis(g, 1, 0)).reshape(cout, -1)
        if w.requires_grad:
            gw = (gt @ cols2.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gt.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(cols.shape)
            gxt = np.zeros(xt.shape)
            for off, win in zip(taps, windows):
                gxt[(slice(None), slice(None)) + win] += gcols[(slice(None),) + off]
            crop = tuple(slice(p, p + n) for p, n in zip(padding, in_sp))
            gx = np.moveaxis(gxt, 0, 1)[(slice(None), slice(None)) + crop]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, backward, x.layout)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2D cross-correlation of ``B x Cin x H x W`` input with ``Cout x Cin x kh x kw`` weight."""
    return _convnd(x, weight, bias, stride, padding, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation over (level, height, width) of a ``B x Cin x L x H x W`` input."""
    return _convnd(x, weight, bias, stride, padding, 3)


# -- normalization -----------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode the batch statistics are used and the running buffers
    are updated in place as ``(1 - momentum) * old + momentum * new`` (the
    running variance takes the unbiased estimate).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.ndim < 2 or x.size == 0:
        raise ValueError("batch_norm needs a non-empty input with a channel axis")
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    n = x.size // c
    if training:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.copy()
        var = running_var.copy()
        centered = x.data - mean.reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, x.layout)


# -- resampling --------------------------------------------------------------

def _bilinear_taps(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = np.where(i1 > i0, src - i0, 0.0)
    return i0, i1, lam


def _taps_matrix(n_in, i0, i1, lam) -> np.ndarray:
    m = np.zeros((len(i0), n_in))
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def _lerp_axis(a: np.ndarray, axis: int, i0, i1, lam) -> np.ndarray:
    a0 = np.take(a, i0, axis=axis)
    a1 = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = len(lam)
    # a0 + lam * (a1 - a0) keeps constants exact
    return a0 + lam.reshape(shape) * (a1 - a0)


def _apply_matrix_t(g: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1) @ m
    return np.moveaxis(g, -1, axis)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes with half-pixel centers (no corner alignment)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,), x.layout)
    ty = _bilinear_taps(h, out_h)
    tx = _bilinear_taps(w, out_w)
    ax_h, ax_w = x.ndim - 2, x.ndim - 1
    out = _lerp_axis(_lerp_axis(x.data, ax_h, *ty), ax_w, *tx)

    def backward(g):
        my = _taps_matrix(h, *ty)
        mx = _taps_matrix(w, *tx)
        return (_apply_matrix_t(_apply_matrix_t(g, mx, ax_w), my, ax_h),)

    return Tensor.from_op(out, (x,), backward, x.layout)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize of the last two axes (source = floor((dst + 0.5) * in / out))."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    h, w = x.shape[-2:]
    iy, ix = _nearest_index(h, out_h), _nearest_index(w, out_w)
    out = x.data[..., iy, :][..., ix]
    ax_h, ax_w = x.ndim - 2, x.ndim - 1

    def backward(g):
        my = _taps_matrix(h, iy, iy, np.zeros(out_h))
        mx = _taps_matrix(w, ix, ix, np.zeros(out_w))
        return (_apply_matrix_t(_apply_matrix_t(g, mx, ax_w), my, ax_h),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward, x.layout)


def resize(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    if mode == "bilinear":
        return resize_bilinear(x, out_h, out_w)
    if mode == "nearest":
        return resize_nearest(x, out_h, out_w)
    raise ValueError(f"unknown resize mode {mode!r}")


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` average pooling (spatial dims must divide by ``k``)."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError("spatial dims must be divisible by the pool size")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return Tensor.from_op(out, (x,), backward, x.layout)


# -- pyramid plumbing -------------------------------------------------------

def stack_levels(maps: Sequence[Tensor]) -> Tensor:
    """Stack ``B x C x H x W`` maps on a new level axis: ``B x C x L x H x W``."""
    if not maps:
        raise ValueError("need at least one map")
    ref = maps[0].shape
    if len(ref) != 4:
        raise ValueError(f"maps must be B x C x H x W, got {ref}")
    for m in maps[1:]:
        if m.shape != ref:
            raise ValueError(f"shape mismatch across levels: {ref} vs {m.shape}")
    out = np.stack([m.data for m in maps], axis=2)
    n = len(maps)
    return Tensor.from_op(
        out, tuple(maps), lambda g: tuple(g[:, :, i] for i in range(n)),
        ("batch", "channel", "level", "height", "width"),
    )


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate on axis 1 with ``a``'s channels first."""
    if a.ndim != b.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ValueError(f"non-channel axes differ: {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def avgpool_levels(x: Tensor) -> Tensor:
    """Mean over the whole level axis of ``B x C x L x H x W``; the axis is removed."""
    if x.ndim != 5:
        raise ValueError(f"expected B x C x L x H x W, got {x.shape}")
    n = x.shape[2]
    if n < 1:
        raise ValueError("empty level axis")
    # incremental mean: identical levels reproduce the level exactly
    mean = x.data[:, :, 0].copy()
    for k in range(1, n):
        mean += (x.data[:, :, k] - mean) / (k + 1)

    def backward(g):
        return (np.broadcast_to((g / n)[:, :, None], x.shape),)

    return Tensor.from_op(mean, (x,), backward, ("batch", "channel", "height", "width"))


# -- fused losses ------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable form)."""
    z = logits.data
    out = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return Tensor.from_op(out, (logits,), lambda g: (g * (p - targets),), logits.layout)


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row softmax cross-entropy of an ``N x K`` logit matrix."""
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(len(labels))
    out = lse - z[rows, labels]

    def backward(g):
        soft = np.exp(z - lse[:, None])
        soft[rows, labels] -= 1.0
        return (soft * g[:, None],)

    return Tensor.from_op(out, (logits,), backward)

