"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest ``|analytic - numeric| / max(1, |analytic|)`` over input coordinates.

    ``fn`` is re-evaluated with each coordinate of each input perturbed by
    ``+-epsilon``; it must return a scalar tensor (sum-reduce non-scalar
    outputs before returning).  When ``max_coords`` is given, that many
    coordinates per input are sampled with ``rng`` instead of checking all.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = fn()
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        _require_finite(out.data)
        out.backward()
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

        worst = 0.0
        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            ana_flat = ana.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = _scalar(fn())
                flat[i] = orig - epsilon
                f_minus = _scalar(fn())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]))
                worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(inputs, saved):
            t.requires_grad = flag
            if not flag:
                t.grad = None


def _scalar(t: Tensor) -> float:
    _require_finite(t.data)
    return float(t.data.reshape(-1)[0])


def _require_finite(a: np.ndarray) -> None:
    if not np.isfinite(a).all():
        raise FloatingPointError("non-finite value during gradient check")
