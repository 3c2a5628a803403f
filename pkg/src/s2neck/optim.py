"""Stochastic gradient descent with classical momentum."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Parameter


class SGD:
    """SGD keeping one momentum buffer per parameter across calls.

    Update: ``v = momentum * v + (grad + weight_decay * w)``; ``w -= lr * v``.
    """

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                continue
            g = p.grad if self.weight_decay == 0 else p.grad + self.weight_decay * p.data
            buf = self.buffers[i]
            if buf is None:
                buf = self.buffers[i] = np.array(g, copy=True)
            else:
                buf *= self.momentum
                buf += g
            p.data -= lr * buf

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             state: SGD | None = None) -> SGD:
    """One in-place SGD update. Pass the returned state back in to keep momentum."""
    if state is None:
        state = SGD(params, momentum, weight_decay)
    state.step(lr)
    return state
