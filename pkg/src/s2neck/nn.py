"""Minimal module containers: parameter discovery, train/eval mode, layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Rng, Tensor


class Module:
    """Base class. Parameters, buffers and submodules are found by attribute walk.

    Attributes holding a :class:`Parameter`, a :class:`Module`, a list of
    modules, or a dict of modules are visited in sorted attribute order, so
    names and ordering are deterministic.
    """

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name in sorted(vars(self)):
            yield name, vars(self)[name]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, value in self._children():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Module):
                yield from value.named_modules(path)
            elif isinstance(value, (list, tuple)):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m.named_modules(f"{path}.{i}")
            elif isinstance(value, dict):
                for k in sorted(value):
                    if isinstance(value[k], Module):
                        yield from value[k].named_modules(f"{path}.{k}")

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for path, mod in self.named_modules():
            for name, value in mod._children():
                if isinstance(value, Parameter):
                    yield (f"{path}.{name}" if path else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules():
            for name in getattr(mod, "_buffers", ()):
                yield (f"{path}.{name}" if path else name), getattr(mod, name)

    def train(self, mode: bool = True) -> Module:
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]
        for name, b in bufs.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng: Rng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: Rng, stride: int = 1, padding: int | None = None,
                 bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(uniform_init(rng, (cout, cin, k, k), cin * k * k),
                                ("out", "channel", "height", "width"))
        self.bias = Parameter(np.zeros(cout), ("channel",)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: tuple[int, int, int], rng: Rng, bias: bool = True):
        self.padding = tuple(k // 2 for k in kernel)
        fan_in = cin * int(np.prod(kernel))
        self.weight = Parameter(uniform_init(rng, (cout, cin) + tuple(kernel), fan_in),
                                ("out", "channel", "level", "height", "width"))
        self.bias = Parameter(np.zeros(cout), ("channel",)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, 1, self.padding)


class BatchNorm(Module):
    """Batch normalization over axis 1 for 4-axis (2D) or 5-axis (3D) inputs."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), ("channel",))
        self.beta = Parameter(np.zeros(channels), ("channel",))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.eps, self.momentum, self.training)


class ConvBlock(Module):
    """Bias-free conv, batch norm, leaky ReLU."""

    def __init__(self, cin: int, cout: int, k: int, rng: Rng, stride: int = 1, slope: float = 0.1):
        self.slope = slope
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(self.bn(self.conv(x)), self.slope)
