"""Dense float64 tensor with axis-role metadata and reverse-mode gradients.

A :class:`Tensor` wraps a C-contiguous ``numpy.float64`` array.  Operations
that need gradients record a backward closure and their parents; calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

ROLES = ("batch", "channel", "level", "height", "width", "out")

_DEFAULT_LAYOUTS = {
    5: ("batch", "channel", "level", "height", "width"),
    4: ("batch", "channel", "height", "width"),
    3: ("channel", "height", "width"),
    2: ("height", "width"),
}

_checked = True
_grad_enabled = True


def set_checked(flag: bool) -> None:
    """Toggle value validation (NaN/Inf rejection). Shape checks always run."""
    global _checked
    _checked = bool(flag)


def is_checked() -> bool:
    return _checked


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def default_layout(rank: int) -> tuple[str, ...]:
    if rank in _DEFAULT_LAYOUTS:
        return _DEFAULT_LAYOUTS[rank]
    return tuple(f"axis{i}" for i in range(rank))


def _validate_layout(layout: Sequence[str], rank: int) -> tuple[str, ...]:
    layout = tuple(layout)
    if len(layout) != rank:
        raise ValueError(f"layout {layout} has {len(layout)} tags for rank {rank}")
    if len(set(layout)) != rank:
        raise ValueError(f"axis roles must be unique, got {layout}")
    for tag in layout:
        if tag not in ROLES and not (tag.startswith("axis") and tag[4:].isdigit()):
            raise ValueError(f"unknown axis role {tag!r}")
    return layout


class Tensor:
    """N-dimensional double-precision array that can track gradients."""

    __slots__ = ("data", "layout", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, layout: Sequence[str] | None = None, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim > 5:
            raise ValueError(f"tensors have at most 5 axes, got {arr.ndim}")
        if _checked and not np.isfinite(arr).all():
            raise ValueError("non-finite value in tensor")
        self.data = arr
        self.layout = default_layout(arr.ndim) if layout is None else _validate_layout(layout, arr.ndim)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, self.layout)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, layout={self.layout}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------------
    @staticmethod
    def from_op(data: np.ndarray, parents: Iterable[Tensor], backward, layout=None) -> Tensor:
        parents = tuple(parents)
        out = Tensor(data, layout)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar")
            grad = np.ones(self.shape)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # interior nodes hold no grad; leaves were accumulated above

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def mean(self):
        from . import ops
        return ops.mean_all(self)


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` starts as zeros of the value's shape."""

    __slots__ = ()

    def __init__(self, data, layout: Sequence[str] | None = None, requires_grad: bool = True):
        super().__init__(data, layout, requires_grad=requires_grad)
        self.grad = np.zeros(self.shape)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.shape)


class Rng:
    """Seeded PCG64 stream (numpy's documented, platform-independent bit generator).

    Child streams are derived with :meth:`derive`, which keys a
    ``SeedSequence`` on ``(seed, *keys)`` so a child depends only on its
    keys and never on how many draws the parent made.
    """

    def __init__(self, seed: int, _keys: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in _keys)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.keys)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def derive(self, *keys: int) -> Rng:
        return Rng(self.seed, self.keys + tuple(keys))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
