"""Tensor type and the reverse-mode backward pass.

A ``Tensor`` wraps a numpy array. Ops in :mod:`msfusion.core.ops` build new
tensors that remember their parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` walks that graph once in
reverse topological order, summing contributions for tensors used more than
once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ConfigError, NumericError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_CHECK_FINITE = True


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    64-bit is meant for gradient checking only; training runs in float32.
    """
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}")
    prev, _DEFAULT_DTYPE = _DEFAULT_DTYPE, dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check run on every op output (on by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite(arr: np.ndarray, where: str, force: bool = False) -> None:
    if (_CHECK_FINITE or force) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    # -- construction helpers used by ops ---------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        check_finite(data, op)
        out = cls(data, dtype=data.dtype)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        out._op = op
        return out

    # -- array-like surface ----------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    # -- operator sugar (thin wrappers over ops) -------------------------

    def __add__(self, other):
        from .ops import add
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale_shift
        return scale_shift(self, -1.0, 0.0)

    def __sub__(self, other):
        from .ops import add
        return add(self, -_lift(other, self))

    def __rsub__(self, other):
        from .ops import scale_shift
        if isinstance(other, (int, float)):
            return scale_shift(self, -1.0, float(other))
        return _lift(other, self) - self

    def sum(self) -> "Tensor":
        from .ops import reduce_sum
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        from .ops import reduce_mean
        return reduce_mean(self)

    # -- autodiff ----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf that requires grad and feeds this tensor.

        Gradients accumulate (sum) across calls; clear them with the
        optimizer's ``zero_grad`` between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ConfigError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ConfigError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                check_finite(g, f"backward into {node.name or 'leaf'}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def _topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after every node that consumes it."""
    visited: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    post.reverse()
    return post
