"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every :class:`Tensor` wraps a float64 ``ndarray``. Operations executed while
recording is enabled attach a backward closure to their output; calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires it.

The operator set is deliberately small: what the segmentation pipeline needs
(matmul, entrywise arithmetic, exp/log/tanh/sigmoid, reductions,
log-sum-exp, softmax, indexing, concatenation and masked selection).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out axes that were introduced or stretched by broadcasting.
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # ---------------------------------------------------------- graph helpers
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes do not keep their gradients
                if node._parents:
                    node.grad = None

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __neg__(self) -> Tensor:
        a = self

        def bw(g):
            a._accumulate(-g)

        return Tensor._make(-a.data, (a,), bw)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

        return Tensor._make(out, (a, b), bw)

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        p = float(exponent)
        out = a.data**p

        def bw(g):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._make(out, (a,), bw)

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                if b.ndim == 1:
                    ga = np.multiply.outer(g, b.data)
                else:
                    ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                if a.ndim == 1:
                    gb = np.multiply.outer(a.data, g)
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._make(a.data @ b.data, (a, b), bw)

    def __rmatmul__(self, other) -> Tensor:
        return as_tensor(other) @ self

    # ------------------------------------------------------------ elementwise
    def exp(self) -> Tensor:
        a = self
        out = np.exp(a.data)

        def bw(g):
            a._accumulate(g * out)

        return Tensor._make(out, (a,), bw)

    def log(self) -> Tensor:
        a = self

        def bw(g):
            a._accumulate(g / a.data)

        return Tensor._make(np.log(a.data), (a,), bw)

    def sin(self) -> Tensor:
        a = self

        def bw(g):
            a._accumulate(g * np.cos(a.data))

        return Tensor._make(np.sin(a.data), (a,), bw)

    def tanh(self) -> Tensor:
        a = self
        out = np.tanh(a.data)

        def bw(g):
            a._accumulate(g * (1.0 - out * out))

        return Tensor._make(out, (a,), bw)

    def sigmoid(self) -> Tensor:
        a = self
        out = _sigmoid(a.data)

        def bw(g):
            a._accumulate(g * out * (1.0 - out))

        return Tensor._make(out, (a,), bw)

    def log_sigmoid(self) -> Tensor:
        a = self
        x = a.data
        out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

        def bw(g):
            a._accumulate(g * _sigmoid(-x))

        return Tensor._make(out, (a,), bw)

    def clip(self, lo: float, hi: float) -> Tensor:
        a = self
        inside = (a.data >= lo) & (a.data <= hi)

        def bw(g):
            a._accumulate(g * inside)

        return Tensor._make(np.clip(a.data, lo, hi), (a,), bw)

    def sqrt(self) -> Tensor:
        return self**0.5

    # ------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def logsumexp(self, axis: int = -1, keepdims: bool = False) -> Tensor:
        a = self
        m = np.max(a.data, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(a.data - m)
        s = e.sum(axis=axis, keepdims=True)
        out = np.log(s) + m

        def bw(g):
            gk = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(gk * (e / s))

        return Tensor._make(out if keepdims else np.squeeze(out, axis=axis), (a,), bw)

    def softmax(self, axis: int = -1) -> Tensor:
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

        return Tensor._make(out, (a,), bw)

    # ---------------------------------------------------------------- shaping
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def bw(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._make(a.data.reshape(shape), (a,), bw)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        if not axes:
            axes = tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)

        def bw(g):
            a._accumulate(np.transpose(g, inv))

        return Tensor._make(np.transpose(a.data, axes), (a,), bw)

    def swapaxes(self, i: int, j: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(tuple(axes))

    def unsqueeze(self, axis: int) -> Tensor:
        shape = list(self.shape)
        axis = axis if axis >= 0 else len(shape) + axis + 1
        shape.insert(axis, 1)
        return self.reshape(tuple(shape))

    def __getitem__(self, idx) -> Tensor:
        a = self
        if isinstance(idx, Tensor):
            idx = idx.data
        out = a.data[idx]
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

        def bw(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._make(out, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t).unsqueeze(axis) for t in tensors]
    return concat(ts, axis=axis)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; ``mask`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor._make(out, (a, b), bw)


def grad_check(fn: Callable[[], Tensor], param: Tensor, coords: Sequence[tuple], h: float = 1e-6):
    """Return ``(analytic, numeric)`` gradients of ``fn()`` at ``coords`` of ``param``.

    ``numeric`` comes from central differences on ``param.data``; ``fn`` must
    rebuild the graph on each call.
    """
    param.zero_grad()
    loss = fn()
    loss.backward()
    analytic = np.array([param.grad[c] if param.grad is not None else 0.0 for c in coords])
    numeric = np.empty(len(coords))
    with no_grad():
        for i, c in enumerate(coords):
            orig = param.data[c]
            param.data[c] = orig + h
            fp = float(fn().data)
            param.data[c] = orig - h
            fm = float(fn().data)
            param.data[c] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    return analytic, numeric
