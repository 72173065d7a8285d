"""Minimal reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps a float64 ndarray and records its parents plus a backward
closure on a tape; ``Tensor.backward()`` walks the graph in reverse
topological order. Only the ops the engine needs are provided. Heavy kernels
(the tile rasterizer, sliding windows) register themselves as custom ops with
hand-written backward passes.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    # let ndarray + Tensor fall through to Tensor.__radd__ etc.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, parents=(), bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents if self.requires_grad else ()
        self._bw = bw if self.requires_grad else None

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: Array):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: Array | None = None):
        if grad is None:
            grad = np.ones_like(self.data)
        # iterative topological order
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, parents=(self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._bw = bw
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, parents=(self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._bw = bw
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, parents=(self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                    )
            out._bw = bw
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        out = Tensor(self.data ** p, parents=(self,))
        if out.requires_grad:
            def bw(g):
                self._accumulate(g * p * self.data ** (p - 1))
            out._bw = bw
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(np.matmul(self.data, other.data), parents=(self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                    self._accumulate(_unbroadcast(ga, self.data.shape))
                if other.requires_grad:
                    gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                    other._accumulate(_unbroadcast(gb, other.data.shape))
            out._bw = bw
        return out

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        out = Tensor(self.data.reshape(shape), parents=(self,))
        if out.requires_grad:
            def bw(g):
                self._accumulate(g.reshape(src))
            out._bw = bw
        return out

    def swapaxes(self, a: int, b: int):
        out = Tensor(np.swapaxes(self.data, a, b), parents=(self,))
        if out.requires_grad:
            def bw(g):
                self._accumulate(np.swapaxes(g, a, b))
            out._bw = bw
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], parents=(self,))
        if out.requires_grad:
            def bw(g):
                acc = np.zeros_like(self.data)
                np.add.at(acc, idx, g)
                self._accumulate(acc)
            out._bw = bw
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))
        if out.requires_grad:
            src = self.data.shape

            def bw(g):
                if axis is None:
                    self._accumulate(np.broadcast_to(g, src).copy() if np.ndim(g) else np.full(src, g))
                    return
                gg = g
                if not keepdims:
                    gg = np.expand_dims(gg, axis)
                self._accumulate(np.broadcast_to(gg, src).copy())
            out._bw = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def cumsum(self, axis: int):
        out = Tensor(np.cumsum(self.data, axis=axis), parents=(self,))
        if out.requires_grad:
            def bw(g):
                self._accumulate(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))
            out._bw = bw
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise functions


def _unary(x: Tensor, val: Array, dfn) -> Tensor:
    out = Tensor(val, parents=(x,))
    if out.requires_grad:
        def bw(g):
            x._accumulate(g * dfn())
        out._bw = bw
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    v = np.exp(x.data)
    return _unary(x, v, lambda: v)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    v = np.sqrt(x.data)
    return _unary(x, v, lambda: 0.5 / v)


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.sin(x.data), lambda: np.cos(x.data))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.cos(x.data), lambda: -np.sin(x.data))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    pos = z >= 0
    e = np.exp(np.where(pos, -z, z))     # always exp of a nonpositive value
    v = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary(x, v, lambda: v * (1.0 - v))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    v = np.tanh(x.data)
    return _unary(x, v, lambda: 1.0 - v * v)


def softplus(x, beta: float = 1.0) -> Tensor:
    """log(1 + exp(beta x)) / beta, overflow-safe."""
    x = as_tensor(x)
    z = beta * x.data
    v = np.where(z > 30.0, z, np.log1p(np.exp(np.minimum(z, 30.0)))) / beta
    return _unary(x, v, lambda: 1.0 / (1.0 + np.exp(-z)))


def custom_unary(x, fn, dfn) -> Tensor:
    """Elementwise op from value/derivative callables (series, guards, ...)."""
    x = as_tensor(x)
    return _unary(x, fn(x.data), lambda: dfn(x.data))


def where(cond: Array, a, b) -> Tensor:
    """Select by a non-differentiable boolean condition."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.where(cond, a.data, b.data), parents=(a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.data.shape))
        out._bw = bw
    return out


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    return where(a.data >= b.data, a, b)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accumulate(piece)
        out._bw = bw
    return out


def stack(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    if out.requires_grad:
        def bw(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(g, i, axis=axis))
        out._bw = bw
    return out


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape).copy(), parents=(x,))
    if out.requires_grad:
        def bw(g):
            x._accumulate(_unbroadcast(g, x.data.shape))
        out._bw = bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax (the shift is a constant, so grads are exact)."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def dot_last(a: Tensor, b) -> Tensor:
    """Sum-product over the last axis."""
    return (a * b).sum(axis=-1)


def norm_last(x: Tensor, eps: float = 0.0) -> Tensor:
    s = (x * x).sum(axis=-1)
    if eps:
        s = s + eps
    return sqrt(s)


def unfold1d(x: Tensor, size: int, axis: int) -> Tensor:
    """Sliding windows of length ``size`` along ``axis``.

    Output gains a trailing window axis; used for separable convolutions.
    """
    x = as_tensor(x)
    axis = axis % x.data.ndim
    view = np.lib.stride_tricks.sliding_window_view(x.data, size, axis=axis)
    out = Tensor(view.copy(), parents=(x,))
    if out.requires_grad:
        src_shape = x.data.shape
        L = src_shape[axis]

        def bw(g):
            acc = np.zeros(src_shape, dtype=np.float64)
            acc_m = np.moveaxis(acc, axis, -1)       # (..., L)
            g_m = np.moveaxis(g, axis, -2)           # (..., L-size+1, size)
            for k in range(size):
                acc_m[..., k:L - size + 1 + k] += g_m[..., k]
            x._accumulate(acc)
        out._bw = bw
    return out
