"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation returns a new :class:`Tensor` holding its parents and a
closure that pushes the output gradient back to them. ``Tensor.backward``
walks the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        ``grad`` seeds the output gradient and is required unless the
        tensor holds a single value.
        """
        if grad is None and self.value.size != 1:
            raise ValueError("backward on a non-scalar tensor needs an explicit grad")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node.backward_fn is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.value) if grad is None else grad)
        for node in reversed(topo):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _push(t: Tensor, g):
    if t.requires_grad:
        t._accumulate(g)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(g, b.shape))

    return Tensor(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(-g, b.shape))

    return Tensor(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _push(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _push(b, _unbroadcast(g * a.value, b.shape))

    return Tensor(a.value * b.value, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _push(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight matrix: fold the batch axes into one product
                gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
            _push(b, gb)

    return Tensor(a.value @ b.value, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    # NaN must survive so divergence is caught downstream
    out = np.where(x.value <= 0, 0.0, x.value)
    return Tensor(out, (x,), lambda g: _push(x, g * mask))


def prelu(x, alpha) -> Tensor:
    """Parametric rectifier with a learnable negative slope ``alpha``."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    mask = x.value > 0
    neg = np.where(mask, 0.0, x.value)

    def bw(g):
        _push(x, g * np.where(mask, 1.0, alpha.value))
        if alpha.requires_grad:
            _push(alpha, _unbroadcast(g * neg, alpha.shape))

    return Tensor(np.where(mask, x.value, alpha.value * x.value), (x, alpha), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _push(x, s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return Tensor(s, (x,), bw)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    inv = np.argsort(axes)
    return Tensor(np.transpose(x.value, axes), (x,), lambda g: _push(x, np.transpose(g, inv)))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor(x.value.reshape(shape), (x,), lambda g: _push(x, g.reshape(old)))


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _push(x, part)

    return Tensor(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), bw)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return Tensor(np.broadcast_to(x.value, shape).copy(), (x,), lambda g: _push(x, _unbroadcast(g, x.shape)))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _push(x, np.broadcast_to(g, x.shape))

    return Tensor(x.value.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.value)
        full[idx] += g
        _push(x, full)

    return Tensor(x.value[idx], (x,), bw)


def mse(pred, target) -> Tensor:
    """Mean squared error against a constant target."""
    pred = as_tensor(pred)
    target = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=np.float64)
    diff = pred.value - target
    n = diff.size

    def bw(g):
        _push(pred, g * 2.0 * diff / n)

    return Tensor(np.mean(diff**2), (pred,), bw)
