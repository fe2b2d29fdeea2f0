"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and records the operations applied to it.
Calling :func:`backward` on a scalar result walks the graph in reverse
topological order and accumulates exact gradients into every reachable leaf.

Module-level helpers (``tanh``, ``matmul``, ...) dispatch on argument type:
given plain ndarrays they compute with numpy directly, so the same network
code can run in a cheap no-graph mode during rollouts and sampling.
"""

from __future__ import annotations

import numpy as np


class NumericalFault(RuntimeError):
    """Raised when a non-finite value surfaces during backpropagation."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(f"non-finite value in op '{op}'" + (f": {message}" if message else ""))


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # remove leading broadcast axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        self.data = _asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def item(self):
        return float(self.data)

    def detach(self):
        """Stop-gradient: returns a constant view of this tensor's value."""
        return Tensor(self.data, op="detach")

    # -- operator overloads -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_tensor(*args):
    return any(isinstance(a, Tensor) for a in args)


def _node(data, parents, vjp, op):
    requires = any(p.requires_grad or p._parents for p in parents)
    # constants folded eagerly: no need to track graph below pure constants
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, _parents=tuple(parents), _vjp=vjp, op=op)


# -- core ops ----------------------------------------------------------------


def add(a, b):
    if not _is_tensor(a, b):
        return np.add(a, b)
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    if not _is_tensor(a, b):
        return np.subtract(a, b)
    a, b = _lift(a), _lift(b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    if not _is_tensor(a, b):
        return np.multiply(a, b)
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    if not _is_tensor(a, b):
        return np.divide(a, b)
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def power(a, p):
    if not _is_tensor(a):
        return np.power(a, p)
    a = _lift(a)
    p = float(p)
    out = a.data**p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a):
    if not _is_tensor(a):
        return np.exp(a)
    a = _lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if not _is_tensor(a):
        return np.log(a)
    a = _lift(a)
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    if not _is_tensor(a):
        return np.sqrt(a)
    a = _lift(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    if not _is_tensor(a):
        return np.tanh(a)
    a = _lift(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a):
    if not _is_tensor(a):
        return np.logaddexp(0.0, a)
    a = _lift(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def sigmoid(a):
    if not _is_tensor(a):
        return 1.0 / (1.0 + np.exp(-np.asarray(a, dtype=np.float64)))
    a = _lift(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sin(a):
    if not _is_tensor(a):
        return np.sin(a)
    a = _lift(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    if not _is_tensor(a):
        return np.cos(a)
    a = _lift(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def absolute(a):
    """|x| with subgradient 0 at x == 0."""
    if not _is_tensor(a):
        return np.abs(a)
    a = _lift(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    if not _is_tensor(a, b):
        return np.maximum(a, b)
    a, b = _lift(a), _lift(b)
    out = np.maximum(a.data, b.data)
    mask = np.broadcast_to(a.data, out.shape) >= np.broadcast_to(b.data, out.shape)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * (~mask), b.shape)),
        "maximum",
    )


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    if not _is_tensor(a, b):
        return np.minimum(a, b)
    a, b = _lift(a), _lift(b)
    out = np.minimum(a.data, b.data)
    mask = np.broadcast_to(a.data, out.shape) <= np.broadcast_to(b.data, out.shape)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * (~mask), b.shape)),
        "minimum",
    )


def matmul(a, b):
    if not _is_tensor(a, b):
        return np.matmul(a, b)
    a, b = _lift(a), _lift(b)
    out = a.data @ b.data

    def vjp(g):
        if a.ndim == 1 and b.ndim == 2:  # (k,) @ (k,n)
            return g @ b.data.T, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:  # (m,k) @ (k,)
            return np.outer(g, b.data), a.data.T @ g
        if a.ndim == 3 or b.ndim == 3:  # batched
            ga = np.matmul(g, np.swapaxes(np.broadcast_to(b.data, (g.shape[0],) + b.data.shape[-2:]), -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2:
                gb = gb.sum(axis=0)
            if a.ndim == 2:
                ga = ga.sum(axis=0)
            return ga, gb
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp, "matmul")


def tsum(a, axis=None, keepdims=False):
    if not _is_tensor(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    if not _is_tensor(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    a = _lift(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _reduce_extreme(a, axis, keepdims, argfn, fn, name):
    a = _lift(a)
    out = fn(a.data, axis=axis, keepdims=keepdims)
    # subgradient goes to the first extremal index (lowest flat/axis index)
    if axis is None:
        idx = argfn(a.data)
        mask = np.zeros(a.size)
        mask[idx] = 1.0
        mask = mask.reshape(a.shape)
    else:
        idx = argfn(a.data, axis=axis)
        mask = np.zeros(a.shape)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * g,)

    return _node(out, (a,), vjp, name)


def tmax(a, axis=None, keepdims=False):
    if not _is_tensor(a):
        return np.max(a, axis=axis, keepdims=keepdims)
    return _reduce_extreme(a, axis, keepdims, np.argmax, np.max, "max")


def tmin(a, axis=None, keepdims=False):
    if not _is_tensor(a):
        return np.min(a, axis=axis, keepdims=keepdims)
    return _reduce_extreme(a, axis, keepdims, np.argmin, np.min, "min")


def take(a, idx):
    if not _is_tensor(a):
        return np.asarray(a)[idx]
    a = _lift(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(out, (a,), vjp, "take")


def reshape(a, shape):
    if not _is_tensor(a):
        return np.reshape(a, shape)
    a = _lift(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if not _is_tensor(a):
        return np.transpose(a, axes)
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), vjp, "transpose")


def concat(parts, axis=0):
    if not _is_tensor(*parts):
        return np.concatenate(parts, axis=axis)
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for k in range(len(parts)):
            slicer[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _node(out, tuple(parts), vjp, "concat")


def stack(parts, axis=0):
    if not _is_tensor(*parts):
        return np.stack(parts, axis=axis)
    parts = [_lift(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(parts)))

    return _node(out, tuple(parts), vjp, "stack")


def cumsum(a, axis=0):
    if not _is_tensor(a):
        return np.cumsum(a, axis=axis)
    a = _lift(a)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _node(out, (a,), vjp, "cumsum")


def norm(a, axis=None, keepdims=False):
    """Euclidean norm, differentiable away from zero."""
    if not _is_tensor(a):
        return np.sqrt(np.sum(np.square(a), axis=axis, keepdims=keepdims))
    return sqrt(tsum(mul(a, a), axis=axis, keepdims=keepdims))


def softmax(a, axis=-1):
    if not _is_tensor(a):
        m = np.max(a, axis=axis, keepdims=True)
        e = np.exp(a - m)
        return e / e.sum(axis=axis, keepdims=True)
    shifted = sub(a, Tensor(np.max(a.data, axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def detach(a):
    return a.detach() if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def clip(a, lo, hi):
    if not _is_tensor(a):
        return np.clip(a, lo, hi)
    return minimum(maximum(a, lo), hi)


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor):
    """Reverse-mode gradient of a scalar graph.

    Gradients accumulate into ``t.grad`` for every tensor in the graph;
    leaves never reached keep ``grad is None`` (treat as zero).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalFault(loss.op, "loss is not finite")

    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if not np.isfinite(g).all():
                raise NumericalFault(node.op, "gradient is not finite")
            if parent.grad is None:
                parent.grad = g.reshape(parent.shape).copy()
            else:
                parent.grad = parent.grad + g.reshape(parent.shape)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
