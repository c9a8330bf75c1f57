"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a node holding its forward value and a closure that pushes
the output gradient back to its inputs. ``backward`` walks the graph once in
reverse topological order. Ops are deliberately coarse (a fused LSTM cell, a
fused row-cosine matrix) so that a training step builds a few hundred nodes
rather than tens of thousands.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (decoding, rollouts, scoring)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    # operator sugar; only the forms the models use
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient back down to ``shape`` (leading dims and size-1 dims)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(root: Tensor, grad=None):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Interior nodes receive gradients transiently; leaf accumulators are
    additive across calls, so callers zero them between steps.
    """
    if not root.requires_grad:
        return
    if grad is None:
        if root.data.size != 1:
            raise ValueError("backward without an explicit gradient needs a scalar root")
        grad = np.ones_like(root.data)
    if root._backward is None:
        _accum(root, grad)
        return
    order = _toposort(root)
    root.grad = np.array(grad, dtype=np.float64, copy=True)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - y * y))

    return _make(y, (x,), bw, "tanh")


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(np.atleast_1d(x.data)).reshape(x.data.shape)

    def bw(g):
        _accum(x, g * y * (1.0 - y))

    return _make(y, (x,), bw, "sigmoid")


def log_sigmoid(x):
    """log(sigmoid(x)) without forming sigmoid(x) for very negative x."""
    x = as_tensor(x)
    y = -np.logaddexp(0.0, -x.data)

    def bw(g):
        s = _sigmoid(np.atleast_1d(x.data)).reshape(x.data.shape)
        _accum(x, g * (1.0 - s))

    return _make(y, (x,), bw, "log_sigmoid")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)

    def bw(g):
        _accum(x, g * y)

    return _make(y, (x,), bw, "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")

    def bw(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), (x,), bw, "log")


# ---------------------------------------------------------------- reductions


def sum(x, axis=None):
    x = as_tensor(x)

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(gg, x.shape))

    return _make(np.sum(x.data, axis=axis), (x,), bw, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def logsumexp(x, axis=-1):
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = (np.log(s) + m).squeeze(axis)

    def bw(g):
        _accum(x, np.expand_dims(g, axis) * (e / s))

    return _make(y, (x,), bw, "logsumexp")


def log_softmax(x, mask=None):
    """Row-wise log-softmax over the last axis.

    ``mask`` (boolean, broadcastable) marks entries forced to probability 0;
    their outputs are -inf and carry no gradient, so callers must never
    select them.
    """
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, -np.inf, x.data)
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        gg = np.where(np.isfinite(y), g, 0.0)
        _accum(x, gg - p * np.sum(gg, axis=-1, keepdims=True))

    out = Tensor(y)
    out.op = "log_softmax"
    _check_finite(x.data, "log_softmax")
    if grad_enabled() and x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = bw
    return out


# ---------------------------------------------------------------- structural


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data))
        if b.requires_grad:
            if a.data.ndim == 1:
                _accum(b, np.outer(a.data, g))
            else:
                _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _accum(x, part)

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, "concat")


def reshape(x, shape):
    x = as_tensor(x)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x):
    x = as_tensor(x)

    def bw(g):
        _accum(x, g.T)

    return _make(x.data.T, (x,), bw, "transpose")


def stack(xs, axis=0):
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        for k, x in enumerate(xs):
            _accum(x, np.take(g, k, axis=axis))

    return _make(np.stack([x.data for x in xs], axis=axis), tuple(xs), bw, "stack")


def take_rows(table, ids):
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _make(table.data[ids], (table,), bw, "take_rows")


def index(x, idx):
    """Fancy indexing ``x[idx]`` (tuple of int arrays or slices)."""
    x = as_tensor(x)

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            _accum(x, full)

    return _make(np.asarray(x.data[idx]), (x,), bw, "index")


def blend(mask, new, old):
    """``mask * new + (1 - mask) * old`` with a constant 0/1 mask per row.

    Rows with mask 0 pass ``old`` through bit-for-bit, which is how padded
    positions are skipped inside batched recurrences.
    """
    new, old = as_tensor(new), as_tensor(old)
    m = np.asarray(mask, dtype=bool).reshape(-1, *([1] * (new.data.ndim - 1)))
    y = np.where(m, new.data, old.data)

    def bw(g):
        _accum(new, np.where(m, g, 0.0))
        _accum(old, np.where(m, 0.0, g))

    return _make(y, (new, old), bw, "blend")


# ---------------------------------------------------------------- fused layers


def lstm_cell(x, h, c, w, b):
    """One LSTM step on a batch.

    ``w`` has shape (d_in + d_h, 4 d_h); gate blocks are ordered
    input, forget, output, candidate.
    """
    x, h, c, w, b = (as_tensor(t) for t in (x, h, c, w, b))
    d_h = h.shape[-1]
    xh = np.concatenate([x.data, h.data], axis=-1)
    z = xh @ w.data + b.data
    i = _sigmoid(z[:, :d_h])
    f = _sigmoid(z[:, d_h:2 * d_h])
    o = _sigmoid(z[:, 2 * d_h:3 * d_h])
    u = np.tanh(z[:, 3 * d_h:])
    c_new = f * c.data + i * u
    tc = np.tanh(c_new)
    h_new = o * tc
    packed = np.concatenate([h_new, c_new], axis=-1)

    def bw(g):
        gh, gc = g[:, :d_h], g[:, d_h:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * u * i * (1.0 - i),
            dc * c.data * f * (1.0 - f),
            gh * tc * o * (1.0 - o),
            dc * i * (1.0 - u * u),
        ], axis=-1)
        _accum(w, xh.T @ dz)
        _accum(b, dz.sum(axis=0))
        dxh = dz @ w.data.T
        _accum(x, dxh[:, :x.shape[-1]])
        _accum(h, dxh[:, x.shape[-1]:])
        _accum(c, dc * f)

    return _make(packed, (x, h, c, w, b), bw, "lstm_cell")


def split_state(packed):
    d = packed.shape[-1] // 2
    return index(packed, (slice(None), slice(0, d))), index(packed, (slice(None), slice(d, 2 * d)))


def cosine_matrix(a, b):
    """All-pairs cosine similarity between rows of ``a`` (n, d) and ``b`` (m, d).

    Rows with zero norm get similarity 0 and zero gradient; the result is
    clamped to [-1, 1] against rounding.
    """
    a, b = as_tensor(a), as_tensor(b)
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    za, zb = na == 0, nb == 0
    ia = np.where(za, 0.0, 1.0 / np.where(za, 1.0, na))
    ib = np.where(zb, 0.0, 1.0 / np.where(zb, 1.0, nb))
    ua = a.data * ia[:, None]
    ub = b.data * ib[:, None]
    s = np.clip(ua @ ub.T, -1.0, 1.0)

    def bw(g):
        if a.requires_grad:
            gua = g @ ub
            _accum(a, (gua - ua * np.sum(gua * ua, axis=-1, keepdims=True)) * ia[:, None])
        if b.requires_grad:
            gub = g.T @ ua
            _accum(b, (gub - ub * np.sum(gub * ub, axis=-1, keepdims=True)) * ib[:, None])

    out = _make(s, (a, b), bw, "cosine_matrix")
    return out, bool(za.any() or zb.any())
