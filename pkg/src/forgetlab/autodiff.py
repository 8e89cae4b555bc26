"""Reverse-mode automatic differentiation over dense numpy arrays.

Every value is a float64 ndarray wrapped in a Tensor node.  Operations
record a backward closure; calling backward(root) runs the closures in
reverse topological order and accumulates gradients into the leaves.
Only first-order gradients are supported: curvature quantities elsewhere
in the package are obtained by finite differences of these gradients.

A module-level switch (no_grad) turns graph recording off so that pure
evaluations (Monte-Carlo perturbation sweeps, greedy decoding) run at
plain numpy speed through the same code path.

Single-threaded by design.  Deterministic: no RNG lives in this module.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractViolation, NumericalFailure

_GRAD_ENABLED = True
_FINITE_CHECKS = True

_MASK_VALUE = -1e30  # additive mask; finite so softmax backward stays clean


def set_finite_checks(enabled):
    """Toggle per-primitive non-finite detection (default on)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextmanager
def no_grad():
    """Context manager that disables graph recording."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check(name, arr):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalFailure(f"non-finite value produced by primitive '{name}'")


class Tensor:
    """A float64 ndarray plus optional autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_ensure(other), -1.0))

    def __rsub__(self, other):
        return add(_ensure(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _ensure(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(name, data, parents, backward):
    _check(name, data)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(node, grad):
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


def _unbroadcast(grad, shape):
    """Sum grad back down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _ensure(a), _ensure(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make("add", data, (a, b), backward)


def mul(a, b):
    a, b = _ensure(a), _ensure(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make("multiply", data, (a, b), backward)


def div(a, b):
    a, b = _ensure(a), _ensure(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make("divide", data, (a, b), backward)


def matmul(a, b):
    """Matrix product with leading batch dimensions; both operands ndim >= 2."""
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractViolation("matmul operands must have ndim >= 2")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make("matmul", data, (a, b), backward)


def embedding(table, ids):
    """Row gather: out[..., :] = table[ids[...], :].  ids is a plain int array."""
    table = _ensure(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        if table.requires_grad or table._parents:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            _accumulate(table, gt)

    return _make("embedding", data, (table,), backward)


def take_rows(t, n):
    """First n rows of a 2-D tensor (used to slice position embeddings)."""
    t = _ensure(t)
    data = t.data[:n]

    def backward(g):
        if t.requires_grad or t._parents:
            gt = np.zeros_like(t.data)
            gt[:n] = g
            _accumulate(t, gt)

    return _make("take_rows", data, (t,), backward)


def gather_last(t, idx):
    """out[...] = t[..., idx[...]] along the final axis."""
    t = _ensure(t)
    idx = np.asarray(idx)
    data = np.take_along_axis(t.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if t.requires_grad or t._parents:
            gt = np.zeros_like(t.data)
            grids = np.indices(idx.shape, sparse=True)
            np.add.at(gt, tuple(grids) + (idx,), g)
            _accumulate(t, gt)

    return _make("gather_last", data, (t,), backward)


def reshape(t, shape):
    t = _ensure(t)
    data = t.data.reshape(shape)
    old_shape = t.data.shape

    def backward(g):
        if t.requires_grad or t._parents:
            _accumulate(t, g.reshape(old_shape))

    return _make("reshape", data, (t,), backward)


def transpose(t, axes):
    t = _ensure(t)
    data = np.transpose(t.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        if t.requires_grad or t._parents:
            _accumulate(t, np.transpose(g, inverse))

    return _make("transpose", data, (t,), backward)


def tensor_sum(t, axis=None, keepdims=False):
    t = _ensure(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)
    in_shape = t.data.shape

    def backward(g):
        if t.requires_grad or t._parents:
            if axis is None:
                _accumulate(t, np.broadcast_to(g, in_shape).copy())
            else:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(a % len(in_shape) for a in axes)
                if not keepdims:
                    expand = list(g.shape)
                    for a in sorted(axes):
                        expand.insert(a, 1)
                    g = g.reshape(expand)
                _accumulate(t, np.broadcast_to(g, in_shape).copy())

    return _make("sum", data, (t,), backward)


def tensor_mean(t, axis=None, keepdims=False):
    t = _ensure(t)
    count = t.data.size if axis is None else np.prod(
        [t.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tensor_sum(t, axis=axis, keepdims=keepdims), 1.0 / float(count))


def log(t):
    t = _ensure(t)
    data = np.log(t.data)

    def backward(g):
        if t.requires_grad or t._parents:
            _accumulate(t, g / t.data)

    return _make("log", data, (t,), backward)


def tanh(t):
    t = _ensure(t)
    data = np.tanh(t.data)

    def backward(g):
        if t.requires_grad or t._parents:
            _accumulate(t, g * (1.0 - data * data))

    return _make("tanh", data, (t,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(t):
    """Gaussian error linear unit, tanh approximation."""
    t = _ensure(t)
    x = t.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(inner)
    data = 0.5 * x * (1.0 + th)

    def backward(g):
        if t.requires_grad or t._parents:
            sech2 = 1.0 - th * th
            local = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            _accumulate(t, g * local)

    return _make("gelu", data, (t,), backward)


def softmax(t):
    """Softmax over the final axis.  Rows sum to one."""
    t = _ensure(t)
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if t.requires_grad or t._parents:
            dot = (g * data).sum(axis=-1, keepdims=True)
            _accumulate(t, data * (g - dot))

    return _make("softmax", data, (t,), backward)


def log_softmax(t):
    """Log-softmax over the final axis."""
    t = _ensure(t)
    z = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse

    def backward(g):
        if t.requires_grad or t._parents:
            p = np.exp(data)
            _accumulate(t, g - p * g.sum(axis=-1, keepdims=True))

    return _make("log_softmax", data, (t,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the final axis to zero mean, unit variance, then affine."""
    x, gain, bias = _ensure(x), _ensure(gain), _ensure(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad or gain._parents:
            axes = tuple(range(g.ndim - 1))
            _accumulate(gain, (g * xhat).sum(axis=axes))
        if bias.requires_grad or bias._parents:
            axes = tuple(range(g.ndim - 1))
            _accumulate(bias, g.sum(axis=axes))
        if x.requires_grad or x._parents:
            dxhat = g * gain.data
            mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))

    return _make("layer_norm", data, (x, gain, bias), backward)


def causal_mask(n):
    """Additive (n, n) mask: strictly-upper entries get a large negative value."""
    return np.triu(np.full((n, n), _MASK_VALUE), k=1)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order = []
    seen = set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into .grad for every reachable node.

    Grads reachable from root are reset first, so repeated calls on one
    graph (one per scored position, say) never mix contributions.
    """
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return root.grad
