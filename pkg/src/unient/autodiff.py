"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Each op returns a new :class:`Tensor`. When any input requires a gradient the
output records a node (op name, parents, backward closure). ``backward`` walks
the recorded nodes in reverse topological order, accumulates into leaf
``grad`` slots, and then frees the graph.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class GraphFreedError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward", "_freed")

    def __init__(self, values, requires_grad=False):
        self.values = np.array(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._freed = False

    @property
    def shape(self):
        return list(self.values.shape)

    @property
    def is_leaf(self):
        return self.op == "leaf"

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, op, parents, backward_fn):
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _check_2d(name, *ts):
    for t in ts:
        if t.values.ndim != 2:
            raise ShapeError(f"{name}: expected a 2-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------- ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_2d("matmul", a, b)
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _make(a.values @ b.values, "matmul", (a, b), bw)


def transpose(x):
    x = as_tensor(x)
    _check_2d("transpose", x)

    def bw(g):
        _accumulate(x, g.T)

    return _make(x.values.T.copy(), "transpose", (x,), bw)


def add_bias(x, bias):
    """Row-broadcast add: ``x[batch, f] + bias[f]``."""
    x, bias = as_tensor(x), as_tensor(bias)
    _check_2d("add_bias", x)
    if bias.values.shape != (x.values.shape[1],):
        raise ShapeError(f"add_bias: bias shape {bias.shape} does not match {x.shape}")

    def bw(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=0))

    return _make(x.values + bias.values, "add_bias", (x, bias), bw)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.values + b.values, "add", (a, b), bw)


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0

    def bw(g):
        _accumulate(x, g * mask)

    # np.maximum propagates NaN, so a corrupted input cannot silently vanish here
    return _make(np.maximum(x.values, 0.0), "relu", (x,), bw)


def batchnorm_train(x, gamma, beta, eps=BN_EPS):
    """Normalize each column with the batch's own mean and (biased) variance.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays
    for running-average bookkeeping. Gradients flow through the statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_2d("batchnorm_train", x)
    n, f = x.values.shape
    if gamma.values.shape != (f,) or beta.values.shape != (f,):
        raise ShapeError(
            f"batchnorm_train: affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}"
        )
    if n < 2:
        raise ShapeError(f"batchnorm_train: batch size {n} < 2, variance undefined")
    mean = x.values.mean(axis=0)
    centered = x.values - mean
    var = (centered**2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def bw(g):
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.values
            dx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            _accumulate(x, dx)

    out = _make(xhat * gamma.values + beta.values, "batchnorm_train", (x, gamma, beta), bw)
    return out, mean, var


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps=BN_EPS):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_2d("batchnorm_eval", x)
    f = x.values.shape[1]
    rm = np.asarray(running_mean, dtype=np.float64)
    rv = np.asarray(running_var, dtype=np.float64)
    for name, arr in (("gamma", gamma.values), ("beta", beta.values), ("running_mean", rm), ("running_var", rv)):
        if arr.shape != (f,):
            raise ShapeError(f"batchnorm_eval: {name} shape {list(arr.shape)} does not match {x.shape}")
    inv_std = 1.0 / np.sqrt(rv + eps)
    xhat = (x.values - rm) * inv_std

    def bw(g):
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
        _accumulate(x, g * gamma.values * inv_std)

    return _make(xhat * gamma.values + beta.values, "batchnorm_eval", (x, gamma, beta), bw)


def softmax_rows(x):
    x = as_tensor(x)
    _check_2d("softmax_rows", x)
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accumulate(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _make(p, "softmax_rows", (x,), bw)


def log_softmax_rows(x):
    x = as_tensor(x)
    _check_2d("log_softmax_rows", x)
    z = x.values - x.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        _accumulate(x, g - p * g.sum(axis=1, keepdims=True))

    return _make(out, "log_softmax_rows", (x,), bw)


def log(x, floor=None):
    """Natural log. With ``floor`` set, computes ``log(max(x, floor))`` and the
    gradient is zero wherever the floor is active."""
    x = as_tensor(x)
    if floor is None:
        safe = x.values
        active = np.ones_like(safe, dtype=bool)
    else:
        active = x.values > floor
        safe = np.where(active, x.values, floor)

    def bw(g):
        _accumulate(x, np.where(active, g / safe, 0.0))

    return _make(np.log(safe), "log", (x,), bw)


def mul_scalar(x, c):
    x = as_tensor(x)
    c = float(c)

    def bw(g):
        _accumulate(x, g * c)

    return _make(x.values * c, "mul_scalar", (x,), bw)


def elementwise_mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"elementwise_mul: shapes differ, {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g * b.values)
        _accumulate(b, g * a.values)

    return _make(a.values * b.values, "elementwise_mul", (a, b), bw)


def sum(x, axis=None):  # noqa: A001
    """Sum of all entries (``axis=None``) or along one axis."""
    x = as_tensor(x)
    shape = x.values.shape

    def bw(g):
        if axis is None:
            _accumulate(x, np.full(shape, float(g)))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make(x.values.sum(axis=axis), "sum", (x,), bw)


def mean_rows(x):
    """Column means of a ``[batch, features]`` tensor, shape ``[features]``."""
    x = as_tensor(x)
    _check_2d("mean_rows", x)
    n = x.values.shape[0]

    def bw(g):
        _accumulate(x, np.broadcast_to(g / n, x.values.shape))

    return _make(x.values.mean(axis=0), "mean_rows", (x,), bw)


def entropy_rows(p):
    """Per-row Shannon entropy ``-sum(p * log(max(p, 1e-12)))``, shape ``[batch]``."""
    return mul_scalar(sum(elementwise_mul(p, log(p, floor=LOG_FLOOR)), axis=-1), -1.0)


# ---------------------------------------------------------------- backward


def _topo_order(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
    if loss.values.ndim != 0 and loss.values.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._freed:
        raise GraphFreedError("backward: graph already consumed; re-run the forward pass")
    if loss.is_leaf:
        raise GraphFreedError("backward: loss has no recorded graph")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        if node.is_leaf:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        # route parents' contributions through a temporary grad slot
        parents = list({id(p): p for p in node._parents}.values())
        saved = [(p, p.grad) for p in parents]
        for p in parents:
            p.grad = None
        node._backward(g)
        for p, old in saved:
            contrib = p.grad
            p.grad = old
            if contrib is None:
                continue
            if p.is_leaf:
                _accumulate(p, contrib)
            else:
                grads[id(p)] = grads[id(p)] + contrib if id(p) in grads else contrib
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._freed = True
