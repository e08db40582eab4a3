"""Tape-free reverse-mode differentiation over numpy arrays.

Every function in this module accepts plain ``np.ndarray`` values or
:class:`Tensor` values.  When no argument is a ``Tensor`` the call is a plain
numpy computation and returns an array, so the same shading and loss code
runs for inference (arrays) and training (tensors).

Only the operations needed by the coordinate networks, the renderer and the
losses are provided.  ``matmul`` supports ``(..., k) @ (k, m)``.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericDomainError


class Tensor:
    """Array node that tracks how to push gradients back to its parents."""

    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, parents=(), op="leaf"):
        self.data = np.asarray(data)
        # tuple of (parent Tensor, vjp callable)
        self.parents = parents
        self.op = op
        self.grad = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __len__(self):
        return len(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def backward(self, grad=None):
        """Accumulate ``d self / d leaf`` into ``leaf.grad`` for every leaf."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node.parents:
                pg = vjp(g)
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def is_tensor(x):
    return isinstance(x, Tensor)


def value(x):
    """Underlying array of ``x`` (identity for arrays and scalars)."""
    return x.data if isinstance(x, Tensor) else x


def _node(data, parents, op):
    parents = tuple((p, f) for p, f in parents if isinstance(p, Tensor))
    if not parents:
        return data
    return Tensor(data, parents, op)


def _check(out, op):
    if not np.all(np.isfinite(out)):
        raise NumericDomainError(op)
    return out


def _unbroadcast(g, shape):
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return _node(out, [(a, lambda g: _unbroadcast(g, _shape(av))),
                       (b, lambda g: _unbroadcast(g, _shape(bv)))], "add")


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _node(out, [(a, lambda g: _unbroadcast(g, _shape(av))),
                       (b, lambda g: _unbroadcast(-g, _shape(bv)))], "sub")


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    return _node(out, [(a, lambda g: _unbroadcast(g * bv, _shape(av))),
                       (b, lambda g: _unbroadcast(g * av, _shape(bv)))], "mul")


def div(a, b):
    av, bv = value(a), value(b)
    out = _check(av / bv, "div")
    return _node(out, [(a, lambda g: _unbroadcast(g / bv, _shape(av))),
                       (b, lambda g: _unbroadcast(-g * out / bv, _shape(bv)))], "div")


def neg(a):
    return _node(-value(a), [(a, lambda g: -g)], "neg")


def power(a, p):
    av = value(a)
    out = _check(av ** p, "power")
    return _node(out, [(a, lambda g: g * p * av ** (p - 1))], "power")


def square(a):
    av = value(a)
    return _node(av * av, [(a, lambda g: 2.0 * g * av)], "square")


def exp(a):
    out = _check(np.exp(value(a)), "exp")
    return _node(out, [(a, lambda g: g * out)], "exp")


def log(a):
    av = value(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.log(av)
    out = _check(raw, "log")
    return _node(out, [(a, lambda g: g / av)], "log")


def log1p(a):
    av = value(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.log1p(av)
    out = _check(raw, "log1p")
    return _node(out, [(a, lambda g: g / (1.0 + av))], "log1p")


def sqrt(a):
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.sqrt(value(a))
    out = _check(raw, "sqrt")
    return _node(out, [(a, lambda g: 0.5 * g / out)], "sqrt")


def abs_(a):
    av = value(a)
    return _node(np.abs(av), [(a, lambda g: g * np.sign(av))], "abs")


def sin(a):
    av = value(a)
    return _node(np.sin(av), [(a, lambda g: g * np.cos(av))], "sin")


def cos(a):
    av = value(a)
    return _node(np.cos(av), [(a, lambda g: -g * np.sin(av))], "cos")


def atan2(y, x, eps=1e-20):
    """Elementwise ``arctan2(y, x)``; the gradient is regularized at the origin."""
    yv, xv = value(y), value(x)
    out = np.arctan2(yv, xv)
    r2 = xv * xv + yv * yv + eps
    return _node(out, [(y, lambda g: _unbroadcast(g * xv / r2, _shape(yv))),
                       (x, lambda g: _unbroadcast(-g * yv / r2, _shape(xv)))], "atan2")


def sigmoid(a):
    av = value(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def softplus(a):
    av = value(a)
    out = np.logaddexp(0.0, av).astype(av.dtype, copy=False)
    return _node(out, [(a, lambda g: g * -np.expm1(-out))], "softplus")


def relu(a):
    av = value(a)
    out = np.maximum(av, 0)
    return _node(out, [(a, lambda g: g * (out > 0))], "relu")


def maximum(a, c):
    """``max(a, c)`` for a constant ``c``; gradient flows where ``a > c``."""
    av = value(a)
    out = np.maximum(av, c)
    return _node(out, [(a, lambda g: g * (av > c))], "maximum")


def minimum(a, c):
    av = value(a)
    out = np.minimum(av, c)
    return _node(out, [(a, lambda g: g * (av < c))], "minimum")


def clip(a, lo, hi):
    av = value(a)
    out = np.clip(av, lo, hi)
    return _node(out, [(a, lambda g: g * ((av >= lo) & (av <= hi)))], "clip")


def where(mask, a, b):
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask)
    av, bv = value(a), value(b)
    out = np.where(mask, av, bv)
    return _node(out, [(a, lambda g: _unbroadcast(np.where(mask, g, 0), _shape(av))),
                       (b, lambda g: _unbroadcast(np.where(mask, 0, g), _shape(bv)))], "where")


# -- reductions and shape ------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    av = value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape)

    return _node(out, [(a, vjp)], "sum")


def mean(a, axis=None, keepdims=False):
    av = value(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    av = value(a)
    return _node(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))], "reshape")


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a, idx):
    av = value(a)

    def vjp(g):
        out = np.zeros_like(av)
        if _is_basic(idx):
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _node(av[idx], [(a, vjp)], "getitem")


def concat(items, axis=-1):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def make(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _node(out, [(x, make(i)) for i, x in enumerate(items)], "concat")


def stack(items, axis=-1):
    """Stack along a new ``axis`` (only ``-1`` and ``0`` are needed here)."""
    expanded = [reshape(x, np.shape(value(x)) + (1,)) if axis == -1 else
                reshape(x, (1,) + np.shape(value(x))) for x in items]
    return concat(expanded, axis=axis)


def broadcast_to(a, shape):
    av = value(a)
    return _node(np.broadcast_to(av, shape), [(a, lambda g: _unbroadcast(g, av.shape))], "broadcast_to")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    """``(..., k) @ (k, m)``."""
    av, bv = value(a), value(b)
    if bv.ndim != 2:
        raise ValueError("matmul supports a 2-D right operand only")
    out = av @ bv
    k, m = bv.shape
    return _node(out, [(a, lambda g: g @ bv.T),
                       (b, lambda g: av.reshape(-1, k).T @ g.reshape(-1, m))], "matmul")


def _activate(pre, act):
    if act == "relu":
        return np.maximum(pre, 0, out=pre)
    if act == "identity":
        return pre
    if act == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * pre))
    if act == "softplus":
        return np.logaddexp(0.0, pre).astype(pre.dtype, copy=False)
    raise ValueError(f"unknown activation {act!r}")


def _act_grad(g, out, act):
    if act == "relu":
        return g * (out > 0)
    if act == "identity":
        return g
    if act == "sigmoid":
        return g * out * (1.0 - out)
    return g * -np.expm1(-out)  # softplus


def dense(inputs, weight, bias=None, act="identity"):
    """Fused ``act(sum_i inputs[i] @ W_i + b)``.

    ``weight`` is one ``(sum d_i, m)`` matrix whose consecutive row blocks
    ``W_i`` multiply the input pieces.  The pieces may have different but
    broadcast-compatible leading shapes, which is equivalent to concatenating
    the broadcast pieces along the last axis before a single matmul.
    """
    wv = value(weight)
    vals = [value(x) for x in inputs]
    dims = [v.shape[-1] for v in vals]
    if sum(dims) != wv.shape[0]:
        raise ValueError(f"dense: input width {sum(dims)} does not match weight rows {wv.shape[0]}")
    starts = np.concatenate([[0], np.cumsum(dims)])
    blocks = [wv[starts[i]:starts[i + 1]] for i in range(len(vals))]
    pre = None
    for v, w in zip(vals, blocks):
        term = v @ w
        pre = term if pre is None else pre + term
    if bias is not None:
        pre = pre + value(bias)
    out = _activate(pre, act)
    if act != "relu":
        _check(out, f"dense[{act}]")

    parents = []
    cache = {}

    def gpre(g):
        # all parents of this node receive the same upstream array
        if cache.get("g") is not g:
            cache["g"] = g
            cache["gp"] = _act_grad(g, out, act)
        return cache["gp"]

    m = wv.shape[1]

    def input_vjp(i):
        def vjp(g):
            gr = _unbroadcast(gpre(g), vals[i].shape[:-1] + (m,))
            return gr @ blocks[i].T
        return vjp

    for i, x in enumerate(inputs):
        parents.append((x, input_vjp(i)))

    def weight_vjp(g):
        gp = gpre(g)
        parts = []
        for v, d in zip(vals, dims):
            gr = _unbroadcast(gp, v.shape[:-1] + (m,))
            parts.append(v.reshape(-1, d).T @ gr.reshape(-1, m))
        return np.concatenate(parts, axis=0)

    parents.append((weight, weight_vjp))
    if bias is not None:
        parents.append((bias, lambda g: gpre(g).reshape(-1, m).sum(axis=0)))
    return _node(out, parents, f"dense[{act}]")


# -- helpers ---------------------------------------------------------------------


def normalize(v, axis=-1, eps=1e-12):
    """Unit vectors along ``axis``."""
    n = sqrt(sum_(square(v), axis=axis, keepdims=True) + eps)
    return div(v, n)


def dot(a, b, axis=-1, keepdims=False):
    return sum_(mul(a, b), axis=axis, keepdims=keepdims)


def grad(fn, params, *args, **kwargs):
    """Evaluate ``fn(params, *args)`` and its gradient w.r.t. ``params``.

    ``params`` is a dict of arrays.  ``fn`` must return a scalar built from the
    operations in this module.  Returns ``(loss_value, grads)`` with ``grads``
    a dict of arrays shaped like ``params`` (zeros for unused entries).
    """
    leaves = {k: Tensor(v) for k, v in params.items()}
    loss = fn(leaves, *args, **kwargs)
    lv = np.asarray(value(loss))
    if lv.size != 1:
        raise ValueError("grad: loss must be a scalar")
    if not np.isfinite(lv):
        raise NumericDomainError("loss")
    if isinstance(loss, Tensor):
        loss.backward()
    grads = {}
    for k, t in leaves.items():
        grads[k] = np.zeros_like(params[k]) if t.grad is None else np.asarray(t.grad, dtype=params[k].dtype)
    return float(lv), grads
