"""Dense tensors with a reverse-mode gradient tape.

Each differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks the graph in reverse topological order, visiting
every node once. Leaf tensors accumulate into ``.grad`` additively.

Shapes must match exactly except for two cases: a trailing-suffix "bias" add
(``x[..., d] + b[d]``), and adding a plain numpy constant, which follows numpy
broadcasting because no gradient flows into it.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    if dtype is None and isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f":
        return np.asarray(data)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # construction helpers -------------------------------------------------

    @classmethod
    def from_op(cls, data, parents, backward):
        """Create the output of an op.

        ``backward(g)`` must return one gradient (or ``None``) per parent.
        """
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # autodiff ---------------------------------------------------------------

    def _topo(self):
        order, seen = [], set()
        stack = [(self, False)]
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

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"implicit gradient needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast_suffix(g, shape):
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.reshape((-1,) + tuple(shape)).sum(axis=0)
    return g


def _check_suffix(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    if len(b_shape) < len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape):
        return
    raise ShapeError(f"{op}: shapes {tuple(a_shape)} and {tuple(b_shape)} are incompatible")


# elementwise ------------------------------------------------------------------------


def add(a, b):
    """``a + b``. ``b`` may be a trailing-suffix bias or a numpy constant."""
    a = _t(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        data = a.data + c
        if data.shape != a.shape:
            raise ShapeError(f"add: constant of shape {c.shape} would broadcast {a.shape} to {data.shape}")
        return Tensor.from_op(data, (a,), lambda g: (g,))
    _check_suffix(a.shape, b.shape, "add")
    b_shape = b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, _unbroadcast_suffix(g, b_shape)))


def sub(a, b):
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} must match")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product; ``b`` may be a python scalar."""
    a = _t(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return Tensor.from_op(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} must match")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def exp(x):
    x = _t(x)
    y = np.exp(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y,))


def relu(x):
    x = _t(x)
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GeLU, tanh approximation."""
    x = _t(x)
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    x2 = xd * xd
    th = np.tanh(c * xd * (1 + k * x2))
    y = xd * (1 + th)
    y *= xd.dtype.type(0.5)

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 k x^2)
        d = 1 - th * th
        d *= xd
        d *= c * (1 + 3 * k * x2)
        d += 1 + th
        d *= xd.dtype.type(0.5)
        d *= g
        return (d,)

    return Tensor.from_op(y, (x,), backward)


def dropout(x, p, rng=None, train=True):
    """Inverted dropout. ``p == 0`` or ``train=False`` returns ``x`` itself."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0 or not train:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 needs an rng")
    keep = rng.random(x.shape, dtype=np.float32) >= np.float32(p)
    scale = keep * x.dtype.type(1.0 / (1.0 - p))
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,))


# linear algebra / shape -----------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly, or ``b`` is a 2-D weight shared
    across all leading axes of ``a``.
    """
    a, b = _t(a), _t(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        k, n = bd.shape

        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return Tensor.from_op(ad @ bd, (a, b), backward)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor.from_op(ad @ bd, (a, b), backward)


def reshape(x, shape):
    x = _t(x)
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = _t(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x, index, axis):
    """Select one index along ``axis`` (drops the axis)."""
    x = _t(x)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        out[tuple(idx)] = g
        return (out,)

    return Tensor.from_op(np.take(x.data, index, axis=axis), (x,), backward)


def reduce_sum(x, axis=None, keepdims=False):
    x = _t(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = _t(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis, keepdims), 1.0 / float(n))


def embedding(table, ids):
    """Gather rows of ``table`` [V x d]; the result has shape ``ids.shape + (d,)``."""
    table = _t(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")
    vshape, dtype = table.shape, table.dtype

    def backward(g):
        out = np.zeros(vshape, dtype=dtype)
        np.add.at(out, ids.ravel(), g.reshape(ids.size, -1))
        return (out,)

    return Tensor.from_op(table.data[ids], (table,), backward)


# normalizations -------------------------------------------------------------------


def softmax(x, axis=-1):
    x = _t(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward)


def log_softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(y, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta

    return Tensor.from_op(y, (x, gamma, beta), backward)


# losses -----------------------------------------------------------------------------


def _selection(n, positions):
    if positions is None:
        return np.arange(n)
    positions = np.asarray(positions, dtype=np.int64).ravel()
    if positions.size and (positions.min() < 0 or positions.max() >= n):
        raise ShapeError(f"selected positions out of range [0, {n})")
    return positions


def cross_entropy(logits, targets, positions=None):
    """Mean negative log-likelihood of ``targets`` over the selected rows.

    ``logits`` is [n x V]; ``positions`` (optional) indexes the rows that count.
    """
    logits = _t(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n x V] logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {targets.shape[0]} targets for {n} rows")
    sel = _selection(n, positions)
    if sel.size == 0:
        raise ValueError("cross_entropy over an empty selection")
    tgt = targets[sel]
    if tgt.min() < 0 or tgt.max() >= v:
        raise ShapeError(f"cross_entropy targets out of range [0, {v})")
    rows = logits.data[sel]
    z = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    nll = np.log(s[:, 0]) - z[np.arange(sel.size), tgt]
    count = sel.size
    loss = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def backward(g):
        p = e / s
        p[np.arange(count), tgt] -= 1
        out = np.zeros_like(logits.data)
        np.add.at(out, sel, p * (g / count))
        return (out,)

    return Tensor.from_op(loss, (logits,), backward)


def binary_cross_entropy_with_logits(logits, labels, positions=None):
    """Mean of ``-[y log sig(z) + (1-y) log(1-sig(z))]`` in log space."""
    logits = _t(logits)
    z_all = logits.data.ravel()
    labels = np.asarray(labels).ravel()
    if labels.shape[0] != z_all.shape[0]:
        raise ShapeError(f"bce: {labels.shape[0]} labels for {z_all.shape[0]} logits")
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise ValueError("bce labels must be 0 or 1")
    sel = _selection(z_all.shape[0], positions)
    if sel.size == 0:
        raise ValueError("binary_cross_entropy over an empty selection")
    z = z_all[sel]
    y = labels[sel].astype(z.dtype)
    # softplus(z) - y*z, with softplus evaluated without overflow
    per = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))) - y * z
    count = sel.size
    loss = np.asarray(per.sum() / count, dtype=logits.dtype)
    shape = logits.shape

    def backward(g):
        ez = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1 / (1 + ez), ez / (1 + ez))
        out = np.zeros(z_all.shape, dtype=logits.dtype)
        np.add.at(out, sel, (sig - y) * (g / count))
        return (out.reshape(shape),)

    return Tensor.from_op(loss, (logits,), backward)
