"""Minimal reverse-mode autodiff over numpy arrays.

Every primitive returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the recorded graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
import threading

import numpy as np
from scipy import sparse
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; safe to use from several threads."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


def _check_finite(values, op):
    # a single reduction is far cheaper than an elementwise mask; only an
    # overflowing sum of finite values can false-alarm, so confirm then
    with np.errstate(over="ignore", invalid="ignore"):
        total = values.sum()
    if not np.isfinite(total) and not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op}: non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed", "_op")
    # make numpy defer to our reflected operators (array - Tensor etc.)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = None
        self._consumed = False
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a):
    """log(sigmoid(x)) without overflow for large |x|."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    # d/dx log sigmoid(x) = sigmoid(-x)
    s_neg = np.exp(out - x)

    def bw(g):
        return (g * s_neg,)

    return _make(out, (a,), bw, "log_sigmoid")


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(a, slope=0.2):
    x = a.data
    scale = np.where(x > 0, 1.0, slope)
    return _make(x * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def relu(a):
    return leaky_relu(a, 0.0)


# ------------------------------------------------------------ linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul: only 1-D/2-D operands supported, got {a.shape} and {b.shape}")

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw, "mean")


# -------------------------------------------------------------- normalizers

def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(a, eps=1e-5):
    """Normalize over the last axis (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), bw, "layer_norm")


# ------------------------------------------------------- indexing / joining

def index(a, idx):
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "index")


def take(table, rows):
    """Gather rows of a 2-D table (embedding lookup)."""
    rows = np.asarray(rows, dtype=np.int64)
    n = table.shape[0]
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise IndexError(f"take: row index out of range for table with {n} rows")

    def bw(g):
        out = _scatter_rows(g.reshape(rows.size, -1), rows.ravel(), n)
        return (out.reshape(table.shape),)

    return _make(table.data[rows], (table,), bw, "take")


def _scatter_rows(values, rows, n):
    m = sparse.csr_matrix(
        (np.ones(rows.size), (rows, np.arange(rows.size))), shape=(n, rows.size)
    )
    return np.asarray(m @ values)


def segment_sum(a, segments, num_segments):
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segments``."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {a.shape} rows vs {segments.shape} segment ids")
    flat = a.data.reshape(a.shape[0], -1)
    out = _scatter_rows(flat, segments, num_segments).reshape((num_segments,) + a.shape[1:])

    def bw(g):
        return (g[segments],)

    return _make(out, (a,), bw, "segment_sum")


def segment_softmax(a, segments, num_segments):
    """Softmax of rows of ``a`` within each segment, independently per column."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_softmax: {a.shape} rows vs {segments.shape} segment ids")
    x = a.data
    seg_max = np.full((num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(seg_max, segments, x)
    e = np.exp(x - seg_max[segments])
    flat = e.reshape(e.shape[0], -1)
    denom = _scatter_rows(flat, segments, num_segments).reshape(seg_max.shape)
    out = e / denom[segments]

    def bw(g):
        s = _scatter_rows((g * out).reshape(out.shape[0], -1), segments, num_segments)
        s = s.reshape(seg_max.shape)
        return (out * (g - s[segments]),)

    return _make(out, (a,), bw, "segment_softmax")


def attend(values, weights, src, dst, num_nodes):
    """Attention-weighted neighbourhood sum, one head at a time.

    ``values`` is (nodes, heads, d), ``weights`` is (edges, heads); returns
    out[v, h] = sum over edges e with dst[e] = v of weights[e, h] * values[src[e], h].
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    m, heads, d = values.shape
    if weights.shape != (len(src), heads) or len(dst) != len(src):
        raise ShapeError(f"attend: values {values.shape}, weights {weights.shape}, {len(src)} edges")
    mats = [sparse.csr_matrix((weights.data[:, h], (dst, src)), shape=(num_nodes, m)) for h in range(heads)]
    out = np.stack([mats[h] @ values.data[:, h, :] for h in range(heads)], axis=1)

    def bw(g):
        gv = np.stack([mats[h].T @ g[:, h, :] for h in range(heads)], axis=1)
        gw = np.einsum("ehd,ehd->eh", g[dst], values.data[src])
        return gv, gw

    return _make(out, (values, weights), bw, "attend")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


# ------------------------------------------------------------------ backward

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss._consumed:
        raise RuntimeError("backward already ran on this recording; re-run the forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss._consumed = True
    if not loss.requires_grad:
        return

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node._op != "leaf":
                raise RuntimeError(f"{node._op} node was already consumed by an earlier backward")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            _check_finite(pg, f"backward through {node._op}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        # free the closure so a second traversal is impossible
        node._backward = None
        node._parents = ()
