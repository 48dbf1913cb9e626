"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives a ViT classifier needs are provided. Every op records a
closure that maps the output gradient onto its parents; ``backward`` walks the
graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ParameterError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match {t.data.shape} in {t.op}")
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", bw)


def embedding_add(x, table):
    """``x + table`` where ``table`` is a fixed (non-trainable) encoding of matching trailing shape."""
    table = np.asarray(table.data if isinstance(table, Tensor) else table, dtype=np.float64)
    x = as_tensor(x)
    if x.shape[-table.ndim:] != table.shape:
        raise ShapeError(f"embedding_add: table {table.shape} does not match trailing dims of {x.shape}")
    return _node(x.data + table, (x,), "embedding_add", lambda g: _acc(x, g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", bw)


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), "scale", lambda g: _acc(x, g * c))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), "matmul", bw)


def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]))
        if b is not None and b.requires_grad:
            _acc(b, g.reshape(-1, w.shape[1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, "linear", bw)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.shape).copy())

    return _node(np.asarray(out), (x,), "sum", bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(1, np.asarray(out).size)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g / n, x.shape).copy())

    return _node(np.asarray(out), (x,), "mean", bw)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _node(out, (x,), "reshape", lambda g: _acc(x, g.reshape(x.shape)))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), "transpose", lambda g: _acc(x, g.transpose(inv)))


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _acc(x, part)

    return _node(out, xs, "concat", bw)


def index(x, idx):
    """Basic (non-advanced) indexing, e.g. ``index(h, (slice(None), 0))``."""
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        _acc(x, full)

    return _node(np.array(out), (x,), "index", bw)


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _node(out, (x,), "broadcast_to", lambda g: _acc(x, _unbroadcast(g, x.shape)))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (x,), "softmax", bw)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then apply the optional affine ``gamma``, ``beta``."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (d,):
            raise ShapeError(f"layer_norm: gamma {gamma.shape} does not match feature dim {d}")
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (d,):
            raise ShapeError(f"layer_norm: beta {beta.shape} does not match feature dim {d}")
        out = out + beta.data
        parents.append(beta)

    def bw(g):
        gflat = g.reshape(-1, d)
        if gamma is not None and gamma.requires_grad:
            _acc(gamma, (gflat * xhat.reshape(-1, d)).sum(axis=0))
        if beta is not None and beta.requires_grad:
            _acc(beta, gflat.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data if gamma is not None else g
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _acc(x, dx)

    return _node(out, parents, "layer_norm", bw)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _acc(x, g * (cdf + x.data * pdf))

    return _node(x.data * cdf, (x,), "gelu", bw)


def dropout_mask(shape, p, seed, key=0, step=0):
    """Keep-mask from a counter-based Philox stream keyed by (seed, key, step)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(key) & 0xFFFFFFFF, int(step)])
    rng = np.random.Generator(np.random.Philox(ss))
    return rng.random(shape) >= p


def dropout(x, p, seed=0, train=True, key=0, step=0):
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability {p} not in [0, 1)")
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    keep = dropout_mask(x.shape, p, seed, key, step) / (1.0 - p)
    return _node(x.data * keep, (x,), "dropout", lambda g: _acc(x, g * keep))


def add_constant(x, c):
    """``x + c`` for a constant array ``c`` (e.g. an additive attention mask)."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=np.float64)
    out = x.data + c
    return _node(out, (x,), "add_constant", lambda g: _acc(x, _unbroadcast(g, x.shape)))


# --------------------------------------------------------------------------
# loss

@dataclass(frozen=True)
class ClassWeights:
    w: tuple

    def __post_init__(self):
        if len(self.w) != 4 or any(not (v > 0) for v in self.w):
            raise ContractError(f"class weights must be 4 positive reals, got {self.w}")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.w, dtype=dtype or np.float64)


def weighted_cross_entropy(logits, labels, weights=None):
    """Class-weighted cross-entropy.

    For a single logit vector the result is ``-w[label] * log softmax(logits)[label]``.
    For a batch ``(B, C)`` the per-sample losses are summed and divided by the
    sum of the weights applied.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    n, c = z.shape
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer) \
            or np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"invalid label(s) {labels.tolist()} for {c} classes")
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (c,):
        raise ContractError(f"weights {w.shape} do not match {c} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    wi = w[labels]
    per = -wi * logp[rows, labels]
    denom = 1.0 if single else wi.sum()
    loss = per.sum() / denom

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        onehot[rows, labels] = 1.0
        grad = (wi[:, None] * (p - onehot)) * (float(g) / denom)
        _acc(logits, grad[0] if single else grad)

    return _node(np.asarray(loss), (logits,), "weighted_cross_entropy", bw)


# --------------------------------------------------------------------------
# reverse pass

def _topo(root):
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


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # free interior buffers
    loss.grad = None


def grad(loss, params):
    """Zero, backprop, and return the gradient arrays for ``params`` (zeros where unused)."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
