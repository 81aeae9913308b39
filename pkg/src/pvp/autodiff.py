"""Dense float64 tensors with a reverse-mode automatic differentiation tape.

Every primitive records its operands and a gradient closure on the output
tensor at forward time (dynamic tape). ``backward`` replays the tape in
exact reverse creation order, which is a valid reverse topological order
because an operand always exists before its consumer. Gradients only flow
into tensors whose ``requires_grad`` flag is set; everything else is left
untouched, so freezing a parameter is just clearing its flag.

All arithmetic is 64-bit. Randomness never comes from global state: the
initializer helpers take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_node_counter = itertools.count()


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    ``requires_grad`` on a leaf marks it trainable; on a non-leaf it means
    gradient flows through (set automatically when any parent requires grad).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_grad_fn", "_nid")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _grad_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._nid = next(_node_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        """Reset the gradient accumulator to exact zeros (allocating if absent)."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        """A leaf view of the same data, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # small amount of operator sugar; the named functions are the API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, op=op,
                  _parents=tuple(parents), _grad_fn=grad_fn if requires else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, _swap(b.data)), a.data.shape)
        gb = _unbroadcast(np.matmul(_swap(a.data), g), b.data.shape)
        return ga, gb

    return _result(out, (a, b), grad_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(out, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(out, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), grad_fn, "mul")


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not a graph node)."""
    c = float(c)
    return _result(t.data * c, (t,), lambda g: (g * c,), "scale")


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _result(out, (t,), grad_fn, "gelu")


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (t,), grad_fn, "softmax")


def layernorm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.data.shape != t.data.shape[-1:] or beta.data.shape != t.data.shape[-1:]:
        raise ShapeError(
            f"layernorm: affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature axis of {t.data.shape}")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        return dx, dgamma, dbeta

    return _result(out, (t, gamma, beta), grad_fn, "layernorm")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``logits`` is (batch, classes); ``labels`` is a 1-D integer array.
    """
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {x.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match "
                         f"batch of logits {x.shape}")
    n, k = x.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"cross_entropy: label out of range for {k} classes "
                         f"(got {int(labels.min())}..{int(labels.max())})")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + x.max(axis=-1)
    picked = x[np.arange(n), labels]
    out = np.mean(lse - picked)

    def grad_fn(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _result(out, (logits,), grad_fn, "cross_entropy")


def reshape(t: Tensor, shape: tuple) -> Tensor:
    out = t.data.reshape(shape)
    orig = t.data.shape
    return _result(out, (t,), lambda g: (g.reshape(orig),), "reshape")


def transpose(t: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = t.data.transpose(axes)
    return _result(out, (t,), lambda g: (g.transpose(inverse),), "transpose")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(parts), grad_fn, "concat")


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    index = [slice(None)] * t.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = t.data[index]

    def grad_fn(g):
        full = np.zeros_like(t.data)
        full[index] = g
        return (full,)

    return _result(out, (t,), grad_fn, "narrow")


def broadcast_to(t: Tensor, shape: tuple) -> Tensor:
    out = np.broadcast_to(t.data, shape).copy()
    orig = t.data.shape
    return _result(out, (t,), lambda g: (_unbroadcast(g, orig),), "broadcast_to")


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.data.shape).copy(),)

    return _result(out, (t,), grad_fn, "sum")


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.data.mean(axis=axis, keepdims=keepdims)
    count = t.data.size if axis is None else t.data.shape[axis]

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.data.shape).copy() / count,)

    return _result(out, (t,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# tape traversal
# ---------------------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    """All tape nodes the root depends on, via parents that carry gradient."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        for parent in node._parents:
            if parent.requires_grad:
                stack.append(parent)
    return list(seen.values())


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable trainable tensor.

    Visits nodes in exact reverse creation order (a reverse topological order
    of the tape), so two runs on the same graph are bitwise identical.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = sorted(_reachable(loss), key=lambda t: t._nid)
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad += g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in flows:
                flows[id(parent)] += pg
            else:
                flows[id(parent)] = np.asarray(pg, dtype=np.float64).copy()


def trace(root: Tensor) -> list[tuple[int, str, tuple[int, ...]]]:
    """The recorded graph below ``root`` as (output id, op, operand ids) rows,
    in creation (topological) order."""
    order = sorted(_reachable(root), key=lambda t: t._nid)
    return [(t._nid, t.op, tuple(p._nid for p in t._parents)) for t in order]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over an explicit parameter list.

    Refuses frozen tensors at construction so a training loop can never
    touch backbone weights by accident.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("AdamW given a tensor with requires_grad=False")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ValueError("AdamW.step: parameter has no gradient (run backward first)")
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# parameter initializers (explicit generator, never ambient randomness)
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)
