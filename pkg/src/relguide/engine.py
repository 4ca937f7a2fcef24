"""Dense tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every op returns a new :class:`Tensor` that
remembers its parent tensors and a closure mapping its output gradient to
parent gradients. :func:`backward` walks the graph once in reverse
topological order and returns gradients in a dict keyed by tensor, so
independent graphs over shared parameter tensors never mutate shared state
and can safely run on worker threads.

Values are float32 by default. Ops preserve the dtype of their inputs, so a
float64 replica of a model can be pushed through the same code when an
oracle needs extra precision.

Relevance propagation is expressed with these same primitives (see
``relguide.lrp``), which is what makes a relevance-dependent loss term
trainable: one ``backward`` call differentiates through the whole two-path
graph.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, NumericalError


class Tensor:
    """A node in the computation graph.

    Leaf tensors (parameters, inputs, constants) have no parents. Non-leaf
    tensors carry a ``bwd`` closure returning one gradient array per parent
    (or None for a blocked path).
    """

    __slots__ = ("data", "parents", "bwd", "name", "cache")

    def __init__(self, data, parents=(), bwd=None, name=None, dtype=np.float32):
        arr = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.parents: tuple = tuple(parents)
        self.bwd: Optional[Callable] = bwd
        self.name = name
        self.cache = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=None)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"

    # -- operator sugar over the module-level ops -------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __pow__(self, p):
        return pow_const(self, float(p))

    def __neg__(self):
        return neg(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=None)


def const(x, dtype=np.float32) -> Tensor:
    """A leaf tensor that never receives a gradient entry of interest."""
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b), dtype=None)
    out.bwd = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b), dtype=None)
    out.bwd = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b), dtype=None)
    out.bwd = lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    )
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, (a, b), dtype=None)
    out.bwd = lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * out.data / b.data, b.data.shape),
    )
    return out


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,), dtype=None)


def pow_const(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data**p, (a,), dtype=None)
    out.bwd = lambda g: (g * p * a.data ** (p - 1.0),)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0), (a,), dtype=None)
    out.bwd = lambda g: (g * mask,)
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    out = Tensor(np.maximum(a.data, lo), (a,), dtype=None)
    passthru = a.data > lo
    out.bwd = lambda g: (g * passthru,)
    return out


# ---------------------------------------------------------------------------
# shape & reduction
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),), dtype=None)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.data.size,))


def transpose2d(a: Tensor) -> Tensor:
    return Tensor(a.data.T, (a,), lambda g: (g.T,), dtype=None)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), (a,), dtype=None)
    out.bwd = lambda g: (np.full(a.data.shape, g, dtype=a.data.dtype),)
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), (a,), dtype=None)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape),)

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D or 2-D @ 1-D matrix product."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 2-D @ 1/2-D, got {ad.shape} @ {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd, (a, b), dtype=None)
    if bd.ndim == 1:
        out.bwd = lambda g: (np.outer(g, bd), ad.T @ g)
    else:
        out.bwd = lambda g: (g @ bd.T, ad.T @ g)
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = W @ x + b for a 1-D input."""
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise DimensionError(f"dense expects vector input, got {x.data.shape}")
    if weight.data.shape[1] != x.data.shape[0]:
        raise DimensionError(
            f"dense weight {weight.data.shape} does not match input {x.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise DimensionError(f"dense bias {bias.data.shape} does not match {weight.data.shape}")
    return add(matmul(weight, x), bias)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def im2col_op(x: Tensor, k: int, stride: int, padding: int) -> Tensor:
    c, h, w = x.data.shape
    out = Tensor(kernels.im2col(x.data, k, stride, padding), (x,), dtype=None)
    out.bwd = lambda g: (kernels.col2im(g, c, h, w, k, stride, padding),)
    return out


def col2im_op(cols: Tensor, c: int, h: int, w: int, k: int, stride: int, padding: int) -> Tensor:
    out = Tensor(kernels.col2im(cols.data, c, h, w, k, stride, padding), (cols,), dtype=None)
    out.bwd = lambda g: (kernels.im2col(g, k, stride, padding),)
    return out


def conv2d_with_cache(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
):
    """Cross-correlation conv; returns (out, cache) where cache exposes the
    internal patch matrix and flat kernel for relevance propagation."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects (C,H,W) input and (Co,Ci,k,k) kernel, got {x.data.shape}, {kernel.data.shape}"
        )
    c_out, c_in, kh, kw = kernel.data.shape
    if kh != kw:
        raise DimensionError("conv2d kernels must be square")
    c, h, w = x.data.shape
    if c != c_in:
        raise DimensionError(f"kernel expects {c_in} input channels, input has {c}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("kernel larger than padded input")
    if bias.data.shape != (c_out,):
        raise DimensionError(f"conv bias {bias.data.shape} does not match {c_out} channels")
    ho = kernels.conv_out_size(h, kh, stride, padding)
    wo = kernels.conv_out_size(w, kw, stride, padding)
    cols = im2col_op(x, kh, stride, padding)
    wm = reshape(kernel, (c_out, c_in * kh * kw))
    zmat = add(matmul(wm, cols), reshape(bias, (c_out, 1)))
    out = reshape(zmat, (c_out, ho, wo))
    cache = {
        "cols": cols,
        "wm": wm,
        "zmat": zmat,
        "geom": (c, h, w, kh, stride, padding, ho, wo),
    }
    return out, cache


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    out, _ = conv2d_with_cache(x, kernel, bias, stride, padding)
    return out


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    c, h, w = x.data.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} exceeds input {x.data.shape}")
    data, idx = kernels.maxpool_forward(x.data, window, stride)
    out = Tensor(data, (x,), dtype=None)
    out.cache = idx
    out.bwd = lambda g: (kernels.pool_scatter(g, idx, h, w, window, stride),)
    return out


def pool_route(r: Tensor, idx: np.ndarray, in_hw, window: int, stride: int) -> Tensor:
    """Scatter per-window values to their recorded argmax positions.

    Forward is the winner-take-all redistribution used by relevance
    propagation; backward gathers at the same (fixed) positions.
    """
    h, w = in_hw
    out = Tensor(kernels.pool_scatter(r.data, idx, h, w, window, stride), (r,), dtype=None)
    out.bwd = lambda g: (kernels.pool_gather(g, idx, window, stride),)
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep * scale
    out = Tensor(x.data * mask, (x,), dtype=None)
    out.cache = mask
    out.bwd = lambda g: (g * mask,)
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], max-subtraction stabilized."""
    k = logits.data.shape[0]
    if logits.data.ndim != 1:
        raise DimensionError("softmax_cross_entropy expects a 1-D logit vector")
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    m = logits.data.max()
    z = logits.data - m
    e = np.exp(z)
    total = e.sum()
    p = e / total
    loss = np.log(total) - z[label]
    out = Tensor(loss, (logits,), dtype=None)

    def bwd(g):
        grad = p.copy()
        grad[label] -= 1
        return (grad * g,)

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# relevance-specific primitive
# ---------------------------------------------------------------------------

def stabilized_ratio(r: Tensor, z: Tensor, eps_scale: float, sign: int = 0) -> Tensor:
    """r / (z + eps*dir(z)) with eps = eps_scale * mean|z|.

    Fully differentiated, including the dependence of eps on z. A zero
    denominator yields 0 (such units carry no contributions). ``sign``
    forces the stabilizer direction (+1/-1) for single-signed inputs; 0
    uses sign(z) with sign(0) := +1.
    """
    zd = z.data
    denom = kernels.stab_denominator(zd, eps_scale, sign)
    nonzero = denom != 0
    safe = np.where(nonzero, denom, 1)
    out_data = np.where(nonzero, r.data / safe, 0)
    out = Tensor(out_data, (r, z), dtype=None)
    if sign == 0:
        direction = kernels.stable_sign(zd)
    else:
        direction = np.asarray(float(sign), dtype=zd.dtype)

    def bwd(g):
        gr = np.where(nonzero, g / safe, 0)
        core = np.where(nonzero, g * out_data / safe, 0)
        gz = -core
        if eps_scale > 0:
            # d eps/dz_j = eps_scale * sign(z_j) / N couples every element
            coupling = float((core * direction).sum()) * eps_scale / zd.size
            gz = gz - coupling * np.sign(zd)
        return gr, gz

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: float = 1.0, keep: Iterable[Tensor] = ()) -> dict:
    """Gradients of a scalar `root` w.r.t. every leaf tensor in its graph.

    Returns {tensor: ndarray}. Intermediate gradients are dropped as soon as
    their parents are served; pass tensors in ``keep`` to retain theirs too.
    Leaves that do not influence `root` are simply absent (i.e. zero).
    """
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {root.data.shape}")
    keep_ids = {id(t) for t in keep}
    order = _toposort(root)
    grads: dict = {root: np.asarray(seed, dtype=root.data.dtype).reshape(root.data.shape)}
    # arrays we allocated ourselves and may accumulate into in place;
    # first-stored arrays may alias op internals, so the first addition copies
    owned: set = set()
    for node in reversed(order):
        g = grads.get(node)
        if g is None or node.bwd is None:
            continue
        for p, pg in zip(node.parents, node.bwd(g)):
            if pg is None:
                continue
            acc = grads.get(p)
            if acc is None:
                grads[p] = pg
            elif id(acc) in owned and isinstance(acc, np.ndarray) and acc.ndim:
                np.add(acc, pg, out=acc)
            else:
                fresh = acc + pg
                grads[p] = fresh
                owned.add(id(fresh))
        if node.parents and id(node) not in keep_ids and node is not root:
            g_old = grads.pop(node)
            owned.discard(id(g_old))
    return grads


def grad_for(grads: dict, t: Tensor) -> np.ndarray:
    """Gradient of `t` from a backward() result, zero if unused."""
    g = grads.get(t)
    if g is None:
        return np.zeros_like(t.data)
    return g


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {what}")
