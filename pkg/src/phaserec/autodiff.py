"""Dense-tensor numerics with reverse-mode automatic differentiation.

Tape-based: ops executed inside a ``Graph`` context append (output, parents,
vjp) records in execution order; ``backward`` walks the tape once in reverse.
Execution order is the topological order, so gradient accumulation is
deterministic and two identical runs produce bit-identical gradients.

Storage is float32 by default. Non-finite values raise NumericError; by
default the check runs where trouble surfaces cheaply (tensor construction,
the loss scalar in backward, gradients at the optimizer), because checking
every intermediate would dominate the step time. Setting
``PHASEREC_STRICT_FINITE=1`` turns on per-op output checking, which
pinpoints the first op that produced a non-finite value. The hot kernels
(softmax, layer norm, scatter-add) dispatch through phaserec.kernels, which
selects numba or numpy at import time.
"""

import os

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32

STRICT_FINITE = os.environ.get("PHASEREC_STRICT_FINITE", "").strip() not in ("", "0")

_ACTIVE_GRAPH = None
_GRAD_ENABLED = True


def _check_finite(data, ctx):
    # single-pass detector: any NaN/Inf survives a float64 sum
    if data.size and not np.isfinite(np.sum(data, dtype=np.float64)):
        raise NumericError(f"non-finite values produced by {ctx}")


class Tensor:
    """N-d array node. Leaves created with requires_grad=True are parameters."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Ordered tape of op records for one differentiable computation."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_GRAPH
        self._prev = _ACTIVE_GRAPH
        _ACTIVE_GRAPH = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_GRAPH
        _ACTIVE_GRAPH = self._prev
        return False


class no_grad:
    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _out(data, ctx, parents, vjp):
    """Wrap op output; record on the active tape when gradients are needed."""
    if STRICT_FINITE:
        _check_finite(data, ctx)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    if _ACTIVE_GRAPH is not None and _GRAD_ENABLED:
        if any(p.requires_grad for p in parents):
            t.requires_grad = True
            _ACTIVE_GRAPH.nodes.append((t, parents, vjp))
    return t


def _as_const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _sum_to_shape(g, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(graph, loss):
    """Populate .grad on every requires_grad leaf reachable from loss.

    loss must be scalar. The tape is traversed exactly once, in reverse
    execution order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    _check_finite(loss.data, "loss")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for out, _, _ in graph.nodes}
    leaves = {}
    for out, parents, vjp in reversed(graph.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
            if pid not in produced:
                leaves[pid] = parent
        del g
    for pid, leaf in leaves.items():
        leaf.grad = grads[pid]


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as e:
        raise ShapeError(f"matmul broadcast mismatch: {ad.shape} x {bd.shape}") from e
    needs_a, needs_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _sum_to_shape(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape) if needs_a else None
        gb = _sum_to_shape(np.matmul(ad.swapaxes(-1, -2), g), bd.shape) if needs_b else None
        return ga, gb

    return _out(out, "matmul", (a, b), vjp)


def add(a, b):
    b = _as_const(b, a)
    out = a.data + b.data
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _sum_to_shape(g, sa), _sum_to_shape(g, sb)

    return _out(out, "add", (a, b), vjp)


def sub(a, b):
    b = _as_const(b, a)
    out = a.data - b.data
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _sum_to_shape(g, sa), -_sum_to_shape(g, sb)

    return _out(out, "sub", (a, b), vjp)


def mul(a, b):
    b = _as_const(b, a)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        ga = _sum_to_shape(g * bd, ad.shape) if a.requires_grad else None
        gb = _sum_to_shape(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _out(out, "mul", (a, b), vjp)


def neg(a):
    def vjp(g):
        return (-g,)

    return _out(-a.data, "neg", (a,), vjp)


def reshape(a, shape):
    orig = a.data.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _out(a.data.reshape(shape), "reshape", (a,), vjp)


def transpose(a, axes):
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _out(a.data.transpose(axes), "transpose", (a,), vjp)


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _out(out, "concat", tuple(tensors), vjp)


def take(a, indices, axis):
    """Gather along one axis with an integer index array.

    Backward scatter-adds through the kernel backend (np.add.at is the
    numpy fallback; the numba loop is the fast path).
    """
    idx = np.asarray(indices)
    ad = a.data
    out = np.take(ad, idx, axis=axis)
    shape = ad.shape
    outer = int(np.prod(shape[:axis], dtype=np.int64))
    inner = int(np.prod(shape[axis + 1 :], dtype=np.int64))
    length = shape[axis]
    idx_flat = np.ascontiguousarray(idx.reshape(-1).astype(np.int64))

    def vjp(g):
        acc = np.zeros(shape, dtype=g.dtype).reshape(outer, length, inner)
        g3 = np.ascontiguousarray(g.reshape(outer, idx_flat.size, inner))
        kernels.scatter_add_rows(acc, idx_flat, g3)
        return (acc.reshape(shape),)

    return _out(out, "take", (a,), vjp)


def gather_index(a, indices):
    """Pick one entry per row of a 2-d tensor: out[i] = a[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.int64)
    ad = a.data
    if ad.ndim != 2 or idx.shape != (ad.shape[0],):
        raise ShapeError(f"gather_index expects (n, c) and (n,), got {ad.shape} and {idx.shape}")
    rows = np.arange(ad.shape[0])
    out = ad[rows, idx]

    def vjp(g):
        acc = np.zeros_like(ad)
        np.add.at(acc, (rows, idx), g)
        return (acc,)

    return _out(out, "gather_index", (a,), vjp)


def _rows2d(data):
    return np.ascontiguousarray(data.reshape(-1, data.shape[-1]))


def softmax(a, axis=-1):
    """Numerically stabilized softmax (max subtraction) along one axis."""
    ad = a.data
    if axis in (-1, ad.ndim - 1):
        y2 = kernels.softmax_rows(_rows2d(ad))
        y = y2.reshape(ad.shape)

        def vjp(g):
            g2 = _rows2d(g)
            return (kernels.softmax_rows_grad(y2, g2).reshape(ad.shape),)

        return _out(y, "softmax", (a,), vjp)

    moved = np.moveaxis(ad, axis, -1)
    y2 = kernels.softmax_rows(_rows2d(moved))
    y = np.moveaxis(y2.reshape(moved.shape), -1, axis)

    def vjp(g):
        g2 = _rows2d(np.moveaxis(g, axis, -1))
        gx = kernels.softmax_rows_grad(y2, g2).reshape(moved.shape)
        return (np.moveaxis(gx, -1, axis),)

    return _out(y, "softmax", (a,), vjp)


def log_softmax(a, axis=-1):
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    z = ad - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _out(y, "log_softmax", (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shape mismatch: {gain.data.shape} vs ({d},)")
    x2 = _rows2d(xd)
    y2, mean, rstd = kernels.layernorm_rows(x2, gain.data, bias.data, eps)

    def vjp(g):
        g2 = _rows2d(g)
        gx, ggain, gbias = kernels.layernorm_rows_grad(x2, mean, rstd, gain.data, g2)
        gx = gx.reshape(xd.shape) if x.requires_grad else None
        return gx, ggain, gbias

    return _out(y2.reshape(xd.shape), "layer_norm", (x, gain, bias), vjp)


def relu(a):
    ad = a.data
    out = np.maximum(ad, 0)

    def vjp(g):
        return (g * (ad > 0),)

    return _out(out, "relu", (a,), vjp)


def sigmoid(a):
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _out(out, "sigmoid", (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).astype(ad.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ad.shape).astype(ad.dtype, copy=False),)

    return _out(out, "sum", (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims, dtype=ad.dtype)
    scale = ad.dtype.type(out.size / ad.size)

    def vjp(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, ad.shape) * scale).astype(ad.dtype, copy=False),)

    return _out(out, "mean", (a,), vjp)


def absolute(a):
    ad = a.data

    def vjp(g):
        return (g * np.sign(ad),)

    return _out(np.abs(ad), "abs", (a,), vjp)


def log_clamped(a, floor=1e-12):
    """log(max(x, floor)); gradient is zero where the clamp is active."""
    ad = a.data
    clamped = np.maximum(ad, floor)
    out = np.log(clamped)

    def vjp(g):
        return (g * (ad > floor) / clamped,)

    return _out(out, "log_clamped", (a,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, params, h=1e-3, coords=200, seed=0):
    """Max relative error between analytic gradients and central differences.

    f maps a list of parameter Tensors to a scalar Tensor and must work for
    any float dtype. Parameters are promoted to float64 for the check: a
    float32 function evaluation carries ~1e-7 relative noise, which a 1e-3
    step would amplify past every tolerance this check is used with. The
    analytic gradients are computed by the same backward code under test,
    at the same parameter values.

    Relative error per sampled coordinate i:
        |analytic_i - cd_i| / (|analytic_i| + |cd_i| + 1e-8)
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params64 = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in params]
    with Graph() as graph:
        loss = f(params64)
    backward(graph, loss)

    sizes = [p.data.size for p in params64]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(total)[: min(coords, total)]
    bounds = np.cumsum([0] + sizes)

    worst = 0.0
    for c in chosen:
        pi = int(np.searchsorted(bounds, c, side="right") - 1)
        fi = int(c - bounds[pi])
        p = params64[pi]
        orig = p.data.flat[fi]
        p.data.flat[fi] = orig + h
        lo_hi = float(f(params64).data)
        p.data.flat[fi] = orig - h
        lo_lo = float(f(params64).data)
        p.data.flat[fi] = orig
        cd = (lo_hi - lo_lo) / (2.0 * h)
        a = float(params64[pi].grad.flat[fi]) if params64[pi].grad is not None else 0.0
        rel = abs(a - cd) / (abs(a) + abs(cd) + 1e-8)
        if rel > worst:
            worst = rel
    return worst
