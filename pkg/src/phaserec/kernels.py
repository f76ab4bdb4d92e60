"""Hot numeric kernels: numba-jitted loops with pure-numpy fallbacks.

Backend selection happens once at import time. Set ``PHASEREC_NO_NUMBA=1``
to force the numpy path (also used automatically when numba is absent).
Both implementations of every kernel live in ``NUMPY_IMPLS`` / ``NUMBA_IMPLS``
so the benchmark in benchmarks/bench_kernels.py can compare them directly.
"""

import os

import numpy as np

_ENV_FLAG = "PHASEREC_NO_NUMBA"


def _numba_disabled() -> bool:
    return os.environ.get(_ENV_FLAG, "").strip() not in ("", "0")


# ---------------------------------------------------------------------------
# numpy implementations


def softmax_rows_np(x):
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_rows_grad_np(y, g):
    dot = np.sum(y * g, axis=1, keepdims=True)
    return y * (g - dot)


def layernorm_rows_np(x, gain, bias, eps):
    mean = np.mean(x, axis=1)
    var = np.var(x, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    y = xhat * gain[None, :] + bias[None, :]
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def layernorm_rows_grad_np(x, mean, rstd, gain, g):
    xhat = (x - mean[:, None].astype(x.dtype)) * rstd[:, None].astype(x.dtype)
    gg = g * gain[None, :]
    m1 = np.mean(gg, axis=1, keepdims=True)
    m2 = np.mean(gg * xhat, axis=1, keepdims=True)
    gx = (rstd[:, None] * (gg - m1 - xhat * m2)).astype(x.dtype, copy=False)
    ggain = np.sum(g * xhat, axis=0)
    gbias = np.sum(g, axis=0)
    return gx, ggain, gbias


def adam_update_np(p, g, m, v, lr, beta1, beta2, eps, corr1, corr2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / corr1
    vhat = v / corr2
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def scatter_add_rows_np(acc, idx, g):
    outer = acc.shape[0]
    np.add.at(acc, (np.arange(outer)[:, None], idx[None, :]), g)


NUMPY_IMPLS = {
    "softmax_rows": softmax_rows_np,
    "softmax_rows_grad": softmax_rows_grad_np,
    "layernorm_rows": layernorm_rows_np,
    "layernorm_rows_grad": layernorm_rows_grad_np,
    "adam_update": adam_update_np,
    "scatter_add_rows": scatter_add_rows_np,
}


# ---------------------------------------------------------------------------
# numba implementations (defined whenever numba imports, selected per env flag)

HAVE_NUMBA = False
NUMBA_IMPLS = {}

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    njit = None

if HAVE_NUMBA:

    @njit(cache=True)
    def softmax_rows_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(cols):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(cols):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def softmax_rows_grad_nb(y, g):
        rows, cols = y.shape
        gx = np.empty_like(y)
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += y[i, j] * g[i, j]
            for j in range(cols):
                gx[i, j] = y[i, j] * (g[i, j] - dot)
        return gx

    @njit(cache=True)
    def layernorm_rows_nb(x, gain, bias, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        mean = np.empty(rows, dtype=x.dtype)
        rstd = np.empty(rows, dtype=x.dtype)
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                s += x[i, j]
            mu = s / cols
            sq = 0.0
            for j in range(cols):
                d = x[i, j] - mu
                sq += d * d
            r = 1.0 / np.sqrt(sq / cols + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(cols):
                y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
        return y, mean, rstd

    @njit(cache=True)
    def layernorm_rows_grad_nb(x, mean, rstd, gain, g):
        rows, cols = x.shape
        gx = np.empty_like(x)
        ggain = np.zeros(cols, dtype=x.dtype)
        gbias = np.zeros(cols, dtype=x.dtype)
        for i in range(rows):
            mu = mean[i]
            r = rstd[i]
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                xh = (x[i, j] - mu) * r
                gg = g[i, j] * gain[j]
                m1 += gg
                m2 += gg * xh
                ggain[j] += g[i, j] * xh
                gbias[j] += g[i, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                xh = (x[i, j] - mu) * r
                gx[i, j] = r * (g[i, j] * gain[j] - m1 - xh * m2)
        return gx, ggain, gbias

    @njit(cache=True)
    def adam_update_nb(p, g, m, v, lr, beta1, beta2, eps, corr1, corr2):
        n = p.shape[0]
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            mhat = m[i] / corr1
            vhat = v[i] / corr2
            p[i] -= lr * mhat / (np.sqrt(vhat) + eps)

    @njit(cache=True)
    def scatter_add_rows_nb(acc, idx, g):
        outer, k, inner = g.shape
        for o in range(outer):
            for j in range(k):
                t = idx[j]
                for c in range(inner):
                    acc[o, t, c] += g[o, j, c]

    NUMBA_IMPLS = {
        "softmax_rows": softmax_rows_nb,
        "softmax_rows_grad": softmax_rows_grad_nb,
        "layernorm_rows": layernorm_rows_nb,
        "layernorm_rows_grad": layernorm_rows_grad_nb,
        "adam_update": adam_update_nb,
        "scatter_add_rows": scatter_add_rows_nb,
    }


# ---------------------------------------------------------------------------
# backend selection

if HAVE_NUMBA and not _numba_disabled():
    BACKEND = "numba"
    _active = NUMBA_IMPLS
else:
    BACKEND = "numpy"
    _active = NUMPY_IMPLS

softmax_rows = _active["softmax_rows"]
softmax_rows_grad = _active["softmax_rows_grad"]
layernorm_rows = _active["layernorm_rows"]
layernorm_rows_grad = _active["layernorm_rows_grad"]
adam_update = _active["adam_update"]
scatter_add_rows = _active["scatter_add_rows"]
