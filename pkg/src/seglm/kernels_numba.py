"""Numba-compiled kernels, one twin per function in ``kernels_numpy``.

The hot paths here are the fused masked softmax and the fused
cross-entropy: both avoid materializing masks and, in float32, use a
polynomial exp (range-reduced 2^f with a table for the 2^n rescale)
because scalar libm exp is far too slow for tens of millions of calls
on one core. Float64 variants keep libm exp; they only ever see the
small arrays of gradient-check runs.

Loops are plain ``range``: the target box is single-core and sequential
loops keep reductions deterministic by construction.
"""

import math

import numpy as np
from numba import njit

_LOG2E = 1.4426950408889634
_LN2 = 0.6931471805599453

# 2^n for n in [-150, 1], indexed by n + 150; covers the full float32 range
_POW2_TABLE = np.ldexp(1.0, np.arange(-150, 2)).astype(np.float32)


@njit(cache=True, inline="always")
def _expf(x, pow2):
    # exp(x) for x <= 0, float32 precision; |f| <= 0.5 keeps the
    # degree-6 Taylor remainder below ~1e-7 relative
    t = x * _LOG2E
    if t < -149.0:
        return np.float32(0.0)
    n = int(math.floor(t + 0.5))
    w = (t - n) * _LN2
    p = 1.0 + w * (1.0 + w * 0.5 * (1.0 + w / 3.0 * (1.0 + w * 0.25 * (1.0 + w * 0.2 * (1.0 + w / 6.0)))))
    return np.float32(p) * pow2[n + 150]


# ---------------------------------------------------------------------------
# counter-based uniforms
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _squares32(ctr, key):
    x = ctr * key
    y = x
    z = y + key
    x = x * x + y
    x = (x >> np.uint64(32)) | (x << np.uint64(32))
    x = x * x + z
    x = (x >> np.uint64(32)) | (x << np.uint64(32))
    x = x * x + y
    x = (x >> np.uint64(32)) | (x << np.uint64(32))
    return np.uint32((x * x + z) >> np.uint64(32))


@njit(cache=True)
def _squares_u32(n, key):
    out = np.empty(n, dtype=np.uint32)
    for i in range(n):
        out[i] = _squares32(np.uint64(i), key)
    return out


def squares_u32(n: int, key: int) -> np.ndarray:
    return _squares_u32(n, np.uint64(key))


def uniform01(n: int, key: int, dtype=np.float64) -> np.ndarray:
    u = _squares_u32(n, np.uint64(key))
    return ((u.astype(np.float64) + 0.5) * (2.0**-32)).astype(dtype)


@njit(cache=True)
def _dropout_mask(n, thresh, inv_keep, key):
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        if _squares32(np.uint64(i), key) >= thresh:
            out[i] = inv_keep
        else:
            out[i] = np.float32(0.0)
    return out


def dropout_mask(n: int, p: float, key: int, dtype=np.float32) -> np.ndarray:
    thresh = np.uint32(min(int(p * 2.0**32), 2**32 - 1))
    mask = _dropout_mask(n, thresh, np.float32(1.0 / (1.0 - p)), np.uint64(key))
    return mask.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


@njit(cache=True)
def _masked_softmax32(scores, limits, scale, pow2):
    rows, cols = scores.shape
    out = np.zeros((rows, cols), dtype=np.float32)
    for r in range(rows):
        lim = limits[r]
        m = scores[r, 0] * scale
        for j in range(1, lim):
            v = scores[r, j] * scale
            if v > m:
                m = v
        total = np.float32(0.0)
        for j in range(lim):
            e = _expf(scores[r, j] * scale - m, pow2)
            out[r, j] = e
            total += e
        inv = np.float32(1.0) / total
        for j in range(lim):
            out[r, j] *= inv
    return out


@njit(cache=True)
def _masked_softmax64(scores, limits, scale):
    rows, cols = scores.shape
    out = np.zeros((rows, cols), dtype=np.float64)
    for r in range(rows):
        lim = limits[r]
        m = scores[r, 0] * scale
        for j in range(1, lim):
            v = scores[r, j] * scale
            if v > m:
                m = v
        total = 0.0
        for j in range(lim):
            e = math.exp(scores[r, j] * scale - m)
            out[r, j] = e
            total += e
        inv = 1.0 / total
        for j in range(lim):
            out[r, j] *= inv
    return out


def masked_softmax(scores: np.ndarray, limits: np.ndarray, scale: float) -> np.ndarray:
    if scores.dtype == np.float32:
        return _masked_softmax32(scores, limits, np.float32(scale), _POW2_TABLE)
    return _masked_softmax64(scores, limits, float(scale))


@njit(cache=True)
def _masked_softmax_bwd(probs, dprobs):
    rows, cols = probs.shape
    out = np.empty_like(probs)
    for r in range(rows):
        dot = probs.dtype.type(0.0)
        for j in range(cols):
            dot += probs[r, j] * dprobs[r, j]
        for j in range(cols):
            out[r, j] = probs[r, j] * (dprobs[r, j] - dot)
    return out


def masked_softmax_bwd(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return _masked_softmax_bwd(probs, dprobs)


@njit(cache=True)
def _xent_fwd32(logits, targets, pow2):
    n, v = logits.shape
    losses = np.empty(n, dtype=np.float32)
    probs = np.empty((n, v), dtype=np.float32)
    for r in range(n):
        m = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > m:
                m = logits[r, j]
        total = np.float32(0.0)
        for j in range(v):
            e = _expf(logits[r, j] - m, pow2)
            probs[r, j] = e
            total += e
        inv = np.float32(1.0) / total
        for j in range(v):
            probs[r, j] *= inv
        losses[r] = np.float32(math.log(total)) - (logits[r, targets[r]] - m)
    return losses, probs


@njit(cache=True)
def _xent_fwd64(logits, targets):
    n, v = logits.shape
    losses = np.empty(n, dtype=np.float64)
    probs = np.empty((n, v), dtype=np.float64)
    for r in range(n):
        m = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > m:
                m = logits[r, j]
        total = 0.0
        for j in range(v):
            e = math.exp(logits[r, j] - m)
            probs[r, j] = e
            total += e
        inv = 1.0 / total
        for j in range(v):
            probs[r, j] *= inv
        losses[r] = math.log(total) - (logits[r, targets[r]] - m)
    return losses, probs


def xent_fwd(logits: np.ndarray, targets: np.ndarray):
    if logits.dtype == np.float32:
        return _xent_fwd32(logits, targets, _POW2_TABLE)
    return _xent_fwd64(logits, targets)


@njit(cache=True)
def _xent_bwd(probs, targets, scale):
    n, v = probs.shape
    d = np.empty_like(probs)
    for r in range(n):
        for j in range(v):
            d[r, j] = probs[r, j] * scale
        d[r, targets[r]] -= scale
    return d


def xent_bwd(probs: np.ndarray, targets: np.ndarray, scale: float) -> np.ndarray:
    return _xent_bwd(probs, targets, probs.dtype.type(scale))


# ---------------------------------------------------------------------------
# normalization and activation
# ---------------------------------------------------------------------------

LN_EPS = 1e-5


@njit(cache=True)
def _layernorm_fwd(x, gain, bias):
    rows, cols = x.shape
    y = np.empty_like(x)
    mean = np.empty(rows, dtype=x.dtype)
    rstd = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        acc = 0.0
        for j in range(cols):
            acc += x[r, j]
        mu = acc / cols
        acc = 0.0
        for j in range(cols):
            d = x[r, j] - mu
            acc += d * d
        rs = 1.0 / math.sqrt(acc / cols + LN_EPS)
        mean[r] = mu
        rstd[r] = rs
        for j in range(cols):
            y[r, j] = (x[r, j] - mu) * rs * gain[j] + bias[j]
    return y, mean, rstd


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    return _layernorm_fwd(x, gain, bias)


@njit(cache=True)
def _layernorm_bwd(x, gain, mean, rstd, dy):
    rows, cols = x.shape
    dx = np.empty_like(x)
    dgain = np.zeros(cols, dtype=x.dtype)
    dbias = np.zeros(cols, dtype=x.dtype)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            xhat = (x[r, j] - mean[r]) * rstd[r]
            dxh = dy[r, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat
            dgain[j] += dy[r, j] * xhat
            dbias[j] += dy[r, j]
        m1 /= cols
        m2 /= cols
        for j in range(cols):
            xhat = (x[r, j] - mean[r]) * rstd[r]
            dxh = dy[r, j] * gain[j]
            dx[r, j] = (dxh - m1 - xhat * m2) * rstd[r]
    return dx, dgain, dbias


def layernorm_bwd(x, gain, mean, rstd, dy):
    return _layernorm_bwd(x, gain, mean, rstd, dy)


_GELU_C = 0.7978845608028654
_GELU_A = 0.044715


@njit(cache=True, inline="always")
def _tanhf(u, pow2):
    # tanh through the fast exp: float32 precision, exact saturation
    a = -u if u < 0.0 else u
    e = _expf(-2.0 * a, pow2)
    t = (1.0 - e) / (1.0 + e)
    return -t if u < 0.0 else t


@njit(cache=True, fastmath=True)
def _gelu_fwd32(x, pow2):
    out = np.empty_like(x)
    flat = x.ravel()
    oflat = out.ravel()
    for i in range(flat.size):
        v = flat[i]
        t = _tanhf(_GELU_C * (v + _GELU_A * v * v * v), pow2)
        oflat[i] = 0.5 * v * (1.0 + t)
    return out


@njit(cache=True)
def _gelu_fwd64(x):
    out = np.empty_like(x)
    flat = x.ravel()
    oflat = out.ravel()
    for i in range(flat.size):
        v = flat[i]
        t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
        oflat[i] = 0.5 * v * (1.0 + t)
    return out


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    if x.dtype == np.float32:
        return _gelu_fwd32(x, _POW2_TABLE)
    return _gelu_fwd64(x)


@njit(cache=True, fastmath=True)
def _gelu_bwd32(x, dy, pow2):
    out = np.empty_like(x)
    xf = x.ravel()
    df = dy.ravel()
    of = out.ravel()
    for i in range(xf.size):
        v = xf[i]
        t = _tanhf(_GELU_C * (v + _GELU_A * v * v * v), pow2)
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        of[i] = df[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out


@njit(cache=True)
def _gelu_bwd64(x, dy):
    out = np.empty_like(x)
    xf = x.ravel()
    df = dy.ravel()
    of = out.ravel()
    for i in range(xf.size):
        v = xf[i]
        t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        of[i] = df[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out


def gelu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy)
    if x.dtype == np.float32:
        return _gelu_bwd32(x, dy, _POW2_TABLE)
    return _gelu_bwd64(x, dy)


# ---------------------------------------------------------------------------
# segment scatter / gather
# ---------------------------------------------------------------------------


@njit(cache=True)
def _scatter_mean_fwd(h, seg, m):
    n, d = h.shape
    s = np.zeros((m, d), dtype=h.dtype)
    counts = np.zeros(m, dtype=np.int64)
    for i in range(n):
        g = seg[i]
        counts[g] += 1
        for j in range(d):
            s[g, j] += h[i, j]
    for g in range(m):
        if counts[g] > 1:
            inv = h.dtype.type(1.0) / counts[g]
            for j in range(d):
                s[g, j] *= inv
    return s, counts


def scatter_mean_fwd(h: np.ndarray, seg: np.ndarray, m: int):
    return _scatter_mean_fwd(h, seg, m)


@njit(cache=True)
def _scatter_mean_bwd(ds, seg, counts):
    n = seg.shape[0]
    d = ds.shape[1]
    dh = np.empty((n, d), dtype=ds.dtype)
    for i in range(n):
        g = seg[i]
        inv = ds.dtype.type(1.0) / max(counts[g], 1)
        for j in range(d):
            dh[i, j] = ds[g, j] * inv
    return dh


def scatter_mean_bwd(ds: np.ndarray, seg: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return _scatter_mean_bwd(ds, seg, counts)


@njit(cache=True)
def _scatter_last_fwd(h, seg, m):
    n, d = h.shape
    last = np.full(m, -1, dtype=np.int64)
    for i in range(n):
        last[seg[i]] = i
    s = np.zeros((m, d), dtype=h.dtype)
    for g in range(m):
        if last[g] >= 0:
            for j in range(d):
                s[g, j] = h[last[g], j]
    return s, last


def scatter_last_fwd(h: np.ndarray, seg: np.ndarray, m: int):
    return _scatter_last_fwd(h, seg, m)


@njit(cache=True)
def _scatter_last_bwd(ds, last, n):
    d = ds.shape[1]
    dh = np.zeros((n, d), dtype=ds.dtype)
    for g in range(last.shape[0]):
        if last[g] >= 0:
            for j in range(d):
                dh[last[g], j] = ds[g, j]
    return dh


def scatter_last_bwd(ds: np.ndarray, last: np.ndarray, n: int) -> np.ndarray:
    return _scatter_last_bwd(ds, last, n)


@njit(cache=True)
def _gather_rows(src, idx):
    n = idx.shape[0]
    d = src.shape[1]
    out = np.empty((n, d), dtype=src.dtype)
    for i in range(n):
        for j in range(d):
            out[i, j] = src[idx[i], j]
    return out


def gather_rows(src: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return _gather_rows(src, idx)


@njit(cache=True)
def _scatter_add_rows(dout, idx, m):
    n, d = dout.shape
    dsrc = np.zeros((m, d), dtype=dout.dtype)
    for i in range(n):
        for j in range(d):
            dsrc[idx[i], j] += dout[i, j]
    return dsrc


def scatter_add_rows(dout: np.ndarray, idx: np.ndarray, m: int) -> np.ndarray:
    return _scatter_add_rows(dout, idx, m)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@njit(cache=True)
def _adam_step(p, g, m, v, lr, b1, b2, eps, c1, c2):
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)


def adam_step(p, g, m, v, lr, b1, b2, eps, c1, c2):
    # flat views so the update lands in the caller's arrays
    assert p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous
    _adam_step(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
               m.reshape(-1), v.reshape(-1), lr, b1, b2, eps, c1, c2)
