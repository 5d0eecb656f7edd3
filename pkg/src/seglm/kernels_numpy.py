"""Reference kernels in plain numpy.

Semantic ground truth for the numba twins in ``kernels_numba``: every
function there must match the one here (bitwise for integer outputs,
to float tolerance for transcendentals). Layouts are deliberately flat,
rank 1 or 2; callers reshape.
"""

import numpy as np

# ---------------------------------------------------------------------------
# counter-based uniforms (squares32, Widynski)
# ---------------------------------------------------------------------------


def squares_u32(n: int, key: int) -> np.ndarray:
    """n uint32 draws from the squares32 counter generator under `key`."""
    ctr = np.arange(n, dtype=np.uint64)
    key = np.uint64(key)
    x = ctr * key
    y = x
    z = y + key
    x = x * x + y
    x = (x >> np.uint64(32)) | (x << np.uint64(32))
    x = x * x + z
    x = (x >> np.uint64(32)) | (x << np.uint64(32))
    x = x * x + y
    x = (x >> np.uint64(32)) | (x << np.uint64(32))
    return ((x * x + z) >> np.uint64(32)).astype(np.uint32)


def uniform01(n: int, key: int, dtype=np.float64) -> np.ndarray:
    """Open-interval uniforms in (0,1): (draw + 0.5) / 2^32."""
    u = squares_u32(n, key)
    return ((u.astype(np.float64) + 0.5) * (2.0**-32)).astype(dtype)


def dropout_mask(n: int, p: float, key: int, dtype=np.float32) -> np.ndarray:
    """Inverted dropout mask: 0 with probability p, else 1/(1-p).

    The keep decision is an integer compare so both backends agree bitwise.
    """
    thresh = np.uint32(min(int(p * 2.0**32), 2**32 - 1))
    keep = squares_u32(n, key) >= thresh
    return keep.astype(dtype) * dtype(1.0 / (1.0 - p))


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def masked_softmax(scores: np.ndarray, limits: np.ndarray, scale: float) -> np.ndarray:
    """Row-wise softmax of scores*scale over the first limits[r] columns.

    Entries at or beyond a row's limit are exactly zero in the output;
    downstream matmuls then ignore whatever values sit there. Every limit
    must be >= 1.
    """
    cols = np.arange(scores.shape[1])
    valid = cols[None, :] < limits[:, None]
    z = np.where(valid, scores * scores.dtype.type(scale), -np.inf)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_bwd(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    # rows sum over the full width; masked columns hold exact zeros
    dot = (probs * dprobs).sum(axis=1, keepdims=True)
    return probs * (dprobs - dot)


def xent_fwd(logits: np.ndarray, targets: np.ndarray):
    """Fused softmax + negative log-likelihood per row, in nats.

    Returns (losses, probs); probs are retained for the backward pass.
    """
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(logits.shape[0])
    losses = np.log(s[:, 0]) - (logits[rows, targets] - m[:, 0])
    return losses, probs


def xent_bwd(probs: np.ndarray, targets: np.ndarray, scale: float) -> np.ndarray:
    d = probs * probs.dtype.type(scale)
    rows = np.arange(probs.shape[0])
    d[rows, targets] -= probs.dtype.type(scale)
    return d


# ---------------------------------------------------------------------------
# normalization and activation
# ---------------------------------------------------------------------------

LN_EPS = 1e-5  # variance floor: zero-variance rows normalize to zeros


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(LN_EPS))
    y = xc * rstd[:, None] * gain[None, :] + bias[None, :]
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def layernorm_bwd(x, gain, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain[None, :]
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx.astype(x.dtype, copy=False), dgain, dbias


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return (0.5 * x * (1.0 + t)).astype(x.dtype, copy=False)


def gelu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return (dy * (0.5 * (1.0 + t) + 0.5 * x * dt)).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# segment scatter / gather
# ---------------------------------------------------------------------------


def scatter_mean_fwd(h: np.ndarray, seg: np.ndarray, m: int):
    """Mean of h rows grouped by segment id; empty segments come out zero."""
    counts = np.bincount(seg, minlength=m).astype(np.int64)
    s = np.zeros((m, h.shape[1]), dtype=h.dtype)
    np.add.at(s, seg, h)
    denom = np.maximum(counts, 1).astype(h.dtype)
    s /= denom[:, None]
    return s, counts


def scatter_mean_bwd(ds: np.ndarray, seg: np.ndarray, counts: np.ndarray) -> np.ndarray:
    denom = np.maximum(counts, 1).astype(ds.dtype)
    return (ds / denom[:, None])[seg]


def scatter_last_fwd(h: np.ndarray, seg: np.ndarray, m: int):
    """Last row of each segment (sub-sampling shortening)."""
    last = np.full(m, -1, dtype=np.int64)
    np.maximum.at(last, seg, np.arange(h.shape[0], dtype=np.int64))
    s = np.zeros((m, h.shape[1]), dtype=h.dtype)
    present = last >= 0
    s[present] = h[last[present]]
    return s, last


def scatter_last_bwd(ds: np.ndarray, last: np.ndarray, n: int) -> np.ndarray:
    dh = np.zeros((n, ds.shape[1]), dtype=ds.dtype)
    present = last >= 0
    dh[last[present]] = ds[present]
    return dh


def gather_rows(src: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return src[idx]


def scatter_add_rows(dout: np.ndarray, idx: np.ndarray, m: int) -> np.ndarray:
    dsrc = np.zeros((m, dout.shape[1]), dtype=dout.dtype)
    np.add.at(dsrc, idx, dout)
    return dsrc


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(p, g, m, v, lr, b1, b2, eps, c1, c2):
    """In-place Adam update; c1/c2 are the bias-correction terms 1-beta^t."""
    dt = p.dtype.type
    m *= dt(b1)
    m += dt(1.0 - b1) * g
    v *= dt(b2)
    v += dt(1.0 - b2) * g * g
    p -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
