"""Boundary-driven sequence shortening and its inverse.

A boundary vector b assigns position t to segment 1 + sum(b[:t]); the
boundary at the final position is ignored for grouping, so the last segment
is never empty and G = sum(b[:-1]) + 1. Up-sampling indexes the middle-block
outputs with the inclusive sum m(t) = sum(b[:t+1]); m = 0 selects a learned
null vector, which is how the first tokens of a sequence avoid seeing their
own segment's summary (it would contain future positions).

Two routes compute the same thing:

* hard: integer segment ids driving scatter/gather kernels (production),
* soft: a Poisson-binomial distribution over segment counts driving dense
  matrix products (gradient checks and the optional soft-pooling mode).

With binary b the soft route degenerates to one-hot rows and the two agree
exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import numerics as nm
from .backend import K
from .errors import InternalError, UsageError


@dataclass
class PoolMap:
    """Integer pooling structure derived from one boundary vector."""

    b: np.ndarray        # (L,) binary
    seg: np.ndarray      # (L,) int64, 0-based segment id per position
    m: np.ndarray        # (L,) int64, inclusive boundary count (0 = null)
    G: int               # number of segments

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.seg, minlength=self.G)

    def matrix(self, width: int | None = None) -> np.ndarray:
        """One-hot (L, width) assignment matrix; width defaults to G."""
        width = self.G if width is None else width
        return np.eye(width, dtype=np.float64)[self.seg]


def build_pool_map(b) -> PoolMap:
    b = np.asarray(b)
    if b.ndim != 1 or b.size == 0:
        raise UsageError(f"boundary vector must be 1-d and non-empty, got shape {b.shape}")
    if not np.isin(b, (0, 1)).all():
        raise UsageError("boundary vector entries must be 0 or 1")
    m = np.cumsum(b.astype(np.int64))
    seg = np.concatenate([[0], m[:-1]])
    return PoolMap(b=b, seg=seg, m=m, G=int(seg[-1]) + 1)


def segment_ids(b: np.ndarray):
    """Batched (..., L) version of the PoolMap fields: (seg, m, G)."""
    b = np.asarray(b)
    m = np.cumsum(b.astype(np.int64), axis=-1)
    seg = np.concatenate([np.zeros_like(m[..., :1]), m[..., :-1]], axis=-1)
    return seg, m, seg[..., -1] + 1


# ---------------------------------------------------------------------------
# single-sequence array forms
# ---------------------------------------------------------------------------


def mean_pool(h: np.ndarray, pool: PoolMap) -> np.ndarray:
    if h.shape[0] != pool.seg.shape[0]:
        raise UsageError(f"h has {h.shape[0]} rows for {pool.seg.shape[0]} positions")
    s, _ = K.scatter_mean_fwd(np.ascontiguousarray(h), pool.seg, pool.G)
    return s


def subsample_pool(h: np.ndarray, pool: PoolMap) -> np.ndarray:
    if h.shape[0] != pool.seg.shape[0]:
        raise UsageError(f"h has {h.shape[0]} rows for {pool.seg.shape[0]} positions")
    s, _ = K.scatter_last_fwd(np.ascontiguousarray(h), pool.seg, pool.G)
    return s


def upsample_dynamic(s_prime: np.ndarray, pool: PoolMap, null_vector: np.ndarray) -> np.ndarray:
    if pool.m[-1] > s_prime.shape[0]:
        raise InternalError(
            f"boundary count {int(pool.m[-1])} exceeds {s_prime.shape[0]} segments")
    u = s_prime[np.maximum(pool.m - 1, 0)]
    u[pool.m == 0] = null_vector
    return u


# ---------------------------------------------------------------------------
# fixed-length shortening, closed form
# ---------------------------------------------------------------------------


def fixed_boundaries(l: int, k: int) -> np.ndarray:
    """b with a boundary at every k-th position; pooling this reproduces
    fixed_pool/fixed_upsample through the dynamic machinery."""
    if k < 1:
        raise UsageError(f"group size must be >= 1, got {k}")
    t = np.arange(1, l + 1)
    return ((t % k) == 0).astype(np.int8)


def fixed_pool(h: np.ndarray, k: int) -> np.ndarray:
    if k < 1:
        raise UsageError(f"group size must be >= 1, got {k}")
    l, d = h.shape
    g = math.ceil(l / k)
    padded = np.zeros((g * k, d), dtype=h.dtype)
    padded[:l] = h
    counts = np.full(g, k, dtype=h.dtype)
    counts[-1] = l - k * (g - 1)
    return padded.reshape(g, k, d).sum(axis=1) / counts[:, None]


def fixed_upsample(s_prime: np.ndarray, k: int, l: int, null_vector: np.ndarray) -> np.ndarray:
    """u_t = s'_ceil((t-k+1)/k); the k-1 leading positions hit the null index."""
    if k < 1:
        raise UsageError(f"group size must be >= 1, got {k}")
    t = np.arange(1, l + 1)
    j = -(-(t - k + 1) // k)  # integer ceil
    u = s_prime[np.maximum(j - 1, 0)]
    u[j <= 0] = null_vector
    return u


def shortening_factor(l: int, *, b=None, k: int | None = None) -> float:
    if l < 1:
        raise UsageError(f"sequence length must be >= 1, got {l}")
    if (b is None) == (k is None):
        raise UsageError("pass exactly one of b= or k=")
    g = build_pool_map(b).G if b is not None else math.ceil(l / k)
    return l / g


# ---------------------------------------------------------------------------
# batched graph ops, hard route
# ---------------------------------------------------------------------------


def _flat_ids(ids: np.ndarray, g_pad: int) -> np.ndarray:
    batch = ids.shape[0]
    offs = np.arange(batch, dtype=np.int64)[:, None] * g_pad
    return np.ascontiguousarray((ids + offs).reshape(-1))


def mean_pool_t(h: nm.Tensor, seg: np.ndarray, g_pad: int) -> nm.Tensor:
    """(B, L, d) -> (B, g_pad, d); empty padding segments come out zero."""
    batch, length, d = h.shape
    flat = _flat_ids(seg, g_pad)
    s, counts = K.scatter_mean_fwd(
        np.ascontiguousarray(h.value.reshape(batch * length, d)), flat, batch * g_pad)
    out = nm.Tensor(s.reshape(batch, g_pad, d), (h,))

    def backprop(g):
        dh = K.scatter_mean_bwd(
            np.ascontiguousarray(g.reshape(batch * g_pad, d)), flat, counts)
        h._accum(dh.reshape(batch, length, d))

    out._backprop = backprop
    return out


def subsample_pool_t(h: nm.Tensor, seg: np.ndarray, g_pad: int) -> nm.Tensor:
    batch, length, d = h.shape
    flat = _flat_ids(seg, g_pad)
    s, last = K.scatter_last_fwd(
        np.ascontiguousarray(h.value.reshape(batch * length, d)), flat, batch * g_pad)
    out = nm.Tensor(s.reshape(batch, g_pad, d), (h,))

    def backprop(g):
        dh = K.scatter_last_bwd(
            np.ascontiguousarray(g.reshape(batch * g_pad, d)), last, batch * length)
        h._accum(dh.reshape(batch, length, d))

    out._backprop = backprop
    return out


def upsample_t(s_prime: nm.Tensor, m: np.ndarray, null_vector: nm.Tensor) -> nm.Tensor:
    """u_t = s'_{m(t)}, null at m = 0. Gradient reaches s', the null vector,
    and nothing else; masked rows contribute exact zeros."""
    batch, g_pad, d = s_prime.shape
    if m.max() > g_pad:
        raise InternalError(f"boundary count {int(m.max())} exceeds {g_pad} segments")
    rows = _flat_ids(np.maximum(m - 1, 0), g_pad)
    flat = nm.reshape(s_prime, (batch * g_pad, d))
    gathered = nm.reshape(nm.take_rows(flat, rows), m.shape + (d,))
    keep = (m > 0)[..., None]
    return nm.masked_fill(gathered, keep, null_vector.tensor
                          if isinstance(null_vector, nm.Parameter) else null_vector)


# ---------------------------------------------------------------------------
# soft route: Poisson-binomial segment assignments
# ---------------------------------------------------------------------------


def soft_assignments(bhat: nm.Tensor, n_cols: int) -> nm.Tensor:
    """A[t, j] = P(sum of the first t boundaries == j), rows t = 0..L.

    Row t is the exclusive distribution for position t (its pooling weights);
    row t+1 is the inclusive one (its up-sampling weights). Computed by the
    running convolution A[t] = A[t-1]*(1-b_t) + shift(A[t-1])*b_t; truncating
    to n_cols leaves the kept columns exact.
    """
    bv = bhat.value
    batch, length = bv.shape
    a = np.zeros((batch, length + 1, n_cols), dtype=bv.dtype)
    a[:, 0, 0] = 1.0
    for t in range(1, length + 1):
        bt = bv[:, t - 1 : t]
        a[:, t, :] = a[:, t - 1, :] * (1.0 - bt)
        a[:, t, 1:] += a[:, t - 1, :-1] * bt
    out = nm.Tensor(a, (bhat,))

    def backprop(g):
        g = g.copy()
        db = np.zeros_like(bv)
        for t in range(length, 0, -1):
            bt = bv[:, t - 1 : t]
            gt = g[:, t, :]
            prev = a[:, t - 1, :]
            shifted = np.zeros_like(prev)
            shifted[:, 1:] = prev[:, :-1]
            db[:, t - 1] = (gt * (shifted - prev)).sum(axis=-1)
            g[:, t - 1, :] += gt * (1.0 - bt)
            g[:, t - 1, :-1] += gt[:, 1:] * bt
        bhat._accum(db)

    out._backprop = backprop
    return out


def soft_mean_pool(h: nm.Tensor, assign: nm.Tensor, eps: float = 1e-6) -> nm.Tensor:
    """Column-normalized soft pooling: s_j = sum_t P[t,j] h_t / sum_t P[t,j].

    Near-empty columns are clamped at eps; their numerators are bounded by
    the same column mass, so the ratio stays small instead of exploding.
    """
    length = h.shape[1]
    p = nm.take(assign, (slice(None), slice(0, length), slice(None)))
    num = nm.matmul(nm.transpose(p, (0, 2, 1)), h)
    den = nm.reshape(nm.tsum(p, axis=1), (h.shape[0], assign.shape[2], 1))
    den = nm.masked_fill(den, den.value >= eps, eps)
    return num / den


def soft_upsample(s_prime: nm.Tensor, assign: nm.Tensor, null_vector) -> nm.Tensor:
    """u_t = Q[t,0]*null + sum_j Q[t,j]*s'_j with Q the inclusive rows."""
    batch, g_pad, d = s_prime.shape
    if assign.shape[2] != g_pad + 1:
        raise UsageError(
            f"assignments carry {assign.shape[2]} columns, want {g_pad} segments + null")
    length = assign.shape[1] - 1
    q = nm.take(assign, (slice(None), slice(1, length + 1), slice(None)))
    null_t = null_vector.tensor if isinstance(null_vector, nm.Parameter) else null_vector
    null_rows = nm.mul(nm.reshape(null_t, (1, 1, d)), np.ones((batch, 1, 1), s_prime.dtype))
    table = nm.concat([null_rows, s_prime], axis=1)
    return nm.matmul(q, table)
