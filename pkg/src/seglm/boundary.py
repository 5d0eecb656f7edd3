"""Segment-boundary machinery: the learned predictor, stochastic relaxation,
rule-based teachers, and the auxiliary losses that supervise them.

Four ways to obtain a boundary vector live here or in :mod:`seglm.unigram`:

* a 2-layer MLP over causal hidden states, sampled through a hard
  Gumbel-sigmoid (stochastic, trainable end to end),
* the same MLP supervised by subword-tokenizer boundaries (``bce_loss``),
* the same MLP supervised by spikes in the model's own predictive entropy
  (``spike_boundaries``),
* plain rules (whitespace, every k-th position) that need no parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DataError, UsageError

TAU_DEFAULT = 0.5
ALPHA_DEFAULT = 0.2
SPIKE_WINDOW = 2
CLAMP_EPS = 1e-6
PREDICTOR_BIAS_INIT = -2.0  # early boundary rate ~ sigmoid(-2), avoids all-boundary starts


# ---------------------------------------------------------------------------
# learned predictor
# ---------------------------------------------------------------------------


@dataclass
class Predictor:
    w1: nm.Parameter
    b1: nm.Parameter
    w2: nm.Parameter
    b2: nm.Parameter


def init_predictor(store: nm.ParameterStore, d: int, hidden: int, rng,
                   dtype=np.float32, prefix: str = "boundary") -> Predictor:
    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dtype)

    return Predictor(
        w1=store.add(f"{prefix}.w1", normal(d, hidden)),
        b1=store.add(f"{prefix}.b1", np.zeros(hidden, dtype)),
        w2=store.add(f"{prefix}.w2", normal(hidden, 1)),
        b2=store.add(f"{prefix}.b2", np.full(1, PREDICTOR_BIAS_INIT, dtype)),
    )


def predict_probs(h: nm.Tensor, pred: Predictor) -> nm.Tensor:
    """Per-position boundary probability sigmoid(MLP(h_t)), shape (B, L)."""
    z = nm.gelu(nm.matmul(h, pred.w1.tensor) + pred.b1.tensor)
    logit = nm.matmul(z, pred.w2.tensor) + pred.b2.tensor
    return nm.sigmoid(nm.reshape(logit, h.shape[:-1]))


# ---------------------------------------------------------------------------
# stochastic relaxation
# ---------------------------------------------------------------------------


def clamp_unit(x: nm.Tensor, eps: float = CLAMP_EPS) -> nm.Tensor:
    """Pull values into [eps, 1-eps] so logs stay finite. Clamped positions
    pass no gradient, same as the usual clamp."""
    v = x.value
    x = nm.masked_fill(x, v >= eps, eps)
    return nm.masked_fill(x, v <= 1.0 - eps, 1.0 - eps)


def gumbel_sigmoid(bhat, u: np.ndarray, tau: float = TAU_DEFAULT) -> nm.Tensor:
    """Soft stochastic boundary: sigmoid((1/tau) log[b*u / ((1-b)(1-u))]).

    With u = 0.5 and tau = 1 this is the identity on bhat; hardened samples
    are Bernoulli(bhat) because the log ratio is positive iff u > 1 - bhat.
    """
    if tau <= 0.0:
        raise UsageError(f"temperature must be positive, got {tau}")
    if not isinstance(bhat, nm.Tensor):
        bhat = nm.tensor(bhat)
    c = clamp_unit(bhat)
    un = np.clip(np.asarray(u, dtype=bhat.value.dtype), CLAMP_EPS, 1.0 - CLAMP_EPS)
    noise = np.log(un) - np.log1p(-un)
    logit = (nm.tlog(c) - nm.tlog(1.0 - c) + noise) * (1.0 / tau)
    return nm.sigmoid(logit)


def harden(x: nm.Tensor) -> nm.Tensor:
    """Round to {0,1} (0.5 rounds up); straight-through backward."""
    hard = (x.value >= 0.5).astype(x.value.dtype)
    out = nm.Tensor(hard, (x,))
    out._backprop = lambda g: x._accum(g)
    return out


# ---------------------------------------------------------------------------
# entropy-spike teacher
# ---------------------------------------------------------------------------


def entropy_of(dist, bits: bool = False):
    """Shannon entropy along the last axis, 0*log(0) := 0. Nats by default."""
    p = np.asarray(dist, dtype=np.float64)
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        worst = float(np.abs(sums - 1.0).max())
        raise DataError(f"probabilities sum off by {worst:.2e}, not a distribution")
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    h = -plogp.sum(axis=-1)
    return h / math.log(2.0) if bits else h


def spike_boundaries(H: np.ndarray, k: int = SPIKE_WINDOW) -> np.ndarray:
    """b_t = 1 iff H_t strictly exceeds every H in the k previous positions.

    Works on the last axis. The first position has an empty window and never
    fires (a vacuous "all" would pin a boundary there every step).
    """
    if k < 1:
        raise UsageError(f"window must be >= 1, got {k}")
    H = np.asarray(H)
    window_max = np.full(H.shape, -np.inf, dtype=np.float64)
    for j in range(1, min(k, H.shape[-1] - 1) + 1):
        np.maximum(window_max[..., j:], H[..., :-j], out=window_max[..., j:])
    b = (H > window_max).astype(np.int8)
    b[..., 0] = 0
    return b


# ---------------------------------------------------------------------------
# auxiliary losses
# ---------------------------------------------------------------------------


def bce_loss(bhat: nm.Tensor, gold: np.ndarray) -> nm.Tensor:
    """Mean binary cross-entropy against a {0,1} target vector."""
    gold = np.asarray(gold)
    if gold.shape != tuple(bhat.shape):
        raise UsageError(f"bce_loss: predictions {tuple(bhat.shape)} vs targets {gold.shape}")
    g = gold.astype(bhat.value.dtype)
    c = clamp_unit(bhat)
    ll = nm.tlog(c) * g + nm.tlog(1.0 - c) * (1.0 - g)
    return -nm.tmean(ll)


def _lgamma(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return np.array([math.lgamma(v) for v in arr.reshape(-1)]).reshape(arr.shape)


def digamma(x) -> np.ndarray:
    """psi(x) for x > 0: shift into the asymptotic regime, then the series."""
    x = np.array(x, dtype=np.float64, copy=True)
    if np.any(x <= 0.0):
        raise UsageError("digamma defined here for positive arguments only")
    out = np.zeros_like(x)
    while True:
        small = x < 10.0
        if not small.any():
            break
        out[small] -= 1.0 / x[small]
        x[small] += 1.0
    inv2 = 1.0 / (x * x)
    series = inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)))
    return out + np.log(x) - 0.5 / x - series


def binomial_log_prior(l: int, k, alpha: float):
    """log C(l,k) + k log(alpha) + (l-k) log(1-alpha), stable via log-gamma.

    A Tensor k stays differentiable: d/dk runs through digamma, so the prior
    can shape the straight-through boundary count during training.
    """
    if not 0.0 < alpha < 1.0:
        raise UsageError(f"alpha must lie in (0,1), got {alpha}")
    const = math.lgamma(l + 1)
    la, l1a = math.log(alpha), math.log1p(-alpha)
    is_tensor = isinstance(k, nm.Tensor)
    kv = (k.value if is_tensor else np.asarray(k)).astype(np.float64)
    if np.any(kv < 0.0) or np.any(kv > l):
        raise UsageError(f"boundary count must lie in [0, {l}]")
    val = const - _lgamma(kv + 1.0) - _lgamma(l - kv + 1.0) + kv * la + (l - kv) * l1a
    if not is_tensor:
        return val if val.ndim else float(val)
    out = nm.Tensor(val.astype(k.value.dtype), (k,))

    def backprop(g):
        dk = -digamma(kv + 1.0) + digamma(l - kv + 1.0) + la - l1a
        k._accum((g * dk).astype(k.value.dtype))

    out._backprop = backprop
    return out


def binomial_prior_loss(l: int, k, alpha: float = ALPHA_DEFAULT):
    """-(1/l) log prior, averaged over whatever batch shape k carries."""
    prior = binomial_log_prior(l, k, alpha)
    if isinstance(prior, nm.Tensor):
        return -nm.tmean(prior) * (1.0 / l)
    return float(np.mean(prior)) * (-1.0 / l)
