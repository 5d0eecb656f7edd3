"""Three-block character-level Transformer with learned sequence shortening.

Block 1 reads characters at full resolution, a boundary method groups the
positions into segments, block 2 works on the pooled segments, and block 3
reads the up-sampled segment states added back onto the block-1 states. All
attention is causal, including between segments, and the up-sampling rule
only ever hands position t a segment that closed at or before t, so logits
at a position never see the future. In deterministic evaluation mode the
segment axis is padded to the full sequence length: shapes stay constant,
masked attention writes exact zeros, and prefix logits are bitwise stable
under any suffix rewrite.

Boundary methods: vanilla (every position its own segment, no shortening),
fixed (every k-th position), whitespaces (close at each space), gumbel
(stochastic hard samples from a learned predictor), unigram and entropy
(the same predictor supervised by a tokenizer or by the model's own
entropy spikes).
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import boundary as bd
from . import numerics as nm
from . import pooling as pl
from .backend import (
    STREAM_ATTN_DROP,
    STREAM_BOUNDARY_NOISE,
    STREAM_EMBED_DROP,
    STREAM_FF_DROP,
    STREAM_RESID_DROP,
    K,
    stream_key,
)
from .errors import ConfigError, DataError

METHODS = ("vanilla", "fixed", "gumbel", "unigram", "entropy", "whitespaces")
LEARNED_METHODS = ("gumbel", "unigram", "entropy")
POOLINGS = ("mean", "subsample")

CHECKPOINT_MAGIC = b"SGLM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 128
    ff: int = 512
    heads: int = 4
    layers: tuple = (1, 2, 1)
    dropout: float = 0.1
    method: str = "gumbel"
    fixed_k: int = 2
    pooling: str = "mean"
    tau: float = 0.5
    alpha: float = 0.2
    prior_weight: float = 1.0
    bce_weight: float = 1.0
    spike_window: int = 2
    predictor_hidden: Optional[int] = None  # defaults to ff
    space_id: Optional[int] = None
    param_dtype: str = "float32"

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}, expected one of {POOLINGS}")
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if len(self.layers) != 3 or self.layers[0] < 1 or self.layers[2] < 1 or self.layers[1] < 0:
            raise ConfigError(f"layers must be (n1>=1, n2>=0, n3>=1), got {self.layers}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab size must be >= 2, got {self.vocab_size}")
        if self.fixed_k < 1:
            raise ConfigError(f"fixed_k must be >= 1, got {self.fixed_k}")

    @property
    def dtype(self):
        return np.dtype(self.param_dtype)

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


REFERENCE_LAYERS = (2, 8, 2)


def reference_config(vocab_size: int = 27, **overrides) -> ModelConfig:
    base = dict(vocab_size=vocab_size, d=512, ff=2048, heads=8, layers=REFERENCE_LAYERS)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


@dataclass
class LayerParams:
    index: int  # global layer index, keys the dropout streams
    wq: nm.Parameter
    bq: nm.Parameter
    wk: nm.Parameter
    bk: nm.Parameter
    wv: nm.Parameter
    bv: nm.Parameter
    wo: nm.Parameter
    bo: nm.Parameter
    wr: nm.Parameter
    u: nm.Parameter
    v: nm.Parameter
    ln1_g: nm.Parameter
    ln1_b: nm.Parameter
    ff_w1: nm.Parameter
    ff_b1: nm.Parameter
    ff_w2: nm.Parameter
    ff_b2: nm.Parameter
    ln2_g: nm.Parameter
    ln2_b: nm.Parameter


_SIN_CACHE: dict = {}
_SHIFT_CACHE: dict = {}


def _sinusoid_table(length: int, d: int, dtype) -> np.ndarray:
    key = (length, d, np.dtype(dtype).str)
    if key not in _SIN_CACHE:
        pos = np.arange(length, dtype=np.float64)[:, None]
        inv = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
        ang = pos * inv
        table = np.zeros((length, d), dtype=np.float64)
        table[:, 0::2] = np.sin(ang)
        table[:, 1::2] = np.cos(ang)
        _SIN_CACHE[key] = table.astype(dtype)
    return _SIN_CACHE[key]


def _shift_index(length: int) -> np.ndarray:
    if length not in _SHIFT_CACHE:
        i = np.arange(length, dtype=np.int64)[:, None]
        j = np.arange(length, dtype=np.int64)[None, :]
        _SHIFT_CACHE[length] = ((i - j) % length, j <= i)
    return _SHIFT_CACHE[length]


def rel_shift(p: nm.Tensor) -> nm.Tensor:
    """Turn per-offset scores p[..., i, o] into per-key scores out[..., i, j]
    with o = i - j. Row-wise the index map is a self-inverse permutation, so
    the backward pass is the same gather, with future keys masked off (they
    carry no legitimate gradient under a causal mask)."""
    length = p.shape[-1]
    idx, tril = _shift_index(length)
    idx_b = np.broadcast_to(idx, p.value.shape)
    out = nm.Tensor(np.take_along_axis(p.value, idx_b, axis=-1), (p,))

    def backprop(g):
        g = np.where(tril, g, 0.0)
        p._accum(np.take_along_axis(g, idx_b, axis=-1))

    out._backprop = backprop
    return out


class Hourglass:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg = dataclasses.replace(cfg)  # own our copy
        self.cfg = cfg
        self.store = nm.ParameterStore()
        rng = np.random.default_rng(seed)
        dt = cfg.dtype

        def normal(name, *shape):
            return self.store.add(name, (rng.standard_normal(shape) * 0.02).astype(dt))

        def zeros(name, *shape):
            return self.store.add(name, np.zeros(shape, dt))

        def ones(name, *shape):
            return self.store.add(name, np.ones(shape, dt))

        self.embed = normal("embed.table", cfg.vocab_size, cfg.d)
        self.blocks = []
        gidx = 0
        for bi, n_layers in enumerate(cfg.layers, start=1):
            block = []
            for li in range(n_layers):
                p = f"block{bi}.layer{li}"
                block.append(LayerParams(
                    index=gidx,
                    wq=normal(f"{p}.attn.wq", cfg.d, cfg.d),
                    bq=zeros(f"{p}.attn.bq", cfg.d),
                    wk=normal(f"{p}.attn.wk", cfg.d, cfg.d),
                    bk=zeros(f"{p}.attn.bk", cfg.d),
                    wv=normal(f"{p}.attn.wv", cfg.d, cfg.d),
                    bv=zeros(f"{p}.attn.bv", cfg.d),
                    wo=normal(f"{p}.attn.wo", cfg.d, cfg.d),
                    bo=zeros(f"{p}.attn.bo", cfg.d),
                    wr=normal(f"{p}.attn.wr", cfg.d, cfg.d),
                    u=normal(f"{p}.attn.u", cfg.heads, cfg.head_dim),
                    v=normal(f"{p}.attn.v", cfg.heads, cfg.head_dim),
                    ln1_g=ones(f"{p}.ln1.g", cfg.d),
                    ln1_b=zeros(f"{p}.ln1.b", cfg.d),
                    ff_w1=normal(f"{p}.ff.w1", cfg.d, cfg.ff),
                    ff_b1=zeros(f"{p}.ff.b1", cfg.ff),
                    ff_w2=normal(f"{p}.ff.w2", cfg.ff, cfg.d),
                    ff_b2=zeros(f"{p}.ff.b2", cfg.d),
                    ln2_g=ones(f"{p}.ln2.g", cfg.d),
                    ln2_b=zeros(f"{p}.ln2.b", cfg.d),
                ))
                gidx += 1
            self.blocks.append(block)
        self.null = normal("null", cfg.d)
        self.head_w = normal("head.w", cfg.d, cfg.vocab_size)
        self.head_b = zeros("head.b", cfg.vocab_size)
        if cfg.method in LEARNED_METHODS:
            hidden = cfg.predictor_hidden or cfg.ff
            self.predictor = bd.init_predictor(self.store, cfg.d, hidden, rng, dtype=dt)
        else:
            self.predictor = None

    # -- transformer blocks -------------------------------------------------

    def _layernorm(self, x: nm.Tensor, gain: nm.Parameter, bias: nm.Parameter) -> nm.Tensor:
        batch, length, d = x.shape
        flat = nm.layernorm(nm.reshape(x, (batch * length, d)), gain.tensor, bias.tensor)
        return nm.reshape(flat, (batch, length, d))

    def _attention(self, x: nm.Tensor, lp: LayerParams, limits: np.ndarray,
                   training: bool, step: int, seed: int) -> nm.Tensor:
        cfg = self.cfg
        batch, length, d = x.shape
        heads, dh = cfg.heads, cfg.head_dim

        def split(t):
            return nm.transpose(nm.reshape(t, (batch, length, heads, dh)), (0, 2, 1, 3))

        q = split(nm.matmul(x, lp.wq.tensor) + lp.bq.tensor)
        k = split(nm.matmul(x, lp.wk.tensor) + lp.bk.tensor)
        v = split(nm.matmul(x, lp.wv.tensor) + lp.bv.tensor)

        rproj = nm.matmul(_sinusoid_table(length, d, cfg.dtype), lp.wr.tensor)
        r = nm.transpose(nm.reshape(rproj, (length, heads, dh)), (1, 2, 0))  # (H, dh, T)

        qu = q + nm.reshape(lp.u.tensor, (1, heads, 1, dh))
        qv = q + nm.reshape(lp.v.tensor, (1, heads, 1, dh))
        content = nm.matmul(qu, nm.transpose(k, (0, 1, 3, 2)))
        position = rel_shift(nm.matmul(qv, r))

        lim = np.ascontiguousarray(
            np.broadcast_to(limits[:, None, :], (batch, heads, length)).astype(np.int64))
        probs = nm.masked_softmax(content + position, lim, 1.0 / math.sqrt(dh))
        probs = nm.dropout(probs, cfg.dropout,
                           stream_key(seed, step, STREAM_ATTN_DROP + lp.index), training)
        ctx = nm.matmul(probs, v)
        ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (batch, length, d))
        out = nm.matmul(ctx, lp.wo.tensor) + lp.bo.tensor
        out = nm.dropout(out, cfg.dropout,
                         stream_key(seed, step, STREAM_RESID_DROP + lp.index), training)
        return self._layernorm(x + out, lp.ln1_g, lp.ln1_b)

    def _feedforward(self, x: nm.Tensor, lp: LayerParams,
                     training: bool, step: int, seed: int) -> nm.Tensor:
        inner = nm.gelu(nm.matmul(x, lp.ff_w1.tensor) + lp.ff_b1.tensor)
        out = nm.matmul(inner, lp.ff_w2.tensor) + lp.ff_b2.tensor
        out = nm.dropout(out, self.cfg.dropout,
                         stream_key(seed, step, STREAM_FF_DROP + lp.index), training)
        return self._layernorm(x + out, lp.ln2_g, lp.ln2_b)

    def _block(self, x: nm.Tensor, layers, limits: np.ndarray,
               training: bool, step: int, seed: int) -> nm.Tensor:
        for lp in layers:
            x = self._attention(x, lp, limits, training, step, seed)
            x = self._feedforward(x, lp, training, step, seed)
        return x

    # -- boundaries ----------------------------------------------------------

    def _boundaries(self, tokens: np.ndarray, h: nm.Tensor,
                    training: bool, step: int, seed: int):
        """Returns (b: (B,L) int8, bhat: Tensor|None, sample: Tensor|None).

        `sample` is the in-graph boundary tensor for the learned methods:
        hardened (straight-through) in the hard route, and it is what the
        Binomial prior's boundary count sums over.
        """
        cfg = self.cfg
        batch, length = tokens.shape
        if cfg.method == "vanilla":
            return np.ones((batch, length), np.int8), None, None
        if cfg.method == "fixed":
            b = np.broadcast_to(pl.fixed_boundaries(length, cfg.fixed_k), (batch, length))
            return np.ascontiguousarray(b), None, None
        if cfg.method == "whitespaces":
            if cfg.space_id is None:
                raise ConfigError("whitespaces method needs space_id in the model config")
            return (tokens == cfg.space_id).astype(np.int8), None, None
        bhat = bd.predict_probs(h, self.predictor)
        if cfg.method == "gumbel" and training:
            u = K.uniform01(batch * length,
                            stream_key(seed, step, STREAM_BOUNDARY_NOISE),
                            dtype=cfg.dtype).reshape(batch, length)
            sample = bd.harden(bd.gumbel_sigmoid(bhat, u, cfg.tau))
        else:
            sample = bd.harden(bhat)
        return sample.value.astype(np.int8), bhat, sample

    # -- forward -------------------------------------------------------------

    def forward(self, tokens: np.ndarray, *, training: bool = False, step: int = 0,
                seed: int = 0, soft_pool: bool = False, pad_segments: Optional[int] = None):
        """Next-character logits (B, L, V) plus diagnostics.

        Evaluation pads the segment axis to the full length by default so
        that prefix logits are bitwise-independent of the suffix; training
        pads to the batch maximum, which is where shortening pays off.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        batch, length = tokens.shape
        x = nm.embedding(self.embed.tensor, tokens)
        x = nm.dropout(x, cfg.dropout, stream_key(seed, step, STREAM_EMBED_DROP), training)

        full_limits = np.broadcast_to(np.arange(1, length + 1, dtype=np.int64),
                                      (batch, length))
        h = self._block(x, self.blocks[0], full_limits, training, step, seed)

        b, bhat, sample = self._boundaries(tokens, h, training, step, seed)
        seg, m, g_per_seq = pl.segment_ids(b)

        if soft_pool:
            s2_in, up, soft_sample = self._soft_pool(h, b, bhat, training, step, seed)
            if soft_sample is not None:
                sample = soft_sample
            s2 = self._block(s2_in, self.blocks[1], full_limits, training, step, seed)
            u_states = up(s2)
        else:
            g_pad = pad_segments if pad_segments is not None else (
                int(g_per_seq.max()) if training else length)
            pool_t = pl.mean_pool_t if cfg.pooling == "mean" else pl.subsample_pool_t
            s = pool_t(h, seg, g_pad)
            mid_limits = np.minimum(np.arange(1, g_pad + 1, dtype=np.int64)[None, :],
                                    g_per_seq[:, None])
            s2 = self._block(s, self.blocks[1], np.ascontiguousarray(mid_limits),
                             training, step, seed)
            u_states = pl.upsample_t(s2, m, self.null.tensor)

        y = self._block(h + u_states, self.blocks[2], full_limits, training, step, seed)
        logits = nm.matmul(y, self.head_w.tensor) + self.head_b.tensor

        diag = {
            "b": b,
            "bhat": bhat,
            "sample": sample,
            "segments": g_per_seq,
            "sf": float(batch * length / g_per_seq.sum()),
        }
        return logits, diag

    def _soft_pool(self, h, b, bhat, training, step, seed):
        """Differentiable pooling route. Returns the middle-block input, an
        up-sampling closure, and the soft boundary tensor (None for the
        rule-based methods). The Binomial prior sums this soft tensor instead
        of straight-through hard samples, so the whole objective has exact
        gradients here."""
        cfg = self.cfg
        if cfg.pooling != "mean":
            raise ConfigError("soft pooling is defined for mean pooling only")
        batch, length, _ = h.shape
        soft_b = None
        if bhat is None:
            b_tensor = nm.tensor(b.astype(cfg.dtype))
        elif cfg.method == "gumbel" and training:
            u = K.uniform01(batch * length,
                            stream_key(seed, step, STREAM_BOUNDARY_NOISE),
                            dtype=cfg.dtype).reshape(batch, length)
            b_tensor = soft_b = bd.gumbel_sigmoid(bhat, u, cfg.tau)
        else:
            b_tensor = soft_b = bhat
        assign = pl.soft_assignments(b_tensor, length + 1)
        s = pl.soft_mean_pool(h, assign)
        s_in = nm.take(s, (slice(None), slice(0, length)))
        return s_in, (lambda s2: pl.soft_upsample(s2, assign, self.null.tensor)), soft_b

    # -- losses ----------------------------------------------------------------

    def loss(self, logits: nm.Tensor, targets: np.ndarray, diag: dict,
             gold_b: Optional[np.ndarray] = None,
             teacher_b: Optional[np.ndarray] = None):
        """Total objective and its parts: {lm (nats), aux, total}."""
        cfg = self.cfg
        length = logits.shape[1]
        lm = lm_loss(logits, targets)
        parts = {"lm": lm, "aux": None}
        aux = None
        if cfg.method == "gumbel":
            k_count = nm.tsum(diag["sample"], axis=1)
            aux = bd.binomial_prior_loss(length, k_count, cfg.alpha) * cfg.prior_weight
        elif cfg.method == "unigram":
            if gold_b is None:
                raise ConfigError("unigram method needs gold boundaries for its loss")
            aux = bd.bce_loss(diag["bhat"], gold_b) * cfg.bce_weight
        elif cfg.method == "entropy":
            if teacher_b is None:
                trace = predictive_entropy(logits.value)
                teacher_b = bd.spike_boundaries(trace, cfg.spike_window)
            aux = bd.bce_loss(diag["bhat"], teacher_b) * cfg.bce_weight
        if aux is not None:
            parts["aux"] = aux
            total = lm + aux
        else:
            total = lm
        parts["total"] = total
        return total, parts


def lm_loss(logits: nm.Tensor, targets: np.ndarray) -> nm.Tensor:
    """Mean next-token cross-entropy in nats over every position."""
    batch, length, vocab = logits.shape
    rows = nm.reshape(logits, (batch * length, vocab))
    return nm.tmean(nm.cross_entropy(rows, np.asarray(targets).reshape(-1)))


def predictive_entropy(logits_value: np.ndarray) -> np.ndarray:
    """Entropy (nats) of the model's guess about each position, from the
    previous position's logits. Position 0 has no guess: log V."""
    z = logits_value.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    raw = -(p * np.log(np.where(p > 0.0, p, 1.0))).sum(axis=-1)
    out = np.empty_like(raw)
    out[..., 0] = math.log(logits_value.shape[-1])
    out[..., 1:] = raw[..., :-1]
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path, meta: dict, arrays: dict) -> None:
    """Versioned binary: magic, version, JSON meta, named array blobs."""
    meta_bytes = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            name_b = name.encode("utf-8")
            dtype_b = arr.dtype.str.encode("ascii")
            fh.write(struct.pack("<HH", len(name_b), len(dtype_b)))
            fh.write(name_b)
            fh.write(dtype_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    def take(fh, n):
        data = fh.read(n)
        if len(data) != n:
            raise DataError(f"{path}: truncated checkpoint")
        return data

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, meta_len = struct.unpack("<II", take(fh, 8))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(take(fh, meta_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", take(fh, 4))
        arrays = {}
        for _ in range(n_arrays):
            name_len, dtype_len = struct.unpack("<HH", take(fh, 4))
            name = take(fh, name_len).decode("utf-8")
            dtype = np.dtype(take(fh, dtype_len).decode("ascii"))
            (ndim,) = struct.unpack("<B", take(fh, 1))
            shape = struct.unpack(f"<{ndim}Q", take(fh, 8 * ndim))
            data = take(fh, dtype.itemsize * int(np.prod(shape, dtype=np.int64)))
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return meta, arrays


def config_to_meta(cfg: ModelConfig) -> dict:
    meta = dataclasses.asdict(cfg)
    meta["layers"] = list(meta["layers"])
    return meta


def config_from_meta(meta: dict) -> ModelConfig:
    meta = dict(meta)
    meta["layers"] = tuple(meta["layers"])
    return ModelConfig(**meta)


def save_model(path, model: Hourglass, extra_meta: Optional[dict] = None,
               extra_arrays: Optional[dict] = None) -> None:
    meta = {"config": config_to_meta(model.cfg)}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {p.name: p.value for p in model.store}
    if extra_arrays:
        arrays.update(extra_arrays)
    write_checkpoint(path, meta, arrays)


def load_model(path, expect_cfg: Optional[ModelConfig] = None):
    """Rebuild a model from a checkpoint. Returns (model, meta, extra_arrays)."""
    meta, arrays = read_checkpoint(path)
    cfg = config_from_meta(meta["config"])
    if expect_cfg is not None and config_to_meta(expect_cfg) != meta["config"]:
        raise DataError(f"{path}: checkpoint config does not match the requested one")
    model = Hourglass(cfg, seed=0)
    extra = {}
    for name, arr in arrays.items():
        if name in model.store:
            p = model.store[name]
            if p.value.shape != arr.shape:
                raise DataError(f"{path}: parameter {name} has shape {arr.shape}, "
                                f"model wants {p.value.shape}")
            p.tensor.value = arr.astype(p.value.dtype, copy=False)
        else:
            extra[name] = arr
    return model, meta, extra
