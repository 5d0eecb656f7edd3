"""Optimization loop: Adam with linear warmup into a single cosine cycle,
global-norm gradient clipping, periodic validation over eval windows, best
and last checkpoints, CSV metrics.

All randomness is counter-based (keyed on seed and step number), so a
resumed run replays the exact trajectory of an uninterrupted one; the only
mutable state worth checkpointing is the step counter, the parameters, the
Adam moments, and the best-validation record.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import hourglass as hg
from . import numerics as nm
from . import unigram as ug
from .backend import K
from .corpus import CharVocab, ChunkStream
from .errors import ConfigError, DataError, InternalError

LN2 = math.log(2.0)

METRICS_COLUMNS = ("step", "lr", "loss_total", "loss_lm_bits", "loss_aux",
                   "sf", "grad_norm", "wall_ms")
VALIDATION_COLUMNS = ("step", "bpc", "sf")

WARM_START_FRACTION = 0.05  # entropy method trains on whitespace targets first


@dataclass
class OptimConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 0.25
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"warmup ({self.warmup_steps}) exceeds total steps ({self.total_steps})")
        for name in ("lr", "eps", "clip", "warmup_steps", "total_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear ramp to the peak at warmup_steps, cosine down to 0 at the end."""
    if not 1 <= step <= cfg.total_steps:
        raise ConfigError(f"step {step} outside [1, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainState:
    opt: OptimConfig
    step: int
    m: dict
    v: dict
    best_bpc: Optional[float] = None
    best_step: Optional[int] = None

    @classmethod
    def fresh(cls, model: hg.Hourglass, opt: OptimConfig) -> "TrainState":
        m = {p.name: np.zeros_like(p.value) for p in model.store.trainable()}
        v = {p.name: np.zeros_like(p.value) for p in model.store.trainable()}
        return cls(opt=opt, step=0, m=m, v=v)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def _bhat_stats(diag: dict) -> str:
    bh = diag.get("bhat")
    if bh is None:
        return "bhat: none (rule-based boundaries)"
    v = bh.value
    return f"bhat: min={v.min():.4e} mean={v.mean():.4e} max={v.max():.4e}"


def train_step(model: hg.Hourglass, state: TrainState, inputs: np.ndarray,
               targets: np.ndarray, gold_b=None, teacher_b=None) -> dict:
    """One optimization step; returns the metrics row for the CSV."""
    t0 = time.perf_counter()
    opt = state.opt
    step = state.step + 1
    lr = lr_at(step, opt)

    model.store.zero_grads()
    logits, diag = model.forward(inputs, training=True, step=step, seed=opt.seed)
    total, parts = model.loss(logits, targets, diag, gold_b=gold_b, teacher_b=teacher_b)
    if not np.isfinite(total.value):
        raise InternalError(
            f"non-finite loss at step {step}: total={float(total.value)!r} "
            f"lm={float(parts['lm'].value)!r}; {_bhat_stats(diag)}")
    nm.backward(total)

    trainable = model.store.trainable()
    grad_norm = global_grad_norm(trainable)
    if not math.isfinite(grad_norm):
        raise InternalError(
            f"non-finite gradients at step {step} (loss was {float(total.value):.4f}); "
            f"{_bhat_stats(diag)}")
    scale = 1.0 if grad_norm <= opt.clip else opt.clip / grad_norm
    c1 = 1.0 - opt.beta1 ** step
    c2 = 1.0 - opt.beta2 ** step
    for p in trainable:
        g = p.tensor.grad
        if g is None:
            continue  # parameter unused this step (e.g. null with no empty groups)
        if scale != 1.0:
            g *= g.dtype.type(scale)
        K.adam_step(p.tensor.value, g, state.m[p.name], state.v[p.name],
                    lr, opt.beta1, opt.beta2, opt.eps, c1, c2)
    state.step = step

    aux = parts.get("aux")
    return {
        "step": step,
        "lr": lr,
        "loss_total": float(total.value),
        "loss_lm_bits": float(parts["lm"].value) / LN2,
        "loss_aux": float(aux.value) if aux is not None else 0.0,
        "sf": diag["sf"],
        "grad_norm": grad_norm,
        "wall_ms": (time.perf_counter() - t0) * 1000.0,
    }


def entropy_teacher(step: int, total_steps: int, inputs: np.ndarray,
                    space_id: int, warm_start: bool = True):
    """Whitespace targets during the warm-start head of training (the LM's
    own entropies are uninformative there), then None so the loss derives
    the teacher from the entropy spikes of the current forward."""
    if warm_start and step <= math.ceil(WARM_START_FRACTION * total_steps):
        return (inputs == space_id).astype(np.int8)
    return None


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def save_state(path, model: hg.Hourglass, state: TrainState) -> None:
    extra_arrays = {}
    for name, arr in state.m.items():
        extra_arrays[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        extra_arrays[f"adam.v.{name}"] = arr
    hg.save_model(path, model, extra_meta={
        "step": state.step,
        "best_bpc": state.best_bpc,
        "best_step": state.best_step,
        "optim": dataclasses.asdict(state.opt),
    }, extra_arrays=extra_arrays)


def load_state(path, model: hg.Hourglass, opt: OptimConfig) -> TrainState:
    """Restore parameters and optimizer state in place; configs must match."""
    meta, arrays = hg.read_checkpoint(path)
    if meta["config"] != hg.config_to_meta(model.cfg):
        raise DataError(f"{path}: checkpoint was written for a different model config")
    if meta["optim"] != dataclasses.asdict(opt):
        raise DataError(f"{path}: checkpoint was written for a different optimizer config")
    state = TrainState(opt=opt, step=int(meta["step"]), m={}, v={},
                       best_bpc=meta.get("best_bpc"), best_step=meta.get("best_step"))
    for p in model.store:
        if p.name not in arrays:
            raise DataError(f"{path}: checkpoint is missing parameter {p.name}")
        p.tensor.value = arrays[p.name].astype(p.value.dtype, copy=False)
    for p in model.store.trainable():
        for kind, slot in (("m", state.m), ("v", state.v)):
            key = f"adam.{kind}.{p.name}"
            if key not in arrays:
                raise DataError(f"{path}: checkpoint is missing optimizer moment {key}")
            slot[p.name] = arrays[key].copy()
    return state


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def train_loop(model: hg.Hourglass, opt: OptimConfig, train_tokens: np.ndarray,
               out_dir, *, chunk_len: int = 256, val_tokens=None,
               uvocab=None, char_vocab: Optional[CharVocab] = None,
               ws_own_group: bool = False, warm_start: bool = True,
               log_every: int = 10, val_cap: int = 20000,
               resume: bool = False, stop_after: Optional[int] = None) -> dict:
    """Run (or resume) a training run under `out_dir`.

    Writes metrics.csv, validation.csv and checkpoints/{best,last}.sglm.
    `stop_after` ends the process early at a resumable point, for staged runs.
    """
    from . import evaluation as ev

    method = model.cfg.method
    missing = []
    if method == "unigram":
        if uvocab is None:
            missing.append("a piece vocabulary (run the train-unigram step)")
        if char_vocab is None:
            missing.append("a character vocabulary (run the preprocess step)")
    if method in ("whitespaces", "entropy") and model.cfg.space_id is None:
        missing.append("a space_id in the model config (vocab must contain the space)")
    if missing:
        raise ConfigError("cannot start training, missing: " + "; ".join(missing))

    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    val_path = out_dir / "validation.csv"
    best_path = ckpt_dir / "best.sglm"
    last_path = ckpt_dir / "last.sglm"

    stream = ChunkStream(np.asarray(train_tokens), chunk_len + 1)
    chunks_per_epoch = len(train_tokens) // (chunk_len + 1)
    batches_per_epoch = chunks_per_epoch // opt.batch_size
    if batches_per_epoch < 1:
        raise ConfigError(
            f"corpus of {len(train_tokens)} tokens cannot fill one batch of "
            f"{opt.batch_size} x {chunk_len + 1}")

    if resume and last_path.exists():
        state = load_state(last_path, model, opt)
        _truncate_csv(metrics_path, state.step)
        _truncate_csv(val_path, state.step)
    else:
        state = TrainState.fresh(model, opt)
        metrics_path.write_text(",".join(METRICS_COLUMNS) + "\n")
        val_path.write_text(",".join(VALIDATION_COLUMNS) + "\n")

    val_every = max(1, opt.total_steps // 20)
    limit = opt.total_steps if stop_after is None else min(stop_after, opt.total_steps)

    epoch_loaded = -1
    epoch_chunks = None
    with open(metrics_path, "a") as mfh, open(val_path, "a") as vfh:
        while state.step < limit:
            epoch, in_epoch = divmod(state.step, batches_per_epoch)
            if epoch != epoch_loaded:
                epoch_chunks = stream.epoch(epoch, opt.seed)
                epoch_loaded = epoch
            lo = in_epoch * opt.batch_size
            batch = epoch_chunks[lo : lo + opt.batch_size]
            inputs, targets = batch[:, :-1], batch[:, 1:]

            gold_b = teacher_b = None
            if method == "unigram":
                gold_b = np.stack([
                    ug.gold_boundaries(char_vocab.decode(row), uvocab, ws_own_group)
                    for row in inputs])
            elif method == "entropy":
                teacher_b = entropy_teacher(state.step + 1, opt.total_steps,
                                            inputs, model.cfg.space_id, warm_start)

            # cadences key off the global schedule only, so a stopped and
            # resumed run replays the uninterrupted log exactly
            metrics = train_step(model, state, inputs, targets,
                                 gold_b=gold_b, teacher_b=teacher_b)
            if metrics["step"] == 1 or metrics["step"] % log_every == 0 \
                    or metrics["step"] == opt.total_steps:
                mfh.write(_metrics_row(metrics))
                mfh.flush()

            if state.step % val_every == 0 or state.step == opt.total_steps:
                if val_tokens is not None:
                    report = ev.bpc(model, np.asarray(val_tokens)[:val_cap],
                                    length=chunk_len, step=max(1, chunk_len // 4),
                                    batch_size=opt.batch_size, seed=opt.seed)
                    vfh.write(f"{state.step},{report.bpc:.6f},{report.sf:.6f}\n")
                    vfh.flush()
                    if state.best_bpc is None or report.bpc < state.best_bpc:
                        state.best_bpc = report.bpc
                        state.best_step = state.step
                        save_state(best_path, model, state)
                save_state(last_path, model, state)

    save_state(last_path, model, state)
    if val_tokens is None and not best_path.exists():
        save_state(best_path, model, state)
    return {
        "steps": state.step,
        "best_bpc": state.best_bpc,
        "best_step": state.best_step,
        "metrics": str(metrics_path),
        "validation": str(val_path),
        "last": str(last_path),
        "best": str(best_path),
    }


def _metrics_row(metrics: dict) -> str:
    vals = [metrics["step"], f"{metrics['lr']:.8f}", f"{metrics['loss_total']:.6f}",
            f"{metrics['loss_lm_bits']:.6f}", f"{metrics['loss_aux']:.6f}",
            f"{metrics['sf']:.4f}", f"{metrics['grad_norm']:.6f}",
            f"{metrics['wall_ms']:.2f}"]
    return ",".join(str(v) for v in vals) + "\n"


def _truncate_csv(path: Path, max_step: int) -> None:
    """Drop rows written after the checkpointed step (a crash can leave the
    log ahead of the restored state)."""
    if not path.exists():
        return
    lines = path.read_text().splitlines()
    kept = lines[:1]
    for line in lines[1:]:
        try:
            step = int(line.split(",", 1)[0])
        except ValueError:
            continue
        if step <= max_step:
            kept.append(line)
    path.write_text("\n".join(kept) + "\n")
