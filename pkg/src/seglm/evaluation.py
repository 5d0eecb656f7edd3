"""Evaluation protocol: bits-per-character over overlapping windows, entropy
traces, paired t-tests, the step-time/memory benchmark, and report files.

Entropy is reported in bits everywhere user-facing; internals are nats.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import subprocess
import sys
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import boundary as bd
from . import corpus
from . import hourglass as hg
from .errors import DataError, UsageError

LN2 = math.log(2.0)

RESULTS_COLUMNS = ("method", "setting", "bpc", "sf", "seed")
BENCH_COLUMNS = ("setting", "fixed_k", "seq_len", "batch", "run",
                 "warm_steps", "mean_step_ms", "peak_rss_kb")
ENTROPY_COLUMNS = ("pos", "char", "entropy_bits", "boundary")
ABLATION_COLUMNS = ("method", "mean_bpc", "mean_sf", "subsample_bpc", "subsample_sf")


@dataclass
class EvalReport:
    bpc: float
    sf: float
    window_bits: list
    scored_tokens: int
    seed: int
    fingerprint: str


def config_fingerprint(cfg: hg.ModelConfig) -> str:
    blob = json.dumps(hg.config_to_meta(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def bpc(model: hg.Hourglass, tokens: np.ndarray, length: int = 2048,
        step: int = 512, strict: bool = False, batch_size: int = 8,
        seed: int = 0) -> EvalReport:
    """Mean -log2 p(x_t | x_<t) over the scored spans of overlapping windows.

    Each token is scored exactly once; by default the first window is scored
    in full from position 1 (--strict-eval leaves the warm-up head unscored
    instead). sf aggregates token-weighted over all window forwards.
    """
    tokens = np.asarray(tokens)
    windows = corpus.eval_windows(len(tokens), length, step, strict)
    total_bits = 0.0
    total_scored = 0
    tok_count = 0
    seg_count = 0
    window_bits = []
    for lo in range(0, len(windows), batch_size):
        group = windows[lo : lo + batch_size]
        width = group[0].length
        assert all(w.length == width for w in group)
        stack = np.stack([tokens[w.start : w.start + w.length] for w in group])
        inputs, targets = stack[:, :-1], stack[:, 1:]
        logits, diag = model.forward(inputs)
        logp = _log_softmax64(logits.value)
        for row, w in enumerate(group):
            idx = np.fromiter(w.scored, np.int64) - w.start - 1
            got = np.take_along_axis(logp[row, idx], targets[row, idx, None], axis=-1)
            bits = -got.sum() / LN2
            window_bits.append(float(bits / len(idx)))
            total_bits += float(bits)
            total_scored += len(idx)
        tok_count += inputs.shape[0] * inputs.shape[1]
        seg_count += int(diag["segments"].sum())
    return EvalReport(
        bpc=total_bits / total_scored,
        sf=tok_count / seg_count,
        window_bits=window_bits,
        scored_tokens=total_scored,
        seed=seed,
        fingerprint=config_fingerprint(model.cfg),
    )


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# entropy traces
# ---------------------------------------------------------------------------


def entropy_trace(model: hg.Hourglass, tokens: np.ndarray):
    """Per-position predictive entropy in bits plus the spike boundaries the
    entropy method would place on the same trace."""
    tokens = np.asarray(tokens)
    logits, _ = model.forward(tokens[None])
    bits = hg.predictive_entropy(logits.value)[0] / LN2
    spikes = bd.spike_boundaries(bits[None], model.cfg.spike_window)[0]
    return bits, spikes


def write_entropy_csv(path, vocab: corpus.CharVocab, tokens: np.ndarray,
                      bits: np.ndarray, spikes: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ENTROPY_COLUMNS)
        for pos, tok in enumerate(tokens):
            w.writerow([pos, vocab.decode([int(tok)]), f"{bits[pos]:.6f}", int(spikes[pos])])


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: Optional[str] = None


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired Student's t on the differences a - b.

    Zero-variance differences cannot support the test: identical samples
    report p = 1, a constant nonzero shift reports p = 0, both flagged.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"paired samples must be equal-length vectors, got {a.shape} vs {b.shape}")
    n = len(a)
    if n < 2:
        raise UsageError("need at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, "zero variance, zero mean")
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, "zero variance, nonzero mean")
    t = mean / (sd / math.sqrt(n))
    p = _betainc(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(float(t), float(p), df)


def _betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) via Lentz's continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cfrac(a, b, x) / a
    return 1.0 - front * _beta_cfrac(b, a, 1.0 - x) / b


def _beta_cfrac(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-14:
            return h
    raise ValueError(f"continued fraction failed to converge for a={a} b={b} x={x}")


# ---------------------------------------------------------------------------
# step-time / memory benchmark
# ---------------------------------------------------------------------------


def bench_worker(fixed_k: int, seq_len: int, batch: int, warmup_steps: int,
                 steps: int, d: int = 128, ff: int = 512, heads: int = 4,
                 layers=(1, 2, 1), seed: int = 0) -> dict:
    """One benchmark measurement, meant to run in its own process so peak
    resident memory is attributable to the setting. Returns the record dict."""
    import resource

    from . import trainer as tr

    cfg = hg.ModelConfig(vocab_size=27, d=d, ff=ff, heads=heads, layers=tuple(layers),
                         method="fixed", fixed_k=fixed_k)
    model = hg.Hourglass(cfg, seed=seed)
    opt = tr.OptimConfig(warmup_steps=1, total_steps=warmup_steps + steps,
                         batch_size=batch, seed=seed)
    state = tr.TrainState.fresh(model, opt)
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, 27, size=(batch, seq_len + 1))
    inputs, targets = toks[:, :-1], toks[:, 1:]
    times = []
    for i in range(warmup_steps + steps):
        t0 = time.perf_counter()
        tr.train_step(model, state, inputs, targets)
        if i >= warmup_steps:
            times.append((time.perf_counter() - t0) * 1000.0)
    return {
        "mean_step_ms": float(np.mean(times)),
        "peak_rss_kb": int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss),
        "steps": len(times),
    }


def run_bench(settings, out_path, *, seq_len: int = 2048, batch: int = 2,
              warmup_steps: int = 5, steps: int = 20, runs: int = 3,
              seed: int = 0, model_kw: Optional[dict] = None) -> list:
    """Benchmark each (label, fixed_k) setting in a subprocess, `runs` times,
    and write one CSV row per run. Subprocesses keep the peak-RSS reading
    honest; timings are single-threaded per the measurement contract."""
    model_kw = model_kw or {}
    rows = []
    for label, fixed_k in settings:
        for run in range(runs):
            payload = json.dumps(dict(fixed_k=fixed_k, seq_len=seq_len, batch=batch,
                                      warmup_steps=warmup_steps, steps=steps,
                                      seed=seed, **model_kw))
            proc = subprocess.run(
                [sys.executable, "-m", "seglm", "bench", "--worker", payload],
                capture_output=True, text=True)
            if proc.returncode != 0:
                raise DataError(f"bench worker failed for {label!r}:\n{proc.stderr}")
            rec = json.loads(proc.stdout.strip().splitlines()[-1])
            rows.append({
                "setting": label, "fixed_k": fixed_k, "seq_len": seq_len,
                "batch": batch, "run": run, "warm_steps": rec["steps"],
                "mean_step_ms": rec["mean_step_ms"], "peak_rss_kb": rec["peak_rss_kb"],
            })
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def emit_report(reports: list, out_dir) -> None:
    """reports: dicts with method, setting, bpc, sf, seed. Writes results.csv
    and a pareto.svg scatter (sf right is better, bpc down is better)."""
    if not reports:
        raise UsageError("no reports to emit")
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow({k: r[k] for k in RESULTS_COLUMNS})
    with open(os.path.join(out_dir, "pareto.svg"), "w") as fh:
        fh.write(pareto_svg(reports))


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def pareto_svg(reports: list, width: int = 640, height: int = 480) -> str:
    """Minimal hand-rolled scatter; one colour per method, labelled axes."""
    from xml.sax.saxutils import escape

    pad = 70
    xs = [float(r["sf"]) for r in reports]
    ys = [float(r["bpc"]) for r in reports]
    x_lo, x_hi = _axis_range(min(xs), max(xs))
    y_lo, y_hi = _axis_range(min(ys), max(ys))

    def px(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    methods = []
    for r in reports:
        if r["method"] not in methods:
            methods.append(r["method"])
    colour = {m: _PALETTE[i % len(_PALETTE)] for i, m in enumerate(methods)}

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 18}" text-anchor="middle" font-size="14">shortening factor</text>',
        f'<text x="20" y="{height / 2:.0f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {height / 2:.0f})">bits per character</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<text x="{px(xv):.1f}" y="{height - pad + 18}" text-anchor="middle" '
                     f'font-size="11">{xv:.2f}</text>')
        parts.append(f'<text x="{pad - 8}" y="{py(yv) + 4:.1f}" text-anchor="end" '
                     f'font-size="11">{yv:.2f}</text>')
    for r in reports:
        parts.append(f'<circle cx="{px(float(r["sf"])):.1f}" cy="{py(float(r["bpc"])):.1f}" '
                     f'r="5" fill="{colour[r["method"]]}" fill-opacity="0.8"/>')
    for i, m in enumerate(methods):
        y = pad + 16 * i
        parts.append(f'<circle cx="{width - pad - 110}" cy="{y}" r="5" fill="{colour[m]}"/>')
        parts.append(f'<text x="{width - pad - 98}" y="{y + 4}" font-size="12">{escape(m)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _axis_range(lo: float, hi: float):
    if hi <= lo:
        spread = max(abs(lo), 1.0) * 0.1
        return lo - spread, hi + spread
    margin = (hi - lo) * 0.08
    return lo - margin, hi + margin


def ablation_table(rows: list, path) -> None:
    """Pivot per-method mean-pool vs subsample results into one row each."""
    by_method: dict = {}
    for r in rows:
        entry = by_method.setdefault(r["method"], {})
        entry[r["pooling"]] = (float(r["bpc"]), float(r["sf"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for method, entry in by_method.items():
            mean = entry.get("mean", (math.nan, math.nan))
            sub = entry.get("subsample", (math.nan, math.nan))
            w.writerow([method, f"{mean[0]:.4f}", f"{mean[1]:.4f}",
                        f"{sub[0]:.4f}", f"{sub[1]:.4f}"])
