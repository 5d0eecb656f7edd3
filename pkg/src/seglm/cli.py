"""Command-line driver: one flat configuration, eight subcommands.

Every tunable lives in RunConfig and surfaces as a --flag on every
subcommand; a config file holds the same keys as key=value lines.
Precedence: defaults < --reference-config layer < --preset layer < config
file < explicit flags. The resolved configuration is echoed into the
run directory, and the echo is itself a loadable config file, so a run
can always be reproduced from its artifacts.

Exit codes: 0 success, 1 usage or configuration, 2 missing or malformed
data, 3 internal invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import hourglass as hg
from . import trainer as tr
from . import unigram as ug
from .corpus import CharVocab, CleanerConfig, clean_text
from .errors import ConfigError, DataError, SeglmError, UsageError


def _f(default, help_text: str):
    return field(default=default, metadata={"help": help_text})


@dataclass
class RunConfig:
    # paths and meta
    config: str = _f("", "config file of key=value lines, one per flag")
    run_dir: str = _f("runs/default", "directory owning checkpoints, metrics and reports")
    corpus: str = _f("", "input text file, or token ids as .npy")
    vocab: str = _f("", "character vocabulary file (written by preprocess)")
    pieces: str = _f("", "piece vocabulary file (written by train-unigram)")
    checkpoint: str = _f("", "model checkpoint to load")
    out: str = _f("", "output path for preprocess / train-unigram / trace artifacts")
    text: str = _f("", "inline text, an alternative to --corpus for segment and traces")
    preset: str = _f("", "named defaults: english, finnish or hebrew")
    reference_config: bool = _f(False, "use the reference model size (d=512, ff=2048, 2-8-2 layers)")

    # text cleaning
    language: str = _f("english", "cleaning profile: script whitelist and digit words")
    homoglyphs: bool = _f(False, "map common Latin-lookalike codepoints before filtering")

    # model
    d: int = _f(128, "model width")
    ff: int = _f(512, "feed-forward hidden width")
    heads: int = _f(4, "attention heads")
    layers: str = _f("1,2,1", "layer counts: full-resolution, shortened, full-resolution")
    dropout: float = _f(0.1, "dropout probability during training")
    method: str = _f("gumbel", "boundary method: vanilla, fixed, gumbel, unigram, entropy, whitespaces")
    fixed_k: int = _f(2, "segment length for the fixed method")
    pooling: str = _f("mean", "segment pooling: mean or subsample")
    tau: float = _f(0.5, "gumbel-sigmoid temperature")
    alpha: float = _f(0.2, "binomial prior boundary rate")
    prior_weight: float = _f(1.0, "weight of the binomial prior loss")
    bce_weight: float = _f(1.0, "weight of the boundary supervision loss")
    spike_window: int = _f(2, "look-back window of the entropy spike rule")
    predictor_hidden: int = _f(0, "boundary predictor hidden width, 0 means ff")
    param_dtype: str = _f("float32", "parameter dtype: float32 or float64")

    # optimizer
    lr: float = _f(2.5e-4, "peak learning rate")
    beta1: float = _f(0.9, "Adam first-moment decay")
    beta2: float = _f(0.999, "Adam second-moment decay")
    eps: float = _f(1e-8, "Adam denominator floor")
    clip: float = _f(0.25, "global gradient-norm clip")
    warmup_steps: int = _f(100, "linear warmup length")
    total_steps: int = _f(2000, "total optimization steps")
    batch_size: int = _f(8, "sequences per step")
    seed: int = _f(0, "seed for init, noise streams and shuffling")

    # training loop
    chunk_len: int = _f(256, "training sequence length")
    log_every: int = _f(10, "metrics cadence in steps")
    val_frac: float = _f(0.1, "tail fraction of the corpus held out for validation")
    val_cap: int = _f(20000, "max validation tokens per pass")
    ws_own_group: bool = _f(False, "give inter-word whitespace its own segment in gold boundaries")
    warm_start: bool = _f(True, "entropy method: whitespace targets for the first 5%% of steps")
    resume: bool = _f(False, "continue from the run directory's last checkpoint")
    stop_after: int = _f(0, "pause training at this step, 0 means run to the end")

    # unigram inventory
    vocab_size: int = _f(10000, "piece inventory size for train-unigram")
    max_piece_len: int = _f(8, "longest piece considered by train-unigram")

    # evaluation
    eval_length: int = _f(2048, "evaluation window length")
    eval_step: int = _f(512, "evaluation window stride")
    strict_eval: bool = _f(False, "score only the last stride of every window")
    eval_batch: int = _f(8, "windows per evaluation forward")

    # benchmark
    bench_settings: str = _f("1,4", "comma-separated fixed-k values to time")
    bench_runs: int = _f(3, "repetitions per setting")
    bench_steps: int = _f(20, "timed steps per run")
    bench_warmup: int = _f(5, "untimed steps per run")
    bench_seq_len: int = _f(2048, "benchmark sequence length")
    bench_batch: int = _f(1, "benchmark batch size")


REFERENCE_LAYER = {"d": 512, "ff": 2048, "heads": 8, "layers": "2,8,2"}

PRESETS = {
    "english": {"language": "english", "alpha": 0.2, "vocab_size": 10000},
    "finnish": {"language": "finnish", "alpha": 0.37, "vocab_size": 200},
    "hebrew": {"language": "hebrew", "alpha": 0.2, "vocab_size": 200},
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {name}={raw!r} as {kind}") from None


def load_config_file(path) -> dict:
    """key=value lines; # comments and blank lines are skipped."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError:
        raise DataError(f"config file not found: {path}") from None
    values = {}
    for ln, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{ln}: unknown configuration key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


def resolve_config(flag_values: dict) -> RunConfig:
    """Merge defaults, preset layers, the config file and explicit flags."""
    explicit = {}
    if flag_values.get("config"):
        explicit.update(load_config_file(flag_values["config"]))
    explicit.update({k: v for k, v in flag_values.items() if v is not None})

    merged = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    if explicit.get("reference_config", merged["reference_config"]):
        merged.update({k: v for k, v in REFERENCE_LAYER.items() if k not in explicit})
    preset = explicit.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}, expected one of {', '.join(sorted(PRESETS))}")
        merged.update({k: v for k, v in PRESETS[preset].items() if k not in explicit})
    merged.update(explicit)
    return RunConfig(**merged)


def config_echo(rc: RunConfig) -> str:
    lines = ["# resolved configuration; loadable via --config"]
    for f in dataclasses.fields(RunConfig):
        value = getattr(rc, f.name)
        if f.type == "bool":
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# run directory ownership
# ---------------------------------------------------------------------------


class RunDirLock:
    """One process per run directory; a stale lock from a dead pid is stolen."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                pid = self._holder()
                if pid is not None and _pid_alive(pid):
                    raise UsageError(
                        f"run directory {self.path.parent} is locked by pid {pid}") from None
                self.path.unlink(missing_ok=True)
                continue
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            return self
        raise UsageError(f"could not acquire lock {self.path}")

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)

    def _holder(self):
        try:
            return int(self.path.read_text())
        except (OSError, ValueError):
            return None


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------


def _require(rc: RunConfig, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(rc, n)]
    if missing:
        raise UsageError(f"missing required flags: {', '.join(missing)}")


def _load_vocab(rc: RunConfig) -> CharVocab:
    _require(rc, "vocab")
    if not Path(rc.vocab).exists():
        raise DataError(f"vocabulary not found: {rc.vocab}")
    return CharVocab.load(rc.vocab)


def _load_tokens(rc: RunConfig, vocab: CharVocab) -> np.ndarray:
    if rc.text:
        return vocab.encode(rc.text)
    _require(rc, "corpus")
    path = Path(rc.corpus)
    if not path.exists():
        raise DataError(f"corpus not found: {rc.corpus}")
    if path.suffix == ".npy":
        tokens = np.load(path)
        if tokens.size and tokens.max() >= len(vocab):
            raise DataError(
                f"{rc.corpus}: token id {int(tokens.max())} outside vocabulary "
                f"of {len(vocab)}")
        return tokens.astype(np.int32, copy=False)
    return vocab.encode(path.read_text())


def _load_model(rc: RunConfig):
    _require(rc, "checkpoint")
    if not Path(rc.checkpoint).exists():
        raise DataError(f"checkpoint not found: {rc.checkpoint}")
    return hg.load_model(rc.checkpoint)


def _parse_layers(text: str):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse layer counts {text!r}, expected e.g. 1,2,1") from None


def _model_config(rc: RunConfig, vocab: CharVocab) -> hg.ModelConfig:
    return hg.ModelConfig(
        vocab_size=len(vocab), d=rc.d, ff=rc.ff, heads=rc.heads,
        layers=_parse_layers(rc.layers), dropout=rc.dropout, method=rc.method,
        fixed_k=rc.fixed_k, pooling=rc.pooling, tau=rc.tau, alpha=rc.alpha,
        prior_weight=rc.prior_weight, bce_weight=rc.bce_weight,
        spike_window=rc.spike_window,
        predictor_hidden=rc.predictor_hidden or None,
        space_id=vocab.space_id, param_dtype=rc.param_dtype)


def _optim_config(rc: RunConfig) -> tr.OptimConfig:
    return tr.OptimConfig(
        lr=rc.lr, beta1=rc.beta1, beta2=rc.beta2, eps=rc.eps, clip=rc.clip,
        warmup_steps=rc.warmup_steps, total_steps=rc.total_steps,
        batch_size=rc.batch_size, seed=rc.seed)


def _check_vocab_fits(model: hg.Hourglass, vocab: CharVocab, rc: RunConfig) -> None:
    if len(vocab) != model.cfg.vocab_size:
        raise DataError(
            f"vocabulary {rc.vocab} has {len(vocab)} characters but the "
            f"checkpoint was trained with {model.cfg.vocab_size}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(rc: RunConfig) -> int:
    _require(rc, "corpus", "out")
    path = Path(rc.corpus)
    if not path.exists():
        raise DataError(f"corpus not found: {rc.corpus}")
    cleaner = CleanerConfig.for_language(rc.language, homoglyphs=rc.homoglyphs)
    cleaned = clean_text(path.read_text(), cleaner)
    if not cleaned:
        raise DataError(f"{rc.corpus}: nothing survives cleaning")
    vocab = CharVocab(cleaned)

    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cleaned.txt").write_text(cleaned)
    vocab.save(out / "vocab.txt")
    np.save(out / "tokens.npy", vocab.encode(cleaned))
    print(f"{len(cleaned)} characters, vocabulary of {len(vocab)}, written to {out}")
    return 0


def cmd_train_unigram(rc: RunConfig) -> int:
    _require(rc, "corpus", "out")
    path = Path(rc.corpus)
    if not path.exists():
        raise DataError(f"corpus not found: {rc.corpus}")
    if path.suffix == ".npy":
        raise UsageError("train-unigram expects cleaned text, not token ids; "
                         "pass the preprocess step's cleaned.txt")
    vocab = ug.train_unigram(path.read_text(), rc.vocab_size, rc.max_piece_len)
    ug.save_vocab(rc.out, vocab)
    print(f"{len(vocab)} pieces written to {rc.out}")
    return 0


def cmd_train(rc: RunConfig) -> int:
    char_vocab = _load_vocab(rc)
    tokens = _load_tokens(rc, char_vocab)
    n_val = int(len(tokens) * rc.val_frac)
    train_tokens = tokens[: len(tokens) - n_val]
    val_tokens = tokens[len(tokens) - n_val :] if n_val else None

    uvocab = None
    if rc.method == "unigram" and rc.pieces:
        if not Path(rc.pieces).exists():
            raise DataError(f"piece vocabulary not found: {rc.pieces}")
        uvocab = ug.load_vocab(rc.pieces)

    model = hg.Hourglass(_model_config(rc, char_vocab), seed=rc.seed)
    opt = _optim_config(rc)

    run_dir = Path(rc.run_dir)
    with RunDirLock(run_dir):
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "reports").mkdir(exist_ok=True)
        (run_dir / "config.echo").write_text(config_echo(rc))
        summary = tr.train_loop(
            model, opt, train_tokens, run_dir, chunk_len=rc.chunk_len,
            val_tokens=val_tokens, uvocab=uvocab, char_vocab=char_vocab,
            ws_own_group=rc.ws_own_group, warm_start=rc.warm_start,
            log_every=rc.log_every, val_cap=rc.val_cap, resume=rc.resume,
            stop_after=rc.stop_after or None)
    best = "n/a" if summary["best_bpc"] is None else f"{summary['best_bpc']:.4f}"
    print(f"trained {summary['steps']} steps, best validation bpc {best}, "
          f"checkpoints under {run_dir / 'checkpoints'}")
    return 0


def cmd_eval(rc: RunConfig) -> int:
    model, meta, _ = _load_model(rc)
    vocab = _load_vocab(rc)
    _check_vocab_fits(model, vocab, rc)
    tokens = _load_tokens(rc, vocab)
    report = ev.bpc(model, tokens, length=rc.eval_length, step=rc.eval_step,
                    strict=rc.strict_eval, batch_size=rc.eval_batch, seed=rc.seed)

    run_dir = Path(rc.run_dir)
    with RunDirLock(run_dir):
        reports_dir = run_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        results = reports_dir / "results.csv"
        fresh = not results.exists()
        with open(results, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ev.RESULTS_COLUMNS)
            if fresh:
                w.writeheader()
            w.writerow({"method": model.cfg.method, "setting": model.cfg.pooling,
                        "bpc": f"{report.bpc:.6f}", "sf": f"{report.sf:.6f}",
                        "seed": rc.seed})
    print(f"bpc={report.bpc:.4f} sf={report.sf:.4f} "
          f"scored_tokens={report.scored_tokens} config={report.fingerprint}")
    return 0


def cmd_segment(rc: RunConfig) -> int:
    model, _, _ = _load_model(rc)
    vocab = _load_vocab(rc)
    _check_vocab_fits(model, vocab, rc)
    tokens = _load_tokens(rc, vocab)
    _, diag = model.forward(tokens[None])
    b = diag["b"][0]
    bhat = diag["bhat"].value[0] if diag["bhat"] is not None else b.astype(np.float64)

    text = vocab.decode(tokens)
    print("".join(("|" if b[t] and t > 0 else "") + ch for t, ch in enumerate(text)))
    rows = [(t, text[t], f"{float(bhat[t]):.6f}", int(b[t])) for t in range(len(text))]
    if rc.out:
        with open(rc.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("pos", "char", "bhat", "boundary"))
            w.writerows(rows)
    else:
        print("pos,char,bhat,boundary")
        for row in rows:
            print(",".join(str(v) for v in row))
    return 0


def cmd_entropy_trace(rc: RunConfig) -> int:
    model, _, _ = _load_model(rc)
    vocab = _load_vocab(rc)
    _check_vocab_fits(model, vocab, rc)
    tokens = _load_tokens(rc, vocab)
    bits, spikes = ev.entropy_trace(model, tokens)
    out = Path(rc.out) if rc.out else Path(rc.run_dir) / "reports" / "entropy_trace.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.write_entropy_csv(out, vocab, tokens, bits, spikes)
    print(f"{len(tokens)} positions, mean entropy {float(bits.mean()):.3f} bits, "
          f"{int(spikes.sum())} spikes, trace in {out}")
    return 0


def cmd_bench(rc: RunConfig, worker: str | None = None) -> int:
    if worker is not None:
        record = ev.bench_worker(**json.loads(worker))
        print(json.dumps(record))
        return 0
    try:
        ks = [int(x) for x in rc.bench_settings.split(",")]
    except ValueError:
        raise ConfigError(
            f"cannot parse bench settings {rc.bench_settings!r}, expected e.g. 1,4") from None
    settings = [(f"k={k}", k) for k in ks]

    run_dir = Path(rc.run_dir)
    with RunDirLock(run_dir):
        reports_dir = run_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        out = reports_dir / "bench.csv"
        rows = ev.run_bench(settings, out, seq_len=rc.bench_seq_len,
                            batch=rc.bench_batch, warmup_steps=rc.bench_warmup,
                            steps=rc.bench_steps, runs=rc.bench_runs, seed=rc.seed)
    for label, _ in settings:
        ms = [r["mean_step_ms"] for r in rows if r["setting"] == label]
        rss = max(r["peak_rss_kb"] for r in rows if r["setting"] == label)
        print(f"{label}: {np.mean(ms):.1f} ms/step over {len(ms)} runs, "
              f"peak rss {rss} kB")
    print(f"rows in {out}")
    return 0


def cmd_report(rc: RunConfig) -> int:
    run_dir = Path(rc.run_dir)
    results = run_dir / "reports" / "results.csv"
    if not results.exists():
        raise DataError(f"no results at {results}; run eval into this run directory first")
    with open(results, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{results} has no data rows")

    with RunDirLock(run_dir):
        ev.emit_report(rows, run_dir / "reports")
        emitted = ["results.csv", "pareto.svg"]
        ablation = [{"method": r["method"], "pooling": r["setting"],
                     "bpc": r["bpc"], "sf": r["sf"]}
                    for r in rows if r["setting"] in ("mean", "subsample")]
        if ablation:
            ev.ablation_table(ablation, run_dir / "reports" / "ablation.csv")
            emitted.append("ablation.csv")
    print(f"{len(rows)} result rows; wrote {', '.join(emitted)} under {run_dir / 'reports'}")
    return 0


COMMANDS = {
    "preprocess": (cmd_preprocess, "clean raw text, build the vocabulary, emit token ids"),
    "train-unigram": (cmd_train_unigram, "fit a piece inventory for unigram supervision"),
    "train": (cmd_train, "train a model into the run directory"),
    "eval": (cmd_eval, "score a checkpoint on a corpus and record the result"),
    "segment": (cmd_segment, "print text with predicted segment boundaries"),
    "entropy-trace": (cmd_entropy_trace, "dump per-position predictive entropy and spikes"),
    "bench": (cmd_bench, "time train steps across shortening settings"),
    "report": (cmd_report, "render recorded results as CSV tables and a scatter plot"),
}


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        help_text = f.metadata["help"] + f" (default: {f.default!r})"
        if f.type == "bool":
            parser.add_argument(flag, action=argparse.BooleanOptionalAction,
                                default=None, help=help_text)
        elif f.type == "int":
            parser.add_argument(flag, type=int, default=None, help=help_text)
        elif f.type == "float":
            parser.add_argument(flag, type=float, default=None, help=help_text)
        else:
            parser.add_argument(flag, default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seglm",
        description="Character-level language modelling with learned segment pooling.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_config_flags(p)
        if name == "bench":
            p.add_argument("--worker", default=None, help=argparse.SUPPRESS)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:  # argparse handles --help and bad flags itself
        return 0 if stop.code == 0 else 1

    values = vars(args)
    command = values.pop("command")
    worker = values.pop("worker", None)
    try:
        rc = resolve_config(values)
        if command == "bench":
            return cmd_bench(rc, worker=worker)
        return COMMANDS[command][0](rc)
    except SeglmError as err:
        print(f"seglm: {err}", file=sys.stderr)
        return err.exit_code
    except Exception as err:  # last-resort barrier so scripts see exit 3
        print(f"seglm: internal error: {err!r}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
