"""Unigram subword vocabulary: EM training, Viterbi segmentation, gold boundaries.

A vocabulary is a plain ``dict[str, float]`` mapping pieces to log-probabilities.
It always contains every single character seen in the corpus, so any word is
segmentable. Training follows the usual recipe: over-seed with frequent
substrings, run EM on the segmentation lattice, then prune the least useful
multi-character pieces in rounds until the target size is reached.

Boundary extraction lives here too: ``gold_boundaries`` turns a trained
vocabulary into per-character supervision targets, and ``whitespace_boundaries``
is the rule-based variant that needs no vocabulary at all.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Tuple

import numpy as np

from .errors import DataError, UsageError

Vocab = Dict[str, float]

MAX_PIECE_LEN = 8
PRUNE_FRACTION = 0.2
SEED_MULTIPLIER = 10
EM_ROUNDS_PER_STAGE = 2


def word_counts(text: str) -> Dict[str, int]:
    """Multiset of whitespace-separated words."""
    counts = Counter(text.split())
    if not counts:
        raise UsageError("corpus contains no words")
    return dict(counts)


def init_seed_vocab(words: Mapping[str, int], max_piece_len: int = MAX_PIECE_LEN,
                    seed_size: int | None = None) -> Vocab:
    """Single chars plus the most frequent substrings, probabilities ∝ count.

    seed_size caps the number of multi-character pieces kept; None keeps all.
    """
    if not words:
        raise UsageError("corpus contains no words")
    chars: Counter = Counter()
    subs: Counter = Counter()
    for word, count in words.items():
        n = len(word)
        for i in range(n):
            chars[word[i]] += count
            for j in range(i + 2, min(i + max_piece_len, n) + 1):
                subs[word[i:j]] += count
    if seed_size is not None:
        top = sorted(subs.items(), key=lambda kv: (-kv[1], kv[0]))[:seed_size]
        subs = Counter(dict(top))
    merged = chars + subs
    total = sum(merged.values())
    log_total = math.log(total)
    return {piece: math.log(c) - log_total for piece, c in merged.items()}


@dataclass
class Segmentation:
    pieces: List[Tuple[int, int]]  # (start, end) spans, contiguous, covering
    logp: float

    def strings(self, word: str) -> List[str]:
        return [word[s:e] for s, e in self.pieces]


def _max_piece_len(vocab: Vocab) -> int:
    return max(len(p) for p in vocab)


def viterbi_segment(word: str, vocab: Vocab) -> Segmentation:
    """Maximum-likelihood segmentation.

    Ties go to fewer pieces, then to the leftmost-longest piece. The DP runs
    right to left so the first piece of each suffix is an explicit choice and
    the tie-break composes cleanly.
    """
    n = len(word)
    if n == 0:
        return Segmentation([], 0.0)
    max_len = _max_piece_len(vocab)
    # best segmentation of word[i:], keyed (logp, -pieces, first-piece end)
    best_lp = [-math.inf] * (n + 1)
    best_np = [0] * (n + 1)
    best_j = [0] * (n + 1)
    best_lp[n] = 0.0
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, min(i + max_len, n) + 1):
            piece = word[i:j]
            lp = vocab.get(piece)
            if lp is None or best_lp[j] == -math.inf:
                continue
            cand = (lp + best_lp[j], -(best_np[j] + 1), j)
            if cand > (best_lp[i], -best_np[i], best_j[i]):
                best_lp[i], best_np[i], best_j[i] = cand[0], best_np[j] + 1, j
    if best_lp[0] == -math.inf:
        bad = next(c for c in word if c not in vocab)
        raise DataError(f"character {bad!r} not covered by the vocabulary")
    spans = []
    i = 0
    while i < n:
        spans.append((i, best_j[i]))
        i = best_j[i]
    return Segmentation(spans, best_lp[0])


def _logsumexp(values: List[float]) -> float:
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


def _lattice_counts(word: str, count: int, vocab: Vocab, max_len: int,
                    acc: Dict[str, float]) -> float:
    """Accumulate expected piece counts for one word; returns its log-likelihood."""
    n = len(word)
    fwd = [-math.inf] * (n + 1)
    fwd[0] = 0.0
    for j in range(1, n + 1):
        terms = []
        for i in range(max(0, j - max_len), j):
            lp = vocab.get(word[i:j])
            if lp is not None and fwd[i] != -math.inf:
                terms.append(fwd[i] + lp)
        if terms:
            fwd[j] = _logsumexp(terms)
    z = fwd[n]
    if z == -math.inf:
        bad = next(c for c in word if c not in vocab)
        raise DataError(f"character {bad!r} not covered by the vocabulary")
    bwd = [-math.inf] * (n + 1)
    bwd[n] = 0.0
    for i in range(n - 1, -1, -1):
        terms = []
        for j in range(i + 1, min(i + max_len, n) + 1):
            lp = vocab.get(word[i:j])
            if lp is not None and bwd[j] != -math.inf:
                terms.append(lp + bwd[j])
        if terms:
            bwd[i] = _logsumexp(terms)
    for i in range(n):
        if fwd[i] == -math.inf:
            continue
        for j in range(i + 1, min(i + max_len, n) + 1):
            piece = word[i:j]
            lp = vocab.get(piece)
            if lp is None or bwd[j] == -math.inf:
                continue
            posterior = math.exp(fwd[i] + lp + bwd[j] - z)
            acc[piece] = acc.get(piece, 0.0) + posterior * count
    return z * count


def em_round(words: Mapping[str, int], vocab: Vocab) -> Tuple[Vocab, float]:
    """One EM step over the segmentation lattice.

    Returns the re-normalized vocabulary and the pre-update corpus
    log-likelihood. Pieces whose expected count is zero (possible after
    pruning removed all their contexts) are dropped unless single-char.
    """
    max_len = _max_piece_len(vocab)
    counts: Dict[str, float] = {}
    ll = 0.0
    for word, count in words.items():
        ll += _lattice_counts(word, count, vocab, max_len, counts)
    for piece in vocab:
        if len(piece) == 1:
            # floor protects coverage: posteriors underflow to 0.0 when EM
            # piles all mass on whole-word pieces of a tiny corpus
            counts[piece] = max(counts.get(piece, 0.0), 1e-12)
    total = sum(counts.values())
    log_total = math.log(total)
    new_vocab = {p: math.log(c) - log_total for p, c in counts.items() if c > 0.0}
    return new_vocab, ll


def _removal_scores(words: Mapping[str, int], vocab: Vocab) -> Dict[str, float]:
    """Likelihood lost by dropping each multi-char piece.

    score = viterbi usage count x (piece logp - logp of the best alternative
    segmentation of the piece itself). Unused pieces score zero and go first.
    """
    usage: Counter = Counter()
    for word, count in words.items():
        seg = viterbi_segment(word, vocab)
        for s in seg.strings(word):
            usage[s] += count
    scores = {}
    for piece, lp in vocab.items():
        if len(piece) == 1:
            continue
        used = usage.get(piece, 0)
        if used == 0:
            scores[piece] = 0.0
            continue
        others = {p: q for p, q in vocab.items() if p != piece}
        alt = viterbi_segment(piece, others)
        scores[piece] = used * (lp - alt.logp)
    return scores


def prune_vocab(words: Mapping[str, int], vocab: Vocab, target_size: int,
                prune_fraction: float = PRUNE_FRACTION) -> Vocab:
    """Shrink to target_size, dropping the cheapest multi-char pieces in rounds."""
    n_chars = sum(1 for p in vocab if len(p) == 1)
    if target_size < n_chars:
        raise UsageError(
            f"target size {target_size} is below the {n_chars} protected single characters")
    vocab = dict(vocab)
    while len(vocab) > target_size:
        scores = _removal_scores(words, vocab)
        n_droppable = len(scores)
        k = min(max(1, int(prune_fraction * n_droppable)), len(vocab) - target_size)
        victims = sorted(scores, key=lambda p: (scores[p], len(p), p))[:k]
        for piece in victims:
            del vocab[piece]
        for _ in range(EM_ROUNDS_PER_STAGE):
            vocab, _ = em_round(words, vocab)
    return vocab


def train_unigram(text: str, vocab_size: int, max_piece_len: int = MAX_PIECE_LEN,
                  seed_multiplier: int = SEED_MULTIPLIER) -> Vocab:
    """Seed, EM, prune. The standard pipeline, sized for character-level corpora."""
    words = word_counts(text)
    vocab = init_seed_vocab(words, max_piece_len, seed_size=seed_multiplier * vocab_size)
    for _ in range(EM_ROUNDS_PER_STAGE):
        vocab, _ = em_round(words, vocab)
    return prune_vocab(words, vocab, vocab_size)


def save_vocab(path, vocab: Vocab) -> None:
    """Tab-separated piece/logprob lines, most probable first; round-trips exactly."""
    lines = sorted(vocab.items(), key=lambda kv: (-kv[1], kv[0]))
    with open(path, "w", encoding="utf-8") as fh:
        for piece, lp in lines:
            fh.write(f"{piece}\t{lp!r}\n")


def load_vocab(path) -> Vocab:
    vocab: Vocab = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'piece<TAB>logprob'")
            piece, lp = parts
            if piece in vocab:
                raise DataError(f"{path}:{lineno}: duplicate piece {piece!r}")
            try:
                vocab[piece] = float(lp)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad log-probability {lp!r}") from None
    if not vocab:
        raise DataError(f"{path}: empty vocabulary")
    return vocab


def _words_with_positions(text: str) -> Iterator[Tuple[str, int]]:
    start = None
    for i, ch in enumerate(text):
        if ch == " ":
            if start is not None:
                yield text[start:i], start
                start = None
        elif start is None:
            start = i
    if start is not None:
        yield text[start:], start


def gold_boundaries(text: str, vocab: Vocab, ws_own_group: bool = False) -> np.ndarray:
    """Per-character boundary targets from Viterbi segmentation.

    b_t = 1 at the last character of each piece. By default a whitespace joins
    the preceding word's final group: the mark moves from the word's last char
    onto the whitespace. With ws_own_group the whitespace closes a group of its
    own and the word keeps its mark.
    """
    b = np.zeros(len(text), dtype=np.int8)
    for word, start in _words_with_positions(text):
        seg = viterbi_segment(word, vocab)
        for _, end in seg.pieces:
            b[start + end - 1] = 1
    for i, ch in enumerate(text):
        if ch == " ":
            b[i] = 1
            if not ws_own_group and i > 0 and text[i - 1] != " ":
                b[i - 1] = 0
    return b


def whitespace_boundaries(text: str) -> np.ndarray:
    """b_t = 1 iff character t is whitespace."""
    return np.fromiter((1 if ch == " " else 0 for ch in text),
                       dtype=np.int8, count=len(text))
