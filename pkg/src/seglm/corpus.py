"""Text ingestion: cleaning, character vocabulary, chunking, eval windows.

Cleaning is total and idempotent: lowercase, map configured lookalike
characters, spell out digits, replace anything outside the whitelist
with a space, collapse whitespace runs. The output alphabet is exactly
the whitelist, so the character vocabulary is closed under cleaning.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError

DIGIT_WORDS = {
    "english": ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"],
    "finnish": ["nolla", "yksi", "kaksi", "kolme", "nelja", "viisi", "kuusi", "seitseman", "kahdeksan", "yhdeksan"],
    "hebrew": ["אפס", "אחת", "שתיים", "שלוש", "ארבע", "חמש", "שש", "שבע", "שמונה", "תשע"],
}

ALPHABETS = {
    "english": "abcdefghijklmnopqrstuvwxyz",
    "finnish": "abcdefghijklmnopqrstuvwxyz",
    "hebrew": "אבגדהוזחטיךכלםמןנסעףפץצקרשת",
}

# optional map of 20 common Latin-lookalike codepoints (Cyrillic and Greek)
LATIN_LOOKALIKES = {
    "а": "a", "е": "e", "о": "o", "р": "p", "с": "c",
    "у": "y", "х": "x", "і": "i", "ѕ": "s", "ј": "j",
    "һ": "h", "ԁ": "d", "ɡ": "g", "ո": "n", "ν": "v",
    "α": "a", "β": "b", "τ": "t", "κ": "k", "μ": "u",
}


@dataclass
class CleanerConfig:
    allowed_chars: frozenset = frozenset(ALPHABETS["english"] + " ")
    digit_words: list = field(default_factory=lambda: list(DIGIT_WORDS["english"]))
    homoglyph_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.allowed_chars = frozenset(self.allowed_chars)
        if " " not in self.allowed_chars:
            raise UsageError("cleaner whitelist must contain the space character")
        if any(d in self.allowed_chars for d in "0123456789"):
            raise UsageError("digits may not appear in the cleaner whitelist")

    @classmethod
    def for_language(cls, language: str, homoglyphs: bool = False) -> "CleanerConfig":
        if language not in ALPHABETS:
            raise UsageError(f"no cleaner profile for language {language!r}")
        return cls(
            allowed_chars=frozenset(ALPHABETS[language] + " "),
            digit_words=list(DIGIT_WORDS[language]),
            homoglyph_map=dict(LATIN_LOOKALIKES) if homoglyphs else {},
        )


def clean_text(raw: str, cfg: CleanerConfig | None = None) -> str:
    cfg = cfg or CleanerConfig()
    text = raw.lower()
    if cfg.homoglyph_map:
        text = text.translate(str.maketrans(cfg.homoglyph_map))
    # spelt-out digits get surrounding spaces so they never fuse with a word
    text = re.sub(r"[0-9]", lambda m: f" {cfg.digit_words[int(m.group())]} ", text)
    chars = [c if c in cfg.allowed_chars else " " for c in text]
    return re.sub(r"  +", " ", "".join(chars)).strip()


class CharVocab:
    """Bijective char <-> contiguous id map over a cleaned corpus."""

    def __init__(self, chars):
        self.char_of = sorted(set(chars))
        if not self.char_of:
            raise DataError("cannot build a vocabulary from empty text")
        self.id_of = {c: i for i, c in enumerate(self.char_of)}

    def __len__(self):
        return len(self.char_of)

    def __contains__(self, ch):
        return ch in self.id_of

    @property
    def space_id(self):
        return self.id_of.get(" ")

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.fromiter((self.id_of[c] for c in text), dtype=np.int32, count=len(text))
        except KeyError as e:
            raise DataError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.char_of[i] for i in ids)

    _ESCAPES = {" ": "\\s", "\n": "\\n", "\\": "\\\\"}
    _UNESCAPES = {v: k for k, v in _ESCAPES.items()}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for c in self.char_of:
                f.write(self._ESCAPES.get(c, c) + "\n")

    @classmethod
    def load(cls, path) -> "CharVocab":
        vocab = cls.__new__(cls)
        chars = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                token = line.rstrip("\n")
                if not token:
                    raise DataError(f"empty line in vocabulary file {path}")
                chars.append(cls._UNESCAPES.get(token, token))
        if len(set(chars)) != len(chars):
            raise DataError(f"duplicate characters in vocabulary file {path}")
        vocab.char_of = chars
        vocab.id_of = {c: i for i, c in enumerate(chars)}
        return vocab


@dataclass
class ChunkStream:
    """Non-overlapping fixed-length chunks over a cyclically shifted stream."""

    tokens: np.ndarray
    chunk_len: int = 2048

    def __post_init__(self):
        if len(self.tokens) < self.chunk_len:
            raise UsageError(
                f"stream of {len(self.tokens)} tokens is shorter than one chunk ({self.chunk_len})"
            )

    def epoch(self, epoch: int, seed: int) -> np.ndarray:
        """All chunks of one epoch, shuffled; shape (n_chunks, chunk_len).

        The stream is rotated by a per-epoch offset before splitting, so
        chunk borders move between epochs. Deterministic in (epoch, seed).
        """
        rng = np.random.default_rng((seed, epoch, 0xC0FFEE))
        shift = int(rng.integers(0, len(self.tokens)))
        chunks = split_rotated(self.tokens, self.chunk_len, shift)
        return chunks[rng.permutation(len(chunks))]


def split_rotated(tokens: np.ndarray, chunk_len: int, shift: int) -> np.ndarray:
    """Rotate the stream left by `shift` and split into whole chunks."""
    rolled = np.concatenate([tokens[shift:], tokens[:shift]])
    n_chunks = len(tokens) // chunk_len
    return rolled[: n_chunks * chunk_len].reshape(n_chunks, chunk_len)


@dataclass
class EvalWindow:
    start: int  # window covers tokens[start : start + len]
    length: int
    scored: range  # absolute token positions scored by this window


def eval_windows(n_tokens: int, length: int = 2048, step: int = 512, strict: bool = False) -> list[EvalWindow]:
    """Overlapping windows whose scored spans tile the token stream.

    Window i starts at i*step and scores its last `step` positions. The
    first window instead scores everything from position 1 (position 0
    has no left context: the documented warm-up head), unless `strict`
    is set, which reproduces the uniform-context convention and leaves
    the head of the stream unscored. A final right-aligned window picks
    up any remainder.
    """
    if step > length:
        raise UsageError(f"step {step} larger than window length {length}")
    if n_tokens < 2:
        raise UsageError("need at least two tokens to score")
    if n_tokens <= length:
        first = range(length - step, n_tokens) if strict and n_tokens > length - step else range(1, n_tokens)
        return [EvalWindow(0, n_tokens, first)]

    windows = [EvalWindow(0, length, range(length - step, length) if strict else range(1, length))]
    start = step
    while start + length < n_tokens:
        windows.append(EvalWindow(start, length, range(start + length - step, start + length)))
        start += step
    last_end = windows[-1].scored.stop
    if last_end < n_tokens:
        windows.append(EvalWindow(n_tokens - length, length, range(last_end, n_tokens)))
    return windows
