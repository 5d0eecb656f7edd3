"""Cleaning, vocabulary, chunking, and eval-window contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seglm import corpus
from seglm.errors import DataError, UsageError

# hand-built cleaning cases: raw -> expected under the English profile
CLEANING_CASES = [
    ("Ab3", "ab three"),
    ("hello", "hello"),
    ("HELLO World", "hello world"),
    ("a,b.c", "a b c"),
    ("x  y\t z", "x y z"),
    ("1", "one"),
    ("42", "four two"),
    ("no9thing", "no nine thing"),
    ("  lead and trail  ", "lead and trail"),
    ("semi;colon:dash-quote'", "semi colon dash quote"),
    ("tabs\tand\nnewlines", "tabs and newlines"),
    ("MiXeD CaSe 7", "mixed case seven"),
    ("(parens) [brackets]", "parens brackets"),
    ("€uro £ sign", "uro sign"),
    ("a+b=c", "a b c"),
    ("under_score", "under score"),
    ("ellipsis...done", "ellipsis done"),
    ("%$#@!", ""),
    ("one1one", "one one one"),
    ("0", "zero"),
]


class TestCleanText:
    @pytest.mark.parametrize("raw,want", CLEANING_CASES)
    def test_rule_application(self, raw, want):
        assert corpus.clean_text(raw) == want

    def test_mixed_script_with_disjoint_whitelist_collapses(self):
        # nothing survives the whitelist; runs collapse to one space, then strip
        assert corpus.clean_text("δοκιμή 测试") == ""
        assert corpus.clean_text("aδοκιμήb") == "a b"

    def test_homoglyphs_mapped_before_filtering(self):
        cfg = corpus.CleanerConfig.for_language("english", homoglyphs=True)
        assert corpus.clean_text("сat", cfg) == "cat"  # Cyrillic es
        assert len(corpus.LATIN_LOOKALIKES) == 20

    def test_finnish_digits(self):
        cfg = corpus.CleanerConfig.for_language("finnish")
        assert corpus.clean_text("3 kissaa", cfg) == "kolme kissaa"

    def test_whitelist_must_contain_space(self):
        with pytest.raises(UsageError):
            corpus.CleanerConfig(allowed_chars=frozenset("abc"))

    def test_digits_banned_from_whitelist(self):
        with pytest.raises(UsageError):
            corpus.CleanerConfig(allowed_chars=frozenset("abc1 "))

    @settings(max_examples=200, deadline=None)
    @given(st.text(max_size=80))
    def test_idempotent_and_closed(self, raw):
        cleaned = corpus.clean_text(raw)
        assert corpus.clean_text(cleaned) == cleaned
        cfg = corpus.CleanerConfig()
        assert set(cleaned) <= cfg.allowed_chars
        assert "  " not in cleaned


class TestCharVocab:
    def test_bijective_contiguous(self):
        v = corpus.CharVocab("the quick brown fox")
        assert sorted(v.id_of.values()) == list(range(len(v)))
        assert all(v.char_of[v.id_of[c]] == c for c in v.id_of)

    @settings(max_examples=100, deadline=None)
    @given(st.text(alphabet="abc xyz", min_size=1, max_size=60))
    def test_roundtrip(self, text):
        v = corpus.CharVocab(text)
        assert v.decode(v.encode(text)) == text

    def test_unknown_char_is_data_error(self):
        v = corpus.CharVocab("abc")
        with pytest.raises(DataError, match="'z'"):
            v.encode("z")

    def test_file_roundtrip_with_escapes(self, tmp_path):
        v = corpus.CharVocab("ab \\c")
        path = tmp_path / "vocab.txt"
        v.save(path)
        w = corpus.CharVocab.load(path)
        assert w.char_of == v.char_of
        assert w.space_id == v.space_id

    def test_empty_text_rejected(self):
        with pytest.raises(DataError):
            corpus.CharVocab("")


class TestChunkStream:
    def test_two_chunks_cover_all_tokens(self):
        chunks = corpus.split_rotated(np.arange(10), 5, 0)
        assert chunks.shape == (2, 5)
        assert sorted(chunks.reshape(-1).tolist()) == list(range(10))

    def test_rotation_oracle(self):
        chunks = corpus.split_rotated(np.arange(10), 5, 3)
        rotation = list(range(3, 10)) + list(range(3))
        assert chunks.reshape(-1).tolist() == rotation

    def test_same_seed_same_epoch_identical(self):
        stream = corpus.ChunkStream(np.arange(100), chunk_len=10)
        a = stream.epoch(3, seed=7)
        b = stream.epoch(3, seed=7)
        assert np.array_equal(a, b)

    def test_epochs_differ(self):
        stream = corpus.ChunkStream(np.arange(100), chunk_len=10)
        assert not np.array_equal(stream.epoch(0, seed=7), stream.epoch(1, seed=7))

    def test_chunk_invariants(self):
        stream = corpus.ChunkStream(np.arange(103), chunk_len=10)
        chunks = stream.epoch(0, seed=1)
        assert chunks.shape == (10, 10)  # whole chunks only
        assert len(np.unique(chunks.reshape(-1))) == 100  # non-overlapping

    def test_short_stream_rejected(self):
        with pytest.raises(UsageError):
            corpus.ChunkStream(np.arange(5), chunk_len=10)


class TestEvalWindows:
    def test_worked_example(self):
        ws = corpus.eval_windows(3072, length=2048, step=512)
        assert len(ws) == 3
        assert [w.start for w in ws] == [0, 512, 1024]
        assert list(ws[1].scored) == list(range(2048, 2560))
        assert list(ws[2].scored) == list(range(2560, 3072))

    def test_single_window_fully_scored(self):
        ws = corpus.eval_windows(2048, length=2048, step=512)
        assert len(ws) == 1
        assert ws[0].scored == range(1, 2048)

    def test_step_equals_length(self):
        ws = corpus.eval_windows(12, length=4, step=4)
        spans = [list(w.scored) for w in ws]
        assert spans == [[1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]]

    @settings(max_examples=200, deadline=None)
    @given(
        n=st.integers(2, 400),
        length=st.integers(2, 64),
        step=st.integers(1, 64),
    )
    def test_scored_spans_tile_exactly(self, n, length, step):
        step = min(step, length)
        ws = corpus.eval_windows(n, length=length, step=step)
        seen = []
        for w in ws:
            assert 0 <= w.start and w.start + w.length <= n
            assert all(w.start <= t < w.start + w.length for t in w.scored)
            seen.extend(w.scored)
        # every token scored exactly once, except the warm-up head at 0
        assert seen == list(range(1, n))

    def test_strict_mode_leaves_head_unscored(self):
        ws = corpus.eval_windows(3072, length=2048, step=512, strict=True)
        assert list(ws[0].scored) == list(range(1536, 2048))
        total = [t for w in ws for t in w.scored]
        assert total == list(range(1536, 3072))

    def test_step_above_length_rejected(self):
        with pytest.raises(UsageError):
            corpus.eval_windows(100, length=4, step=8)
