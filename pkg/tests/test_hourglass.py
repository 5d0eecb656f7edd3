"""Model-level invariants: shapes, causality, parameter budget, gradients,
checkpoint integrity."""

import numpy as np
import pytest

import seglm.boundary as bd
import seglm.hourglass as hg
import seglm.numerics as nm
from seglm.errors import ConfigError, DataError

VOCAB = 11
SPACE = 0


def tiny_cfg(method="vanilla", **kw):
    base = dict(vocab_size=VOCAB, d=32, ff=64, heads=4, layers=(1, 1, 1),
                method=method, space_id=SPACE)
    base.update(kw)
    return hg.ModelConfig(**base)


def grad_cfg(method, **kw):
    base = dict(vocab_size=7, d=16, ff=32, heads=2, layers=(1, 1, 1),
                method=method, param_dtype="float64")
    base.update(kw)
    return hg.ModelConfig(**base)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_unknown_method_rejected():
    with pytest.raises(ConfigError):
        tiny_cfg(method="bpe")


def test_unknown_pooling_rejected():
    with pytest.raises(ConfigError):
        tiny_cfg(pooling="max")


def test_width_must_divide_heads():
    with pytest.raises(ConfigError):
        tiny_cfg(d=30)


@pytest.mark.parametrize("layers", [(0, 1, 1), (1, 1, 0), (1, -1, 1), (1, 1)])
def test_bad_layer_counts_rejected(layers):
    with pytest.raises(ConfigError):
        tiny_cfg(layers=layers)


def test_fixed_k_must_be_positive():
    with pytest.raises(ConfigError):
        tiny_cfg(method="fixed", fixed_k=0)


# ---------------------------------------------------------------------------
# parameter budget
# ---------------------------------------------------------------------------


def test_reference_config_parameter_count():
    base = hg.Hourglass(hg.reference_config(27, method="vanilla"), seed=0)
    n_base = sum(p.value.size for p in base.store)
    full = hg.Hourglass(hg.reference_config(27, method="gumbel"), seed=0)
    n_full = sum(p.value.size for p in full.store)
    delta = n_full - n_base

    assert n_base == 41_014_811
    assert delta == 1_052_673
    assert 40_000_000 <= n_base <= 43_000_000
    assert 800_000 <= delta <= 1_200_000


def test_predictor_only_built_for_learned_methods():
    for method in ("vanilla", "fixed", "whitespaces"):
        m = hg.Hourglass(tiny_cfg(method=method), seed=0)
        assert m.predictor is None
        assert "boundary.w1" not in m.store
    for method in ("gumbel", "unigram", "entropy"):
        m = hg.Hourglass(tiny_cfg(method=method), seed=0)
        assert m.predictor is not None
        assert "boundary.w1" in m.store


# ---------------------------------------------------------------------------
# forward shapes and segment bookkeeping
# ---------------------------------------------------------------------------


def test_vanilla_forward_shape_and_unit_shortening():
    model = hg.Hourglass(tiny_cfg("vanilla"), seed=1)
    toks = np.random.default_rng(0).integers(0, VOCAB, size=(3, 20))
    logits, diag = model.forward(toks)
    assert logits.shape == (3, 20, VOCAB)
    assert diag["sf"] == 1.0
    assert (diag["segments"] == 20).all()
    assert (diag["b"] == 1).all()


def test_whitespace_example_two_groups():
    # "a b": the space closes the first group, so {a, space} and {b}
    model = hg.Hourglass(tiny_cfg("whitespaces"), seed=1)
    toks = np.array([[1, SPACE, 2]])
    logits, diag = model.forward(toks)
    assert diag["segments"].tolist() == [2]
    assert diag["sf"] == 1.5
    assert diag["b"].tolist() == [[0, 1, 0]]


def test_fixed_k2_halves_the_sequence():
    model = hg.Hourglass(tiny_cfg("fixed", fixed_k=2), seed=1)
    toks = np.random.default_rng(0).integers(0, VOCAB, size=(2, 8))
    _, diag = model.forward(toks)
    assert (diag["segments"] == 4).all()
    assert diag["sf"] == 2.0


def test_eval_boundaries_are_rounded_probabilities():
    model = hg.Hourglass(tiny_cfg("unigram"), seed=2)
    model.predictor.b2.tensor.value[:] = 0.0  # centre probabilities near 0.5
    toks = np.random.default_rng(1).integers(0, VOCAB, size=(2, 24))
    _, diag = model.forward(toks)
    assert diag["b"].any() and not diag["b"].all()
    np.testing.assert_array_equal(diag["b"], (diag["bhat"].value >= 0.5).astype(np.int8))


def test_one_position_sequence():
    model = hg.Hourglass(tiny_cfg("gumbel"), seed=1)
    logits, diag = model.forward(np.array([[3]]))
    assert logits.shape == (1, 1, VOCAB)
    assert np.isfinite(logits.value).all()


def test_no_middle_layers_still_works():
    model = hg.Hourglass(tiny_cfg("fixed", layers=(1, 0, 1)), seed=1)
    logits, _ = model.forward(np.arange(8)[None] % VOCAB)
    assert np.isfinite(logits.value).all()


def test_subsample_pooling_differs_from_mean():
    toks = np.random.default_rng(2).integers(0, VOCAB, size=(2, 12))
    mean = hg.Hourglass(tiny_cfg("fixed", fixed_k=3, pooling="mean"), seed=4)
    sub = hg.Hourglass(tiny_cfg("fixed", fixed_k=3, pooling="subsample"), seed=4)
    lm, _ = mean.forward(toks)
    ls, _ = sub.forward(toks)
    assert not np.allclose(lm.value, ls.value)


# ---------------------------------------------------------------------------
# determinism and causality
# ---------------------------------------------------------------------------


def test_eval_forward_is_bitwise_deterministic():
    model = hg.Hourglass(tiny_cfg("gumbel"), seed=3)
    toks = np.random.default_rng(3).integers(0, VOCAB, size=(2, 16))
    a, _ = model.forward(toks)
    b, _ = model.forward(toks)
    np.testing.assert_array_equal(a.value, b.value)


def test_training_step_is_reproducible_and_seed_sensitive():
    model = hg.Hourglass(tiny_cfg("gumbel"), seed=3)
    toks = np.random.default_rng(4).integers(0, VOCAB, size=(2, 16))
    a, da = model.forward(toks, training=True, step=5, seed=9)
    b, db = model.forward(toks, training=True, step=5, seed=9)
    np.testing.assert_array_equal(a.value, b.value)
    np.testing.assert_array_equal(da["b"], db["b"])
    c, _ = model.forward(toks, training=True, step=5, seed=10)
    assert not np.array_equal(a.value, c.value)


@pytest.mark.parametrize("method", hg.METHODS)
def test_prefix_logits_ignore_suffix(method):
    # suffix rewrites must leave earlier logits bitwise untouched in eval mode
    model = hg.Hourglass(tiny_cfg(method), seed=5)
    if model.predictor is not None:
        model.predictor.b2.tensor.value[:] = 0.0  # make boundaries vary
    rng = np.random.default_rng(6)
    for _ in range(10):
        length = 32
        toks = rng.integers(0, VOCAB, size=(1, length))
        t = int(rng.integers(0, length - 1))
        alt = toks.copy()
        alt[0, t + 1:] = rng.integers(0, VOCAB, size=length - t - 1)
        la, _ = model.forward(toks)
        lb, _ = model.forward(alt)
        np.testing.assert_array_equal(la.value[0, : t + 1], lb.value[0, : t + 1])


def test_vanilla_matches_fixed_k1_when_null_is_zeroed():
    toks = np.random.default_rng(7).integers(0, VOCAB, size=(2, 16))
    mv = hg.Hourglass(tiny_cfg("vanilla"), seed=8)
    mf = hg.Hourglass(tiny_cfg("fixed", fixed_k=1), seed=8)
    mv.null.tensor.value[:] = 0.0
    mf.null.tensor.value[:] = 0.0
    lv, _ = mv.forward(toks)
    lf, _ = mf.forward(toks)
    assert np.abs(lv.value - lf.value).max() <= 1e-5


def test_batch_rows_are_independent():
    model = hg.Hourglass(tiny_cfg("fixed", fixed_k=2), seed=9)
    toks = np.random.default_rng(8).integers(0, VOCAB, size=(3, 16))
    batch, _ = model.forward(toks)
    for i in range(3):
        single, _ = model.forward(toks[i : i + 1])
        np.testing.assert_allclose(batch.value[i], single.value[0], atol=1e-5)


def test_segment_padding_width_does_not_change_logits():
    # eval pads segments to the full length; a tight pad must agree
    model = hg.Hourglass(tiny_cfg("fixed", fixed_k=4), seed=10)
    toks = np.random.default_rng(9).integers(0, VOCAB, size=(2, 16))
    wide, diag = model.forward(toks)
    tight, _ = model.forward(toks, pad_segments=int(diag["segments"].max()))
    np.testing.assert_allclose(wide.value, tight.value, atol=1e-5)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_uniform_logits_cost_log_vocab():
    logits = nm.tensor(np.zeros((2, 8, 27), np.float64))
    targets = np.random.default_rng(10).integers(0, 27, size=(2, 8))
    lm = hg.lm_loss(logits, targets)
    assert abs(float(lm.value) - np.log(27.0)) < 1e-12


def test_lm_loss_matches_log_softmax_oracle():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(2, 6, 9))
    targets = rng.integers(0, 9, size=(2, 6))
    lm = hg.lm_loss(nm.tensor(z), targets)
    logp = z - np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1, keepdims=True)) \
        - z.max(-1, keepdims=True)
    want = -np.take_along_axis(logp, targets[..., None], axis=-1).mean()
    assert abs(float(lm.value) - want) < 1e-6


def test_predictive_entropy_uniform_rows():
    H = hg.predictive_entropy(np.zeros((2, 5, 27)))
    np.testing.assert_allclose(H, np.log(27.0), rtol=1e-12)


def test_predictive_entropy_shifts_by_one():
    z = np.zeros((1, 3, 4))
    z[0, 0] = [50.0, 0.0, 0.0, 0.0]  # near-certain guess made AT position 0
    H = hg.predictive_entropy(z)
    assert H[0, 0] == pytest.approx(np.log(4.0))  # no guess about position 0
    assert H[0, 1] == pytest.approx(0.0, abs=1e-12)  # position 1 was predicted there
    assert H[0, 2] == pytest.approx(np.log(4.0))


def test_entropy_loss_uses_spike_teacher():
    model = hg.Hourglass(tiny_cfg("entropy"), seed=12)
    toks = np.random.default_rng(12).integers(0, VOCAB, size=(2, 16))
    targets = np.random.default_rng(13).integers(0, VOCAB, size=(2, 16))
    logits, diag = model.forward(toks, training=True, step=0, seed=0)
    total, parts = model.loss(logits, targets, diag)
    teacher = bd.spike_boundaries(hg.predictive_entropy(logits.value),
                                  model.cfg.spike_window)
    want = bd.bce_loss(diag["bhat"], teacher)
    assert float(parts["aux"].value) == pytest.approx(float(want.value), rel=1e-6)
    assert float(parts["total"].value) == pytest.approx(
        float(parts["lm"].value) + float(parts["aux"].value), rel=1e-6)


def test_unigram_loss_requires_gold_boundaries():
    model = hg.Hourglass(tiny_cfg("unigram"), seed=13)
    toks = np.random.default_rng(14).integers(0, VOCAB, size=(1, 8))
    logits, diag = model.forward(toks, training=True)
    with pytest.raises(ConfigError):
        model.loss(logits, toks, diag)


def test_whitespaces_needs_space_id():
    model = hg.Hourglass(tiny_cfg("whitespaces", space_id=None), seed=13)
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 4), np.int64))


def test_gumbel_aux_is_the_boundary_count_prior():
    cfg = tiny_cfg("gumbel", alpha=0.25)
    model = hg.Hourglass(cfg, seed=14)
    toks = np.random.default_rng(15).integers(0, VOCAB, size=(2, 12))
    logits, diag = model.forward(toks, training=True, step=1, seed=2)
    _, parts = model.loss(logits, toks, diag)
    k = diag["b"].sum(axis=1).astype(np.float64)
    want = bd.binomial_prior_loss(12, nm.tensor(k), 0.25)
    assert float(parts["aux"].value) == pytest.approx(float(want.value), rel=1e-5)


# ---------------------------------------------------------------------------
# gradients (soft pooling route, f64)
# ---------------------------------------------------------------------------


def _soft_grad_err(method, seed, loss_kwargs=None, n_coords=30):
    rng = np.random.default_rng(seed)
    model = hg.Hourglass(grad_cfg(method), seed=seed)
    toks = rng.integers(0, 7, size=(2, 8))
    targets = rng.integers(0, 7, size=(2, 8))

    def f():
        logits, diag = model.forward(toks, training=True, step=2, seed=11, soft_pool=True)
        total, _ = model.loss(logits, targets, diag, **(loss_kwargs or {}))
        return total

    return nm.grad_check(f, list(model.store.trainable()),
                         rng=np.random.default_rng(seed + 1), n_coords=n_coords)


def test_grad_check_gumbel_soft_route():
    assert _soft_grad_err("gumbel", 21) < 1e-6


def test_grad_check_unigram_soft_route():
    gold = (np.random.default_rng(99).random((2, 8)) < 0.4).astype(np.int8)
    assert _soft_grad_err("unigram", 22, {"gold_b": gold}) < 1e-6


def test_grad_check_entropy_soft_route_fixed_teacher():
    teacher = (np.random.default_rng(98).random((2, 8)) < 0.3).astype(np.int8)
    teacher[:, 0] = 0
    assert _soft_grad_err("entropy", 23, {"teacher_b": teacher}) < 1e-6


def test_grad_check_hard_route_fixed_boundaries():
    # with rule boundaries the hard path is itself differentiable end to end
    rng = np.random.default_rng(24)
    model = hg.Hourglass(grad_cfg("fixed", fixed_k=2), seed=24)
    toks = rng.integers(0, 7, size=(2, 8))
    targets = rng.integers(0, 7, size=(2, 8))

    def f():
        logits, diag = model.forward(toks)
        total, _ = model.loss(logits, targets, diag)
        return total

    err = nm.grad_check(f, list(model.store.trainable()),
                        rng=np.random.default_rng(25), n_coords=30)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    model = hg.Hourglass(tiny_cfg("gumbel"), seed=31)
    path = tmp_path / "model.sglm"
    hg.save_model(path, model, extra_meta={"step": 17},
                  extra_arrays={"adam.m.null": np.ones(32, np.float32)})
    loaded, meta, extra = hg.load_model(path)
    assert meta["step"] == 17
    assert hg.config_from_meta(meta["config"]) == model.cfg
    for p in model.store:
        np.testing.assert_array_equal(loaded.store[p.name].value, p.value)
    np.testing.assert_array_equal(extra["adam.m.null"], np.ones(32, np.float32))


def test_loaded_model_reproduces_logits(tmp_path):
    model = hg.Hourglass(tiny_cfg("unigram"), seed=32)
    toks = np.random.default_rng(33).integers(0, VOCAB, size=(2, 12))
    want, _ = model.forward(toks)
    path = tmp_path / "model.sglm"
    hg.save_model(path, model)
    loaded, _, _ = hg.load_model(path)
    got, _ = loaded.forward(toks)
    np.testing.assert_array_equal(got.value, want.value)


def test_checkpoint_config_mismatch_rejected(tmp_path):
    model = hg.Hourglass(tiny_cfg("gumbel"), seed=34)
    path = tmp_path / "model.sglm"
    hg.save_model(path, model)
    with pytest.raises(DataError):
        hg.load_model(path, expect_cfg=tiny_cfg("gumbel", d=64, ff=128))


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.sglm"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DataError):
        hg.read_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path):
    model = hg.Hourglass(tiny_cfg("vanilla"), seed=35)
    path = tmp_path / "model.sglm"
    hg.save_model(path, model)
    blob = path.read_bytes()
    cut = tmp_path / "cut.sglm"
    cut.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataError):
        hg.read_checkpoint(cut)
