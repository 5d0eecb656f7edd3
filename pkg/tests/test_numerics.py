"""Autodiff core: every op against central finite differences at float64."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seglm import numerics as nm
from seglm.backend import stream_key
from seglm.errors import ConfigError, UsageError

RNG = np.random.default_rng(99)


def finite_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = f()
        flat[i] = saved - eps
        down = f()
        flat[i] = saved
        gf[i] = (up - down) / (2 * eps)
    return g


def check_op(build, *shapes, tol=1e-6):
    """Gradient-check an op: build(tensors...) -> scalar loss Tensor."""
    tensors = [nm.tensor(RNG.normal(size=s), dtype=np.float64) for s in shapes]
    loss = build(*tensors)
    nm.backward(loss)
    for t in tensors:
        numeric = finite_diff(lambda: float(build(*[nm.tensor(u.value) for u in tensors]).value), t.value)
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, numeric, rtol=tol, atol=tol)


def scalar(x):
    return nm.tsum(nm.mul(x, x)) if isinstance(x, nm.Tensor) else x


class TestForwardExamples:
    def test_sigmoid_of_zero_is_half(self):
        assert float(nm.sigmoid(nm.tensor([0.0])).value[0]) == 0.5

    def test_layernorm_of_constant_vector_is_bias(self):
        # zero variance collapses to zeros before the affine terms
        x = nm.tensor(np.full((1, 6), 3.0))
        g = nm.tensor(np.ones(6))
        b = nm.tensor(np.zeros(6))
        np.testing.assert_allclose(nm.layernorm(x, g, b).value, 0.0, atol=1e-4)

    def test_softmax_uniform_case(self):
        np.testing.assert_allclose(nm.softmax(nm.tensor([[0.0, 0.0]])).value, [[0.5, 0.5]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ConfigError, match=r"\(2, 3\).*\(4, 5\)"):
            nm.matmul(nm.tensor(np.zeros((2, 3))), nm.tensor(np.zeros((4, 5))))

    def test_add_mismatch_is_config_error(self):
        with pytest.raises(ConfigError):
            nm.add(nm.tensor(np.zeros(3)), nm.tensor(np.zeros(4)))


class TestBackwardContract:
    def test_linear_map_gradient_is_input(self):
        x = np.array([1.0, 2.0, 3.0])
        w = nm.tensor(np.array([4.0, 5.0, 6.0]), dtype=np.float64)
        loss = nm.tsum(nm.mul(w, x))
        nm.backward(loss)
        np.testing.assert_array_equal(w.grad, x)

    def test_unreachable_parameter_has_no_gradient(self):
        w = nm.tensor(np.ones(3))
        other = nm.tensor(np.ones(3))
        nm.backward(nm.tsum(other))
        assert w.grad is None and other.grad is not None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(UsageError):
            nm.backward(nm.tensor(np.ones(4)))

    def test_reused_node_accumulates(self):
        x = nm.tensor(np.array([2.0]), dtype=np.float64)
        loss = nm.tsum(nm.add(nm.mul(x, x), x))  # x^2 + x -> 2x + 1
        nm.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])

    def test_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            a = nm.tensor(rng.normal(size=(4, 8)), dtype=np.float64)
            b = nm.tensor(rng.normal(size=(8, 3)), dtype=np.float64)
            loss = nm.tsum(nm.gelu(nm.matmul(a, b)))
            nm.backward(loss)
            return a.grad.copy(), b.grad.copy()

        ga1, gb1 = run()
        ga2, gb2 = run()
        assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


class TestOpGradients:
    def test_add_broadcast(self):
        check_op(lambda a, b: nm.tsum(nm.mul(nm.add(a, b), nm.add(a, b))), (3, 4), (4,))

    def test_mul_broadcast(self):
        check_op(lambda a, b: nm.tsum(nm.mul(a, b)), (2, 3, 4), (3, 1))

    def test_div(self):
        a = nm.tensor(RNG.normal(size=(3, 4)), dtype=np.float64)
        b = nm.tensor(RNG.uniform(1.0, 2.0, size=(3, 4)), dtype=np.float64)
        loss = nm.tsum(nm.div(a, b))
        nm.backward(loss)
        np.testing.assert_allclose(a.grad, 1.0 / b.value, rtol=1e-10)
        np.testing.assert_allclose(b.grad, -a.value / b.value**2, rtol=1e-10)

    def test_matmul_batched(self):
        check_op(lambda a, b: nm.tsum(nm.mul(nm.matmul(a, b), 0.1)), (2, 3, 4), (4, 5))

    def test_reshape_transpose_slice(self):
        def build(a):
            b = nm.reshape(a, (4, 6))
            c = nm.transpose(b, (1, 0))
            return nm.tsum(nm.mul(nm.take(c, (slice(1, 5), slice(None))), 2.0))

        check_op(build, (2, 12))

    def test_concat(self):
        check_op(lambda a, b: nm.tsum(nm.mul(nm.concat([a, b], axis=1), nm.concat([a, b], axis=1))), (3, 2), (3, 5))

    def test_mean_axis(self):
        check_op(lambda a: nm.tsum(nm.mul(nm.tmean(a, axis=1), nm.tmean(a, axis=1))), (5, 7))

    def test_sigmoid_log_exp(self):
        a = nm.tensor(RNG.uniform(0.2, 2.0, size=(4, 4)), dtype=np.float64)
        loss = nm.tsum(nm.tlog(nm.sigmoid(nm.texp(a))))
        nm.backward(loss)
        numeric = finite_diff(
            lambda: float(nm.tsum(nm.tlog(nm.sigmoid(nm.texp(nm.tensor(a.value))))).value), a.value
        )
        np.testing.assert_allclose(a.grad, numeric, rtol=1e-6, atol=1e-8)

    def test_gelu(self):
        check_op(lambda a: nm.tsum(nm.gelu(a)), (6, 5))

    def test_softmax_and_log_softmax(self):
        w = RNG.normal(size=(3, 7))
        check_op(lambda a: nm.tsum(nm.mul(nm.softmax(a), w)), (3, 7))
        check_op(lambda a: nm.tsum(nm.mul(nm.log_softmax(a), w)), (3, 7))

    def test_layernorm(self):
        w = RNG.normal(size=(5, 9))

        def build(x, g, b):
            return nm.tsum(nm.mul(nm.layernorm(x, g, b), w))

        check_op(build, (5, 9), (9,), (9,), tol=1e-5)

    def test_masked_softmax(self):
        limits = np.array([3, 1, 8, 5], dtype=np.int64)
        w = RNG.normal(size=(4, 8))

        def build(x):
            return nm.tsum(nm.mul(nm.masked_softmax(x, limits, 0.7), w))

        check_op(build, (4, 8), tol=1e-6)

    def test_cross_entropy(self):
        targets = RNG.integers(0, 6, size=5)

        def build(x):
            return nm.tmean(nm.cross_entropy(x, targets))

        check_op(build, (5, 6), tol=1e-6)

    def test_cross_entropy_matches_log_softmax(self):
        logits = nm.tensor(RNG.normal(size=(7, 9)), dtype=np.float64)
        targets = RNG.integers(0, 9, size=7)
        losses = nm.cross_entropy(logits, targets).value
        ref = -nm.log_softmax(nm.tensor(logits.value)).value[np.arange(7), targets]
        np.testing.assert_allclose(losses, ref, rtol=1e-10)

    def test_take_rows_and_embedding(self):
        idx = np.array([[0, 2], [1, 1]])

        def build(t):
            return nm.tsum(nm.mul(nm.take_rows(t, idx), 0.5))

        check_op(build, (4, 3))
        with pytest.raises(ConfigError):
            nm.embedding(nm.tensor(np.zeros((4, 3))), np.array([4]))

    def test_masked_fill(self):
        keep = (RNG.uniform(size=(4, 4)) > 0.5).astype(np.float64)
        w = RNG.normal(size=(4, 4))

        def build(x, fill):
            return nm.tsum(nm.mul(nm.masked_fill(x, keep, fill), w))

        check_op(build, (4, 4), (4, 4))


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = nm.tensor(RNG.normal(size=(5, 5)))
        assert nm.dropout(x, 0.5, stream_key(1, 2, 3), training=False) is x
        assert nm.dropout(x, 0.0, stream_key(1, 2, 3), training=True) is x

    def test_train_mode_scales_and_zeroes(self):
        x = nm.tensor(np.ones((100, 100)))
        y = nm.dropout(x, 0.25, stream_key(1, 2, 3), training=True)
        vals = set(np.unique(y.value).tolist())
        assert vals == {0.0, np.float32(1 / 0.75)}
        assert abs((y.value == 0).mean() - 0.25) < 0.02

    def test_same_key_same_mask(self):
        x = nm.tensor(np.ones(1000))
        a = nm.dropout(x, 0.1, stream_key(7, 8, 9), training=True)
        b = nm.dropout(x, 0.1, stream_key(7, 8, 9), training=True)
        assert np.array_equal(a.value, b.value)


class TestGradCheck:
    def test_quadratic_form_closed_oracle(self):
        # f = w' A w has gradient (A + A') w; the checker must agree to 1e-7
        a = RNG.normal(size=(6, 6))
        store = nm.ParameterStore()
        w = store.add("w", RNG.normal(size=6).astype(np.float64))

        def f():
            col = nm.reshape(w.tensor, (6, 1))
            return nm.reshape(nm.matmul(nm.transpose(col, (1, 0)), nm.matmul(a, col)), ())

        err = nm.grad_check(f, list(store))
        assert err < 1e-7
        store.zero_grads()
        nm.backward(f())
        np.testing.assert_allclose(w.grad, (a + a.T) @ w.value, rtol=1e-8)

    def test_constant_function_error_zero(self):
        store = nm.ParameterStore()
        store.add("w", np.zeros(3, dtype=np.float64))
        err = nm.grad_check(lambda: nm.tensor(np.float64(4.0)), list(store))
        assert err == 0.0

    def test_composite_sigmoid_affine(self):
        store = nm.ParameterStore()
        w = store.add("w", RNG.normal(size=(4, 3)).astype(np.float64))
        b = store.add("b", RNG.normal(size=3).astype(np.float64))
        x = RNG.normal(size=(5, 4))

        def f():
            return nm.tsum(nm.sigmoid(nm.add(nm.matmul(x, w.tensor), b.tensor)))

        assert nm.grad_check(f, list(store)) < 1e-5

    def test_rejects_float32(self):
        store = nm.ParameterStore()
        store.add("w", np.zeros(3, dtype=np.float32))
        with pytest.raises(UsageError):
            nm.grad_check(lambda: nm.tensor(0.0), list(store))


class TestParameterStore:
    def test_duplicate_names_rejected(self):
        store = nm.ParameterStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ConfigError):
            store.add("w", np.zeros(2))

    def test_count_and_zero_grads(self):
        store = nm.ParameterStore()
        store.add("a", np.zeros((2, 3)))
        store.add("b", np.zeros(5))
        assert store.count() == 11
        nm.backward(nm.tsum(store["a"].tensor))
        assert store["a"].grad is not None
        store.zero_grads()
        assert store["a"].grad is None


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    mid=st.integers(1, 8),
    cols=st.integers(1, 16),
    seed=st.integers(0, 2**31),
)
def test_property_matmul_chain_gradients(rows, mid, cols, seed):
    # randomized shapes up to 4 x 8 x 16, per the module contract
    rng = np.random.default_rng(seed)
    a = nm.tensor(rng.normal(size=(rows, mid)), dtype=np.float64)
    b = nm.tensor(rng.normal(size=(mid, cols)), dtype=np.float64)
    w = rng.normal(size=(rows, cols))

    def build(av, bv):
        return float(nm.tsum(nm.mul(nm.gelu(nm.matmul(av, bv)), w)).value)

    loss = nm.tsum(nm.mul(nm.gelu(nm.matmul(a, b)), w))
    nm.backward(loss)
    na = finite_diff(lambda: build(nm.tensor(a.value), nm.tensor(b.value)), a.value)
    nb = finite_diff(lambda: build(nm.tensor(a.value), nm.tensor(b.value)), b.value)
    assert np.abs(a.grad - na).max() / max(1.0, np.abs(na).max()) < 1e-5
    assert np.abs(b.grad - nb).max() / max(1.0, np.abs(nb).max()) < 1e-5
