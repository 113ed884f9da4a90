import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refdx.errors import DomainError, NumericError, ShapeError, StateError
from refdx.numerics import (
    Adam,
    AdamState,
    Dense,
    adam_step,
    check_gradients,
    cosine_sim,
    cross_entropy,
    cross_entropy_batch,
    dense_backward,
    dense_forward,
    kaiming_uniform_bound,
    kaiming_uniform_init,
    l2_normalize,
    make_rng,
    numerical_gradient,
    relative_error,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vecs = arrays(np.float64, st.integers(1, 12), elements=finite)


def nonzero_pair():
    return st.integers(1, 10).flatmap(lambda n: st.tuples(
        arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))).filter(
        lambda p: np.linalg.norm(p[0]) > 1e-3 and np.linalg.norm(p[1]) > 1e-3)


class TestCosine:
    def test_hand_values(self):
        assert cosine_sim([1, 0], [1, 0]) == 1.0
        assert cosine_sim([1, 0], [0, 1]) == 0.0
        assert cosine_sim([1, 0], [1, 1]) == pytest.approx(0.7071068, abs=1e-7)

    def test_errors(self):
        with pytest.raises(DomainError):
            cosine_sim([0, 0], [1, 0])
        with pytest.raises(ShapeError):
            cosine_sim([1, 0], [1, 0, 0])
        with pytest.raises(ShapeError):
            cosine_sim([], [])

    @given(nonzero_pair(), st.floats(0.01, 100))
    def test_symmetric_scale_invariant_bounded(self, pair, c):
        u, v = pair
        s = cosine_sim(u, v)
        assert -1 - 1e-9 <= s <= 1 + 1e-9
        assert s == pytest.approx(cosine_sim(v, u), abs=1e-12)
        assert s == pytest.approx(cosine_sim(c * u, v), abs=1e-9)


class TestSoftmax:
    def test_values(self):
        np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3)
        np.testing.assert_allclose(softmax([1, 0]), [0.7310586, 0.2689414], atol=1e-7)

    def test_empty(self):
        with pytest.raises(ShapeError):
            softmax([])

    def test_non_finite(self):
        with pytest.raises(NumericError):
            softmax([0.0, np.inf])

    def test_large_inputs_stable(self):
        p = softmax([1000.0, 999.0])
        np.testing.assert_allclose(p, softmax([1.0, 0.0]))

    @given(vecs, st.floats(-100, 100))
    def test_sum_positive_shift(self, s, c):
        p = softmax(s)
        assert abs(p.sum() - 1) < 1e-9
        assert np.all(p > 0) or np.ptp(s) > 700  # exp underflow only for huge gaps
        np.testing.assert_allclose(softmax(s + c), p, atol=1e-12)

    def test_axis(self):
        m = make_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(softmax(m, axis=0).sum(axis=0), 1.0)


class TestDense:
    def test_hand_values(self):
        assert dense_forward([[1, 2]], [[1], [1]], [0], "relu").tolist() == [[3]]
        assert dense_forward([[-5]], [[1]], [0], "relu").tolist() == [[0]]
        x = make_rng(1).normal(size=(3, 4))
        np.testing.assert_array_equal(dense_forward(x, np.eye(4), np.zeros(4)), x)

    def test_shape_and_activation_errors(self):
        with pytest.raises(ShapeError):
            dense_forward([[1, 2]], [[1, 1]], [0])
        with pytest.raises(DomainError):
            dense_forward([[1]], [[1]], [0], "tanh")
        with pytest.raises(StateError):
            dense_backward(np.ones((1, 1)), None)
        with pytest.raises(StateError):
            Dense(np.ones((1, 1)), np.zeros(1)).backward(np.ones((1, 1)))

    def test_scalar_chain_rule(self):
        _, cache = dense_forward([[2.0]], [[3.0]], [1.0], return_cache=True)
        gx, gW, gb = dense_backward(np.array([[0.5]]), cache)
        assert gW[0, 0] == 0.5 * 2.0 and gx[0, 0] == 0.5 * 3.0 and gb[0] == 0.5

    def test_zero_upstream(self):
        _, cache = dense_forward(np.ones((2, 3)), np.ones((3, 2)), np.zeros(2), "relu", True)
        for g in dense_backward(np.zeros((2, 2)), cache):
            assert not np.any(g)

    @pytest.mark.parametrize("activation", ["relu", "none"])
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, activation, seed):
        rng = make_rng(seed)
        x, W, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
        up = rng.normal(size=(5, 3))

        def loss():
            return float((dense_forward(x, W, b, activation) * up).sum())
        _, cache = dense_forward(x, W, b, activation, return_cache=True)
        gx, gW, gb = dense_backward(up, cache)
        errs = check_gradients(loss, {"x": x, "W": W, "b": b}, {"x": gx, "W": gW, "b": gb})
        assert max(errs.values()) < 1e-4

    def test_layer_init_zero_bias(self):
        layer = Dense.init(8, 4, make_rng(0), "relu")
        assert not np.any(layer.b)
        assert np.all(np.abs(layer.W) <= kaiming_uniform_bound(8))


class TestCrossEntropy:
    def test_values(self):
        assert cross_entropy(np.zeros(4), 2)[0] == pytest.approx(math.log(4))
        assert cross_entropy([0.0, -1000.0], 0)[0] == pytest.approx(0.0, abs=1e-12)
        assert cross_entropy([0.0, 0.0], 1)[0] == pytest.approx(0.6931472, abs=1e-7)

    def test_grad_formula(self):
        logits = np.array([0.3, -1.0, 2.0])
        _, g = cross_entropy(logits, 1)
        expected = softmax(logits)
        expected[1] -= 1
        np.testing.assert_allclose(g, expected)

    def test_index_error(self):
        with pytest.raises(DomainError):
            cross_entropy([1.0, 2.0], 2)
        with pytest.raises(DomainError):
            cross_entropy([1.0, 2.0], -1)

    def test_batch_matches_single(self):
        rng = make_rng(3)
        logits, y = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
        loss, grad = cross_entropy_batch(logits, y)
        singles = [cross_entropy(l, c) for l, c in zip(logits, y)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]))
        np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 6)
        num = numerical_gradient(lambda: cross_entropy_batch(logits, y)[0], logits)
        assert relative_error(grad, num) < 1e-6


class TestAdam:
    def test_first_step(self):
        p = np.array([1.0])
        adam_step(p, np.array([1.0]), AdamState((1,), lr=5e-5))
        assert p[0] - 1.0 == pytest.approx(-5e-5, rel=1e-6)

    def test_zero_grad(self):
        p = np.array([0.3, -0.2])
        state = AdamState((2,))
        adam_step(p, np.zeros(2), state)
        np.testing.assert_array_equal(p, [0.3, -0.2])
        assert state.t == 1

    def test_two_steps_closed_form(self):
        p = np.array([1.0])
        state = AdamState((1,), lr=0.1)
        values = [p[0]]
        for _ in range(2):
            adam_step(p, np.array([2.0]), state)
            values.append(p[0])
        # constant gradient: bias-corrected m_hat/sqrt(v_hat) = 1 at every step
        step = 0.1 * 2.0 / (2.0 + 1e-8)
        assert values[1] == pytest.approx(1.0 - step)
        assert values[2] == pytest.approx(1.0 - 2 * step)
        assert values[0] > values[1] > values[2]

    def test_errors(self):
        with pytest.raises(NumericError):
            adam_step(np.zeros(1), np.array([np.nan]), AdamState((1,)))
        with pytest.raises(ShapeError):
            adam_step(np.zeros(2), np.zeros(3), AdamState((2,)))
        with pytest.raises(DomainError):
            AdamState((1,), t=-1)

    def test_weight_decay_decoupled(self):
        p = np.array([2.0])
        adam_step(p, np.zeros(1), AdamState((1,), lr=0.1, weight_decay=0.5))
        assert p[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_optimizer_updates_in_place(self):
        params = {"a": np.ones(3), "b": np.zeros((2, 2))}
        opt = Adam(params, lr=0.01)
        opt.step({"a": np.ones(3), "b": np.ones((2, 2))})
        assert np.all(params["a"] < 1) and np.all(params["b"] < 0)
        assert all(s.t == 1 for s in opt.states.values())


class TestInit:
    def test_bounds_and_mean(self):
        bound = kaiming_uniform_bound(16)
        w = kaiming_uniform_init(16, (100_000,), make_rng(0))
        assert bound == pytest.approx(math.sqrt(6 / 16))
        assert np.all(np.abs(w) <= bound)
        assert abs(w.mean()) < 0.01 * bound

    def test_determinism(self):
        a = kaiming_uniform_init(5, (4, 3), make_rng(42))
        b = kaiming_uniform_init(5, (4, 3), make_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_fan_in_zero(self):
        with pytest.raises(DomainError):
            kaiming_uniform_bound(0)


def test_l2_normalize_zero():
    with pytest.raises(NumericError):
        l2_normalize([0.0, 0.0])


def test_rng_streams_are_reproducible():
    assert make_rng(9).normal(size=5).tolist() == make_rng(9).normal(size=5).tolist()


@settings(max_examples=50)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_relative_error_properties(a):
    assert relative_error(a, a) == 0.0
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
