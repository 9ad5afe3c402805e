"""Tensor core: forward semantics, tape behavior, and gradient integrity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acprank import tensor as T
from acprank.errors import DegenerateBatchError, TapeError

from helpers import assert_grads_close, check_param_grads, numerical_grad


def t64(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64))


class TestMatmul:
    def test_identity(self):
        out = T.matmul(t64(np.eye(2)), t64([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_orthogonal_pick(self):
        out = T.matmul(t64([[1.0, 0.0]]), t64([[0.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = T.Parameter(rng.normal(size=(4, 3)), name="a")
        b = T.Parameter(rng.normal(size=(3, 2)), name="b")
        w = rng.normal(size=(4, 2))

        def loss():
            return T.sum_all(T.mul(T.matmul(a, b), w))

        check_param_grads(loss, [a, b], rtol=1e-4)

    def test_batched_grad(self):
        rng = np.random.default_rng(1)
        a = T.Parameter(rng.normal(size=(2, 3, 4, 3)), name="a")
        b = T.Parameter(rng.normal(size=(3, 5)), name="b")
        c = T.Parameter(rng.normal(size=(2, 3, 5, 2)), name="c")
        w = rng.normal(size=(2, 3, 4, 2))

        def loss():
            return T.sum_all(T.mul(T.matmul(T.matmul(a, b), c), w))

        check_param_grads(loss, [a, b, c], rtol=1e-4)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_last(t64([0.0, 0.0]), scale=1.0)
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_stability_no_overflow(self):
        out = T.softmax_last(t64([1000.0, 0.0]), scale=1.0)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)

    def test_high_precision_values(self):
        # Frozen from a float64 evaluation of exp(x)/sum(exp(x)).
        expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
        out = T.softmax_last(t64([1.0, 2.0, 3.0]), scale=1.0)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            T.softmax_last(t64([1.0, 2.0]), scale=0.0)
        with pytest.raises(ValueError):
            T.softmax_last(t64([1.0, 2.0]), scale=-3.0)

    @given(st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=2, max_size=8),
           st.floats(min_value=0.1, max_value=50.0))
    @settings(max_examples=80, deadline=None)
    def test_rows_sum_to_one(self, row, scale):
        out = T.softmax_last(t64(row), scale=scale)
        assert abs(out.data.sum() - 1.0) < 1e-6
        assert np.all(out.data >= 0)

    def test_grad_including_learnable_scale(self):
        rng = np.random.default_rng(2)
        x = T.Parameter(rng.normal(size=(3, 5)), name="x")
        mu = T.Parameter(np.array([1.7]), name="mu")
        w = rng.normal(size=(3, 5))

        def loss():
            return T.sum_all(T.mul(T.softmax_last(x, scale=mu), w))

        check_param_grads(loss, [x, mu], rtol=1e-4)


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        gain = T.Parameter(np.ones(4), name="g")
        bias = T.Parameter(np.zeros(4), name="b")
        out = T.layer_norm(t64([5.0, 5.0, 5.0, 5.0]), gain, bias)
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-6)

    def test_already_normalized(self):
        gain = T.Parameter(np.ones(2), name="g")
        bias = T.Parameter(np.zeros(2), name="b")
        out = T.layer_norm(t64([1.0, -1.0]), gain, bias)
        np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-4)

    def test_row_stats(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 16)) * 3 + 2
        out = T.layer_norm(t64(x), T.Parameter(np.ones(16)), T.Parameter(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=-1), 1, atol=1e-3)

    def test_grad(self):
        rng = np.random.default_rng(4)
        x = T.Parameter(rng.normal(size=(3, 6)), name="x")
        gain = T.Parameter(rng.normal(size=6), name="gain")
        bias = T.Parameter(rng.normal(size=6), name="bias")
        w = rng.normal(size=(3, 6))

        def loss():
            return T.sum_all(T.mul(T.layer_norm(x, gain, bias), w))

        check_param_grads(loss, [x, gain, bias], rtol=1e-4)


class TestBatchNorm:
    def test_eval_identity_with_unit_state(self):
        state = T.BatchNormState(3, dtype=np.float64)
        x = np.array([[1.0, -2.0, 0.5], [0.1, 0.2, 0.3]])
        out = T.batch_norm(t64(x), T.Parameter(np.ones(3)), T.Parameter(np.zeros(3)),
                           state, mode="eval", eps=0.0)
        np.testing.assert_allclose(out.data, x, rtol=1e-12)

    def test_train_column_stats(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(32, 5)) * 4 - 1
        state = T.BatchNormState(5, dtype=np.float64)
        out = T.batch_norm(t64(x), T.Parameter(np.ones(5)), T.Parameter(np.zeros(5)),
                           state, mode="train")
        np.testing.assert_allclose(out.data.mean(axis=0), 0, atol=1e-4)
        np.testing.assert_allclose(out.data.var(axis=0), 1, atol=1e-3)

    def test_running_stats_momentum(self):
        state = T.BatchNormState(2, dtype=np.float64)
        x = np.array([[2.0, 0.0], [4.0, 0.0]])
        T.batch_norm(t64(x), T.Parameter(np.ones(2)), T.Parameter(np.zeros(2)),
                     state, mode="train")
        np.testing.assert_allclose(state.running_mean, [0.3, 0.0], atol=1e-12)
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 1.0, 0.9], atol=1e-12)

    def test_degenerate_batch(self):
        state = T.BatchNormState(3, dtype=np.float64)
        with pytest.raises(DegenerateBatchError):
            T.batch_norm(t64(np.ones((1, 3))), T.Parameter(np.ones(3)),
                         T.Parameter(np.zeros(3)), state, mode="train")

    def test_grad_train_mode(self):
        rng = np.random.default_rng(6)
        x = T.Parameter(rng.normal(size=(5, 4)), name="x")
        gain = T.Parameter(rng.normal(size=4), name="gain")
        bias = T.Parameter(rng.normal(size=4), name="bias")
        w = rng.normal(size=(5, 4))
        state = T.BatchNormState(4, dtype=np.float64)

        def loss():
            return T.sum_all(T.mul(
                T.batch_norm(x, gain, bias, state, mode="train"), w))

        check_param_grads(loss, [x, gain, bias], rtol=1e-4)


class TestL2Normalize:
    def test_three_four_five(self):
        out = T.l2_normalize(t64([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8], rtol=1e-12)

    def test_degenerate_row_flagged(self, caplog):
        import logging
        with caplog.at_level(logging.WARNING, logger="acprank.tensor"):
            out = T.l2_normalize(t64([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])
        assert any("zero-norm" in r.message for r in caplog.records)

    def test_norms_are_zero_or_one(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(20, 6)) * rng.uniform(0.1, 100, size=(20, 1))
        x[4] = 0.0
        out = T.l2_normalize(t64(x)).data
        norms = np.linalg.norm(out, axis=-1)
        assert norms[4] == 0.0
        keep = np.delete(norms, 4)
        np.testing.assert_allclose(keep, 1.0, atol=1e-6)

    def test_grad(self):
        rng = np.random.default_rng(8)
        x = T.Parameter(rng.normal(size=(2, 5)), name="x")
        w = rng.normal(size=(2, 5))

        def loss():
            return T.sum_all(T.mul(T.l2_normalize(x), w))

        check_param_grads(loss, [x], rtol=1e-4)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(t64([0.0])).data[0] == 0.5

    def test_sigmoid_stable(self):
        out = T.sigmoid(t64([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert 0.0 <= out[0] < 1e-6 and 1.0 - 1e-6 < out[1] <= 1.0

    def test_relu(self):
        out = T.relu(t64([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_dropout_p0_identity(self):
        x = t64([[1.0, 2.0], [3.0, 4.0]])
        assert T.dropout(x, 0.0, "train", rng=0) is x
        assert T.dropout(x, 0.5, "eval", rng=0) is x

    def test_dropout_rejects_bad_rate(self):
        x = t64([1.0])
        for p in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                T.dropout(x, p, "train", rng=0)

    def test_dropout_survivor_fraction(self):
        x = T.Tensor(np.ones(100_000, dtype=np.float64))
        out = T.dropout(x, 0.5, "train", rng=42).data
        frac = np.count_nonzero(out) / out.size
        assert abs(frac - 0.5) < 0.01
        np.testing.assert_allclose(out[out != 0], 2.0, rtol=1e-12)

    def test_dropout_reproducible(self):
        x = T.Tensor(np.ones((50, 50), dtype=np.float64))
        a = T.dropout(x, 0.3, "train", rng=7).data
        b = T.dropout(x, 0.3, "train", rng=7).data
        np.testing.assert_array_equal(a, b)

    def test_elementwise_grads(self):
        rng = np.random.default_rng(9)
        x = T.Parameter(rng.uniform(0.2, 2.0, size=(3, 4)), name="x")
        w = rng.normal(size=(3, 4))

        for fn in (T.relu, T.sigmoid, T.log, lambda v: T.pow_const(v, 2.5),
                   T.neg, lambda v: T.clamp(v, 0.0, 10.0)):
            def loss():
                return T.sum_all(T.mul(fn(x), w))

            check_param_grads(loss, [x], rtol=1e-4)

    def test_concat_and_slice_grads(self):
        rng = np.random.default_rng(10)
        a = T.Parameter(rng.normal(size=(4, 2)), name="a")
        b = T.Parameter(rng.normal(size=(4, 3)), name="b")
        w = rng.normal(size=(2, 5))

        def loss():
            cat = T.concat_last([a, b])
            return T.sum_all(T.mul(T.take_rows(cat, 1, 3), w))

        check_param_grads(loss, [a, b], rtol=1e-4)


class TestEveryOpGradient:
    """Finite-difference sweep across the remaining differentiable ops."""

    def test_remaining_ops(self):
        rng = np.random.default_rng(11)
        x = T.Parameter(rng.uniform(0.3, 1.5, size=(3, 4)), name="x")
        bias = T.Parameter(rng.normal(size=4), name="bias")
        scale = T.Parameter(rng.uniform(0.5, 1.5, size=(3, 4)), name="scale")
        w = rng.normal(size=(3, 4))
        eval_state = T.BatchNormState(4, dtype=np.float64)
        eval_state.running_mean = rng.normal(size=4)
        eval_state.running_var = rng.uniform(0.5, 2.0, size=4)

        cases = {
            "add_bias": lambda: T.add(T.mul(x, 1.0), bias),
            "mul_vector": lambda: T.mul(x, bias),
            "mul_elementwise": lambda: T.mul(x, scale),
            "softmax_float_scale": lambda: T.softmax_last(x, scale=2.5),
            "dropout_fixed_seed": lambda: T.dropout(T.mul(x, 1.0), 0.4, "train", rng=5),
            "bn_eval": lambda: T.batch_norm(
                x, bias, bias, eval_state, mode="eval"),
            "reshape_swap": lambda: T.swapaxes(T.reshape(x, (2, 2, 3)), -1, -2),
            "concat_rows": lambda: T.concat_rows([x, T.mul(x, scale)]),
        }
        for name, fn in cases.items():
            def loss():
                out = fn()
                flat = T.reshape(out, (out.size,))
                return T.sum_all(T.mul(flat, np.resize(w, out.size)))

            check_param_grads(loss, [x, bias, scale], rtol=1e-4)

    def test_mean_all_grad(self):
        rng = np.random.default_rng(12)
        x = T.Parameter(rng.normal(size=(4, 3)), name="x")

        def loss():
            return T.mean_all(T.mul(T.mul(x, x), 1.0))

        check_param_grads(loss, [x], rtol=1e-4)


class TestTape:
    def test_linear_grad_equals_input(self):
        x = np.array([1.0, -2.0, 3.5])
        w = T.Parameter(np.zeros(3), name="w")
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(w, x))
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, x, rtol=1e-12)

    def test_unreachable_parameter_gets_zero_grad(self):
        w = T.Parameter(np.ones(3), name="w")
        with T.Tape() as tape:
            loss = T.sum_all(t64([1.0, 2.0]))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, np.zeros(3))

    def test_backward_twice_is_an_error(self):
        w = T.Parameter(np.ones(2), name="w")
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(w, 2.0))
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        w = T.Parameter(np.ones(2), name="w")
        with T.Tape() as tape:
            out = T.mul(w, 2.0)
        with pytest.raises(TapeError):
            tape.backward(out)

    def test_grad_accumulates_across_tapes(self):
        w = T.Parameter(np.ones(2), name="w")
        for _ in range(2):
            with T.Tape() as tape:
                loss = T.sum_all(T.mul(w, 3.0))
            tape.backward(loss)
        np.testing.assert_allclose(w.grad, [6.0, 6.0], rtol=1e-12)
        w.zero_grad()
        np.testing.assert_array_equal(w.grad, [0.0, 0.0])

    def test_shared_input_fanout_accumulates(self):
        x = T.Parameter(np.array([2.0, 3.0]), name="x")

        def loss():
            # x used twice: sum(x*x) + sum(2x); d/dx = 2x + 2
            return T.add(T.sum_all(T.mul(x, x)), T.sum_all(T.mul(x, 2.0)))

        x.zero_grad()
        with T.Tape() as tape:
            val = loss()
        tape.backward(val)
        np.testing.assert_allclose(x.grad, [6.0, 8.0], rtol=1e-12)
        numeric = numerical_grad(lambda: float(loss().data), x.value)
        assert_grads_close(x.grad, numeric, rtol=1e-6)

    def test_ops_outside_tape_do_not_record(self):
        w = T.Parameter(np.ones(2), name="w")
        out = T.mul(w, 2.0)
        assert out.node is None
