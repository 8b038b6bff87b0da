"""Autodiff core: forward values, gradient checks, tape contracts."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stylemux import tensor as T
from stylemux.gradcheck import max_relative_error, numerical_grad

from _cases import OP_CASES, transformer_case


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestGradients:
    @pytest.mark.parametrize("name", sorted(OP_CASES))
    def test_float64(self, name, rng):
        with T.precision(np.float64):
            fn, inputs = OP_CASES[name](rng)
            assert max_relative_error(fn, inputs, h=1e-5) < 1e-5

    @pytest.mark.parametrize("name", sorted(OP_CASES))
    def test_float32(self, name, rng):
        with T.precision(np.float32):
            fn, inputs = OP_CASES[name](rng)
            assert max_relative_error(fn, inputs, h=1e-3) < 1e-2

    def test_transformer_float64(self, rng):
        with T.precision(np.float64):
            fn, inputs = transformer_case(rng)
            assert max_relative_error(fn, inputs, h=1e-5) < 1e-5

    def test_numerical_grad_of_square(self):
        with T.precision(np.float64):
            x = T.parameter(np.array([1.0, -2.0, 3.0]))
            g = numerical_grad(lambda: T.tsum(T.mul(x, x)), x, 1e-4)
        np.testing.assert_allclose(g, [2.0, -4.0, 6.0], atol=1e-8)


class TestForward:
    def test_matmul_hand_example(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[5.0], [6.0]])).data
        np.testing.assert_array_equal(out, [[17.0], [39.0]])

    def test_matmul_identity_and_scalar(self, rng):
        x = rng.standard_normal((2, 3)).astype(np.float32)
        np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(2)), T.Tensor(x)).data, x)
        assert T.matmul(T.Tensor([[2.0]]), T.Tensor([[3.0]])).data[0, 0] == 6.0

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-7)

    def test_softmax_no_overflow(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([[1000.0, 0.0]])).data, [[1.0, 0.0]], atol=1e-6)

    def test_layer_norm_two_values_no_eps(self):
        with T.precision(np.float64):
            out = T.layer_norm(T.Tensor([[1.0, 3.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_layer_norm_constant_row_and_zero_gain(self):
        ones, zeros = T.Tensor(np.ones(4)), T.Tensor(np.zeros(4))
        np.testing.assert_allclose(T.layer_norm(T.Tensor(np.full((1, 4), 7.0)), ones, zeros).data, 0.0)
        bias = T.Tensor([1.0, 2.0, 3.0, 4.0])
        out = T.layer_norm(T.Tensor([[1.0, 5.0, 2.0, 0.0]]), zeros, bias).data
        np.testing.assert_allclose(out, [[1.0, 2.0, 3.0, 4.0]])

    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_dropout_zero_is_identity(self, rng):
        x = T.Tensor(rng.standard_normal(5))
        np.testing.assert_array_equal(T.dropout(x, 0.0, True, rng).data, x.data)

    def test_softmax_known_values(self):
        out = T.softmax(T.Tensor(np.array([[1.0, 2.0, 3.0]]))).data
        np.testing.assert_allclose(out[0], [0.09003057, 0.24472847, 0.66524096], atol=1e-6)

    def test_softmax_is_shift_invariant_and_stable(self):
        out = T.softmax(T.Tensor(np.array([[1000.0, 1001.0, 1002.0]]))).data
        np.testing.assert_allclose(out[0], [0.09003057, 0.24472847, 0.66524096], atol=1e-6)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        with T.precision(np.float64):
            x = T.Tensor(rng.standard_normal((4, 7)))
            np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-12)

    def test_layer_norm_example(self):
        with T.precision(np.float64):
            x = T.Tensor(np.array([[1.0, 2.0, 3.0]]))
            out = T.layer_norm(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))).data
        sd = math.sqrt(2.0 / 3.0 + 1e-5)
        np.testing.assert_allclose(out[0], [-1 / sd, 0.0, 1 / sd], atol=1e-12)

    def test_cross_entropy_uniform_is_log_v(self):
        loss = T.cross_entropy(T.Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_cross_entropy_ignores_rows(self):
        with T.precision(np.float64):
            logits = T.Tensor(np.array([[0.0, 0.0], [5.0, 0.0]]))
            full = T.cross_entropy(logits[0:1], [1]).item()
            masked = T.cross_entropy(logits, [1, 0], ignore_index=0).item()
        assert masked == pytest.approx(full)
        assert masked == pytest.approx(math.log(2))

    def test_cross_entropy_rejects_out_of_range_target(self):
        with pytest.raises(IndexError):
            T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding_lookup(T.Tensor(np.zeros((4, 2))), [1, 4])

    def test_matmul_shape_errors(self):
        with pytest.raises(T.ShapeError):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))
        with pytest.raises(T.ShapeError):
            T.matmul(T.Tensor(np.zeros((2, 2, 3))), T.Tensor(np.zeros((3, 3, 2))))

    def test_add_rejects_general_broadcast(self):
        with pytest.raises(T.ShapeError):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 1))))

    def test_dropout_eval_is_identity(self, rng):
        x = T.Tensor(rng.standard_normal((3, 3)))
        assert T.dropout(x, 0.5, train=False) is x

    def test_dropout_preserves_expectation(self):
        x = T.Tensor(np.ones((200, 200)))
        out = T.dropout(x, 0.3, True, np.random.default_rng(0)).data
        assert out.mean() == pytest.approx(1.0, abs=0.02)
        np.testing.assert_allclose(np.unique(out), [0.0, 1 / 0.7], rtol=1e-6)

    def test_dropout_contract(self):
        x = T.Tensor(np.ones(3))
        with pytest.raises(T.ContractError):
            T.dropout(x, 1.0, True, np.random.default_rng(0))
        with pytest.raises(T.ContractError):
            T.dropout(x, 0.2, True, None)


class TestTape:
    def test_grad_of_sum_is_ones(self):
        x = T.parameter(np.arange(6.0).reshape(2, 3))
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_grad_of_sum_of_squares(self):
        x = T.parameter([1.0, 2.0])
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_composite_graph_matches_finite_differences(self, rng):
        with T.precision(np.float64):
            x, w = T.parameter(rng.standard_normal((4, 3))), T.parameter(rng.standard_normal((3, 5)))
            targets = np.array([0, 4, 2, 1])

            def loss():
                probs = T.softmax(T.matmul(x, w))
                return T.cross_entropy(probs, targets)

            assert max_relative_error(loss, [x, w], h=1e-5) < 1e-3

    def test_topological_order_parents_first(self):
        a = T.parameter(np.ones(2))
        b = T.mul(a, a)
        c = T.add(b, a)
        loss = T.tsum(c)
        tape = T.backward(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_gradients_accumulate_across_calls(self):
        with T.precision(np.float64):
            a = T.parameter(np.array([1.0, 2.0]))
            T.backward(T.tsum(T.mul(a, a)))
            T.backward(T.tsum(T.mul(a, a)))
        np.testing.assert_allclose(a.grad, [4.0, 8.0])

    def test_shared_subexpression(self):
        with T.precision(np.float64):
            a = T.parameter(np.array([3.0]))
            b = T.mul(a, a)
            T.backward(T.tsum(T.add(b, b)))
        np.testing.assert_allclose(a.grad, [12.0])

    def test_nonscalar_loss_rejected(self):
        a = T.parameter(np.ones(3))
        with pytest.raises(T.ContractError):
            T.backward(T.mul(a, a))

    def test_loss_without_grad_rejected(self):
        with pytest.raises(T.ContractError):
            T.backward(T.tsum(T.Tensor(np.ones(3))))

    def test_no_grad_builds_no_graph(self):
        a = T.parameter(np.ones(3))
        with T.no_grad():
            out = T.tsum(T.mul(a, a))
        assert not out.requires_grad
        assert out._parents == ()

    def test_precision_context(self):
        with T.precision(np.float64):
            assert T.Tensor([1.0]).data.dtype == np.float64
        assert T.Tensor([1.0]).data.dtype == np.float32

    def test_deep_chain_does_not_recurse(self):
        a = T.parameter(np.ones(2))
        x = a
        for _ in range(5000):
            x = T.scale(x, 1.0)
        T.backward(T.tsum(x))
        np.testing.assert_allclose(a.grad, [1.0, 1.0])


finite = st.floats(min_value=-30, max_value=30, allow_nan=False, width=64)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
    def test_softmax_rows_sum_to_one(self, x):
        with T.precision(np.float64):
            out = T.softmax(T.Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert (out >= 0).all()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
    def test_cross_entropy_nonnegative(self, x):
        with T.precision(np.float64):
            loss = T.cross_entropy(T.Tensor(x), np.zeros(x.shape[0], dtype=int)).item()
        assert loss >= -1e-12

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6)),
                  elements=st.floats(-5, 5, allow_nan=False, width=64)))
    def test_layer_norm_zero_mean(self, x):
        with T.precision(np.float64):
            n = x.shape[1]
            out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(n)), T.Tensor(np.zeros(n))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
