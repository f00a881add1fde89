import math

import numpy as np
import pytest

from oshot import diffcore as dc
from oshot.diffcore import Graph, OptimizerState, Tensor
from oshot.errors import ContractViolation


def t64(arr, grad=True):
    return Tensor(np.asarray(arr), requires_grad=grad, dtype=np.float64)


class TestConv2d:
    def test_hand_cross_correlation(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        w = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        b = Tensor([0.0])
        out = dc.conv2d(x, w, b)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(5.0)

    def test_zero_kernel_gives_bias(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 5, 5)))
        w = Tensor(np.zeros((3, 2, 3, 3)))
        b = Tensor([0.5, -1.0, 2.0])
        out = dc.conv2d(x, w, b, pad=1)
        for c in range(3):
            assert np.allclose(out.data[c], b.data[c])

    def test_output_shape_formula(self):
        x = Tensor(np.zeros((1, 9, 7)))
        out = dc.conv2d(x, Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(2)), stride=2, pad=1)
        assert out.shape == (2, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = t64(rng.normal(size=(2, 5, 5)))
        w = t64(rng.normal(size=(3, 2, 3, 3)))
        b = t64(rng.normal(size=3))
        err = dc.finite_diff_check(
            lambda x, w, b: dc.tsum(dc.conv2d(x, w, b, pad=1)), [x, w, b]
        )
        assert err < 1e-4

    def test_shape_mismatch_rejected(self):
        x = Tensor(np.zeros((2, 4, 4)))
        w = Tensor(np.zeros((3, 1, 3, 3)))  # expects 1 input channel
        with pytest.raises(ContractViolation, match="channels"):
            dc.conv2d(x, w, Tensor(np.zeros(3)))

    def test_kernel_too_large_rejected(self):
        x = Tensor(np.zeros((1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ContractViolation):
            dc.conv2d(x, w, Tensor(np.zeros(1)))


class TestRelu:
    def test_sign_split(self):
        out = dc.relu(Tensor([-1.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 2.0])

    def test_identity_on_nonnegative(self):
        x = Tensor([0.0, 1.5, 3.0])
        assert np.array_equal(dc.relu(x).data, x.data)

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(2)
        vals = rng.uniform(1e-2, 1.0, size=(4, 4)) * rng.choice([-1, 1], size=(4, 4))
        x = t64(vals)
        err = dc.finite_diff_check(lambda x: dc.tsum(dc.relu(x)), [x])
        assert err < 1e-4


class TestMaxPool:
    def test_max_of_window(self):
        out = dc.max_pool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_constant_input(self):
        out = dc.max_pool2d(Tensor(np.full((2, 4, 4), 7.0)), 2, 2)
        assert np.all(out.data == 7.0)

    def test_unit_window_identity(self):
        x = Tensor(np.arange(16.0).reshape(1, 4, 4))
        assert np.array_equal(dc.max_pool2d(x, 1, 1).data, x.data)

    def test_tie_routes_to_first_row_major(self):
        x = t64(np.zeros((1, 2, 2)))
        with Graph() as g:
            loss = dc.tsum(dc.max_pool2d(x, 2, 2))
        g.backward(loss, params=[x])
        assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


class TestLinear:
    def test_identity_weight(self):
        x = Tensor([1.0, 2.0, 3.0])
        out = dc.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, x.data)

    def test_zero_input_gives_bias(self):
        out = dc.linear(Tensor(np.zeros(4)), Tensor(np.ones((2, 4))), Tensor([5.0, -3.0]))
        assert out.data.tolist() == [5.0, -3.0]

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x, w, b = t64(rng.normal(size=6)), t64(rng.normal(size=(4, 6))), t64(rng.normal(size=4))
        err = dc.finite_diff_check(lambda x, w, b: dc.tsum(dc.linear(x, w, b)), [x, w, b])
        assert err < 1e-4

    def test_batched_rows(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(5, 6)))
        w = Tensor(rng.normal(size=(4, 6)))
        b = Tensor(rng.normal(size=4))
        out = dc.linear(x, w, b)
        assert out.shape == (5, 4)
        row0 = dc.linear(Tensor(x.data[0]), w, b)
        assert np.allclose(out.data[0], row0.data, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            dc.linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = dc.softmax_cross_entropy(Tensor(np.zeros(4)), 1)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_saturated_correct_class(self):
        loss = dc.softmax_cross_entropy(Tensor([100.0, 0.0, 0.0, 0.0]), 0)
        assert loss.item() < 1e-10

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(5)
        logits = t64(rng.normal(size=5))
        with Graph() as g:
            loss = dc.softmax_cross_entropy(logits, 2)
        g.backward(loss, params=[logits])
        p = dc.softmax(logits.data)
        expect = p.copy()
        expect[2] -= 1.0
        assert np.allclose(logits.grad, expect, atol=1e-12)
        err = dc.finite_diff_check(lambda t: dc.softmax_cross_entropy(t, 2), [logits])
        assert err < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ContractViolation):
            dc.softmax_cross_entropy(Tensor(np.zeros(4)), 4)

    def test_softmax_normalized(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            p = dc.softmax(rng.normal(scale=10, size=8))
            assert np.all(p >= 0)
            assert abs(p.sum() - 1.0) < 1e-6


class TestSmoothL1:
    def test_zero_residual(self):
        x = Tensor([1.0, 2.0])
        assert dc.smooth_l1(x, Tensor([1.0, 2.0])).item() == 0.0

    def test_quadratic_region(self):
        loss = dc.smooth_l1(Tensor([0.5]), Tensor([0.0]))
        assert loss.item() == pytest.approx(0.125)

    def test_linear_region(self):
        loss = dc.smooth_l1(Tensor([2.0]), Tensor([0.0]))
        assert loss.item() == pytest.approx(1.5)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            dc.smooth_l1(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(6.0))
        out = dc.dropout(x, 0.0, np.random.default_rng(0), train=True)
        assert np.array_equal(out.data, x.data)

    def test_inference_identity(self):
        x = Tensor(np.arange(6.0))
        out = dc.dropout(x, 0.9, np.random.default_rng(0), train=False)
        assert np.array_equal(out.data, x.data)

    def test_inverted_scaling_expectation(self):
        rng = np.random.default_rng(7)
        out = dc.dropout(Tensor(np.ones(100_000)), 0.5, rng, train=True)
        assert out.data.mean() == pytest.approx(1.0, abs=0.02)

    def test_fixed_seed_bit_identical(self):
        x = Tensor(np.ones(1000))
        a = dc.dropout(x, 0.5, np.random.default_rng(42), train=True)
        b = dc.dropout(x, 0.5, np.random.default_rng(42), train=True)
        assert np.array_equal(a.data, b.data)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.arange(6.0).reshape(2, 3))
        with Graph() as g:
            loss = dc.tsum(x)
        g.backward(loss, params=[x])
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_unreachable_gets_zeros(self):
        x = t64(np.ones(3))
        y = t64(np.ones(3))
        with Graph() as g:
            loss = dc.tsum(y)
        g.backward(loss, params=[x, y])
        assert np.array_equal(x.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        x = t64(np.ones(3))
        with Graph() as g:
            out = dc.relu(x)
        with pytest.raises(ContractViolation):
            g.backward(out, params=[x])

    def test_fanout_sums_path_gradients(self):
        # x feeds two consumers; d/dx [sum(2x) + sum(3x)] = 5.
        x = t64(np.ones(4))
        with Graph() as g:
            loss = dc.add(dc.tsum(dc.scale(x, 2.0)), dc.tsum(dc.scale(x, 3.0)))
        g.backward(loss, params=[x])
        assert np.allclose(x.grad, 5.0)

    def test_composite_chain_finite_difference(self):
        rng = np.random.default_rng(8)
        x = t64(rng.normal(size=(2, 5, 5)))
        w = t64(rng.normal(size=(3, 2, 3, 3)))
        b = t64(rng.normal(size=3))
        fw = t64(rng.normal(size=(2, 27)))
        fb = t64(rng.normal(size=2))

        def f(x, w, b, fw, fb):
            y = dc.relu(dc.conv2d(x, w, b))
            y = dc.reshape(y, (27,))
            return dc.tsum(dc.relu(dc.linear(y, fw, fb)))

        assert dc.finite_diff_check(f, [x, w, b, fw, fb]) < 1e-4


class TestSgdMomentum:
    def test_zero_momentum_is_vanilla(self):
        p = Tensor([1.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.0)
        dc.sgd_momentum_step({"p": p}, {"p": np.array([2.0], dtype=np.float32)}, state)
        assert p.data[0] == pytest.approx(1.0 - 0.1 * 2.0)

    def test_zero_gradient_stationary(self):
        p = Tensor([3.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.9)
        dc.sgd_momentum_step({"p": p}, {"p": np.zeros(1, dtype=np.float32)}, state)
        assert p.data[0] == 3.0

    def test_two_step_velocity_recursion(self):
        p = Tensor([0.0], requires_grad=True, dtype=np.float64)
        state = OptimizerState(lr=1.0, momentum=0.9)
        g = {"p": np.ones(1)}
        dc.sgd_momentum_step({"p": p}, g, state)
        assert p.data[0] == pytest.approx(-1.0)
        dc.sgd_momentum_step({"p": p}, g, state)
        assert p.data[0] == pytest.approx(-2.9)

    def test_missing_gradient_rejected(self):
        p = Tensor([0.0], requires_grad=True)
        with pytest.raises(ContractViolation):
            dc.sgd_momentum_step({"p": p}, None, OptimizerState(0.1, 0.9))

    def test_grads_zeroed_after_step(self):
        p = Tensor([0.0], requires_grad=True)
        p.grad = np.ones(1, dtype=np.float32)
        dc.sgd_momentum_step({"p": p}, None, OptimizerState(0.1, 0.9))
        assert p.grad is None


class TestFiniteDiffCheck:
    def test_square_at_three(self):
        # f(x) = x^2 at x=3: analytic derivative 6, central difference exact.
        x = t64([3.0])
        err = dc.finite_diff_check(lambda x: dc.tsum(dc.mul(x, x)), [x])
        assert err < 1e-8

    def test_constant_function(self):
        x = t64([1.0, 2.0])
        c = Tensor(np.asarray(5.0), dtype=np.float64)
        err = dc.finite_diff_check(lambda x: dc.scale(c, 1.0), [x])
        assert err == 0.0

    def test_bad_eps_rejected(self):
        with pytest.raises(ContractViolation):
            dc.finite_diff_check(lambda x: dc.tsum(x), [t64([1.0])], eps=0.0)


class TestGraphIsolation:
    def test_no_recording_without_graph(self):
        x = t64(np.ones(3))
        out = dc.relu(x)
        assert out.requires_grad is False

    def test_pause_recording(self):
        x = t64(np.ones(3))
        with Graph() as g:
            with dc.pause_recording():
                hidden = dc.relu(x)
            assert hidden.requires_grad is False
            loss = dc.tsum(dc.relu(x))
        assert len(g.nodes) == 2  # relu + tsum
        g.backward(loss, params=[x])
        assert np.allclose(x.grad, 1.0)
