"""Autodiff core: op semantics, gradients vs finite differences, SGD, checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ralab import autodiff as ad
from ralab import errors


def t64(values, requires_grad=False):
    return ad.Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


class TestForwardOps:
    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        out = ad.matmul(t64(np.eye(3)), t64(a))
        np.testing.assert_allclose(out.values, a)

    def test_relu(self):
        out = ad.relu(t64([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out.values, [[0.0, 0.0, 2.0]])

    def test_softmax_symmetry(self):
        out = ad.softmax(t64([[0.0, 0.0]]))
        np.testing.assert_allclose(out.values, [[0.5, 0.5]])

    def test_shape_mismatch(self):
        with pytest.raises(errors.ShapeMismatch):
            ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))
        with pytest.raises(errors.ShapeMismatch):
            ad.add(t64(np.ones((2, 3))), t64(np.ones((3, 2))))

    def test_nonfinite_is_an_error(self):
        with pytest.raises(errors.NonFinite):
            ad.log(t64([[0.0, 1.0]]))  # log 0 -> -inf

    def test_dispatch_by_kind(self):
        out = ad.forward_op("relu", t64([[-2.0, 2.0]]))
        np.testing.assert_array_equal(out.values, [[0.0, 2.0]])
        with pytest.raises(errors.InvalidParams):
            ad.forward_op("transpose", t64([[1.0]]))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_rows_are_probability_vectors(self, seed):
        logits = np.random.default_rng(seed).normal(0, 10, size=(4, 6))
        p = ad.softmax(t64(logits)).values
        assert np.all(p >= 0) and np.all(p <= 1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


class TestCrossEntropy:
    def test_uniform_two_class(self):
        loss = ad.cross_entropy(t64([[0.0, 0.0]]), [0])
        assert abs(loss.item() - math.log(2)) < 1e-12

    def test_log_sum_exp_stability(self):
        loss = ad.cross_entropy(t64([[1000.0, 0.0]]), [0])
        assert abs(loss.item()) < 1e-9

    def test_matches_direct_scalar_evaluation(self):
        # independent oracle: -log(softmax_3) computed with plain math
        z = [1.0, 2.0, 3.0]
        expected = -math.log(math.exp(z[2]) / sum(math.exp(v) for v in z))
        loss = ad.cross_entropy(t64([z]), [2])
        assert abs(loss.item() - expected) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(errors.LabelOutOfRange):
            ad.cross_entropy(t64([[0.0, 0.0]]), [2])

    def test_single_class_rejected(self):
        with pytest.raises(errors.ShapeMismatch):
            ad.cross_entropy(t64([[0.0]]), [0])


class TestBackward:
    def test_square_gradient(self):
        x = t64([3.0], requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_unrelated_leaf_gets_no_gradient(self):
        c = t64([1.0, 2.0], requires_grad=True)
        w = t64([5.0], requires_grad=True)
        ad.backward(ad.tsum(c))
        np.testing.assert_allclose(c.grad, [1.0, 1.0])
        assert w.grad is None  # i.e. zero contribution

    def test_fanout_sums_child_gradients(self):
        # hand-built 3-node graph: y1 = 2x, y2 = 3x, loss = sum(y1 + y2)
        x = t64([1.0, 1.0], requires_grad=True)
        y1 = ad.mul(x, t64([2.0, 2.0]))
        y2 = ad.mul(x, t64([3.0, 3.0]))
        ad.backward(ad.tsum(ad.add(y1, y2)))
        np.testing.assert_allclose(x.grad, [5.0, 5.0])

    def test_double_backward_raises(self):
        x = t64([2.0], requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))
        ad.backward(loss)
        with pytest.raises(errors.DoubleBackward):
            ad.backward(loss)

    def test_no_graph_raises(self):
        with pytest.raises(errors.NoGraph):
            ad.backward(t64([1.0]))

    def test_gradients_accumulate_across_fanout_of_parameters(self):
        w = t64([[1.0, 2.0]], requires_grad=True)
        a = ad.tsum(ad.mul(w, w))
        b = ad.tsum(w)
        ad.backward(ad.tsum(ad.add(ad.mul(a, t64(1.0)), ad.mul(b, t64(1.0)))))
        np.testing.assert_allclose(w.grad, [[3.0, 5.0]])


def _random_net(rng, in_dim, widths, classes):
    params = []
    dims = [in_dim, *widths, classes]
    for i in range(len(dims) - 1):
        params.append(t64(rng.normal(0, 0.6, (dims[i], dims[i + 1])), requires_grad=True))
        params.append(t64(rng.normal(0, 0.1, dims[i + 1]), requires_grad=True))
    return params


def _net_loss(params, x, y):
    h = x
    for i in range(0, len(params) - 2, 2):
        h = ad.relu(ad.add(ad.matmul(h, params[i]), params[i + 1]))
    return ad.cross_entropy(ad.add(ad.matmul(h, params[-2]), params[-1]), y)


class TestFiniteDifferences:
    def test_two_layer_net_against_central_differences(self):
        rng = np.random.default_rng(7)
        params = _random_net(rng, 5, [8], 3)
        x = np.random.default_rng(8).normal(size=(4, 5))
        y = np.array([0, 1, 2, 1])

        def f(w0):
            return _net_loss([w0, *params[1:]], t64(x), y)

        assert ad.finite_diff_check(f, params[0], 1e-6) <= 1e-4

    def test_sum_has_exact_gradient(self):
        err = ad.finite_diff_check(lambda x: ad.tsum(x), t64(np.arange(4.0)), 1e-5)
        assert err < 1e-9

    def test_zero_step_rejected(self):
        with pytest.raises(errors.StepSizeZero):
            ad.finite_diff_check(lambda x: ad.tsum(x), t64([1.0]), 0.0)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = t64(np.random.default_rng(0).normal(size=(8, 8)))
        out = ad.dropout(x, 0.5, rng=None, active=False)
        np.testing.assert_array_equal(out.values, x.values)

    def test_inverted_scaling_preserves_expectation(self):
        rng = np.random.default_rng(11)
        x = t64(np.ones((200, 200)))
        out = ad.dropout(x, 0.3, rng=rng, active=True)
        assert abs(out.values.mean() - 1.0) < 0.02

    def test_active_dropout_needs_rng(self):
        with pytest.raises(errors.InvalidParams):
            ad.dropout(t64([[1.0]]), 0.5, rng=None, active=True)

    def test_bad_rate_rejected(self):
        with pytest.raises(errors.InvalidParams):
            ad.dropout(t64([[1.0]]), 1.0, rng=np.random.default_rng(0), active=True)


class TestSGD:
    def test_zero_lr_keeps_parameters(self):
        p = t64([1.0, -2.0], requires_grad=True)
        p.grad = np.array([5.0, 5.0])
        ad.sgd_step([p], 0.0)
        np.testing.assert_array_equal(p.values, [1.0, -2.0])

    def test_plain_step_is_exact(self):
        p = t64([1.0], requires_grad=True)
        p.grad = np.array([4.0])
        ad.sgd_step([p], 0.25, momentum=0.0)
        np.testing.assert_allclose(p.values, [0.0])

    def test_converges_on_convex_quadratic(self):
        # closed-form minimum at 0; 200 steps must reach loss <= 1e-6
        p = t64(np.random.default_rng(0).normal(0, 1, 16), requires_grad=True)
        for _ in range(200):
            ad.zero_grads([p])
            loss = ad.tsum(ad.mul(p, p))
            ad.backward(loss)
            ad.sgd_step([p], 0.1, momentum=0.5)
        final = float((p.values ** 2).sum())
        assert final <= 1e-6

    def test_missing_grad_raises(self):
        p = t64([1.0], requires_grad=True)
        with pytest.raises(errors.MissingGrad):
            ad.sgd_step([p], 0.1)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        named = {
            "w32": ad.Tensor(rng.normal(size=(7, 5)).astype(np.float32)),
            "w64": ad.Tensor(rng.normal(size=(3,)).astype(np.float64)),
        }
        ad.save_checkpoint(tmp_path / "ckpt", named)
        loaded = ad.load_checkpoint(tmp_path / "ckpt")
        for name, t in named.items():
            assert loaded[name].dtype == t.values.dtype
            np.testing.assert_array_equal(loaded[name], t.values)
