import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from axvector import numerics as N

from gradcheck import check_grads


def conv_reference(x, weights, bias, dilation):
    """Direct-summation oracle, never vectorized."""
    kernel, _, out_dim = weights.shape
    t_out = x.shape[0] - (kernel - 1) * dilation
    out = np.zeros((t_out, out_dim))
    for t in range(t_out):
        for o in range(out_dim):
            acc = bias[o]
            for k in range(kernel):
                for c in range(x.shape[1]):
                    acc += x[t + k * dilation, c] * weights[k, c, o]
            out[t, o] = acc
    return out


class TestConv1d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(6, 4))
        params = N.ConvParams(np.eye(4)[None], np.zeros(4), 1)
        assert np.array_equal(N.conv1d(x, params), x)

    def test_sum_kernel(self):
        x = np.array([[1.0], [2.0], [3.0]])
        params = N.ConvParams(np.ones((2, 1, 1)), np.zeros(1), 1)
        out = N.conv1d(x, params)
        np.testing.assert_allclose(out.ravel(), [3.0, 5.0], rtol=1e-15)
        np.testing.assert_allclose(out, conv_reference(x, params.weights, params.bias, 1),
                                   rtol=1e-15)

    def test_dilated_sum_kernel(self):
        x = np.arange(1.0, 6.0)[:, None]
        params = N.ConvParams(np.ones((2, 1, 1)), np.zeros(1), 2)
        out = N.conv1d(x, params)
        np.testing.assert_allclose(out.ravel(), [4.0, 6.0, 8.0], rtol=1e-15)
        np.testing.assert_allclose(out, conv_reference(x, params.weights, params.bias, 2),
                                   rtol=1e-15)

    def test_random_against_reference(self, rng):
        x = rng.normal(size=(9, 3))
        params = N.ConvParams(rng.normal(size=(3, 3, 5)), rng.normal(size=5), 2)
        np.testing.assert_allclose(N.conv1d(x, params),
                                   conv_reference(x, params.weights, params.bias, 2),
                                   rtol=1e-12, atol=1e-12)

    def test_kernel_one_equals_affine(self, rng):
        w = rng.normal(size=(1, 4, 6))
        b = rng.normal(size=6)
        x = rng.normal(size=(7, 4))
        out = N.conv1d(x, N.ConvParams(w, b, 1))
        np.testing.assert_allclose(out, x @ w[0] + b, rtol=1e-12)

    def test_too_short_input(self):
        params = N.ConvParams(np.ones((3, 1, 1)), np.zeros(1), 2)
        with pytest.raises(ValueError, match="too short"):
            N.conv1d(np.ones((4, 1)), params)

    def test_channel_mismatch(self):
        params = N.ConvParams(np.ones((1, 2, 1)), np.zeros(1), 1)
        with pytest.raises(ValueError, match="channels"):
            N.conv1d(np.ones((4, 3)), params)

    def test_bad_bias_length(self):
        with pytest.raises(ValueError, match="bias"):
            N.ConvParams(np.ones((1, 2, 3)), np.zeros(2), 1)


class TestConv1dBackward:
    def test_zero_upstream(self, rng):
        x = rng.normal(size=(5, 2))
        params = N.ConvParams(rng.normal(size=(2, 2, 3)), rng.normal(size=3), 1)
        dx, dw, db = N.conv1d_backward(x, params, np.zeros((4, 3)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_identity_kernel_passes_upstream(self, rng):
        x = rng.normal(size=(5, 3))
        params = N.ConvParams(np.eye(3)[None], np.zeros(3), 1)
        upstream = rng.normal(size=(5, 3))
        dx, _, _ = N.conv1d_backward(x, params, upstream)
        assert np.array_equal(dx, upstream)

    def test_finite_differences(self, rng):
        x = rng.normal(size=(4, 3))
        params = N.ConvParams(rng.normal(size=(2, 3, 2)), rng.normal(size=2), 1)
        probe = rng.normal(size=(3, 2))

        def loss():
            return float(np.sum(N.conv1d(x, params) * probe))

        dx, dw, db = N.conv1d_backward(x, params, probe)
        check_grads(loss, [("input", x, dx),
                           ("weights", params.weights, dw),
                           ("bias", params.bias, db)], tol=1e-6)

    def test_upstream_shape_mismatch(self, rng):
        x = rng.normal(size=(5, 2))
        params = N.ConvParams(rng.normal(size=(2, 2, 3)), np.zeros(3), 1)
        with pytest.raises(ValueError, match="upstream"):
            N.conv1d_backward(x, params, np.zeros((5, 3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(N.softmax([0.0, 0.0, 0.0]), np.full(3, 1 / 3), rtol=1e-15)

    def test_closed_form(self):
        out = N.softmax([0.0, np.log(3.0)])
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)

    def test_overflow_safe(self):
        out = N.softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, N.softmax([0.0, -1000.0]), atol=1e-15)
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            N.softmax([])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12),
           st.floats(-100, 100))
    def test_shift_invariance_and_simplex(self, logits, shift):
        v = np.array(logits)
        out = N.softmax(v)
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(out, N.softmax(v + shift), atol=1e-12)

    def test_backward_finite_differences(self, rng):
        v = rng.normal(size=6)
        probe = rng.normal(size=6)

        def loss():
            return float(N.softmax(v) @ probe)

        analytic = N.softmax_backward(N.softmax(v), probe)
        check_grads(loss, [("logits", v, analytic)], tol=1e-6)


class TestWeightedStats:
    def test_constant_values_floor(self):
        values = np.full((4, 3), 2.5)
        mean, std = N.weighted_stats(values, np.full(4, 0.25))
        np.testing.assert_allclose(mean, 2.5, rtol=1e-15)
        np.testing.assert_allclose(std, np.sqrt(N.VARIANCE_FLOOR), rtol=1e-12)

    def test_hand_computation(self):
        mean, std = N.weighted_stats(np.array([[0.0], [2.0]]), np.array([0.5, 0.5]))
        np.testing.assert_allclose(mean, [1.0], rtol=1e-15)
        np.testing.assert_allclose(std, [1.0], rtol=1e-12)

    def test_one_hot_weights(self, rng):
        values = rng.normal(size=(5, 4))
        weights = np.zeros(5)
        weights[2] = 1.0
        mean, std = N.weighted_stats(values, weights)
        np.testing.assert_allclose(mean, values[2], rtol=1e-15)
        np.testing.assert_allclose(std, np.sqrt(N.VARIANCE_FLOOR), rtol=1e-12)

    def test_rejects_bad_weights(self, rng):
        values = rng.normal(size=(3, 2))
        with pytest.raises(ValueError, match="sum to 1"):
            N.weighted_stats(values, np.array([0.5, 0.5, 0.5]))
        with pytest.raises(ValueError, match="nonnegative"):
            N.weighted_stats(values, np.array([1.5, -0.5, 0.0]))

    @given(st.integers(2, 8), st.integers(1, 4))
    def test_variance_never_negative(self, frames, dim):
        rng = np.random.default_rng(frames * 10 + dim)
        values = rng.normal(size=(frames, dim)) * 1e-6
        weights = rng.dirichlet(np.ones(frames))
        _, std = N.weighted_stats(values, weights)
        assert np.all(std >= 0.0)

    def test_values_gradient(self, rng):
        values = rng.normal(size=(5, 3))
        weights = rng.dirichlet(np.ones(5))
        probe_m = rng.normal(size=3)
        probe_s = rng.normal(size=3)

        def loss():
            mean, std = N.weighted_stats(values, weights)
            return float(mean @ probe_m + std @ probe_s)

        d_values, _ = N.weighted_stats_backward(values, weights, probe_m, probe_s)
        check_grads(loss, [("values", values, d_values)], tol=1e-6)

    def test_weights_gradient_via_softmax(self, rng):
        # weight perturbations must stay on the simplex, so the weight
        # gradient is checked through a softmax reparameterization
        values = rng.normal(size=(5, 3))
        logits = rng.normal(size=5)
        probe_m = rng.normal(size=3)
        probe_s = rng.normal(size=3)

        def loss():
            mean, std = N.weighted_stats(values, N.softmax(logits))
            return float(mean @ probe_m + std @ probe_s)

        weights = N.softmax(logits)
        _, d_weights = N.weighted_stats_backward(values, weights, probe_m, probe_s)
        analytic = N.softmax_backward(weights, d_weights)
        check_grads(loss, [("logits", logits, analytic)], tol=1e-6)

    def test_gradient_zero_at_floor(self):
        values = np.full((3, 2), 1.0)
        weights = np.full(3, 1.0 / 3.0)
        d_values, d_weights = N.weighted_stats_backward(values, weights,
                                                        np.zeros(2), np.ones(2))
        assert not d_values.any()
        assert not d_weights.any()


class TestActivations:
    def test_relu_gradient(self, rng):
        x = rng.normal(size=(4, 3)) + 0.05
        probe = rng.normal(size=(4, 3))

        def loss():
            return float(np.sum(N.relu(x) * probe))

        check_grads(loss, [("input", x, N.relu_backward(x, probe))], tol=1e-6)

    def test_tanh_gradient(self, rng):
        x = rng.normal(size=(4, 3))
        probe = rng.normal(size=(4, 3))

        def loss():
            return float(np.sum(np.tanh(x) * probe))

        check_grads(loss, [("input", x, N.tanh_backward(np.tanh(x), probe))], tol=1e-6)

    def test_affine_as_kernel_one_conv_gradient(self, rng):
        # the per-frame affine case of the conv kernel
        x = rng.normal(size=(6, 3))
        params = N.ConvParams(rng.normal(size=(1, 3, 4)), rng.normal(size=4), 1)
        probe = rng.normal(size=(6, 4))

        def loss():
            return float(np.sum(N.conv1d(x, params) * probe))

        dx, dw, db = N.conv1d_backward(x, params, probe)
        check_grads(loss, [("input", x, dx), ("weights", params.weights, dw),
                           ("bias", params.bias, db)], tol=1e-6)
