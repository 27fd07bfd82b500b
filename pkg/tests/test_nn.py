import numpy as np
import pytest

from personakit.errors import DivergenceError, ShapeError, StateError
from personakit.nn import AdamState, DenseLayer, DenseNet, flatten_params, set_params


def _fd_gradients(f, params, h=1e-4):
    flat = flatten_params(params)
    grads = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        set_params(params, up)
        f_up = f()
        set_params(params, down)
        f_down = f()
        grads[i] = (f_up - f_down) / (2 * h)
    set_params(params, flat)
    return grads


class TestForward:
    def test_identity_layer_passes_through(self):
        net = DenseNet([DenseLayer(np.eye(3), np.zeros(3), "identity")])
        x = np.array([[1.0, -2.0, 0.5]])
        out, _ = net.forward(x)
        assert np.array_equal(out, x)

    def test_relu_zeroes_negative_preactivations(self):
        net = DenseNet([DenseLayer(np.eye(2), np.array([-5.0, -5.0]), "relu")])
        out, _ = net.forward(np.array([[1.0, 2.0]]))
        assert np.all(out == 0.0)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(0)
        net = DenseNet.build([4, 3, 2], rng, dtype=np.float64)
        x = rng.normal(size=(5, 4))
        out, _ = net.forward(x)
        w0, b0 = net.layers[0].weight, net.layers[0].bias
        w1, b1 = net.layers[1].weight, net.layers[1].bias
        hidden = np.maximum(x @ w0.T + b0, 0)
        expected = hidden @ w1.T + b1
        assert np.max(np.abs(out - expected)) < 1e-6

    def test_width_mismatch_rejected(self):
        rng = np.random.default_rng(1)
        net = DenseNet.build([4, 2], rng)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 3)))

    def test_dropout_train_mode_is_seeded(self):
        rng_build = np.random.default_rng(2)
        net = DenseNet.build([6, 8, 2], rng_build, dropout=0.5, dtype=np.float64)
        x = np.random.default_rng(3).normal(size=(4, 6))
        out_a, _ = net.forward(x, train=True, rng=np.random.default_rng(9))
        out_b, _ = net.forward(x, train=True, rng=np.random.default_rng(9))
        assert np.array_equal(out_a, out_b)
        eval_a, _ = net.forward(x)
        eval_b, _ = net.forward(x)
        assert np.array_equal(eval_a, eval_b)

    def test_training_dropout_requires_rng(self):
        net = DenseNet.build([3, 3, 1], np.random.default_rng(4), dropout=0.2)
        with pytest.raises(StateError):
            net.forward(np.zeros((1, 3)), train=True)


class TestBackward:
    def test_zero_loss_zero_gradients(self):
        rng = np.random.default_rng(5)
        net = DenseNet.build([3, 4, 2], rng, dtype=np.float64)
        x = rng.normal(size=(6, 3))
        out, cache = net.forward(x)
        grads, _ = net.backward(cache, np.zeros_like(out))
        for g_w, g_b in grads:
            assert np.all(g_w == 0) and np.all(g_b == 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        dims = [int(rng.integers(2, 6)) for _ in range(3)]
        net = DenseNet.build(dims, rng, dtype=np.float64)
        x = rng.normal(size=(4, dims[0]))
        target = rng.normal(size=(4, dims[-1]))
        params = net.parameters()

        def loss():
            out, _ = net.forward(x)
            return 0.5 * float(np.sum((out - target) ** 2))

        out, cache = net.forward(x)
        grads, _ = net.backward(cache, out - target)
        flat = []
        for g_w, g_b in grads:
            flat.extend((g_w, g_b))
        analytic = np.concatenate([g.ravel() for g in flat])
        numeric = _fd_gradients(loss, params)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4

    def test_relu_gradient_blocked_at_negative_preactivation(self):
        net = DenseNet([DenseLayer(np.eye(1), np.array([-10.0]), "relu")])
        x = np.array([[1.0]])
        out, cache = net.forward(x)
        grads, grad_in = net.backward(cache, np.ones_like(out))
        assert grads[0][0][0, 0] == 0.0
        assert grad_in[0, 0] == 0.0

    def test_backward_without_forward_rejected(self):
        net = DenseNet.build([2, 2], np.random.default_rng(0))
        with pytest.raises(StateError):
            net.backward(None, np.zeros((1, 2)))

    def test_dropout_mask_reused_in_backward(self):
        rng = np.random.default_rng(6)
        net = DenseNet.build([5, 8, 1], rng, dropout=0.5, dtype=np.float64)
        x = rng.normal(size=(3, 5))
        out, cache = net.forward(x, train=True, rng=np.random.default_rng(1))
        grads, _ = net.backward(cache, np.ones_like(out))
        mask = cache.dropout_masks[0]
        dropped_units = np.all(mask == 0, axis=0)
        # a unit dropped for every row contributes no weight gradient
        assert np.all(grads[0][0][dropped_units] == 0)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        params = [np.array([1.0, -2.0])]
        opt = AdamState(params)
        opt.step(params, [np.zeros(2)])
        assert np.array_equal(params[0], np.array([1.0, -2.0]))

    def test_moves_against_constant_gradient(self):
        params = [np.array([0.0])]
        opt = AdamState(params, learning_rate=0.1)
        for _ in range(20):
            opt.step(params, [np.array([3.0])])
        assert params[0][0] < 0

    def test_matches_scalar_reference(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        params = [np.array([2.0])]
        opt = AdamState(params, learning_rate=lr, beta1=b1, beta2=b2, epsilon=eps)
        # quadratic f(x) = 0.5 x^2, gradient x
        x_ref, m_ref, v_ref = 2.0, 0.0, 0.0
        for t in range(1, 6):
            g = params[0][0]
            opt.step(params, [np.array([g])])
            g_ref = x_ref
            m_ref = b1 * m_ref + (1 - b1) * g_ref
            v_ref = b2 * v_ref + (1 - b2) * g_ref * g_ref
            m_hat = m_ref / (1 - b1**t)
            v_hat = v_ref / (1 - b2**t)
            x_ref -= lr * m_hat / (np.sqrt(v_hat) + eps)
            assert params[0][0] == pytest.approx(x_ref, abs=1e-10)

    def test_non_finite_gradient_aborts(self):
        params = [np.array([1.0])]
        opt = AdamState(params)
        with pytest.raises(DivergenceError):
            opt.step(params, [np.array([np.nan])])
        assert params[0][0] == 1.0

    def test_deterministic(self):
        def run():
            params = [np.array([1.0, 2.0]), np.array([[3.0, 4.0]])]
            opt = AdamState(params)
            for i in range(10):
                opt.step(params, [np.array([0.1, -0.2]), np.array([[0.3, 0.4]])])
            return [p.copy() for p in params]

        a, b = run(), run()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_flatten_set_round_trip():
    rng = np.random.default_rng(8)
    net = DenseNet.build([3, 5, 2], rng, dtype=np.float64)
    params = net.parameters()
    flat = flatten_params(params)
    set_params(params, flat * 2.0)
    assert np.allclose(flatten_params(params), flat * 2.0)
