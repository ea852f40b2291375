import numpy as np
import pytest

from deepam.gradcheck import finite_difference_check
from deepam.nn import (
    BatchNorm,
    Conv3x3,
    Param,
    SGDConfig,
    TrainingError,
    init_conv_weight,
    l1_loss,
    relu_backward,
    relu_forward,
    sgd_step,
)
from oracles import naive_conv3x3


class TestConvForward:
    def test_identity_kernel(self, rng):
        conv = Conv3x3(2, 2, rng)
        conv.weight.value[...] = 0.0
        for c in range(2):
            conv.weight.value[c, c, 1, 1] = 1.0
        conv.bias.value[...] = 0.0
        x = rng.normal(size=(3, 2, 6, 5))
        y, _ = conv.forward(x)
        assert np.allclose(y, x, atol=1e-14)

    def test_ones_kernel_on_constant(self):
        conv = Conv3x3(1, 1)
        conv.weight.value[...] = 1.0
        conv.bias.value[...] = 0.0
        y, _ = conv.forward(np.ones((1, 1, 5, 5)))
        assert np.allclose(y[0, 0, 1:-1, 1:-1], 9.0)
        assert y[0, 0, 0, 0] == pytest.approx(4.0)  # corner: zero padding
        assert y[0, 0, 0, 2] == pytest.approx(6.0)  # edge

    def test_matches_naive_loop_oracle(self, rng):
        conv = Conv3x3(3, 4, rng)
        x = rng.normal(size=(2, 3, 7, 6))
        y, _ = conv.forward(x)
        expect = naive_conv3x3(x, conv.weight.value, conv.bias.value)
        assert np.allclose(y, expect, atol=1e-12)

    def test_linearity_in_input(self, rng):
        conv = Conv3x3(2, 3, rng)
        conv.bias.value[...] = 0.0
        x1 = rng.normal(size=(1, 2, 5, 5))
        x2 = rng.normal(size=(1, 2, 5, 5))
        a, b = 2.5, -1.25
        lhs, _ = conv.forward(a * x1 + b * x2)
        rhs = a * conv.forward(x1)[0] + b * conv.forward(x2)[0]
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_channel_mismatch(self, rng):
        conv = Conv3x3(2, 3, rng)
        with pytest.raises(ValueError):
            conv.forward(np.zeros((1, 5, 4, 4)))


class TestConvBackward:
    def test_finite_differences_all_gradients(self, rng):
        conv = Conv3x3(2, 3, rng)
        x = rng.normal(size=(1, 2, 5, 5))
        c = rng.normal(size=(1, 3, 5, 5))

        def loss_fn():
            y, _ = conv.forward(x)
            return float(np.sum(c * y))

        y, cache = conv.forward(x)
        conv.weight.zero_grad()
        conv.bias.zero_grad()
        dx = conv.backward(c.copy(), cache)
        report = finite_difference_check(
            loss_fn,
            [
                ("input", x, dx),
                ("weight", conv.weight.value, conv.weight.grad),
                ("bias", conv.bias.value, conv.bias.grad),
            ],
        )
        assert report.max_rel_error <= 1e-6, report.summary()

    def test_zero_upstream_zero_grads(self, rng):
        conv = Conv3x3(2, 2, rng)
        x = rng.normal(size=(2, 2, 4, 4))
        _, cache = conv.forward(x)
        dx = conv.backward(np.zeros((2, 2, 4, 4)), cache)
        assert np.all(dx == 0)
        assert np.all(conv.weight.grad == 0) and np.all(conv.bias.grad == 0)

    def test_gradient_linearity_in_upstream(self, rng):
        conv = Conv3x3(2, 2, rng)
        x = rng.normal(size=(1, 2, 4, 4))
        _, cache = conv.forward(x)
        d1 = rng.normal(size=(1, 2, 4, 4))
        d2 = rng.normal(size=(1, 2, 4, 4))
        dx_sum = conv.backward(d1 + d2, cache)
        dx1 = conv.backward(d1, cache)
        dx2 = conv.backward(d2, cache)
        assert np.allclose(dx_sum, dx1 + dx2, atol=1e-10)


class TestRelu:
    def test_pointwise_values(self):
        y, _ = relu_forward(np.array([-1.0, 2.0, 0.0]))
        assert np.array_equal(y, [0.0, 2.0, 0.0])

    def test_backward_at_negative_is_zero(self):
        y, mask = relu_forward(np.array([-3.0, 5.0]))
        dy = relu_backward(np.ones(2), mask)
        assert np.array_equal(dy, [0.0, 1.0])

    def test_finite_differences_away_from_zero(self, rng):
        x = rng.normal(size=(4, 4)) * 3
        x[np.abs(x) < 0.5] = 0.7  # keep away from the kink
        c = rng.normal(size=(4, 4))

        def loss_fn():
            y, _ = relu_forward(x)
            return float(np.sum(c * y))

        _, mask = relu_forward(x)
        dx = relu_backward(c, mask)
        report = finite_difference_check(loss_fn, [("x", x, dx)])
        assert report.max_rel_error <= 1e-8


class TestBatchNorm:
    def test_train_output_normalized(self, rng):
        bn = BatchNorm(3)
        x = rng.normal(loc=5.0, scale=4.0, size=(4, 3, 6, 6))
        y, _ = bn.forward(x, train=True)
        std_in = x.std()
        assert np.all(np.abs(y.mean(axis=(0, 2, 3))) <= 1e-6 * std_in)
        assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1.0) <= 1e-5)

    def test_eval_equals_train_when_stats_match(self, rng):
        bn = BatchNorm(2)
        x = rng.normal(size=(3, 2, 5, 5))
        y_train, _ = bn.forward(x, train=False)  # before: running stats are 0/1
        bn.running_mean = x.mean(axis=(0, 2, 3))
        bn.running_var = x.var(axis=(0, 2, 3))
        y_eval, _ = bn.forward(x, train=False)
        mu, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
        bn2 = BatchNorm(2)
        y_batch, _ = bn2.forward(x, train=True)
        assert np.allclose(y_eval, y_batch, atol=1e-12)

    def test_running_stats_momentum(self, rng):
        bn = BatchNorm(1, momentum=0.9)
        x = rng.normal(loc=2.0, size=(2, 1, 4, 4))
        bn.forward(x, train=True)
        assert bn.running_mean[0] == pytest.approx(0.1 * x.mean())
        assert bn.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * x.var())

    def test_train_backward_finite_differences(self, rng):
        bn = BatchNorm(2)
        bn.scale.value[:] = rng.uniform(0.5, 1.5, size=2)
        bn.shift.value[:] = rng.normal(size=2)
        x = rng.normal(size=(2, 2, 4, 3))
        c = rng.normal(size=(2, 2, 4, 3))

        def loss_fn():
            y, _ = bn.forward(x, train=True)
            return float(np.sum(c * y))

        _, cache = bn.forward(x, train=True)
        bn.scale.zero_grad()
        bn.shift.zero_grad()
        dx = bn.backward(c, cache)
        report = finite_difference_check(
            loss_fn,
            [
                ("input", x, dx),
                ("scale", bn.scale.value, bn.scale.grad),
                ("shift", bn.shift.value, bn.shift.grad),
            ],
        )
        assert report.max_rel_error <= 1e-5, report.summary()

    def test_eval_backward_finite_differences(self, rng):
        bn = BatchNorm(2)
        bn.running_mean = rng.normal(size=2)
        bn.running_var = rng.uniform(0.5, 2.0, size=2)
        x = rng.normal(size=(1, 2, 4, 4))
        c = rng.normal(size=(1, 2, 4, 4))

        def loss_fn():
            y, _ = bn.forward(x, train=False)
            return float(np.sum(c * y))

        _, cache = bn.forward(x, train=False)
        dx = bn.backward(c, cache)
        report = finite_difference_check(loss_fn, [("input", x, dx)])
        assert report.max_rel_error <= 1e-6

    def test_single_sample_train_rejected(self):
        bn = BatchNorm(1)
        with pytest.raises(ValueError):
            bn.forward(np.zeros((1, 1, 1, 1)), train=True)


class TestL1Loss:
    def test_zero_at_equality(self, rng):
        u = rng.normal(size=(2, 1, 3, 3))
        loss, grad = l1_loss(u, u.copy())
        assert loss == 0.0 and np.all(grad == 0.0)

    def test_two_pixel_example(self):
        u = np.array([2.0, -3.0])
        t = np.zeros(2)
        loss, grad = l1_loss(u, t)
        assert loss == pytest.approx(2.5)
        assert np.array_equal(grad, [0.5, -0.5])

    def test_finite_differences(self, rng):
        u = rng.normal(size=(3, 4)) * 2
        t = rng.normal(size=(3, 4)) * 2
        u[np.abs(u - t) < 0.1] += 0.5

        def loss_fn():
            return l1_loss(u, t)[0]

        _, grad = l1_loss(u, t)
        report = finite_difference_check(loss_fn, [("u", u, grad)])
        assert report.max_rel_error <= 1e-8


class TestSGD:
    def _param(self, val, decay=True):
        return Param("layer0.weight", np.array(val, dtype=float), decay=decay)

    def test_zero_grad_no_motion(self):
        p = self._param([1.0, -2.0])
        sgd_step([p], lr=0.1, weight_decay=0.0)
        assert np.array_equal(p.value, [1.0, -2.0])

    def test_single_step_pure_gradient(self):
        p = self._param([1.0])
        p.grad[:] = 0.25
        sgd_step([p], lr=1.0, weight_decay=0.0)
        assert p.value[0] == pytest.approx(0.75)

    def test_two_steps_momentum_closed_form(self):
        p = self._param([0.0])
        eta, g = 0.1, 2.0
        for _ in range(2):
            p.grad[:] = g
            sgd_step([p], lr=eta, momentum=0.9, weight_decay=0.0)
        assert p.value[0] == pytest.approx(-eta * g * (1 + 1.9))

    def test_weight_decay_only_where_marked(self):
        pw = self._param([1.0], decay=True)
        pb = Param("layer0.bias", np.array([1.0]), decay=False)
        sgd_step([pw, pb], lr=1.0, momentum=0.0, weight_decay=0.1)
        assert pw.value[0] == pytest.approx(0.9)
        assert pb.value[0] == pytest.approx(1.0)

    def test_nonfinite_gradient_names_layer(self):
        p = self._param([1.0])
        p.grad[:] = np.nan
        with pytest.raises(TrainingError, match="layer0.weight"):
            sgd_step([p], lr=0.1)

    def test_config_validation_and_schedule(self):
        with pytest.raises(ValueError):
            SGDConfig(lr=0.0)
        cfg = SGDConfig(lr=1.0, lr_decay=0.5, lr_decay_every=5)
        assert cfg.lr_at(0) == 1.0
        assert cfg.lr_at(4) == 1.0
        assert cfg.lr_at(5) == 0.5
        assert cfg.lr_at(10) == 0.25


class TestInit:
    def test_same_seed_identical(self):
        a = init_conv_weight(4, 3, np.random.default_rng(7))
        b = init_conv_weight(4, 3, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_sample_std_within_5_percent(self):
        w = init_conv_weight(200, 64, np.random.default_rng(0))  # > 1e5 draws
        target = np.sqrt(2.0 / (64 * 9))
        assert abs(w.std() - target) / target < 0.05

    def test_biases_zero(self, rng):
        conv = Conv3x3(3, 4, rng)
        assert np.all(conv.bias.value == 0.0)

    def test_deterministic_layer_construction(self):
        c1 = Conv3x3(2, 3, np.random.default_rng(5))
        c2 = Conv3x3(2, 3, np.random.default_rng(5))
        assert np.array_equal(c1.weight.value, c2.weight.value)
