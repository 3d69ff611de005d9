import math

import numpy as np
import pytest

from trajcl.data import TrajectorySample
from trajcl.errors import EmptyBatch, ShapeMismatch
from trajcl.nn import load_params, save_params
from trajcl.predictor import (BivariateGaussianStep, ModelConfig,
                              PredictionDistribution, bivariate_nll, forward,
                              forward_batch, loss_gradient, mean_trajectory,
                              new_model, nll_loss, sgd_step)

import oracles

LOG_2PI = math.log(2.0 * math.pi)


def make_sample(rng, config, scenario_id=0):
    h, f, n = config.t_h_frames, config.t_f_frames, config.n_neighbors
    start = rng.normal(0, 50, 2)
    vel = rng.normal(0, 8, 2)
    hist = start + np.outer(np.arange(h), vel) * 0.1
    fut = hist[-1] + np.outer(np.arange(1, f + 1), vel) * 0.1
    mask = rng.random(n) < 0.7
    nbrs = np.zeros((n, h, 2))
    for i in range(n):
        if mask[i]:
            nbrs[i] = hist + rng.normal(0, 4, 2)
    return TrajectorySample(hist, nbrs, mask, fut, scenario_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestForward:
    def test_output_contract_at_10hz(self, rng):
        # 4 s horizon at 10 Hz: 40 steps, 5 distribution parameters per step
        config = ModelConfig()
        theta = new_model(config, seed=0)
        dist = forward(theta, make_sample(rng, config), config)
        assert len(dist.steps) == 40
        step = dist.steps[0]
        assert step.sigma_x > 0 and step.sigma_y > 0 and abs(step.rho) < 1

    def test_zero_final_layer_constant_steps(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=0)
        theta.view("dec_w2")[...] = 0.0
        theta.view("dec_b2")[...] = 0.0
        dist = forward(theta, make_sample(rng, config), config)
        first = dist.steps[0]
        for step in dist.steps[1:]:
            assert step == first

    def test_absent_slot_contents_ignored_bitwise(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=1)
        sample = make_sample(rng, config)
        sample.neighbor_mask[:] = [True, False, False]
        base = forward_batch(theta, [sample], config)

        # absent slots filled with garbage and swapped around
        messed = TrajectorySample(sample.target_history.copy(),
                                  sample.neighbor_histories.copy(),
                                  sample.neighbor_mask.copy(),
                                  sample.target_future.copy())
        messed.neighbor_histories[1] = 1e6
        messed.neighbor_histories[2] = -123.456
        out = forward_batch(theta, [messed], config)
        np.testing.assert_array_equal(base, out)

    def test_shape_mismatch(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=0)
        bad = make_sample(rng, ModelConfig(t_h_frames=9, t_f_frames=8, n_neighbors=3))
        with pytest.raises(ShapeMismatch):
            forward(theta, bad, config)

    def test_deterministic(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=3)
        batch = [make_sample(rng, config) for _ in range(4)]
        a = forward_batch(theta, batch, config)
        b = forward_batch(theta, batch, config)
        np.testing.assert_array_equal(a, b)


class TestNllLoss:
    def test_at_mean_unit_sigma(self):
        # density at the mean with sigma=1, rho=0 is 1/(2*pi)
        assert bivariate_nll(0, 0, 1, 1, 0, 0, 0) == pytest.approx(LOG_2PI, abs=1e-12)

    def test_rho_zero_factorizes(self, rng):
        for _ in range(20):
            mu = rng.normal(0, 3, 2)
            sigma = np.exp(rng.normal(0, 1, 2))
            y = rng.normal(0, 3, 2)
            joint = bivariate_nll(mu[0], mu[1], sigma[0], sigma[1], 0.0, y[0], y[1])
            uni = sum(0.5 * math.log(2 * math.pi * s ** 2) + (yy - m) ** 2 / (2 * s ** 2)
                      for m, s, yy in zip(mu, sigma, y))
            assert joint == pytest.approx(uni, rel=1e-12)

    def test_against_extended_precision_oracle(self, rng):
        for _ in range(30):
            mu_x, mu_y = rng.normal(0, 5, 2)
            sx, sy = np.exp(rng.normal(0, 1, 2))
            rho = rng.uniform(-0.95, 0.95)
            x, y = rng.normal(0, 5, 2)
            ours = bivariate_nll(mu_x, mu_y, sx, sy, rho, x, y)
            ref = oracles.bivariate_nll_mpmath(mu_x, mu_y, sx, sy, rho, x, y)
            assert abs(ours - ref) / max(abs(ref), 1e-12) < 1e-10

    def test_empty_batch(self, small_model_config):
        theta = new_model(small_model_config, seed=0)
        with pytest.raises(EmptyBatch):
            nll_loss(theta, [], small_model_config)

    def test_matches_loss_gradient_value(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=2)
        batch = [make_sample(rng, config) for _ in range(3)]
        loss, _ = loss_gradient(theta, batch, config)
        assert loss == nll_loss(theta, batch, config)


class TestLossGradient:
    def test_central_difference_probes(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=0)
        theta.values[:] += rng.normal(0, 0.05, theta.values.shape)
        batch = [make_sample(rng, config) for _ in range(3)]
        _, grad = loss_gradient(theta, batch, config)
        h = 1e-5
        for _ in range(50):
            i = rng.integers(theta.values.size)
            tp, tm = theta.copy(), theta.copy()
            tp.values[i] += h
            tm.values[i] -= h
            fd = (nll_loss(tp, batch, config) - nll_loss(tm, batch, config)) / (2 * h)
            assert abs(fd - grad.values[i]) / max(abs(fd), abs(grad.values[i]), 1e-8) < 1e-4

    def test_duplicated_batch_same_gradient(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=1)
        batch = [make_sample(rng, config) for _ in range(3)]
        _, g1 = loss_gradient(theta, batch, config)
        _, g2 = loss_gradient(theta, batch + batch, config)
        np.testing.assert_allclose(g1.values, g2.values, rtol=0, atol=1e-12)

    def test_gradient_vanishes_at_local_minimum(self, rng):
        # tame sigma clamp so the one-sample optimum is easy to sit on; the
        # future is set to the model's own initial mean so the residual-free
        # optimum is interior in rho
        config = ModelConfig(t_h_frames=4, t_f_frames=2, n_neighbors=1,
                             enc_hidden=4, enc_dim=4, dec_hidden=6,
                             sigma_min=0.5, sigma_init=1.0)
        theta = new_model(config, seed=5)
        sample = make_sample(rng, config)
        sample.target_future = mean_trajectory(forward(theta, sample, config))
        # Adam handles the narrow valley the clamped NLL produces
        m = np.zeros_like(theta.values)
        v = np.zeros_like(theta.values)
        b1, b2 = 0.9, 0.999
        norm = np.inf
        for t in range(1, 30001):
            _, grad = loss_gradient(theta, [sample], config)
            norm = np.linalg.norm(grad.values)
            if norm < 1e-6:
                break
            lr = 0.01 / (1 + t / 3000)
            m = b1 * m + (1 - b1) * grad.values
            v = b2 * v + (1 - b2) * grad.values ** 2
            theta.values[:] -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + 1e-8)
        assert norm < 1e-6

    def test_bit_identical_across_calls(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=9)
        batch = [make_sample(rng, config) for _ in range(4)]
        l1, g1 = loss_gradient(theta, batch, config)
        l2, g2 = loss_gradient(theta, batch, config)
        assert l1 == l2
        np.testing.assert_array_equal(g1.values, g2.values)


class TestSgdStep:
    def test_zero_lr(self, small_model_config):
        theta = new_model(small_model_config, seed=0)
        _, grad = None, None
        from trajcl.nn import GradientVector
        grad = GradientVector(np.ones(theta.values.size), theta.layout)
        out = sgd_step(theta, grad, 0.0)
        np.testing.assert_array_equal(out.values, theta.values)

    def test_paper_learning_rate_arithmetic(self):
        # theta=(1,1), grad=(1,-1), lr=0.001 -> (0.999, 1.001)
        from trajcl.nn import GradientVector, Layout, ParameterVector
        layout = Layout([("w", (2,))])
        theta = ParameterVector(np.array([1.0, 1.0]), layout)
        grad = GradientVector(np.array([1.0, -1.0]), layout)
        out = sgd_step(theta, grad, 0.001)
        np.testing.assert_allclose(out.values, [0.999, 1.001], atol=1e-15)

    def test_two_steps_linear_in_constant_gradient(self):
        from trajcl.nn import GradientVector, Layout, ParameterVector
        layout = Layout([("w", (3,))])
        theta = ParameterVector(np.array([0.5, -0.25, 2.0]), layout)
        grad = GradientVector(np.array([1.0, 2.0, -1.0]), layout)
        two = sgd_step(sgd_step(theta, grad, 0.01), grad, 0.01)
        summed = sgd_step(theta, GradientVector(2 * grad.values, layout), 0.01)
        np.testing.assert_allclose(two.values, summed.values, atol=1e-15)

    def test_shape_mismatch(self, small_model_config):
        from trajcl.nn import GradientVector, Layout
        theta = new_model(small_model_config, seed=0)
        other = GradientVector(np.zeros(3), Layout([("w", (3,))]))
        with pytest.raises(ShapeMismatch):
            sgd_step(theta, other, 0.1)


class TestMeanTrajectory:
    def test_zero_means(self):
        dist = PredictionDistribution([BivariateGaussianStep(0, 0, 1, 1, 0)] * 5)
        np.testing.assert_array_equal(mean_trajectory(dist), np.zeros((5, 2)))

    def test_linear_means(self):
        steps = [BivariateGaussianStep(float(t), 2.0 * t, 1, 1, 0) for t in range(4)]
        out = mean_trajectory(PredictionDistribution(steps))
        np.testing.assert_array_equal(out, [[0, 0], [1, 2], [2, 4], [3, 6]])

    def test_matches_field_copy_oracle(self, rng, small_model_config):
        config = small_model_config
        theta = new_model(config, seed=4)
        dist = forward(theta, make_sample(rng, config), config)
        out = mean_trajectory(dist)
        expected = np.array([[s.mu_x, s.mu_y] for s in dist.steps])
        np.testing.assert_array_equal(out, expected)


class TestOutputValidity:
    def test_fuzzed_theta_keeps_outputs_valid(self, rng, small_model_config):
        config = small_model_config
        sample = make_sample(rng, config)
        for _ in range(50):
            theta = new_model(config, seed=0)
            theta.values[:] = rng.normal(0, rng.uniform(0.1, 30), theta.values.size)
            out = forward_batch(theta, [sample], config)
            sigma, rho = out[:, :, 2:4], out[:, :, 4]
            assert np.all(sigma >= config.sigma_min) and np.all(sigma <= config.sigma_max)
            assert np.all(np.abs(rho) < 1.0)
            assert np.all(np.isfinite(out))


class TestCheckpoint:
    def test_roundtrip_lossless(self, tmp_path, small_model_config):
        theta = new_model(small_model_config, seed=7)
        theta.values[:] = np.random.default_rng(0).normal(0, 1, theta.values.size)
        save_params(theta, tmp_path / "ckpt.json", meta={"normalize": True})
        loaded, meta = load_params(tmp_path / "ckpt.json")
        np.testing.assert_array_equal(loaded.values, theta.values)
        assert loaded.layout == theta.layout
        assert meta["normalize"] is True
