import numpy as np
import pytest

from motionlab.config import default_config
from motionlab.diffusion import (
    NULL_STYLE,
    NoiseSchedule,
    cfg_predict,
    condition_dropout,
    cosine_schedule,
    denoise,
    forward_noise,
    init_denoiser,
    reverse_step,
    sample,
)
from motionlab.motionrep import FEAT_DIM, Condition
from motionlab.nets import raw
from motionlab.rng import RngStream

T = 50


@pytest.fixture(scope="module")
def sched():
    return cosine_schedule(T)


def tiny_planner_cfg():
    cfg = default_config()["planner"]
    cfg.update(width=32, layers=2, ffn_width=48, window=8, context=4)
    return cfg


class TestSchedule:
    def test_betas_in_open_unit_interval(self, sched):
        assert np.all(sched.betas[1:] > 0.0)
        assert np.all(sched.betas[1:] < 1.0)

    def test_alpha_bar_strictly_decreasing_from_one(self, sched):
        assert sched.alpha_bar[0] == 1.0
        assert np.all(np.diff(sched.alpha_bar) < 0.0)

    def test_final_step_deterministic(self, sched):
        assert sched.sigmas[1] == 0.0
        assert np.all(sched.sigmas[2:] > 0.0)

    def test_posterior_coefficients_match_independent_oracle(self, sched):
        # recompute everything from the betas alone
        alphas = 1.0 - sched.betas
        abar = np.concatenate([[1.0], np.cumprod(alphas[1:])])
        for t in range(2, T + 1):
            var = sched.betas[t] * (1.0 - abar[t - 1]) / (1.0 - abar[t])
            assert sched.sigmas[t] == pytest.approx(np.sqrt(var), abs=1e-12)
            np.testing.assert_allclose(abar[t], sched.alpha_bar[t], atol=1e-12)


class TestForwardNoise:
    def test_t_zero_is_identity(self, sched):
        x0 = np.ones((3, 4))
        np.testing.assert_array_equal(forward_noise(sched, x0, 0, np.zeros_like(x0)), x0)

    def test_zero_noise_scales_by_sqrt_alpha_bar(self, sched):
        x0 = np.full((2, 2), 2.0)
        out = forward_noise(sched, x0, 30, np.zeros_like(x0))
        np.testing.assert_allclose(out, np.sqrt(sched.alpha_bar[30]) * x0, atol=1e-12)

    def test_monte_carlo_moments_match_formula(self, sched):
        # at late t the output is dominated by the (1 - abar) noise term
        rng = RngStream(0)
        t = T
        x0 = 0.7
        draws = np.sqrt(sched.alpha_bar[t]) * x0 + (1.0 - sched.alpha_bar[t]) * rng.normal((10_000,))
        out = forward_noise(sched, np.full(10_000, x0), t, rng.normal((10_000,)))
        assert out.mean() == pytest.approx(draws.mean(), abs=0.05)
        assert out.std() == pytest.approx(1.0 - sched.alpha_bar[t], rel=0.02)


class TestReverseStep:
    def test_t_zero_rejected(self, sched):
        x = np.zeros((2, 2))
        with pytest.raises(ValueError):
            reverse_step(sched, x, x, 0, x)

    def test_degenerate_schedule_is_identity(self):
        # abar_{t-1} == abar_t and xhat_0 == x_t collapse the update to x_t
        s = NoiseSchedule(
            betas=np.array([0.0, 0.0, 0.0]),
            alphas=np.array([1.0, 1.0, 1.0]),
            alpha_bar=np.array([1.0, 0.5, 0.5]),
            sigmas=np.zeros(3),
        )
        x = np.array([[1.0, -2.0]])
        np.testing.assert_allclose(reverse_step(s, x, x, 2, np.zeros_like(x)), x, atol=1e-12)

    def test_oracle_round_trip_recovers_x0_in_expectation(self, sched):
        # noise to step t, then walk back with the oracle estimate xhat_0 = x_0
        rng = RngStream(1)
        x0 = rng.normal((FEAT_DIM,))
        trials = 1000
        x = forward_noise(sched, np.tile(x0, (trials, 1)), T, rng.normal((trials, FEAT_DIM)))
        for t in range(T, 0, -1):
            eps = rng.normal(x.shape) if sched.sigmas[t] > 0 else np.zeros_like(x)
            x = reverse_step(sched, x, np.tile(x0, (trials, 1)), t, eps)
        mean_err = np.abs(x.mean(axis=0) - x0).mean()
        assert mean_err < 1e-2


class TestConditioning:
    def test_dropout_rate_within_tolerance(self):
        rng = RngStream(2)
        style = np.zeros(10_000, dtype=int)
        tj = np.zeros(10_000, dtype=int)
        s2, tj2 = condition_dropout(style, tj, rng, 0.1)
        rate = (s2 == NULL_STYLE).mean()
        assert rate == pytest.approx(0.1, abs=0.01)
        np.testing.assert_array_equal(s2 == NULL_STYLE, tj2 == -1)

    def test_cfg_predict_scale_reductions_exact(self, sched):
        cfg = tiny_planner_cfg()
        params = raw(init_denoiser(RngStream(3), cfg))
        rng = RngStream(4)
        x_t = rng.normal((2, cfg["window"], FEAT_DIM))
        ctx = rng.normal((2, cfg["context"], FEAT_DIM))
        cond = Condition(style=1, target=np.array([2.0, 0.5]), target_joint=0)

        tb = np.full(2, 5)
        g_cond = denoise(params, x_t, tb, ctx, np.full(2, 1), np.tile(cond.target, (2, 1)),
                         np.zeros(2, dtype=int), cfg)
        g_null = denoise(params, x_t, tb, ctx, np.full(2, NULL_STYLE), np.zeros((2, 2)),
                         np.full(2, -1), cfg)
        np.testing.assert_array_equal(cfg_predict(params, sched, x_t, 5, ctx, cond, 1.0, cfg), g_cond)
        np.testing.assert_array_equal(cfg_predict(params, sched, x_t, 5, ctx, cond, 0.0, cfg), g_null)
        blended = cfg_predict(params, sched, x_t, 5, ctx, cond, 5.0, cfg)
        np.testing.assert_allclose(blended, -4.0 * g_null + 5.0 * g_cond, atol=1e-12)


class TestSampling:
    def test_same_seed_reproduces_bitwise(self, sched):
        cfg = tiny_planner_cfg()
        params = raw(init_denoiser(RngStream(5), cfg))
        ctx = RngStream(6).normal((1, cfg["context"], FEAT_DIM))
        cond = Condition(style=0)
        a = sample(params, sched, ctx, cond, RngStream(99), cfg)
        b = sample(params, sched, ctx, cond, RngStream(99), cfg)
        np.testing.assert_array_equal(a, b)
        c = sample(params, sched, ctx, cond, RngStream(100), cfg)
        assert not np.array_equal(a, c)

    def test_sample_shape_and_finite(self, sched):
        cfg = tiny_planner_cfg()
        params = raw(init_denoiser(RngStream(7), cfg))
        ctx = RngStream(8).normal((3, cfg["context"], FEAT_DIM))
        out = sample(params, sched, ctx, Condition(style=2), RngStream(9), cfg)
        assert out.shape == (3, cfg["window"], FEAT_DIM)
        assert np.isfinite(out).all()
