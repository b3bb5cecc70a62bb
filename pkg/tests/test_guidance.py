import math

import numpy as np
import pytest

from conftest import TASK_RHO, TASK_WINDOW, rel_err
from symguide import (
    AffineModel,
    DivergenceError,
    GramStyleLoss,
    GuidanceConfig,
    L2TargetLoss,
    NoiseSchedule,
    ddim_rollout,
    ddim_step,
    estimate_clean,
    gram_style_loss,
    l2_target_loss,
    sag_sample,
    symplectic_euler_grad,
    time_travel_renoise,
)


def loss_fd_grad(loss, x0, h=1e-6):
    out = np.empty_like(x0)
    for j in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        out[j] = (loss.value(xp) - loss.value(xm)) / (2 * h)
    return out


class ZeroNoiseRng:
    def standard_normal(self, shape):
        return np.zeros(shape)


class TestDdimStep:
    def test_zero_model_rescales(self, schedule):
        zero = AffineModel.zero(2)
        x = np.array([1.2, -0.6])
        out = ddim_step(zero, schedule, x, 20)
        expected = math.sqrt(schedule.alpha[19] / schedule.alpha[20]) * x
        assert rel_err(out, expected) < 1e-15

    def test_frozen_scalar_example(self):
        # alpha_t = 0.25, alpha_{t-1} = 0.64, x = [2], eps = [1]
        sch = NoiseSchedule(np.array([1.0, 0.64, 0.25]))
        const_one = AffineModel(np.zeros((1, 1)), np.array([1.0]))
        out = ddim_step(const_one, sch, np.array([2.0]), 2)
        assert out == pytest.approx([2.4143593539448984], rel=1e-12)

    def test_final_step_returns_clean_estimate(self, schedule, gmm2):
        x = np.array([0.8, -0.3])
        out = ddim_step(gmm2, schedule, x, 1)
        a1 = schedule.alpha[1]
        eps = gmm2.eps(schedule.to_scaled(x, 1), schedule.sigma(1))
        xhat0 = (x - math.sqrt(1 - a1) * eps) / math.sqrt(a1)
        assert rel_err(out, xhat0) < 1e-15

    def test_rejects_t0(self, schedule, gmm2):
        with pytest.raises(ValueError):
            ddim_step(gmm2, schedule, np.zeros(2), 0)


class TestLosses:
    def test_l2_at_target(self):
        v, g = l2_target_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert v == 0.0
        assert np.array_equal(g, np.zeros(2))

    def test_l2_scalar_example(self):
        v, g = l2_target_loss(np.array([3.0]), np.array([1.0]))
        assert v == 2.0
        assert np.array_equal(g, [2.0])

    def test_l2_fd(self):
        rng = np.random.default_rng(0)
        loss = L2TargetLoss(rng.standard_normal(4))
        x = rng.standard_normal(4)
        assert rel_err(loss.grad(x), loss_fd_grad(loss, x, h=1e-6)) < 1e-8

    def test_gram_zero_features(self):
        c = np.array([[2.0, 1.0], [1.0, 3.0]])
        F = np.zeros((6, 4))
        v, g = gram_style_loss(np.array([1.0, -1.0, 2.0, 0.5]), c, F)
        assert v == float(np.sum(c * c))
        assert np.array_equal(g, np.zeros(4))

    def test_gram_at_target_is_zero(self):
        rng = np.random.default_rng(1)
        F = rng.standard_normal((6, 6))
        x = rng.standard_normal(6)
        Y = (F @ x).reshape(2, 3)
        loss = GramStyleLoss(Y @ Y.T, F)
        assert loss.value(x) == pytest.approx(0.0, abs=1e-24)
        assert np.abs(loss.grad(x)).max() < 1e-10

    def test_gram_fd(self):
        rng = np.random.default_rng(2)
        F = rng.standard_normal((6, 6))
        c = rng.standard_normal((2, 2))
        c = c + c.T
        loss = GramStyleLoss(c, F)
        x = rng.standard_normal(6)
        assert rel_err(loss.grad(x), loss_fd_grad(loss, x, h=1e-6)) < 1e-6

    def test_gram_shape_validation(self):
        with pytest.raises(ValueError):
            GramStyleLoss(np.zeros((2, 3)), np.zeros((6, 4)))
        with pytest.raises(ValueError):
            GramStyleLoss(np.zeros((2, 2)), np.zeros((5, 4)))  # 5 rows not divisible by 2
        with pytest.raises(ValueError):
            GramStyleLoss(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros((6, 4)))  # asymmetric


class TestRenoise:
    def test_deterministic_part(self, schedule):
        x = np.array([2.0, -1.0])
        t = 20
        out = time_travel_renoise(x, schedule, t, ZeroNoiseRng())
        expected = math.sqrt(schedule.alpha[t] / schedule.alpha[t - 1]) * x
        assert rel_err(out, expected) < 1e-15

    def test_moments(self, schedule):
        t = 25
        x = np.array([1.5, -0.5, 3.0])
        rng = np.random.default_rng(99)
        n_draws = 100_000
        a_t, a_prev = schedule.alpha[t], schedule.alpha[t - 1]
        draws = np.stack([time_travel_renoise(x, schedule, t, rng) for _ in range(n_draws)])
        mean_true = math.sqrt(a_t / a_prev) * x
        var_true = (a_prev - a_t) / a_prev
        se_mean = math.sqrt(var_true / n_draws)
        assert np.abs(draws.mean(axis=0) - mean_true).max() < 4 * se_mean
        se_var = var_true * math.sqrt(2.0 / (n_draws - 1))
        assert np.abs(draws.var(axis=0, ddof=1) - var_true).max() < 4 * se_var


class TestGuidanceConfig:
    def test_window_bounds(self):
        with pytest.raises(ValueError):
            GuidanceConfig(window=(0, 10), rho=0.1)
        with pytest.raises(ValueError):
            GuidanceConfig(window=(10, 10), rho=0.1)
        with pytest.raises(ValueError):
            GuidanceConfig(window=(12, 10), rho=0.1)

    def test_window_must_fit_schedule(self, schedule):
        cfg = GuidanceConfig(window=(10, 50), rho=0.1)
        with pytest.raises(ValueError):
            cfg.validate_for(schedule)

    def test_positivity(self):
        with pytest.raises(ValueError):
            GuidanceConfig(window=(1, 5), rho=-0.1)
        with pytest.raises(ValueError):
            GuidanceConfig(window=(1, 5), rho=0.1, repeats=0)
        with pytest.raises(ValueError):
            GuidanceConfig(window=(1, 5), rho=0.1, n_steps=0)
        with pytest.raises(ValueError):
            GuidanceConfig(window=(1, 5), rho=0.1, repeats_by_t={3: 0})

    def test_rho_zero_outside_window(self):
        cfg = GuidanceConfig(window=(10, 20), rho=0.3, rho_by_t={15: 0.7})
        assert cfg.rho_at(5) == 0.0
        assert cfg.rho_at(25) == 0.0
        assert cfg.rho_at(12) == 0.3
        assert cfg.rho_at(15) == 0.7

    def test_step_maps(self):
        cfg = GuidanceConfig(window=(10, 20), rho=0.3, repeats=2, n_steps=4,
                             n_by_t={12: 8}, repeats_by_t={13: 3})
        assert cfg.n_at(11) == 4 and cfg.n_at(12) == 8
        assert cfg.repeats_at(13) == 3 and cfg.repeats_at(14) == 2
        assert cfg.repeats_at(5) == 1  # outside the window


class TestSagSample:
    def test_guidance_off_is_plain_rollout_bitwise(self, schedule, gmm2, task_loss):
        cfg = GuidanceConfig(window=TASK_WINDOW, rho=0.0, repeats=1, n_steps=4)
        for seed in (0, 7, 1234):
            rec = sag_sample(gmm2, schedule, task_loss, cfg, seed)
            assert np.array_equal(rec.final_state, ddim_rollout(gmm2, schedule, seed))
            assert rec.steps_guided == 0

    def test_single_step_mode_matches_independent_baseline_bitwise(self, schedule, gmm2, task_loss):
        def one_step_guided_sample(model, sch, loss, window, rho, seed):
            # independent rewrite of the guided loop from the closed forms
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(model.dim)
            for t in range(sch.num_steps, 0, -1):
                a_t, a_prev = sch.alpha[t], sch.alpha[t - 1]
                sigma_t = sch.sigma(t)
                x_bar = x / math.sqrt(a_t)
                eps = model.eps(x_bar, sigma_t)
                xhat0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
                x_prev = math.sqrt(a_prev) * xhat0 + math.sqrt(1.0 - a_prev) * eps
                if window[0] <= t <= window[1] and rho > 0.0:
                    g = loss.grad(x_bar + (0.0 - sigma_t) * eps)
                    grad = (g - sigma_t * model.vjp(x_bar, sigma_t, g)) / math.sqrt(a_t)
                    x_prev = x_prev - rho * grad
                x = x_prev
            return x

        cfg = GuidanceConfig(window=TASK_WINDOW, rho=TASK_RHO, repeats=1, n_steps=1)
        for seed in (0, 7, 42):
            rec = sag_sample(gmm2, schedule, task_loss, cfg, seed)
            baseline = one_step_guided_sample(gmm2, schedule, task_loss, TASK_WINDOW, TASK_RHO, seed)
            assert np.array_equal(rec.final_state, baseline)

    def test_n1_gradient_equals_closed_form(self, schedule, gmm2, mlp3):
        rng = np.random.default_rng(3)
        for model in (gmm2, mlp3):
            for _ in range(50):
                x = rng.standard_normal(model.dim)
                t = int(rng.integers(1, schedule.num_steps))
                g = rng.standard_normal(model.dim)
                traj = estimate_clean(model, schedule, x, t, 1)
                grad = symplectic_euler_grad(model, traj, g, schedule, t)
                sigma_t = schedule.sigma(t)
                x_bar = schedule.to_scaled(x, t)
                closed = (g - sigma_t * model.vjp(x_bar, sigma_t, g)) / math.sqrt(schedule.alpha[t])
                assert rel_err(grad, closed) <= 1e-12

    def test_seed_determinism(self, schedule, gmm2, task_loss):
        cfg = GuidanceConfig(window=TASK_WINDOW, rho=TASK_RHO, repeats=2, n_steps=2)
        a = sag_sample(gmm2, schedule, task_loss, cfg, 11)
        b = sag_sample(gmm2, schedule, task_loss, cfg, 11)
        assert np.array_equal(a.final_state, b.final_state)
        assert a.guided_steps == b.guided_steps
        assert a.final_loss == b.final_loss

    def test_window_respected(self, schedule, gmm2, task_loss):
        cfg = GuidanceConfig(window=(20, 30), rho=0.1, repeats=1, n_steps=2)
        rec = sag_sample(gmm2, schedule, task_loss, cfg, 5)
        ts = [s["t"] for s in rec.guided_steps]
        assert ts and all(20 <= t <= 30 for t in ts)
        assert rec.steps_guided == 11

    def test_repeats_recorded_per_application(self, schedule, gmm2, task_loss):
        cfg = GuidanceConfig(window=(20, 22), rho=0.05, repeats=2, n_steps=2)
        rec = sag_sample(gmm2, schedule, task_loss, cfg, 5)
        assert rec.steps_guided == 6  # 3 window steps x 2 repeats
        assert [s["repeat"] for s in rec.guided_steps] == [0, 1, 0, 1, 0, 1]

    def test_checkpoint_accounting(self, schedule, gmm2, task_loss):
        cfg = GuidanceConfig(window=(20, 24), rho=0.05, repeats=1, n_steps=4)
        rec = sag_sample(gmm2, schedule, task_loss, cfg, 5)
        assert rec.checkpoints_stored == rec.steps_guided * (4 + 1)

    def test_divergence_raises_with_diagnostics(self, schedule, gmm2, task_loss):
        cfg = GuidanceConfig(window=TASK_WINDOW, rho=50.0, repeats=1, n_steps=4)
        with pytest.raises(DivergenceError, match="t="):
            sag_sample(gmm2, schedule, task_loss, cfg, 0)

    def test_record_serialization_excludes_timing_by_default(self, schedule, gmm2, task_loss):
        cfg = GuidanceConfig(window=(20, 24), rho=0.05, repeats=1, n_steps=2)
        rec = sag_sample(gmm2, schedule, task_loss, cfg, 5)
        payload = rec.to_json_dict()
        assert "wall_time_ns" not in payload
        assert "wall_time_ns" in rec.to_json_dict(include_timing=True)
