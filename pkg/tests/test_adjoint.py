import numpy as np
import pytest
import scipy.linalg

from conftest import rel_err
from symguide import (
    AffineModel,
    ButcherTableau,
    GmmModel,
    MlpModel,
    conservation_probe,
    direct_backprop_grad,
    estimate_clean,
    estimate_clean_rk,
    make_sub_schedule,
    rk_direct_backprop_grad,
    symplectic_euler_grad,
    symplectic_rk_grad,
    vanilla_adjoint_grad,
)


def pipeline_fd_grad(model, schedule, x_t, t, n, grad_at_clean, h=1e-6):
    """Central differences of g . clean_output(x_t) through the full estimate."""
    out = np.empty_like(x_t)
    for j in range(len(x_t)):
        xp, xm = x_t.copy(), x_t.copy()
        xp[j] += h
        xm[j] -= h
        fp = float(grad_at_clean @ estimate_clean(model, schedule, xp, t, n).clean_output)
        fm = float(grad_at_clean @ estimate_clean(model, schedule, xm, t, n).clean_output)
        out[j] = (fp - fm) / (2.0 * h)
    return out


class TestTableau:
    def test_euler_and_heun_satisfy_conditions(self):
        assert ButcherTableau.euler().conjugacy_residual() == 0.0
        assert ButcherTableau.heun().conjugacy_residual() <= 1e-15

    def test_heun_conjugate_coefficients(self):
        tb = ButcherTableau.heun()
        assert np.array_equal(tb.A, [[0.0, 1.0], [0.0, 0.0]])
        assert np.array_equal(tb.B, tb.b)
        assert np.array_equal(tb.C, 1.0 - tb.c)

    def test_rejects_non_explicit_forward(self):
        with pytest.raises(ValueError, match="lower triangular"):
            ButcherTableau.from_forward(np.array([[0.5]]), np.array([1.0]), np.array([0.0]))

    def test_rejects_zero_weight(self):
        with pytest.raises(ValueError, match="nonzero"):
            ButcherTableau.from_forward(
                np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.0, 0.0]), np.array([0.0, 1.0])
            )

    def test_rejects_condition_violation(self):
        tb = ButcherTableau.heun()
        with pytest.raises(ValueError, match="conjugacy|costate"):
            ButcherTableau(
                stages=2, a=tb.a.copy(), b=tb.b.copy(), c=tb.c.copy(),
                A=np.array([[0.0, 0.5], [0.0, 0.0]]), B=tb.B.copy(), C=tb.C.copy(),
            )


class TestSymplecticEuler:
    def test_zero_model_passes_gradient_through(self, schedule):
        zero = AffineModel.zero(3)
        g = np.array([1.0, -2.0, 0.5])
        traj = estimate_clean(zero, schedule, np.zeros(3), 30, 4)
        out = symplectic_euler_grad(zero, traj, g, schedule, 30)
        assert np.array_equal(out, g / np.sqrt(schedule.alpha[30]))

    def test_affine_transpose_product_oracle(self, schedule):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((3, 3)) * 0.3
        model = AffineModel(A, rng.standard_normal(3) * 0.2)
        x = rng.standard_normal(3)
        g = rng.standard_normal(3)
        t, n = 35, 5
        traj = estimate_clean(model, schedule, x, t, n)
        out = symplectic_euler_grad(model, traj, g, schedule, t)
        # independent oracle: explicit transpose-matrix products
        sub = make_sub_schedule(schedule, t, n)
        lam = g.copy()
        eye = np.eye(3)
        for tau in range(n):
            h = sub.sub_sigma[tau + 1] - sub.sub_sigma[tau]
            lam = (eye - h * A.T) @ lam
        expected = lam / np.sqrt(schedule.alpha[t])
        assert rel_err(out, expected) < 1e-13

    @pytest.mark.parametrize("n", [1, 2, 4, 8])
    def test_matches_direct_backprop(self, schedule, gmm2, mlp3, n):
        rng = np.random.default_rng(n)
        for model in (gmm2, mlp3):
            x = rng.standard_normal(model.dim)
            g = rng.standard_normal(model.dim)
            traj = estimate_clean(model, schedule, x, 30, n)
            sym = symplectic_euler_grad(model, traj, g, schedule, 30)
            oracle = direct_backprop_grad(model, traj, g, schedule, 30)
            assert rel_err(sym, oracle) <= 1e-9

    def test_rejects_mismatched_trajectory(self, schedule, gmm2, mlp3):
        traj = estimate_clean(gmm2, schedule, np.zeros(2), 30, 2)
        with pytest.raises(ValueError, match="dimension"):
            symplectic_euler_grad(mlp3, traj, np.zeros(3), schedule, 30)
        with pytest.raises(ValueError, match="sigma grid|schedule"):
            symplectic_euler_grad(gmm2, traj, np.zeros(2), schedule, 29)


class TestDirectBackprop:
    def test_zero_model(self, schedule):
        zero = AffineModel.zero(2)
        g = np.array([0.3, -0.7])
        traj = estimate_clean(zero, schedule, np.zeros(2), 20, 3)
        out = direct_backprop_grad(zero, traj, g, schedule, 20)
        assert np.array_equal(out, g / np.sqrt(schedule.alpha[20]))

    def test_matches_pipeline_finite_differences(self, schedule, gmm2, mlp3):
        rng = np.random.default_rng(1)
        for model in (gmm2, mlp3):
            x = rng.standard_normal(model.dim) * 0.8
            g = rng.standard_normal(model.dim)
            t, n = 25, 4
            traj = estimate_clean(model, schedule, x, t, n)
            grad = direct_backprop_grad(model, traj, g, schedule, t)
            fd = pipeline_fd_grad(model, schedule, x, t, n, g)
            assert rel_err(grad, fd) < 1e-5


class TestVanillaAdjoint:
    def test_zero_model_is_exact(self, schedule):
        zero = AffineModel.zero(2)
        g = np.array([1.0, 2.0])
        out = vanilla_adjoint_grad(zero, np.zeros(2), g, schedule, 30, 4)
        assert np.array_equal(out, g / np.sqrt(schedule.alpha[30]))

    def test_error_dominates_symplectic(self, schedule, gmm2, mlp3):
        rng = np.random.default_rng(2)
        for model in (gmm2, mlp3):
            x = rng.standard_normal(model.dim)
            g = rng.standard_normal(model.dim)
            t, n = 30, 4
            traj = estimate_clean(model, schedule, x, t, n)
            oracle = direct_backprop_grad(model, traj, g, schedule, t)
            sym_err = np.linalg.norm(symplectic_euler_grad(model, traj, g, schedule, t) - oracle)
            van_err = np.linalg.norm(
                vanilla_adjoint_grad(model, traj.clean_output, g, schedule, t, n) - oracle
            )
            assert van_err >= 10.0 * sym_err
            assert van_err > 1e-8  # the separation is real, not two zeros

    def test_first_order_convergence_on_affine(self, schedule):
        # against the analytic continuous gradient expm(-A^T sigma_t) g
        A = np.array([[0.25, 0.1], [-0.05, 0.3]])
        model = AffineModel(A)
        t = 35
        sigma_t = schedule.sigma(t)
        g = np.array([1.0, 0.5])
        x_clean = np.array([0.7, -0.4])
        analytic = scipy.linalg.expm(-A.T * sigma_t) @ g / np.sqrt(schedule.alpha[t])
        errs = {
            nb: np.linalg.norm(vanilla_adjoint_grad(model, x_clean, g, schedule, t, nb) - analytic)
            for nb in (16, 32, 64)
        }
        assert 1.4 < errs[16] / errs[32] < 2.6
        assert 1.4 < errs[32] / errs[64] < 2.6

    def test_step_doubling_order(self, schedule, gmm2, mlp3):
        t = 25
        for model in (gmm2, mlp3):
            x = np.full(model.dim, 0.3)
            g = np.ones(model.dim)
            traj = estimate_clean(model, schedule, x, t, 4)
            ref = vanilla_adjoint_grad(model, traj.clean_output, g, schedule, t, 512)
            e8 = np.linalg.norm(vanilla_adjoint_grad(model, traj.clean_output, g, schedule, t, 8) - ref)
            e16 = np.linalg.norm(vanilla_adjoint_grad(model, traj.clean_output, g, schedule, t, 16) - ref)
            assert 0.7 <= np.log2(e8 / e16) <= 1.3

    def test_rejects_bad_n_back(self, schedule, gmm2):
        with pytest.raises(ValueError):
            vanilla_adjoint_grad(gmm2, np.zeros(2), np.ones(2), schedule, 30, 0)


class TestRkForward:
    def test_single_stage_matches_euler_bitwise(self, schedule, mlp3):
        x = np.array([0.4, -0.9, 0.2])
        euler_traj = estimate_clean(mlp3, schedule, x, 30, 4)
        rk_traj = estimate_clean_rk(mlp3, schedule, x, 30, 4, ButcherTableau.euler())
        assert np.array_equal(rk_traj.states, euler_traj.states)
        assert np.array_equal(rk_traj.clean_output, euler_traj.clean_output)

    def test_zero_model_any_tableau(self, schedule):
        zero = AffineModel.zero(2)
        x = np.array([1.5, -0.5])
        traj = estimate_clean_rk(zero, schedule, x, 25, 3, ButcherTableau.heun())
        assert np.array_equal(traj.clean_output, schedule.to_scaled(x, 25))

    def test_heun_affine_two_stage_oracle(self, schedule):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((2, 2)) * 0.3
        b = rng.standard_normal(2) * 0.3
        model = AffineModel(A, b)
        x = rng.standard_normal(2)
        t, n = 30, 3
        traj = estimate_clean_rk(model, schedule, x, t, n, ButcherTableau.heun())
        # independent two-stage recurrence with explicit matrices
        sub = make_sub_schedule(schedule, t, n)
        state = schedule.to_scaled(x, t)
        for tau in range(n, 0, -1):
            h = sub.sub_sigma[tau - 1] - sub.sub_sigma[tau]
            k1 = A @ state + b
            k2 = A @ (state + h * k1) + b
            state = state + 0.5 * h * (k1 + k2)
        assert rel_err(traj.clean_output, state) < 1e-13

    def test_stage_replay_is_bitwise(self, schedule, gmm2):
        x = np.array([0.6, -0.2])
        tb = ButcherTableau.heun()
        traj = estimate_clean_rk(gmm2, schedule, x, 28, 4, tb)
        sig = traj.sub.sub_sigma
        for tau in range(4, 0, -1):
            y = traj.states[tau]
            h = sig[tau - 1] - sig[tau]
            rec = tau - 1
            slopes = []
            for i in range(tb.stages):
                Xi = y.copy()
                for j in range(i):
                    if tb.a[i, j] != 0.0:
                        Xi = Xi + h * tb.a[i, j] * slopes[j]
                sig_i = sig[tau] + tb.c[i] * h
                assert np.array_equal(Xi, traj.stage_states[rec, i])
                assert sig_i == traj.stage_sigmas[rec, i]
                slopes.append(gmm2.eps(Xi, float(sig_i)))
                assert np.array_equal(slopes[i], traj.stage_slopes[rec, i])
            y_next = y.copy()
            for i in range(tb.stages):
                y_next = y_next + h * tb.b[i] * slopes[i]
            assert np.array_equal(y_next, traj.states[tau - 1])


class TestSymplecticRk:
    def test_single_stage_matches_euler_grad_bitwise(self, schedule, mlp3):
        x = np.array([0.4, -0.9, 0.2])
        g = np.array([1.0, 0.3, -0.6])
        euler_traj = estimate_clean(mlp3, schedule, x, 30, 4)
        rk_traj = estimate_clean_rk(mlp3, schedule, x, 30, 4, ButcherTableau.euler())
        a = symplectic_euler_grad(mlp3, euler_traj, g, schedule, 30)
        b = symplectic_rk_grad(mlp3, rk_traj, g, schedule, 30)
        assert np.array_equal(a, b)

    def test_zero_model(self, schedule):
        zero = AffineModel.zero(2)
        g = np.array([0.5, -1.5])
        traj = estimate_clean_rk(zero, schedule, np.zeros(2), 20, 3, ButcherTableau.heun())
        out = symplectic_rk_grad(zero, traj, g, schedule, 20)
        assert np.array_equal(out, g / np.sqrt(schedule.alpha[20]))

    @pytest.mark.parametrize("n", [1, 3, 5])
    def test_heun_matches_rk_reverse_mode(self, schedule, gmm2, mlp3, n):
        rng = np.random.default_rng(n + 10)
        for model in (gmm2, mlp3):
            x = rng.standard_normal(model.dim)
            g = rng.standard_normal(model.dim)
            traj = estimate_clean_rk(model, schedule, x, 30, n, ButcherTableau.heun())
            sym = symplectic_rk_grad(model, traj, g, schedule, 30)
            oracle = rk_direct_backprop_grad(model, traj, g, schedule, 30)
            assert rel_err(sym, oracle) <= 1e-9

    def test_heun_matches_pipeline_finite_differences(self, schedule, mlp3):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(3) * 0.6
        g = rng.standard_normal(3)
        t, n = 25, 3
        tb = ButcherTableau.heun()
        traj = estimate_clean_rk(mlp3, schedule, x, t, n, tb)
        grad = symplectic_rk_grad(mlp3, traj, g, schedule, t)
        h = 1e-6
        fd = np.empty(3)
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fp = float(g @ estimate_clean_rk(mlp3, schedule, xp, t, n, tb).clean_output)
            fm = float(g @ estimate_clean_rk(mlp3, schedule, xm, t, n, tb).clean_output)
            fd[j] = (fp - fm) / (2 * h)
        assert rel_err(grad, fd) < 1e-5


class TestConservation:
    def test_zero_model_constant_exactly(self, schedule):
        zero = AffineModel.zero(2)
        traj = estimate_clean(zero, schedule, np.zeros(2), 30, 5)
        v0 = np.array([0.3, -0.6])
        lam0 = np.array([1.1, 0.7])
        S = conservation_probe(zero, traj, v0, lam0)
        assert np.all(S == S[0])  # exactly constant
        assert S[0] == pytest.approx(float(lam0 @ v0), rel=1e-15)

    def test_affine_constant_to_roundoff(self, schedule):
        rng = np.random.default_rng(5)
        model = AffineModel(rng.standard_normal((2, 2)) * 0.3)
        traj = estimate_clean(model, schedule, rng.standard_normal(2), 35, 6)
        S = conservation_probe(model, traj, rng.standard_normal(2), rng.standard_normal(2))
        assert np.abs(S - S[0]).max() <= 1e-12 * abs(S[0])

    def test_mlp_invariant(self, schedule, mlp3):
        rng = np.random.default_rng(6)
        traj = estimate_clean(mlp3, schedule, rng.standard_normal(3), 30, 5)
        v0 = rng.standard_normal(3)
        lam0 = rng.standard_normal(3)
        S = conservation_probe(mlp3, traj, v0, lam0)
        assert np.abs(S - S[0]).max() <= 1e-10 * abs(S[0])


class TestMemoryAccounting:
    @pytest.mark.parametrize("n", [1, 2, 4, 8])
    def test_symplectic_is_constant_extra_state(self, schedule, mlp3, n):
        traj = estimate_clean(mlp3, schedule, np.zeros(3), 30, n)
        _, stats = symplectic_euler_grad(mlp3, traj, np.ones(3), schedule, 30, return_stats=True)
        assert stats.checkpoints_read == n + 1
        assert stats.tape_arrays == 0
        assert stats.peak_state_vectors == 2

    def test_oracle_tape_grows_with_n_times_layers(self, schedule, mlp3):
        counts = {}
        for n in (1, 2, 4, 8):
            traj = estimate_clean(mlp3, schedule, np.zeros(3), 30, n)
            _, stats = direct_backprop_grad(mlp3, traj, np.ones(3), schedule, 30, return_stats=True)
            counts[n] = stats.tape_arrays
        assert counts[1] == mlp3.num_layers
        assert all(counts[n] == n * counts[1] for n in counts)
        assert counts[8] > counts[4] > counts[2] > counts[1]

    def test_rk_consumes_stage_records(self, schedule, mlp3):
        tb = ButcherTableau.heun()
        for n in (1, 2, 4):
            traj = estimate_clean_rk(mlp3, schedule, np.zeros(3), 30, n, tb)
            _, stats = symplectic_rk_grad(mlp3, traj, np.ones(3), schedule, 30, return_stats=True)
            assert stats.checkpoints_read == (n + 1) + n * tb.stages
            assert stats.tape_arrays == 0
