import numpy as np
import pytest

from latentpoints.diffusion import (
    ddim_step,
    ddim_subsequence,
    ddpm_step,
    diffuse,
    make_linear_schedule,
    mixed_score_eps,
    prob_flow_rhs,
    sm_loss,
)


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule()


class TestSchedule:
    def test_alpha_1(self, sched):
        assert sched.alpha_bar[0] == pytest.approx(np.sqrt(1.0 - 1e-4), rel=1e-12)

    def test_vp_identity_exact(self, sched):
        lhs = sched.alpha_sq + sched.sigma_sq
        np.testing.assert_array_equal(lhs, np.ones_like(lhs))
        np.testing.assert_array_equal(sched.alpha_bar, np.sqrt(sched.alpha_sq))
        np.testing.assert_array_equal(sched.sigma, np.sqrt(sched.sigma_sq))

    def test_terminal_alpha_small(self, sched):
        assert sched.alpha_bar[-1] < 0.01
        # independent evaluation of the cumulative product
        direct = np.sqrt(np.prod(1.0 - np.linspace(1e-4, 0.02, 1000)))
        assert sched.alpha_bar[-1] == pytest.approx(direct, rel=1e-10)

    def test_monotonicity(self, sched):
        assert np.all(np.diff(sched.beta) > 0)
        assert np.all((sched.beta > 0) & (sched.beta < 1))
        assert np.all(np.diff(sched.alpha_bar) < 0)

    def test_rho_squared_is_beta(self, sched):
        np.testing.assert_allclose(sched.rho ** 2, sched.beta, rtol=1e-12)

    @pytest.mark.parametrize("lo,hi", [(0.0, 0.02), (0.02, 1e-4), (1e-4, 1.5)])
    def test_invalid_range(self, lo, hi):
        with pytest.raises(ValueError):
            make_linear_schedule(1000, lo, hi)

    def test_continuous_matches_discrete_on_grid(self, sched):
        t = np.array([1, 250, 500, 1000])
        alpha_c, sigma_c = sched.alpha_sigma_cont(t / sched.T)
        np.testing.assert_allclose(alpha_c, sched.alpha(t), rtol=0.02, atol=5e-4)
        np.testing.assert_allclose(sigma_c, sched.sig(t), rtol=0.02, atol=5e-4)


class TestDiffuse:
    def test_zero_noise(self, sched):
        x0 = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(
            diffuse(x0, 300, np.zeros(3), sched), sched.alpha_bar[299] * x0
        )

    def test_zero_signal(self, sched):
        eps = np.array([1.0, 2.0])
        np.testing.assert_array_equal(
            diffuse(np.zeros(2), 700, eps, sched), sched.sigma[699] * eps
        )

    def test_shape_mismatch(self, sched):
        with pytest.raises(ValueError):
            diffuse(np.zeros(3), 10, np.zeros(4), sched)

    @pytest.mark.parametrize("t", [1, 500, 1000])
    def test_marginal_moments(self, sched, t):
        rng = np.random.default_rng(t)
        n = 100_000
        x0 = 0.8
        xt = diffuse(np.full(n, x0), t, rng.standard_normal(n), sched)
        se_mean = sched.sigma[t - 1] / np.sqrt(n)
        assert abs(xt.mean() - sched.alpha_bar[t - 1] * x0) < 3 * se_mean
        se_std = sched.sigma[t - 1] / np.sqrt(2 * (n - 1))
        assert abs(xt.std(ddof=1) - sched.sigma[t - 1]) < 3 * se_std


class TestDdpm:
    def test_last_step_has_no_noise(self, sched):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(5)
        eps = rng.standard_normal(5)
        a = ddpm_step(x, eps, 1, rng.standard_normal(5), sched)
        b = ddpm_step(x, eps, 1, rng.standard_normal(5) * 100, sched)
        np.testing.assert_array_equal(a, b)

    def test_pure_rescale_with_zero_eps_and_rho(self, sched):
        import dataclasses

        quiet = dataclasses.replace(sched, rho=np.zeros_like(sched.rho))
        x = np.array([1.0, -1.0])
        out = ddpm_step(x, np.zeros(2), 400, np.ones(2), quiet)
        np.testing.assert_allclose(out, x / np.sqrt(1.0 - sched.beta[399]), rtol=1e-14)

    def test_t_out_of_range(self, sched):
        with pytest.raises(ValueError):
            ddpm_step(np.zeros(2), np.zeros(2), 0, np.zeros(2), sched)
        with pytest.raises(ValueError):
            ddpm_step(np.zeros(2), np.zeros(2), 1001, np.zeros(2), sched)

    def test_ideal_eps_chain_preserves_standard_normal(self, sched):
        # For N(0,I) data the exact conditional expectation of the noise is
        # sigma_t * x_t; the full reverse chain must then leave N(0,I) invariant.
        rng = np.random.default_rng(123)
        n, dim = 10_000, 4
        x = rng.standard_normal((n, dim))
        for t in range(sched.T, 0, -1):
            eps = sched.sigma[t - 1] * x
            x = ddpm_step(x, eps, t, rng.standard_normal((n, dim)), sched)
        se_mean = 1.0 / np.sqrt(n)
        assert np.abs(x.mean(axis=0)).max() < 3 * se_mean
        cov = np.cov(x.T)
        se_diag = np.sqrt(2.0 / (n - 1))
        assert np.abs(np.diag(cov) - 1.0).max() < 3 * se_diag
        off = cov[~np.eye(dim, dtype=bool)]
        assert np.abs(off).max() < 3 / np.sqrt(n - 1)


class TestDdim:
    def test_eta_zero_deterministic(self, sched):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(6)
        eps = rng.standard_normal(6)
        a = ddim_step(x, eps, 900, 500, 0.0, rng.standard_normal(6), sched)
        b = ddim_step(x, eps, 900, 500, 0.0, rng.standard_normal(6), sched)
        np.testing.assert_array_equal(a, b)

    def test_full_denoise_returns_x0_hat(self, sched):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal(4)
        eps = rng.standard_normal(4)
        t = 50
        xt = diffuse(x0, t, eps, sched)
        out = ddim_step(xt, eps, t, 0, 0.5, rng.standard_normal(4), sched)
        np.testing.assert_allclose(out, x0, rtol=1e-10, atol=1e-12)

    def test_non_decreasing_rejected(self, sched):
        with pytest.raises(ValueError):
            ddim_step(np.zeros(2), np.zeros(2), 100, 100, 0.5, np.zeros(2), sched)


class TestDdimSubsequence:
    def test_full_is_identity(self):
        assert ddim_subsequence(1000, 1000) == list(range(1, 1001))

    def test_single_step(self):
        assert ddim_subsequence(1000, 1) == [1000]

    def test_quadratic_25(self):
        seq = ddim_subsequence(1000, 25)
        assert seq[-1] == 1000
        assert seq[0] >= 1
        assert all(b > a for a, b in zip(seq, seq[1:]))
        expected = [int(round((i / 25) ** 2 * 1000)) for i in range(1, 26)]
        assert seq == sorted(set(np.clip(expected, 1, 1000).tolist()))

    def test_steps_beyond_T(self):
        with pytest.raises(ValueError):
            ddim_subsequence(100, 101)


class TestProbFlow:
    def test_ideal_eps_is_stationary(self, sched):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(32)
        for t in [1e-5, 0.001, 0.37, 1.0]:
            _, sigma = sched.alpha_sigma_cont(t)
            rhs = prob_flow_rhs(x, sigma * x, t, sched)
            assert np.abs(rhs).max() < 1e-12

    def test_zero_eps_contracts(self, sched):
        x = np.array([2.0, -4.0])
        t = 0.5
        rhs = prob_flow_rhs(x, np.zeros(2), t, sched)
        np.testing.assert_allclose(rhs, -0.5 * sched.beta_rate(t) * x, rtol=1e-14)

    def test_time_domain(self, sched):
        with pytest.raises(ValueError):
            prob_flow_rhs(np.zeros(2), np.zeros(2), 0.0, sched)


class TestSmLoss:
    def test_perfect_prediction(self):
        eps = np.ones((3, 5))
        assert sm_loss(eps, eps) == 0.0

    def test_unit_distance(self):
        assert sm_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])) == 1.0

    def test_constant_minimizer_is_batch_mean(self):
        rng = np.random.default_rng(4)
        eps = rng.standard_normal((256, 3))
        best = eps.mean(axis=0)
        loss_at_mean = sm_loss(eps, np.broadcast_to(best, eps.shape))
        for delta in [0.05, -0.08]:
            shifted = np.broadcast_to(best + delta, eps.shape)
            assert sm_loss(eps, shifted) > loss_at_mean


class TestMixedScore:
    def test_zero_residual_gives_analytic_part(self, sched):
        x = np.array([1.0, 2.0])
        out = mixed_score_eps(x, np.zeros(2), ip := 500, sched)
        np.testing.assert_array_equal(out, sched.sigma[ip - 1] * x)

    def test_terminal_sigma_near_one(self, sched):
        x = np.array([3.0])
        out = mixed_score_eps(x, np.zeros(1), 1000, sched)
        np.testing.assert_allclose(out, x, rtol=1e-4)

    def test_ideal_eps_regression_oracle(self, sched):
        # E[eps | x_t] = sigma_t * x_t for standard-normal data: check the
        # regression slope of eps on x_t against sigma_t.
        rng = np.random.default_rng(5)
        t = 400
        n = 200_000
        x0 = rng.standard_normal(n)
        eps = rng.standard_normal(n)
        xt = diffuse(x0, t, eps, sched)
        slope = np.dot(eps, xt) / np.dot(xt, xt)
        assert slope == pytest.approx(sched.sigma[t - 1], abs=3.5 / np.sqrt(n))
