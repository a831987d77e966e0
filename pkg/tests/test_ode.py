import numpy as np
import pytest

from latentpoints.ode import OdeFailure, rk45_integrate


def test_zero_rhs_is_identity():
    x = np.array([1.0, -2.0, 3.5])
    out = rk45_integrate(lambda x, t: np.zeros_like(x), x, 1e-4, 1.0)
    np.testing.assert_array_equal(out, x)


def test_analytic_exponential_default_tolerance():
    x = np.array([2.0, -1.0])
    out = rk45_integrate(lambda x, t: -x, x, 1e-4, 1.0)
    expected = x * np.exp(-0.9999)
    assert np.abs(out / expected - 1.0).max() < 1e-3  # controller invariant


def test_analytic_exponential_tight_tolerance():
    x = np.array([2.0, -1.0])
    out = rk45_integrate(lambda x, t: -x, x, 1e-4, 1.0, atol=1e-8, rtol=1e-8)
    expected = x * np.exp(-0.9999)
    assert np.abs(out / expected - 1.0).max() < 1e-6


def test_reverse_direction():
    x = np.array([1.0])
    out = rk45_integrate(lambda x, t: -x, x, 1.0, 1e-4, atol=1e-8, rtol=1e-8)
    np.testing.assert_allclose(out, x * np.exp(0.9999), rtol=1e-6)


def test_forward_backward_roundtrip():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(8)

    def rhs(y, t):
        return np.sin(3.0 * t) * y - 0.5 * np.tanh(y)

    fwd = rk45_integrate(rhs, x, 1e-4, 1.0)
    back = rk45_integrate(rhs, fwd, 1.0, 1e-4)
    assert np.abs((back - x) / np.maximum(np.abs(x), 1e-6)).max() < 1e-4


def test_equal_times_rejected():
    with pytest.raises(ValueError):
        rk45_integrate(lambda x, t: x, np.zeros(2), 0.5, 0.5)


def test_stiffness_reported():
    # discontinuous, huge rhs forces the controller into step underflow
    def nasty(x, t):
        return np.full_like(x, 1e18 * np.sign(np.sin(1e9 * t)))

    with pytest.raises(OdeFailure):
        rk45_integrate(nasty, np.zeros(2), 0.0, 1.0)


def test_matches_scipy_reference():
    from scipy.integrate import solve_ivp

    def rhs(x, t):
        return -0.5 * (1.0 + t) * x

    x0 = np.array([1.0, 2.0, -3.0])
    mine = rk45_integrate(rhs, x0, 1e-5, 1.0)
    ref = solve_ivp(
        lambda t, y: rhs(y, t), (1e-5, 1.0), x0, method="RK45",
        rtol=1e-10, atol=1e-12,
    ).y[:, -1]
    np.testing.assert_allclose(mine, ref, rtol=1e-6)
