"""Variance-preserving diffusion: schedules, forward kernels, DDPM/DDIM reverse
steps, the probability-flow ODE right-hand side, score-matching loss, and the
mixed score parametrization (analytic standard-normal part + neural residual).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiffusionSchedule",
    "make_linear_schedule",
    "diffuse",
    "ddpm_step",
    "ddim_step",
    "ddim_subsequence",
    "prob_flow_rhs",
    "sm_loss",
    "mixed_score_eps",
]


@dataclass
class DiffusionSchedule:
    """Discrete VP schedule. Arrays are indexed by step t = 1..T via [t-1].

    The squared quantities are primary: alpha_sq[t-1] = prod(1-beta_s) and
    sigma_sq = 1 - alpha_sq, so alpha_sq + sigma_sq == 1 holds exactly in
    floating point. alpha_bar/sigma are their square roots; rho is the
    reverse-step standard deviation, rho_t^2 = beta_t.
    """

    T: int
    beta: np.ndarray
    alpha_sq: np.ndarray
    sigma_sq: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def alpha(self, t):
        return self.alpha_bar[np.asarray(t) - 1]

    def sig(self, t):
        return self.sigma[np.asarray(t) - 1]

    # continuous-time view (t in (0, 1]) used by the generative ODE -----------

    def beta_cont(self, t):
        """Per-step beta linearly interpolated at continuous t in [0, 1]."""
        return self.beta_start + np.asarray(t, dtype=np.float64) * (self.beta_end - self.beta_start)

    def beta_rate(self, t):
        """Per-unit-time noise rate of the SDE on [0, 1]: T steps per unit time."""
        return self.T * self.beta_cont(t)

    def alpha_sigma_cont(self, t):
        """alpha(t), sigma(t) from the closed-form integral of beta_rate.

        At t = k/T these agree with the discrete alpha_bar/sigma up to
        O(beta^2) discretization differences.
        """
        t = np.asarray(t, dtype=np.float64)
        integral = self.T * (
            self.beta_start * t + 0.5 * (self.beta_end - self.beta_start) * t * t
        )
        alpha = np.exp(-0.5 * integral)
        sigma = np.sqrt(-np.expm1(-integral))
        return alpha, sigma


def make_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if T < 1:
        raise ValueError("T must be positive")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_sq = np.cumprod(1.0 - beta)
    sigma_sq = 1.0 - alpha_sq
    rho = np.sqrt(beta)
    return DiffusionSchedule(
        T=T, beta=beta, alpha_sq=alpha_sq, sigma_sq=sigma_sq,
        alpha_bar=np.sqrt(alpha_sq), sigma=np.sqrt(sigma_sq), rho=rho,
        beta_start=beta_start, beta_end=beta_end,
    )


def _check_t(t, T):
    if not 1 <= t <= T:
        raise ValueError(f"step {t} outside 1..{T}")


def diffuse(x0, t, eps, sched):
    """q(x_t | x_0) sample: alpha_t * x0 + sigma_t * eps."""
    _check_t(t, sched.T)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    return sched.alpha_bar[t - 1] * x0 + sched.sigma[t - 1] * eps


def ddpm_step(x_t, eps_pred, t, eta_noise, sched):
    """One ancestral sampling step t -> t-1; noise is omitted at t == 1."""
    _check_t(t, sched.T)
    beta_t = sched.beta[t - 1]
    sigma_t = sched.sigma[t - 1]
    mean = (x_t - beta_t / sigma_t * eps_pred) / np.sqrt(1.0 - beta_t)
    if t == 1:
        return mean
    return mean + sched.rho[t - 1] * eta_noise


def ddim_step(x_t, eps_pred, t, t_prev, eta, noise, sched):
    """DDIM update from step t to t_prev < t (t_prev == 0 fully denoises)."""
    _check_t(t, sched.T)
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must satisfy 0 <= t_prev < t={t}")
    a_t, s_t = sched.alpha_bar[t - 1], sched.sigma[t - 1]
    if t_prev == 0:
        a_p, s_p = 1.0, 0.0
    else:
        a_p, s_p = sched.alpha_bar[t_prev - 1], sched.sigma[t_prev - 1]
    x0_hat = (x_t - s_t * eps_pred) / a_t
    churn = eta * (s_p / s_t) * np.sqrt(max(0.0, 1.0 - (a_t / a_p) ** 2))
    direction = np.sqrt(max(0.0, s_p * s_p - churn * churn))
    out = a_p * x0_hat + direction * eps_pred
    if churn > 0.0:
        out = out + churn * noise
    return out


def ddim_subsequence(T, steps, schedule="quadratic"):
    """Strictly increasing step indices for accelerated sampling, ending at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in 1..{T}, got {steps}")
    if schedule != "quadratic":
        raise ValueError(f"unknown subsequence schedule {schedule!r}")
    if steps == T:
        return list(range(1, T + 1))
    raw = ((np.arange(1, steps + 1) / steps) ** 2 * T).round().astype(int)
    raw = np.clip(raw, 1, T)
    raw[-1] = T
    out = []
    for v in raw:
        if not out or v > out[-1]:
            out.append(int(v))
    return out


def prob_flow_rhs(x_t, eps_pred, t_cont, sched):
    """Generative ODE right-hand side: -1/2 beta(t) [x - eps/sigma(t)].

    beta here is the per-unit-time rate (T times the per-step interpolation),
    so integrating over [1e-5, 1] reproduces the full discrete chain.
    """
    if not 1e-5 <= t_cont <= 1.0:
        raise ValueError(f"continuous time {t_cont} outside [1e-5, 1]")
    beta = sched.beta_rate(t_cont)
    _, sigma = sched.alpha_sigma_cont(t_cont)
    return -0.5 * beta * (x_t - eps_pred / sigma)


def sm_loss(eps, eps_pred):
    """Score-matching objective: mean over batch of the squared L2 norm."""
    from .nn import tensor as T

    if isinstance(eps_pred, T.Tensor):
        eps = T.as_tensor(eps)
        if eps.shape != eps_pred.shape:
            raise ValueError("shape mismatch in sm_loss")
        diff = eps_pred - eps
        per_item = (diff * diff).sum(axis=tuple(range(1, diff.ndim)))
        return per_item.mean()
    eps = np.asarray(eps)
    eps_pred = np.asarray(eps_pred)
    if eps.shape != eps_pred.shape:
        raise ValueError("shape mismatch in sm_loss")
    d = (eps - eps_pred).reshape(eps.shape[0], -1)
    return float(np.mean(np.sum(d * d, axis=1)))


def mixed_score_eps(x_t, nn_out, t, sched, t_is_continuous=False):
    """eps prediction = sigma_t * x_t + neural residual."""
    if t_is_continuous:
        _, sigma = sched.alpha_sigma_cont(t)
    else:
        _check_t(t, sched.T)
        sigma = sched.sigma[t - 1]
    return sigma * x_t + nn_out
