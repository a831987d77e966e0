"""Adaptive Dormand-Prince 5(4) integrator for the generative ODE.

Supports both time directions; the embedded 4th-order solution drives a
standard proportional step controller. Used with error tolerances 1e-5 and
the integration interval [1e-5, 1].
"""

from __future__ import annotations

import numpy as np

__all__ = ["OdeFailure", "rk45_integrate"]

# Dormand-Prince 5(4) Butcher tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)


class OdeFailure(RuntimeError):
    """Step size underflowed; the problem looks stiff at the reported time."""


def rk45_integrate(rhs, x, t_from, t_to, atol=1e-5, rtol=1e-5, max_steps=100_000):
    """Integrate dx/dt = rhs(x, t) from t_from to t_to (either direction).

    Returns the state at t_to. `x` may be any float array; `rhs` must return
    an array of the same shape.
    """
    if t_from == t_to:
        raise ValueError("t_from and t_to must differ")
    x = np.asarray(x, dtype=np.float64).copy()
    t = float(t_from)
    direction = 1.0 if t_to > t_from else -1.0
    span = abs(t_to - t_from)
    h = direction * min(0.1 * span, span)
    tiny = 1e-14 * max(1.0, abs(t_from), abs(t_to))

    k = [None] * 7
    k[0] = np.asarray(rhs(x, t), dtype=np.float64)
    for _ in range(max_steps):
        if direction * (t + h - t_to) > 0.0:
            h = t_to - t
        for i in range(1, 7):
            xi = x + h * sum(a * k[j] for j, a in enumerate(_A[i]) if a != 0.0)
            k[i] = np.asarray(rhs(xi, t + _C[i] * h), dtype=np.float64)
        x5 = x + h * sum(b * k[i] for i, b in enumerate(_B5) if b != 0.0)
        x4 = x + h * sum(b * k[i] for i, b in enumerate(_B4) if b != 0.0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x5))
        err = np.sqrt(np.mean(((x5 - x4) / scale) ** 2))
        if err <= 1.0:
            t += h
            x = x5
            k[0] = k[6]  # FSAL
            if abs(t - t_to) <= tiny:
                return x
            factor = 5.0 if err == 0.0 else min(5.0, 0.9 * err ** -0.2)
        else:
            factor = max(0.2, 0.9 * err ** -0.2)
        h *= factor
        if abs(h) < tiny:
            raise OdeFailure(f"step size underflow at t={t} (stiff problem?)")
    raise OdeFailure(f"exceeded {max_steps} steps at t={t}")
