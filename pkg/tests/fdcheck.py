"""Central finite-difference gradient oracle used across the test suite."""

import numpy as np

from latentpoints.nn.tensor import Tensor


def numeric_grad(fn, x, step=1e-5):
    """Central finite differences of scalar fn at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def max_rel_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.abs(analytic), np.maximum(np.abs(numeric), floor))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grad(loss_fn, x0, step=1e-5, tol=1e-4):
    """Compare tape gradient of loss_fn (Tensor -> scalar Tensor) against FD."""
    x0 = np.asarray(x0, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    loss = loss_fn(xt)
    loss.backward()
    analytic = xt.grad.copy()

    def f(arr):
        return float(loss_fn(Tensor(arr)).values)

    numeric = numeric_grad(f, x0, step=step)
    err = max_rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: max rel error {err:.3e} >= {tol}"
    return err


def check_param_grads(loss_fn, params, step=1e-5, tol=1e-4, normalize="param"):
    """FD-check gradients w.r.t. a list of Parameters for loss_fn() -> Tensor.

    normalize="param" compares the max absolute deviation against the largest
    gradient entry of that parameter: deep compositions attenuate early-layer
    gradients to the point where elementwise relative errors only measure FD
    roundoff (|loss| * ulp / 2h). Use normalize="element" for single ops.
    """
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.copy() for p in params]
    worst = 0.0
    for p, analytic in zip(params, grads):
        def f(arr, p=p):
            saved = p.values
            p.values = arr
            out = float(loss_fn().values)
            p.values = saved
            return out

        numeric = numeric_grad(f, p.values.copy(), step=step)
        if normalize == "param":
            scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
            err = float(np.abs(analytic - numeric).max() / scale)
        else:
            err = max_rel_error(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"param gradient mismatch: {err:.3e} >= {tol}"
    for p in params:
        p.zero_grad()
    return worst
