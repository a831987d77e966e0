"""Adam with decoupled weight decay, and parameter EMA."""

from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam; weight decay is decoupled (applied to the params
    directly, not through the moments)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise RuntimeError("adam step with missing gradient")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            if self.weight_decay > 0.0:
                p.values = p.values - self.lr * self.weight_decay * p.values
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self, names):
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = v
        return out

    def load_state_arrays(self, names, arrays, step_count):
        for i, name in enumerate(names):
            self.m[i] = arrays[f"opt.m.{name}"].copy()
            self.v[i] = arrays[f"opt.v.{name}"].copy()
        self.step_count = int(step_count)


class EmaState:
    """Exponential moving average of parameters (shadow initialized to a copy)."""

    def __init__(self, params, decay=0.9999):
        self.decay = decay
        self.shadow = [p.values.copy() for p in params]

    def update(self, params):
        d = self.decay
        for i, p in enumerate(params):
            if self.shadow[i].shape != p.values.shape:
                raise ValueError("EMA shadow shape mismatch")
            self.shadow[i] = d * self.shadow[i] + (1.0 - d) * p.values

    def copy_to(self, params):
        for s, p in zip(self.shadow, params):
            p.values = s.copy()


class swap_in_ema:
    """Context manager: temporarily replace params with their EMA shadow."""

    def __init__(self, module, ema):
        self.params = module.parameters()
        self.ema = ema
        self._saved = None

    def __enter__(self):
        self._saved = [p.values for p in self.params]
        for p, s in zip(self.params, self.ema.shadow):
            p.values = s
        return self

    def __exit__(self, *exc):
        for p, v in zip(self.params, self._saved):
            p.values = v
        return False
