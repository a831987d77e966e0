"""Neural layers shared by every network in the pipeline."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

LEAKY_SLOPE = 0.1  # used everywhere; embedding blocks pin it explicitly


class Module:
    """Minimal parameter container with named sub-modules."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix=name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def set_training(self, training, rng=None):
        """Toggle train/eval behaviour (dropout) for this module tree."""
        for m in self.modules():
            m_training = getattr(m, "training", None)
            if m_training is not None or isinstance(m, Dropout):
                m.training = training
            if isinstance(m, Dropout):
                m.rng = rng

    def state_arrays(self):
        """Ordered mapping of parameter name -> value array."""
        return {name: p.values for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != p.values.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {src.shape}, model {p.values.shape}"
                )
            p.values = src.copy()


def kaiming_uniform(rng, out_features, in_features):
    bound = math.sqrt(6.0 / in_features)
    return rng.uniform(-bound, bound, size=(out_features, in_features))


class Linear(Module):
    def __init__(self, in_features, out_features, rng, zero_init=False):
        if zero_init:
            w = np.zeros((out_features, in_features))
        else:
            w = kaiming_uniform(rng, out_features, in_features)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    """Group normalization over the trailing channel axis, 8 groups by default."""

    def __init__(self, channels, groups=8, eps=1e-5):
        if channels % groups != 0:
            raise ValueError(f"{channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def __call__(self, x):
        h = T.group_norm(x, self.groups, self.eps)
        return h * self.weight + self.bias


class AdaptiveGroupNorm(Module):
    """Group norm whose per-channel scale/bias come from a conditioning vector.

    The conditioning map is initialized with its weight scaled by 0.1, the
    scale-output bias at 1.0 and the bias-output bias at 0.0, so a fresh layer
    behaves like plain group normalization.
    """

    def __init__(self, channels, cond_dim, rng, groups=8, eps=1e-5):
        if channels % groups != 0:
            raise ValueError(f"{channels} channels not divisible by {groups} groups")
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.cond_map = Linear(cond_dim, 2 * channels, rng)
        self.cond_map.weight.values *= 0.1
        self.cond_map.bias.values[:channels] = 1.0
        self.cond_map.bias.values[channels:] = 0.0

    def __call__(self, x, cond):
        if cond.values.shape[-1] != self.cond_map.weight.values.shape[1]:
            raise T.NumericError(
                f"conditioning width {cond.values.shape[-1]} does not match "
                f"AdaGN cond map {self.cond_map.weight.values.shape[1]}"
            )
        h = T.group_norm(x, self.groups, self.eps)
        sb = self.cond_map(cond)  # [..., 2C]
        scale = sb[..., : self.channels]
        bias = sb[..., self.channels:]
        if x.ndim == 3 and scale.ndim == 2:  # broadcast per-shape cond over points
            scale = T.reshape(scale, (scale.shape[0], 1, self.channels))
            bias = T.reshape(bias, (bias.shape[0], 1, self.channels))
        return h * scale + bias


class SinusoidalEmbedding(Module):
    """Interleaved sin/cos features at geometrically spaced frequencies."""

    def __init__(self, dim, base=10000.0):
        if dim % 2 != 0:
            raise ValueError("embedding dimension must be even")
        self.dim = dim
        half = dim // 2
        self.freqs = base ** (-np.arange(half) / half)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < 0):
            raise ValueError("step index must be non-negative")
        phase = t[:, None] * self.freqs[None, :]
        out = np.empty(t.shape + (self.dim,))
        out[..., 0::2] = np.sin(phase)
        out[..., 1::2] = np.cos(phase)
        return Tensor(out)


class ResSEBlock(Module):
    """Residual block of two linear layers gated by squeeze-and-excitation.

    With the second linear zeroed the block is an exact identity map.
    """

    def __init__(self, width, rng, reduction=4):
        self.lin1 = Linear(width, width, rng)
        self.lin2 = Linear(width, width, rng)
        self.se1 = Linear(width, max(1, width // reduction), rng)
        self.se2 = Linear(max(1, width // reduction), width, rng)

    def __call__(self, x):
        h = T.leaky_relu(self.lin1(x), LEAKY_SLOPE)
        h = self.lin2(h)
        gate = T.sigmoid(self.se2(T.leaky_relu(self.se1(h), LEAKY_SLOPE)))
        return x + gate * h


class Dropout(Module):
    """Inverted dropout with a deterministic per-seed mask (active in training)."""

    def __init__(self, p=0.1):
        self.p = p
        self.training = False
        self.rng = None

    def __call__(self, x):
        if not self.training or self.p <= 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("dropout in training mode needs an rng (set_training)")
        keep = 1.0 - self.p
        mask = (self.rng.random(x.values.shape) < keep) / keep
        return x * Tensor(mask)


class MLP(Module):
    """Per-point MLP: Linear -> (norm) -> LeakyReLU stack over the last axis."""

    def __init__(self, widths, rng, norm="group", cond_dim=None, groups=8):
        self.layers = []
        self.norms = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            self.layers.append(Linear(w_in, w_out, rng))
            if norm == "group":
                self.norms.append(GroupNorm(w_out, groups=min(groups, w_out)))
            elif norm == "ada":
                self.norms.append(AdaptiveGroupNorm(w_out, cond_dim, rng, groups=min(groups, w_out)))
            else:
                self.norms.append(None)

    def __call__(self, x, cond=None):
        for lin, norm in zip(self.layers, self.norms):
            x = lin(x)
            if isinstance(norm, AdaptiveGroupNorm):
                x = norm(x, cond)
            elif norm is not None:
                x = norm(x)
            x = T.leaky_relu(x, LEAKY_SLOPE)
        return x
