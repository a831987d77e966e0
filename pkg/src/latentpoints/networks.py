"""Concrete networks: shape-latent encoder, latent-point encoder, decoder, and
the two denoising priors.

All point processing uses shared per-point MLPs with global mean-pooled
context and adaptive group-norm conditioning on the shape latent, which keeps
the conditioning topology and permutation symmetry of the reference design
without 3-D convolutions. Encoders apply the -6 log-std offset and the 0.01
weighted skip so a fresh model is close to an identity map end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import tensor as T
from .nn.layers import (
    LEAKY_SLOPE,
    AdaptiveGroupNorm,
    Dropout,
    GroupNorm,
    Linear,
    Module,
    ResSEBlock,
    SinusoidalEmbedding,
)
from .nn.tensor import Tensor

VARIANCE_OFFSET = 6.0
SKIP_WEIGHT = 0.01


@dataclass
class NetConfig:
    d_z: int = 64
    d_h: int = 1
    n_points: int = 256
    enc_widths: tuple = (32, 64, 128)
    point_widths: tuple = (64, 128, 128)
    dec_widths: tuple = (64, 128, 128)
    prior_width: int = 256
    prior_blocks: int = 8
    h_prior_widths: tuple = (64, 128, 128, 128)
    t_dim_z: int = 128
    t_dim_h: int = 64
    groups: int = 8
    dropout: float = 0.1

    @property
    def h_channels(self):
        return 3 + self.d_h


def _bcast_ctx(ctx, n_points):
    """[B, C] -> [B, N, C] broadcast onto the point axis."""
    b, c = ctx.shape
    return T.broadcast_to(T.reshape(ctx, (b, 1, c)), (b, n_points, c))


class ShapeEncoder(Module):
    """Per-point MLP + max pool + linear head to (mean, log-std) of z."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        widths = (3,) + tuple(cfg.enc_widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [GroupNorm(w, groups=cfg.groups) for w in cfg.enc_widths]
        self.dropout = Dropout(cfg.dropout)
        self.head = Linear(cfg.enc_widths[-1], 2 * cfg.d_z, rng)

    def __call__(self, x):
        if x.shape[1] < 1:
            raise ValueError("empty point cloud")
        h = x
        for lin, norm in zip(self.layers, self.norms):
            h = T.leaky_relu(norm(lin(h)), LEAKY_SLOPE)
        pooled = T.reduce_max(h, axis=1)
        out = self.head(self.dropout(pooled))
        mu = out[:, : self.cfg.d_z]
        log_std = out[:, self.cfg.d_z:] - VARIANCE_OFFSET
        return mu, log_std


class PointEncoder(Module):
    """Per-point MLP conditioned on z via AdaGN, global mean context, and a
    0.01-weighted skip from the clean coordinates into the latent means."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        widths = (3,) + tuple(cfg.point_widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [AdaptiveGroupNorm(w, cfg.d_z, rng, groups=cfg.groups) for w in cfg.point_widths]
        self.dropout = Dropout(cfg.dropout)
        self.head = Linear(2 * cfg.point_widths[-1], 2 * cfg.h_channels, rng)

    def __call__(self, x, z):
        h = x
        for lin, norm in zip(self.layers, self.norms):
            h = T.leaky_relu(norm(lin(h), z), LEAKY_SLOPE)
        ctx = h.mean(axis=1)
        h = T.concat([h, _bcast_ctx(ctx, x.shape[1])], axis=-1)
        out = self.head(self.dropout(h))
        c = self.cfg.h_channels
        raw_mu, raw_log_std = out[:, :, :c], out[:, :, c:]
        mu_xyz = x + SKIP_WEIGHT * raw_mu[:, :, :3]
        mu = T.concat([mu_xyz, raw_mu[:, :, 3:]], axis=-1) if self.cfg.d_h else mu_xyz
        return mu, raw_log_std - VARIANCE_OFFSET


class Decoder(Module):
    """Maps latent points back to xyz displacements around their coordinates."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        widths = (cfg.h_channels,) + tuple(cfg.dec_widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [AdaptiveGroupNorm(w, cfg.d_z, rng, groups=cfg.groups) for w in cfg.dec_widths]
        self.dropout = Dropout(cfg.dropout)
        self.head = Linear(2 * cfg.dec_widths[-1], 3, rng)

    def __call__(self, h0, z):
        h = h0
        for lin, norm in zip(self.layers, self.norms):
            h = T.leaky_relu(norm(lin(h), z), LEAKY_SLOPE)
        ctx = h.mean(axis=1)
        h = T.concat([h, _bcast_ctx(ctx, h0.shape[1])], axis=-1)
        out = self.head(self.dropout(h))
        return h0[:, :, :3] + SKIP_WEIGHT * out


class ShapePrior(Module):
    """Noise-residual network for the shape latent: input linear, stack of
    ResSE blocks with the projected time embedding added before each block,
    output linear (zero-initialized so the initial residual vanishes)."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        w = cfg.prior_width
        self.t_embed = SinusoidalEmbedding(cfg.t_dim_z)
        self.t_lin1 = Linear(cfg.t_dim_z, w, rng)
        self.t_lin2 = Linear(w, w, rng)
        self.inp = Linear(cfg.d_z, w, rng)
        self.blocks = [ResSEBlock(w, rng) for _ in range(cfg.prior_blocks)]
        self.dropouts = [Dropout(cfg.dropout) for _ in range(cfg.prior_blocks)]
        self.out = Linear(w, cfg.d_z, rng, zero_init=True)

    def __call__(self, z_t, t):
        temb = self.t_lin2(T.leaky_relu(self.t_lin1(self.t_embed(t)), LEAKY_SLOPE))
        h = self.inp(z_t)
        for block, drop in zip(self.blocks, self.dropouts):
            h = block(drop(h + temb))
        return self.out(h)


class PointPrior(Module):
    """Noise-residual network for latent points, conditioned on z0 through
    every AdaGN and on t by concatenating the time embedding at each stage.
    Mean-pooled context re-enters before the last two stages so the per-point
    updates can coordinate globally."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        c = cfg.h_channels
        wt = cfg.t_dim_h
        self.t_embed = SinusoidalEmbedding(wt)
        self.t_lin1 = Linear(wt, wt, rng)
        self.t_lin2 = Linear(wt, wt, rng)
        w1, w2, w3, w4 = cfg.h_prior_widths
        self.lin1 = Linear(c + wt, w1, rng)
        self.agn1 = AdaptiveGroupNorm(w1, cfg.d_z, rng, groups=cfg.groups)
        self.lin2 = Linear(w1 + wt, w2, rng)
        self.agn2 = AdaptiveGroupNorm(w2, cfg.d_z, rng, groups=cfg.groups)
        self.lin3 = Linear(2 * w2 + wt, w3, rng)
        self.agn3 = AdaptiveGroupNorm(w3, cfg.d_z, rng, groups=cfg.groups)
        self.lin4 = Linear(2 * w3 + wt, w4, rng)
        self.agn4 = AdaptiveGroupNorm(w4, cfg.d_z, rng, groups=cfg.groups)
        self.dropout = Dropout(cfg.dropout)
        self.out = Linear(w4, c, rng, zero_init=True)

    def __call__(self, h_t, z0, t):
        n = h_t.shape[1]
        temb = self.t_lin2(T.leaky_relu(self.t_lin1(self.t_embed(t)), LEAKY_SLOPE))
        temb_pts = _bcast_ctx(temb, n)
        h = T.leaky_relu(self.agn1(self.lin1(T.concat([h_t, temb_pts], -1)), z0), LEAKY_SLOPE)
        h = T.leaky_relu(self.agn2(self.lin2(T.concat([h, temb_pts], -1)), z0), LEAKY_SLOPE)
        h = T.concat([h, _bcast_ctx(h.mean(axis=1), n), temb_pts], axis=-1)
        h = T.leaky_relu(self.agn3(self.lin3(h), z0), LEAKY_SLOPE)
        h = T.concat([h, _bcast_ctx(h.mean(axis=1), n), temb_pts], axis=-1)
        h = T.leaky_relu(self.agn4(self.lin4(h), z0), LEAKY_SLOPE)
        return self.out(self.dropout(h))


def build_vae_nets(cfg, seed):
    """(shape encoder, point encoder, decoder) with deterministic init."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return ShapeEncoder(cfg, rng), PointEncoder(cfg, rng), Decoder(cfg, rng)


def build_prior_nets(cfg, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return ShapePrior(cfg, rng), PointPrior(cfg, rng)
