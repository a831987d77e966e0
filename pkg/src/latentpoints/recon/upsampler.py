"""Point upsampler and the end-to-end surface reconstruction pipeline:
upsample -> scatter -> spectral Poisson solve -> normalize -> marching cubes.

The upsampler predicts k offset points and normals per input point; offsets
are absolute displacements bounded by tanh scaling, normals are renormalized
to unit length. Training minimizes the squared distance between the solved
indicator grid and a pseudo-ground-truth grid computed from dense clean
oriented points with the same solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import Adam, GroupNorm, Linear, Module
from ..nn import tensor as T
from ..nn.layers import LEAKY_SLOPE
from ..nn.tensor import Tensor
from .field import GridGeometry, scatter_field
from .mcubes import marching_cubes
from .poisson import normalize_indicator, poisson_solve

__all__ = [
    "UpsamplerNet",
    "SapConfig",
    "indicator_from_oriented",
    "reconstruct",
    "train_upsampler",
    "finetune_on_lion",
]


@dataclass
class SapConfig:
    resolution: int = 64
    train_resolution: int = 32
    sigma_smooth: float = 2.0
    k: int = 7
    offset_scale: float = 0.1
    noise_std: float = 0.005
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 200
    widths: tuple = (64, 128, 128)
    finetune_steps: tuple = (20, 30, 35, 40, 50)
    finetune_variants: int = 4
    finetune_epochs: int = 100


class UpsamplerNet(Module):
    """Per-point MLP with a global mean-pooled context predicting k offset
    points and k unit normals per input point."""

    def __init__(self, rng, k=7, widths=(64, 128, 128), offset_scale=0.1):
        self.k = k
        self.offset_scale = offset_scale
        dims = (3,) + tuple(widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [GroupNorm(w, groups=8) for w in widths]
        self.head = Linear(2 * widths[-1], k * 6, rng)

    def __call__(self, pc):
        """pc: [M, 3] Tensor or array -> (points [k*M, 3], normals [k*M, 3])."""
        x = T.as_tensor(pc)
        m = x.shape[0]
        h = x
        for lin, norm in zip(self.layers, self.norms):
            h = T.leaky_relu(norm(lin(h)), LEAKY_SLOPE)
        ctx = h.mean(axis=0, keepdims=True)
        h = T.concat([h, T.broadcast_to(ctx, (m, ctx.shape[1]))], axis=-1)
        out = self.head(h).reshape(m * self.k, 6)
        offsets = T.tanh(out[:, :3]) * self.offset_scale
        base = T.broadcast_to(
            T.reshape(x, (m, 1, 3)), (m, self.k, 3)
        ).reshape(m * self.k, 3)
        points = base + offsets
        raw_n = out[:, 3:]
        norm_len = T.sqrt((raw_n * raw_n).sum(axis=1, keepdims=True) + 1e-12)
        normals = raw_n / norm_len
        return points, normals


def indicator_from_oriented(points, normals, resolution, sigma_smooth=2.0, geom=None):
    """Dense-point pseudo-ground-truth route: scatter, solve, normalize."""
    geom = geom or GridGeometry(resolution)
    V, n_clamped = scatter_field(geom, points, normals, sigma_smooth)
    chi = poisson_solve(geom, V)
    chi = normalize_indicator(geom, chi, np.asarray(
        points.values if isinstance(points, Tensor) else points))
    return chi, geom, n_clamped


def reconstruct(pc, net, resolution=64, sigma_smooth=2.0, normals=None, iso=0.0):
    """Full reconstruction of a cloud [M, 3] into a TriangleMesh.

    With a net, the upsampler predicts points and normals; passing explicit
    normals bypasses it (analytic tests and clouds with known orientation).
    """
    pc = np.asarray(pc, dtype=np.float64)
    if normals is not None:
        pts, nrm = pc, np.asarray(normals, dtype=np.float64)
    else:
        if net is None:
            raise ValueError("reconstruct needs either a net or explicit normals")
        net.set_training(False)
        pts_t, nrm_t = net(pc)
        pts, nrm = pts_t.values, nrm_t.values
    chi, geom, _ = indicator_from_oriented(pts, nrm, resolution, sigma_smooth)
    return marching_cubes(chi.values, iso, origin=geom.origin, spacing=geom.spacing)


def _grid_loss(net, noisy_pc, chi_gt, geom, sigma_smooth):
    pts, nrm = net(noisy_pc)
    V, _ = scatter_field(geom, pts, nrm, sigma_smooth)
    chi = poisson_solve(geom, V)
    chi = normalize_indicator(geom, chi, pts.values)
    diff = chi - Tensor(chi_gt)
    return (diff * diff).mean()


def train_upsampler(net, dataset, config, seed, log_hook=None):
    """dataset: list of (noisy cloud [M,3], pseudo-GT grid [r,r,r]) pairs.

    Grids must all share the training geometry (config.train_resolution).
    """
    geom = GridGeometry(config.train_resolution)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    opt = Adam(net.parameters(), lr=config.lr)
    log = []
    initial = None
    for epoch in range(config.epochs):
        net.set_training(True, rng)
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = None
            for i in idx:
                noisy, chi_gt = dataset[i]
                item = _grid_loss(net, noisy, chi_gt, geom, config.sigma_smooth)
                loss = item if loss is None else loss + item
            loss = loss * (1.0 / len(idx))
            if not np.isfinite(loss.values):
                raise RuntimeError(f"non-finite upsampler loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.values) * len(idx)
        net.set_training(False)
        record = {"epoch": epoch, "loss": total / len(dataset)}
        log.append(record)
        if log_hook:
            log_hook(record)
        if initial is None:
            initial = record["loss"]
        if record["loss"] > 100.0 * max(initial, 1e-12):
            raise RuntimeError("upsampler training diverged")
    return net, log


def build_sap_pairs(dataset, config, seed):
    """(noisy cloud, pseudo-GT grid) pairs from clean oriented shapes."""
    if dataset.normals is None:
        raise ValueError("SAP training needs normals; generate with with_normals=True")
    geom = GridGeometry(config.train_resolution)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    pairs = []
    for idx in dataset.split["train"]:
        pc = dataset.shapes[idx]
        chi, _, _ = indicator_from_oriented(
            pc, dataset.normals[idx], config.train_resolution,
            config.sigma_smooth, geom=geom,
        )
        noisy = pc + config.noise_std * rng.standard_normal(pc.shape)
        pairs.append((noisy, chi.values))
    return pairs


def build_lion_pairs(vae, bundle, dataset, config, seed):
    """Fine-tuning pairs: encode -> diffuse-denoise -> decode variants of each
    clean shape, with its pseudo-GT grid repeated across the variants. The
    step count is drawn per variant from config.finetune_steps."""
    from ..guidance import diffuse_denoise

    if dataset.normals is None:
        raise ValueError("SAP fine-tuning needs normals on the clean dataset")
    geom = GridGeometry(config.train_resolution)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    steps = list(config.finetune_steps)
    pairs = []
    taus = []
    for idx in dataset.split["train"]:
        pc = dataset.shapes[idx]
        chi, _, _ = indicator_from_oriented(
            pc, dataset.normals[idx], config.train_resolution,
            config.sigma_smooth, geom=geom,
        )
        z0, h0 = [t.values for t in vae.encode_samples(pc[None], rng)]
        for _ in range(config.finetune_variants):
            tau = steps[rng.integers(len(steps))]
            taus.append(tau)
            z_bar, h_bar = diffuse_denoise(bundle, z0, h0, tau, rng)
            cloud = vae.decode(Tensor(h_bar), Tensor(z_bar)).values[0]
            pairs.append((cloud, chi.values))
    return pairs, taus


def finetune_on_lion(net, vae, bundle, dataset, config, seed, log_hook=None):
    """Fine-tune the upsampler on LION-generated noisy variants (same loss)."""
    pairs, _ = build_lion_pairs(vae, bundle, dataset, config, seed)
    cfg = SapConfig(**{**config.__dict__, "epochs": config.finetune_epochs})
    return train_upsampler(net, pairs, cfg, seed + 1, log_hook=log_hook)
