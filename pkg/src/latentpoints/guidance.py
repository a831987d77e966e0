"""Diffuse-denoise, voxelization, noise corruption, voxel IOU, and encoder
fine-tuning for voxel-guided synthesis and multimodal denoising.

Fine-tuning freezes the decoder and both priors; only the encoders learn to
map corrupted inputs to latents that decode to the clean shapes. Gaussian and
uniform noise keep the per-point L1 reconstruction; voxel and outlier inputs
use CD (L1 inner distance) + EMD on the decoder mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import diffuse
from .metrics import chamfer_l1_loss, chamfer_sq, emd_loss
from .nn import Adam, swap_in_ema
from .nn import tensor as T
from .nn.tensor import Tensor
from .priors import Sampler
from .vae import VaeModel

__all__ = [
    "VoxelGrid",
    "NoiseSpec",
    "FinetuneConfig",
    "voxelize",
    "voxel_surface_points",
    "voxel_iou",
    "perturb",
    "diffuse_denoise",
    "finetune_encoders",
    "guided_synthesis",
    "grid_to_text",
    "grid_from_text",
]

DEFAULT_VOXEL_SIZE = 0.6


@dataclass(frozen=True)
class VoxelGrid:
    voxel_size: float
    origin: tuple
    occupied: frozenset  # of (i, j, k) int tuples

    def __len__(self):
        return len(self.occupied)


@dataclass
class NoiseSpec:
    kind: str  # normal | uniform | outlier
    max_std: float = 0.25
    uniform_range: float = 0.25
    outlier_frac: float = 0.5

    def __post_init__(self):
        if self.kind not in ("normal", "uniform", "outlier"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not (0.0 < self.max_std <= 1.0 and 0.0 < self.uniform_range <= 1.0):
            raise ValueError("noise parameters outside documented ranges")
        if not 0.0 < self.outlier_frac <= 1.0:
            raise ValueError("outlier fraction outside (0, 1]")


def voxelize(pc, voxel_size=DEFAULT_VOXEL_SIZE, origin=None):
    """Occupied voxel set of a cloud; the lattice is centered on the cloud's
    bounding box unless an explicit origin is given."""
    pc = np.asarray(pc, dtype=np.float64)
    if pc.ndim != 2 or len(pc) == 0:
        raise ValueError("voxelize needs a non-empty [n, 3] cloud")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    lo, hi = pc.min(axis=0), pc.max(axis=0)
    if origin is None:
        center = 0.5 * (lo + hi)
        n_cells = np.maximum(1, np.ceil((hi - lo) / voxel_size)).astype(int)
        origin = center - 0.5 * n_cells * voxel_size
    origin = np.asarray(origin, dtype=np.float64)
    idx = np.floor((pc - origin) / voxel_size).astype(int)
    occupied = frozenset(map(tuple, idx.tolist()))
    return VoxelGrid(voxel_size=float(voxel_size), origin=tuple(origin), occupied=occupied)


_FACE_DIRS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def exterior_faces(grid):
    """Faces not shared between two occupied voxels, as (cell, direction)."""
    faces = []
    for cell in sorted(grid.occupied):
        for d in _FACE_DIRS:
            neighbor = (cell[0] + d[0], cell[1] + d[1], cell[2] + d[2])
            if neighbor not in grid.occupied:
                faces.append((cell, d))
    return faces


def voxel_surface_points(grid, n, rng):
    """Distribute n points over exterior faces, a similar count per face."""
    if len(grid) == 0:
        raise ValueError("empty voxel grid")
    faces = exterior_faces(grid)
    vs = grid.voxel_size
    origin = np.asarray(grid.origin)
    if n < len(faces):
        chosen = rng.choice(len(faces), size=n, replace=False)
        counts = np.zeros(len(faces), dtype=int)
        counts[chosen] = 1
    else:
        counts = np.full(len(faces), n // len(faces), dtype=int)
        extra = rng.choice(len(faces), size=n - counts.sum(), replace=False)
        counts[extra] += 1
    pts = np.empty((n, 3))
    cursor = 0
    for (cell, d), count in zip(faces, counts):
        if count == 0:
            continue
        cell = np.asarray(cell, dtype=np.float64)
        axis = int(np.flatnonzero(d)[0])
        side = 1.0 if d[axis] > 0 else 0.0
        u = rng.uniform(0.0, 1.0, size=(count, 2))
        block = np.empty((count, 3))
        block[:, axis] = origin[axis] + (cell[axis] + side) * vs
        others = [a for a in range(3) if a != axis]
        block[:, others[0]] = origin[others[0]] + (cell[others[0]] + u[:, 0]) * vs
        block[:, others[1]] = origin[others[1]] + (cell[others[1]] + u[:, 1]) * vs
        pts[cursor:cursor + count] = block
        cursor += count
    return pts


def voxel_iou(a, b):
    """|intersection| / |union| of two aligned grids."""
    if a.voxel_size != b.voxel_size:
        raise ValueError("voxel grids have different cell sizes")
    if not np.allclose(a.origin, b.origin, atol=1e-9):
        raise ValueError("voxel grids have different origins")
    union = a.occupied | b.occupied
    if not union:
        return 1.0
    return len(a.occupied & b.occupied) / len(union)


def perturb(pc, spec, rng):
    """Corrupt a cloud per the noise protocol; the input is never mutated."""
    pc = np.asarray(pc, dtype=np.float64)
    n = len(pc)
    if spec.kind == "normal":
        stds = rng.uniform(0.0, spec.max_std, size=pc.shape)
        return pc + stds * rng.standard_normal(pc.shape)
    if spec.kind == "uniform":
        return pc + rng.uniform(0.0, spec.uniform_range, size=pc.shape)
    # outlier: replace floor(frac*n) points, keeping ceil(n/2) at 0.5
    n_replace = int(np.floor(spec.outlier_frac * n))
    idx = rng.choice(n, size=n_replace, replace=False)
    lo, hi = pc.min(axis=0), pc.max(axis=0)
    out = pc.copy()
    out[idx] = rng.uniform(lo, hi, size=(n_replace, 3))
    return out


def diffuse_denoise(bundle, z0, h0, tau, rng, sampler=None):
    """Diffuse both latents tau steps, then denoise (z first, h given z-bar).

    tau=0 returns the inputs unchanged. Uses EMA weights for denoising.
    """
    sched = bundle.sched
    if not 0 <= tau <= sched.T:
        raise ValueError(f"tau={tau} outside 0..{sched.T}")
    if tau == 0:
        return z0, h0
    z_tau = diffuse(z0 * bundle.scale_z, tau, rng.standard_normal(np.shape(z0)), sched)
    h_tau = diffuse(h0 * bundle.scale_h, tau, rng.standard_normal(np.shape(h0)), sched)
    bundle.z_prior.set_training(False)
    bundle.h_prior.set_training(False)
    with swap_in_ema(bundle.z_prior, bundle.ema_z), swap_in_ema(bundle.h_prior, bundle.ema_h):
        z_w, h_w = bundle.denoise_latents(z_tau, h_tau, tau, rng, sampler)
    return z_w / bundle.scale_z, h_w / bundle.scale_h


@dataclass
class FinetuneConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    lambda_kl: float = 0.5
    patience: int = 20


def _clone_vae(vae):
    twin = VaeModel(vae.cfg, seed=vae.seed)
    twin.load_state_arrays(vae.state_arrays())
    return twin


def _recon_loss(decoded, clean_t, loss_mode):
    if loss_mode == "l1":
        return T.absolute(decoded - clean_t).sum(axis=(1, 2)).mean()
    if loss_mode == "cd_emd":
        total = None
        b = decoded.shape[0]
        for i in range(b):
            item = chamfer_l1_loss(decoded[i], clean_t.values[i]) + emd_loss(
                decoded[i], clean_t.values[i]
            )
            total = item if total is None else total + item
        return total * (1.0 / b)
    raise ValueError(f"unknown loss mode {loss_mode!r}; use 'l1' or 'cd_emd'")


def finetune_encoders(vae, pairs_train, pairs_val, loss_mode, config, seed, log_hook=None):
    """Fine-tune encoder networks on (corrupted, clean) pairs with the decoder
    frozen; returns (fine-tuned model, log). Early-stops on validation
    reconstruction and restores the best encoder state."""
    model = _clone_vae(vae)
    decoder_before = {k: v.copy() for k, v in model.decoder.state_arrays().items()}
    x_tilde = np.stack([p[0] for p in pairs_train])
    x_clean = np.stack([p[1] for p in pairs_train])
    v_tilde = np.stack([p[0] for p in pairs_val])
    v_clean = np.stack([p[1] for p in pairs_val])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    enc_params = model.enc_shape.parameters() + model.enc_point.parameters()
    opt = Adam(enc_params, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    lam = config.lambda_kl
    log = []
    best_val = np.inf
    best_state = None
    since_best = 0
    for epoch in range(config.epochs):
        model.enc_shape.set_training(True, rng)
        model.enc_point.set_training(True, rng)
        model.decoder.set_training(False)
        order = rng.permutation(len(x_tilde))
        totals = {"loss": 0.0, "recon": 0.0}
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xt = Tensor(x_tilde[idx])
            xc = Tensor(x_clean[idx])
            opt.zero_grad()
            q_z = model.posterior_z(xt)
            z0 = q_z.sample(rng)
            q_h = model.posterior_h(xt, z0)
            h0 = q_h.sample(rng)
            decoded = model.decode(h0, z0)
            recon = _recon_loss(decoded, xc, loss_mode)
            kl = q_z.kl_to_std_normal().mean() + q_h.kl_to_std_normal().mean()
            loss = recon + lam * kl
            loss.backward()
            opt.step()
            totals["loss"] += float(loss.values)
            totals["recon"] += float(recon.values)
            n_batches += 1
        model.enc_shape.set_training(False)
        model.enc_point.set_training(False)
        val = _validation_recon(model, v_tilde, v_clean, loss_mode)
        record = {k: v / n_batches for k, v in totals.items()}
        record.update(epoch=epoch, val_recon=val)
        log.append(record)
        if log_hook:
            log_hook(record)
        if val < best_val - 1e-12:
            best_val = val
            best_state = {
                "shape": {k: v.copy() for k, v in model.enc_shape.state_arrays().items()},
                "point": {k: v.copy() for k, v in model.enc_point.state_arrays().items()},
            }
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    if best_state is not None:
        model.enc_shape.load_state_arrays(best_state["shape"])
        model.enc_point.load_state_arrays(best_state["point"])
    decoder_after = model.decoder.state_arrays()
    for k, v in decoder_before.items():
        assert np.array_equal(v, decoder_after[k]), f"frozen decoder mutated: {k}"
    return model, log


def _validation_recon(model, v_tilde, v_clean, loss_mode):
    decoded = model.reconstruct(Tensor(v_tilde)).values
    if loss_mode == "l1":
        return float(np.abs(decoded - v_clean).sum(axis=(1, 2)).mean())
    return float(np.mean([chamfer_sq(d, c) for d, c in zip(decoded, v_clean)]))


def guided_synthesis(model, bundle, x_tilde, tau, rng, sampler=None):
    """Encode a corrupted input with (fine-tuned) encoders, clean it up with
    diffuse-denoise, and decode. Returns one cloud per input."""
    x = np.asarray(x_tilde, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    model.set_training(False)
    z0_t, h0_t = model.encode_samples(Tensor(x), rng)
    z_bar, h_bar = diffuse_denoise(bundle, z0_t.values, h0_t.values, tau, rng, sampler)
    out = model.decode(Tensor(h_bar), Tensor(z_bar)).values
    return out[0] if squeeze else out


def grid_to_text(grid):
    lines = [f"{i} {j} {k}" for i, j, k in sorted(grid.occupied)]
    return "\n".join(lines) + "\n"


def grid_from_text(text, voxel_size, origin):
    cells = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {line_no}: expected 'i j k', got {line!r}")
        cells.append(tuple(int(p) for p in parts))
    return VoxelGrid(voxel_size=float(voxel_size), origin=tuple(origin),
                     occupied=frozenset(cells))
