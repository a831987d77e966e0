"""First-stage training: hierarchical VAE with KL annealing, reparameterized
posteriors, and an L1 (unit-scale Laplace) reconstruction likelihood.

The loss per shape is sum |x_hat - x| + lambda * (KL_z + KL_h); the same
annealed lambda weights both KL terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .networks import Decoder, NetConfig, PointEncoder, ShapeEncoder, build_vae_nets
from .nn import Adam, Module
from .nn import tensor as T
from .nn.tensor import NumericError, Tensor

__all__ = [
    "HVaeConfig",
    "PosteriorGaussian",
    "VaeModel",
    "TrainingDiverged",
    "kl_std_normal",
    "kl_anneal",
    "elbo_loss",
    "train_vae",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class HVaeConfig:
    d_z: int = 64
    d_h: int = 1
    n_points: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 16
    epochs: int = 2000
    kl_start: float = 1e-7
    kl_end: float = 0.5
    anneal_fraction: float = 0.5
    dropout: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.kl_start <= self.kl_end:
            raise ValueError("need 0 < kl_start <= kl_end")
        if not 0.0 < self.anneal_fraction <= 1.0:
            raise ValueError("anneal_fraction must be in (0, 1]")

    def net_config(self):
        return NetConfig(d_z=self.d_z, d_h=self.d_h, n_points=self.n_points,
                         dropout=self.dropout)


class PosteriorGaussian:
    """Diagonal Gaussian with reparameterized sampling."""

    def __init__(self, mean, log_std):
        self.mean = mean
        self.log_std = log_std

    def sample(self, rng):
        eps = rng.standard_normal(self.mean.shape)
        return self.mean + T.exp(self.log_std) * Tensor(eps)

    def kl_to_std_normal(self):
        """KL to N(0, I) summed over latent dims, one value per batch element."""
        mu, ls = self.mean, self.log_std
        axes = tuple(range(1, mu.ndim))
        term = mu * mu + T.exp(ls * 2.0) - 1.0 - ls * 2.0
        return (term * 0.5).sum(axis=axes)


def kl_std_normal(q):
    """Total KL(q || N(0,I)) as a scalar tensor (summed over everything)."""
    return q.kl_to_std_normal().sum()


def kl_anneal(epoch, config):
    """Linear ramp from kl_start to kl_end over the first anneal_fraction of
    training, constant afterwards."""
    ramp = config.anneal_fraction * config.epochs
    progress = 1.0 if ramp <= 0 else min(1.0, epoch / ramp)
    return config.kl_start + (config.kl_end - config.kl_start) * progress


class VaeModel(Module):
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.seed = seed
        self.enc_shape, self.enc_point, self.decoder = build_vae_nets(cfg.net_config(), seed)

    # posteriors ------------------------------------------------------------

    def posterior_z(self, x):
        mu, log_std = self.enc_shape(x)
        return PosteriorGaussian(mu, log_std)

    def posterior_h(self, x, z0):
        mu, log_std = self.enc_point(x, z0)
        return PosteriorGaussian(mu, log_std)

    def decode(self, h0, z0):
        return self.decoder(h0, z0)

    def encode_means(self, x):
        """Posterior means (z0, h0) without sampling; x is [B, N, 3]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        q_z = self.posterior_z(x)
        q_h = self.posterior_h(x, q_z.mean)
        return q_z.mean, q_h.mean

    def encode_samples(self, x, rng):
        x = x if isinstance(x, Tensor) else Tensor(x)
        q_z = self.posterior_z(x)
        z0 = q_z.sample(rng)
        q_h = self.posterior_h(x, z0)
        h0 = q_h.sample(rng)
        return z0, h0

    def reconstruct(self, x, rng=None):
        """Decode from posterior means (or samples when rng is given)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if rng is None:
            z0, h0 = self.encode_means(x)
        else:
            z0, h0 = self.encode_samples(x, rng)
        return self.decode(h0, z0)

    def set_training(self, training, rng=None):
        for net in (self.enc_shape, self.enc_point, self.decoder):
            net.set_training(training, rng)


def elbo_loss(model, x, lambda_z, lambda_h, rng):
    """Negated modified ELBO and its parts for a batch x [B, N, 3]."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    q_z = model.posterior_z(xt)
    z0 = q_z.sample(rng)
    q_h = model.posterior_h(xt, z0)
    h0 = q_h.sample(rng)
    recon = model.decode(h0, z0)
    l1 = T.absolute(recon - xt).sum(axis=(1, 2))
    kl_z = q_z.kl_to_std_normal()
    kl_h = q_h.kl_to_std_normal()
    loss = (l1 + lambda_z * kl_z + lambda_h * kl_h).mean()
    if not np.isfinite(loss.values):
        raise NumericError(
            "non-finite ELBO: "
            f"recon={l1.values.mean():.4g} kl_z={kl_z.values.mean():.4g} "
            f"kl_h={kl_h.values.mean():.4g} lambda=({lambda_z:.3g},{lambda_h:.3g})"
        )
    parts = {
        "recon": float(l1.values.mean()),
        "kl_z": float(kl_z.values.mean()),
        "kl_h": float(kl_h.values.mean()),
    }
    return loss, parts


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_vae(dataset, config, seed, log_hook=None, model=None, resume=None):
    """Train the hierarchical VAE; returns (model, per-epoch log records).

    resume, when given, is (optimizer arrays, optimizer step, start_epoch) and
    continues the epoch counter from a loaded checkpoint.
    """
    shapes = dataset.subset("train")
    if not shapes:
        raise ValueError("empty training set")
    stack = np.stack(shapes)
    model = model or VaeModel(config, seed=seed)
    start_epoch = 0
    seq = [seed, 2]
    if resume is not None:
        start_epoch = resume[2]
        seq = [seed, 2, start_epoch]
    rng = np.random.default_rng(np.random.SeedSequence(seq))
    opt = Adam(model.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    if resume is not None:
        opt.load_state_arrays([n for n, _ in model.named_parameters()], resume[0], resume[1])
    log = []
    initial_parts = None
    bad_epochs = 0
    for epoch in range(start_epoch, config.epochs):
        lam = kl_anneal(epoch, config)
        model.set_training(True, rng)
        totals = {"loss": 0.0, "recon": 0.0, "kl_z": 0.0, "kl_h": 0.0}
        n_batches = 0
        for idx in _batches(len(shapes), config.batch_size, rng):
            opt.zero_grad()
            loss, parts = elbo_loss(model, stack[idx], lam, lam, rng)
            loss.backward()
            opt.step()
            totals["loss"] += float(loss.values)
            for k in parts:
                totals[k] += parts[k]
            n_batches += 1
        model.set_training(False)
        record = {k: v / n_batches for k, v in totals.items()}
        record.update(epoch=epoch, lam=lam)
        log.append(record)
        if log_hook:
            log_hook(record)
        if initial_parts is None:
            initial_parts = record
        # loss values under different lambdas are not comparable; rescale the
        # initial epoch's parts to the current lambda before comparing
        reference = initial_parts["recon"] + lam * (initial_parts["kl_z"] + initial_parts["kl_h"])
        if record["loss"] > 10.0 * max(reference, 1e-12):
            bad_epochs += 1
            if bad_epochs >= 3:
                raise TrainingDiverged(
                    f"loss {record['loss']:.4g} above 10x the initial model's "
                    f"loss {reference:.4g} at lambda={lam:.3g} for 3 consecutive "
                    f"epochs (epoch {epoch})"
                )
        else:
            bad_epochs = 0
    names = [n for n, _ in model.named_parameters()]
    model.last_opt_state = (opt.state_arrays(names), opt.step_count)
    return model, log
