"""Second-stage training of the two latent denoising priors, hierarchical
generation, and deterministic ODE-based encoding and interpolation.

The VAE is frozen throughout. Both priors use the mixed score
parametrization: eps = sigma_t * x_t + residual network output. Generation
uses the parameter EMAs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    ddim_step,
    ddim_subsequence,
    ddpm_step,
    make_linear_schedule,
    sm_loss,
)
from .networks import NetConfig, PointPrior, ShapePrior, build_prior_nets
from .nn import Adam, EmaState, swap_in_ema
from .nn import tensor as T
from .nn.tensor import Tensor
from .ode import rk45_integrate
from .vae import TrainingDiverged

__all__ = [
    "PriorConfig",
    "PriorBundle",
    "train_priors",
    "slerp",
    "spectral_penalty",
]

ODE_T_MIN = 1e-5


@dataclass
class PriorConfig:
    lr: float = 2e-4
    weight_decay: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 16
    epochs: int = 800
    warmup_epochs: int = 20
    ema_decay: float = 0.9999
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    prior_width: int = 256
    prior_blocks: int = 8
    h_widths: tuple = (64, 128, 128, 128)
    t_dim_z: int = 128
    t_dim_h: int = 64
    dropout: float = 0.1
    spectral_reg: float = 0.0  # 1e-2 when enabled; off by default at desk scale


def slerp(a, b, s):
    """Spherical interpolation on the Gaussian shell: sqrt(s)*a + sqrt(1-s)*b."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation parameter {s} outside [0, 1]")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("endpoints must share a shape")
    return np.sqrt(s) * a + np.sqrt(1.0 - s) * b


def spectral_penalty(modules, weight=1e-2, iters=3):
    """weight * sum of largest singular values of linear weights, estimated by
    power iteration; the iterates are held fixed (stop-gradient), so the
    gradient of each term is weight * u v^T."""
    from .nn.layers import Linear

    total = None
    for module in modules:
        for sub in module.modules():
            if not isinstance(sub, Linear):
                continue
            W = sub.weight.values
            v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
            for _ in range(iters):
                u = W @ v
                u /= max(np.linalg.norm(u), 1e-12)
                v = W.T @ u
                v /= max(np.linalg.norm(v), 1e-12)
            sigma = (T.linear(Tensor(v[None, :]), sub.weight) * Tensor(u[None, :])).sum()
            total = sigma if total is None else total + sigma
    if total is None:
        return Tensor(np.float64(0.0))
    return total * weight


class PriorBundle:
    """Frozen VAE + the two trained priors with their EMA states.

    The DDMs operate on whitened latents: scale_z/scale_h map encoder outputs
    to unit RMS so the analytic part of the mixed score is well matched; all
    public entry points unscale on the way out."""

    def __init__(self, vae, config, seed=0):
        self.vae = vae
        self.config = config
        self.seed = seed
        self.scale_z = 1.0
        self.scale_h = 1.0
        net_cfg = NetConfig(
            d_z=vae.cfg.d_z, d_h=vae.cfg.d_h, n_points=vae.cfg.n_points,
            prior_width=config.prior_width, prior_blocks=config.prior_blocks,
            h_prior_widths=tuple(config.h_widths),
            t_dim_z=config.t_dim_z, t_dim_h=config.t_dim_h, dropout=config.dropout,
        )
        self.z_prior, self.h_prior = build_prior_nets(net_cfg, seed)
        self.ema_z = EmaState(self.z_prior.parameters(), decay=config.ema_decay)
        self.ema_h = EmaState(self.h_prior.parameters(), decay=config.ema_decay)
        self.sched = make_linear_schedule(config.t_steps, config.beta_start, config.beta_end)

    def calibrate_scales(self, z0, h0):
        """Set the whitening scales from encoded training latents."""
        self.scale_z = 1.0 / max(float(np.sqrt(np.mean(z0 ** 2))), 1e-6)
        self.scale_h = 1.0 / max(float(np.sqrt(np.mean(h0 ** 2))), 1e-6)

    # -- eps predictions (mixed score) ---------------------------------------

    def eps_z(self, z_t, t_disc, sigma):
        """eps for the shape latent; z_t is [B, D_z] ndarray, t_disc per-batch."""
        residual = self.z_prior(Tensor(z_t), np.broadcast_to(t_disc, (len(z_t),)))
        return sigma * z_t + residual.values

    def eps_h(self, h_t, z0, t_disc, sigma):
        residual = self.h_prior(
            Tensor(h_t), Tensor(z0), np.broadcast_to(t_disc, (len(h_t),))
        )
        return sigma * h_t + residual.values

    # -- stochastic sampling chains -------------------------------------------

    def _chain(self, eps_fn, x, rng, sampler, t_start=None):
        sched = self.sched
        if sampler.kind == "ddpm":
            t_hi = sched.T if t_start is None else t_start
            for t in range(t_hi, 0, -1):
                eps = eps_fn(x, float(t), sched.sigma[t - 1])
                x = ddpm_step(x, eps, t, rng.standard_normal(x.shape), sched)
            return x
        seq = ddim_subsequence(sched.T, sampler.steps)
        if t_start is not None:
            seq = [t for t in seq if t < t_start] + [t_start]
        for hi, lo in zip(seq[::-1], seq[-2::-1] + [0]):
            eps = eps_fn(x, float(hi), sched.sigma[hi - 1])
            x = ddim_step(x, eps, hi, lo, sampler.eta, rng.standard_normal(x.shape), sched)
        return x

    def denoise_latents(self, z_from, h_from, tau, rng, sampler=None):
        """Run the reverse chains from step tau; z first, then h given z."""
        if tau is not None and tau <= 0:
            return z_from, h_from
        sampler = sampler or Sampler("ddpm")
        z_bar = self._chain(self.eps_z, z_from, rng, sampler, t_start=tau)
        h_bar = self._chain(
            lambda h, t, s: self.eps_h(h, z_bar, t, s), h_from, rng, sampler, t_start=tau
        )
        return z_bar, h_bar

    def generate(self, n, rng, sampler=None, return_latents=False):
        """Hierarchical sampling with EMA weights: z chain, then h | z, then decode."""
        sampler = sampler or Sampler("ddpm")
        cfg = self.vae.cfg
        z_T = rng.standard_normal((n, cfg.d_z))
        h_T = rng.standard_normal((n, cfg.n_points, 3 + cfg.d_h))
        self.vae.set_training(False)
        self.z_prior.set_training(False)
        self.h_prior.set_training(False)
        with swap_in_ema(self.z_prior, self.ema_z), swap_in_ema(self.h_prior, self.ema_h):
            z_w, h_w = self.denoise_latents(z_T, h_T, None, rng, sampler)
        z0, h0 = z_w / self.scale_z, h_w / self.scale_h
        clouds = self.vae.decode(Tensor(h0), Tensor(z0)).values
        if return_latents:
            return clouds, z0, h0
        return clouds

    # -- probability-flow ODE -------------------------------------------------

    def _ode_eps(self, eps_fn):
        sched = self.sched

        def rhs(x, t_cont):
            beta = sched.beta_rate(t_cont)
            _, sigma = sched.alpha_sigma_cont(t_cont)
            eps = eps_fn(x, t_cont * sched.T, sigma)
            return -0.5 * beta * (x - eps / sigma)

        return rhs

    def _ode_run(self, eps_fn, x, reverse):
        t0, t1 = (ODE_T_MIN, 1.0) if reverse else (1.0, ODE_T_MIN)
        return rk45_integrate(self._ode_eps(eps_fn), x, t0, t1, atol=1e-5, rtol=1e-5)

    def encode_to_prior(self, x):
        """Push posterior means through the generative ODE to t=1 encodings."""
        self.vae.set_training(False)
        self.z_prior.set_training(False)
        self.h_prior.set_training(False)
        xt = Tensor(np.asarray(x, dtype=np.float64))
        z0, h0 = self.vae.encode_means(xt)
        z_w, h_w = z0.values * self.scale_z, h0.values * self.scale_h
        with swap_in_ema(self.z_prior, self.ema_z), swap_in_ema(self.h_prior, self.ema_h):
            z1 = self._ode_run(self.eps_z, z_w, reverse=True)
            h1 = self._ode_run(lambda h, t, s: self.eps_h(h, z_w, t, s), h_w, reverse=True)
        return z1, h1

    def decode_from_prior(self, z1, h1, return_latents=False):
        """Deterministically generate latents from t=1 encodings and decode."""
        self.vae.set_training(False)
        self.z_prior.set_training(False)
        self.h_prior.set_training(False)
        with swap_in_ema(self.z_prior, self.ema_z), swap_in_ema(self.h_prior, self.ema_h):
            z_w = self._ode_run(self.eps_z, z1, reverse=False)
            h_w = self._ode_run(lambda h, t, s: self.eps_h(h, z_w, t, s), h1, reverse=False)
        z0, h0 = z_w / self.scale_z, h_w / self.scale_h
        cloud = self.vae.decode(Tensor(h0), Tensor(z0)).values
        if return_latents:
            return cloud, z0, h0
        return cloud

    def interpolate(self, xA, xB, steps):
        """Spherically interpolate prior encodings of two shapes and decode
        the deterministic generative ODE along the path (A to B)."""
        if steps < 2:
            raise ValueError("need at least 2 interpolation steps")
        zA, hA = self.encode_to_prior(xA[None] if xA.ndim == 2 else xA)
        zB, hB = self.encode_to_prior(xB[None] if xB.ndim == 2 else xB)
        clouds = []
        for k in range(steps):
            s = 1.0 - k / (steps - 1)
            z1 = slerp(zA, zB, s)
            h1 = slerp(hA, hB, s)
            clouds.append(self.decode_from_prior(z1, h1)[0])
        return clouds

    # -- persistence -----------------------------------------------------------

    def state_arrays(self):
        arrays = {
            "scale.z": np.array([self.scale_z]),
            "scale.h": np.array([self.scale_h]),
        }
        for prefix, module in (("z_prior", self.z_prior), ("h_prior", self.h_prior)):
            for name, p in module.named_parameters():
                arrays[f"{prefix}.{name}"] = p.values
        for prefix, module, ema in (
            ("ema_z", self.z_prior, self.ema_z),
            ("ema_h", self.h_prior, self.ema_h),
        ):
            for (name, _), shadow in zip(module.named_parameters(), ema.shadow):
                arrays[f"{prefix}.{name}"] = shadow
        return arrays

    def load_state_arrays(self, arrays):
        if "scale.z" in arrays:
            self.scale_z = float(arrays["scale.z"][0])
            self.scale_h = float(arrays["scale.h"][0])
        for prefix, module in (("z_prior", self.z_prior), ("h_prior", self.h_prior)):
            sub = {
                name[len(prefix) + 1:]: arr
                for name, arr in arrays.items()
                if name.startswith(prefix + ".")
            }
            module.load_state_arrays(sub)
        for prefix, module, ema in (
            ("ema_z", self.z_prior, self.ema_z),
            ("ema_h", self.h_prior, self.ema_h),
        ):
            for i, (name, p) in enumerate(module.named_parameters()):
                key = f"{prefix}.{name}"
                if key not in arrays:
                    raise KeyError(f"missing EMA tensor {key!r}")
                if arrays[key].shape != p.values.shape:
                    raise ValueError(f"shape mismatch for {key!r}")
                ema.shadow[i] = arrays[key].copy()


@dataclass
class Sampler:
    kind: str = "ddpm"
    steps: int = 1000
    eta: float = 0.5

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler {self.kind!r}")


def train_priors(dataset, vae, config, seed, log_hook=None, bundle=None, resume=None):
    """Train both latent priors on frozen-VAE posterior samples.

    resume, when given, is (optimizer arrays, optimizer step, start_epoch).
    """
    if vae is None:
        raise ValueError("train_priors requires a trained VAE")
    shapes = dataset.subset("train")
    if not shapes:
        raise ValueError("empty training set")
    stack = np.stack(shapes)
    bundle = bundle or PriorBundle(vae, config, seed=seed)
    sched = bundle.sched
    start_epoch = 0
    seq = [seed, 3]
    if resume is not None:
        start_epoch = resume[2]
        seq = [seed, 3, start_epoch]
    rng = np.random.default_rng(np.random.SeedSequence(seq))
    vae_params = vae.parameters()
    frozen = (
        np.concatenate([p.values.ravel() for p in vae_params]).copy()
        if vae_params else np.zeros(0)
    )
    if resume is None:
        # whiten the latent tiers so the diffusion operates on unit-RMS data
        cal_rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
        cal = stack[: min(len(shapes), 128)]
        vae.set_training(False)
        z_cal, h_cal = [t.values for t in vae.encode_samples(Tensor(cal), cal_rng)]
        bundle.calibrate_scales(z_cal, h_cal)

    params_z = bundle.z_prior.parameters()
    params_h = bundle.h_prior.parameters()
    opt = Adam(params_z + params_h, lr=config.lr, beta1=config.beta1,
               beta2=config.beta2, weight_decay=config.weight_decay)
    if resume is not None:
        names = [f"z_prior.{n}" for n, _ in bundle.z_prior.named_parameters()]
        names += [f"h_prior.{n}" for n, _ in bundle.h_prior.named_parameters()]
        opt.load_state_arrays(names, resume[0], resume[1])
    vae.set_training(False)
    log = []
    initial = None
    bad = 0
    for epoch in range(start_epoch, config.epochs):
        warm = min(1.0, (epoch + 1) / max(1, config.warmup_epochs))
        opt.lr = config.lr * warm
        bundle.z_prior.set_training(True, rng)
        bundle.h_prior.set_training(True, rng)
        totals = {"loss_z": 0.0, "loss_h": 0.0}
        n_batches = 0
        order = rng.permutation(len(shapes))
        for start in range(0, len(shapes), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = stack[idx]
            z0_t, h0_t = vae.encode_samples(Tensor(x), rng)
            z0 = z0_t.values * bundle.scale_z
            h0 = h0_t.values * bundle.scale_h
            b = len(idx)
            t = rng.integers(1, sched.T + 1, size=b)
            a = sched.alpha_bar[t - 1]
            s = sched.sigma[t - 1]
            eps_z = rng.standard_normal(z0.shape)
            eps_h = rng.standard_normal(h0.shape)
            z_t = a[:, None] * z0 + s[:, None] * eps_z
            h_t = a[:, None, None] * h0 + s[:, None, None] * eps_h

            opt.zero_grad()
            res_z = bundle.z_prior(Tensor(z_t), t.astype(np.float64))
            pred_z = Tensor(s[:, None] * z_t) + res_z
            loss_z = sm_loss(Tensor(eps_z), pred_z)
            res_h = bundle.h_prior(Tensor(h_t), Tensor(z0), t.astype(np.float64))
            pred_h = Tensor(s[:, None, None] * h_t) + res_h
            loss_h = sm_loss(Tensor(eps_h), pred_h)
            loss = loss_z + loss_h
            if config.spectral_reg > 0.0:
                loss = loss + spectral_penalty(
                    [bundle.z_prior, bundle.h_prior], weight=config.spectral_reg
                )
            if not np.isfinite(loss.values):
                raise TrainingDiverged(f"non-finite prior loss at epoch {epoch}")
            loss.backward()
            opt.step()
            bundle.ema_z.update(params_z)
            bundle.ema_h.update(params_h)
            totals["loss_z"] += float(loss_z.values)
            totals["loss_h"] += float(loss_h.values)
            n_batches += 1
        bundle.z_prior.set_training(False)
        bundle.h_prior.set_training(False)
        record = {k: v / n_batches for k, v in totals.items()}
        record.update(epoch=epoch, lr=opt.lr)
        log.append(record)
        if log_hook:
            log_hook(record)
        total = record["loss_z"] + record["loss_h"]
        if initial is None:
            initial = total
        if total > 10.0 * max(initial, 1e-12):
            bad += 1
            if bad >= 3:
                raise TrainingDiverged(
                    f"prior loss {total:.4g} above 10x initial {initial:.4g} at epoch {epoch}"
                )
        else:
            bad = 0
    if vae_params and not np.array_equal(
        np.concatenate([p.values.ravel() for p in vae_params]), frozen
    ):
        raise AssertionError("stage-2 training mutated frozen VAE parameters")
    names = [f"z_prior.{n}" for n, _ in bundle.z_prior.named_parameters()]
    names += [f"h_prior.{n}" for n, _ in bundle.h_prior.named_parameters()]
    bundle.last_opt_state = (opt.state_arrays(names), opt.step_count)
    return bundle, log
