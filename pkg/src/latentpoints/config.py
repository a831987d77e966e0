"""Run configuration: JSON document with per-stage sections, defaulted field
by field; unknown keys are rejected with JSON-pointer diagnostics. The seed is
mandatory. Flags override config values after loading."""

from __future__ import annotations

import copy
import json

from .data import FAMILIES

__all__ = ["ConfigError", "DEFAULTS", "load_config", "merge_overrides", "validate_config"]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": None,  # required
    "data": {
        "families": list(FAMILIES),
        "count": 64,
        "n_points": 256,
        "normalization": "per_shape",
        "with_normals": True,
    },
    "vae": {
        "d_z": 64,
        "d_h": 1,
        "epochs": 2000,
        "batch_size": 16,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.99,
        "kl_start": 1e-7,
        "kl_end": 0.5,
        "anneal_fraction": 0.5,
        "dropout": 0.1,
    },
    "priors": {
        "epochs": 800,
        "batch_size": 16,
        "lr": 2e-4,
        "weight_decay": 3e-4,
        "beta1": 0.9,
        "beta2": 0.99,
        "warmup_epochs": 20,
        "ema_decay": 0.9999,
        "t_steps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "prior_width": 256,
        "prior_blocks": 8,
        "h_widths": [64, 128, 128, 128],
        "t_dim_z": 128,
        "t_dim_h": 64,
        "dropout": 0.1,
        "spectral_reg": 0.0,
    },
    "sampling": {
        "sampler": "ddpm",
        "steps": 1000,
        "eta": 0.5,
        "n": 100,
    },
    "guidance": {
        "voxel_size": 0.6,
        "tau": 100,
        "noise": {
            "kind": "outlier",
            "max_std": 0.25,
            "uniform_range": 0.25,
            "outlier_frac": 0.5,
        },
        "finetune_epochs": 200,
        "batch_size": 16,
        "lr": 1e-3,
        "lambda_kl": 0.5,
        "patience": 20,
    },
    "sap": {
        "resolution": 64,
        "train_resolution": 32,
        "sigma_smooth": 2.0,
        "k": 7,
        "offset_scale": 0.1,
        "noise_std": 0.005,
        "lr": 1e-4,
        "batch_size": 32,
        "epochs": 200,
        "widths": [64, 128, 128],
        "finetune_steps": [20, 30, 35, 40, 50],
        "finetune_variants": 4,
        "finetune_epochs": 100,
    },
    "metrics": {
        "workers": 0,  # 0 = use LION_THREADS / cpu count
    },
}


def _validate(node, defaults, pointer):
    if not isinstance(node, dict):
        raise ConfigError(f"{pointer or '/'}: expected an object")
    for key, value in node.items():
        here = f"{pointer}/{key}"
        if key not in defaults:
            known = ", ".join(sorted(defaults))
            raise ConfigError(f"{here}: unknown key (known keys: {known})")
        default = defaults[key]
        if isinstance(default, dict):
            _validate(value, default, here)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{here}: expected a boolean")
        elif isinstance(default, (int, float)) or (default is None and key == "seed"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{here}: expected a number")
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{here}: expected a string")
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{here}: expected a list")


def _merge(defaults, node):
    out = copy.deepcopy(defaults)
    for key, value in node.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(doc):
    _validate(doc, DEFAULTS, "")
    cfg = _merge(DEFAULTS, doc)
    if cfg["seed"] is None:
        raise ConfigError("/seed: seed is mandatory")
    cfg["seed"] = int(cfg["seed"])
    families = cfg["data"]["families"]
    for i, fam in enumerate(families):
        if fam not in FAMILIES:
            raise ConfigError(
                f"/data/families/{i}: invalid family {fam!r}; allowed: {', '.join(FAMILIES)}"
            )
    if cfg["sampling"]["sampler"] not in ("ddpm", "ddim"):
        raise ConfigError("/sampling/sampler: must be 'ddpm' or 'ddim'")
    if cfg["guidance"]["noise"]["kind"] not in ("normal", "uniform", "outlier"):
        raise ConfigError("/guidance/noise/kind: must be normal, uniform or outlier")
    if cfg["data"]["normalization"] not in ("per_shape", "global"):
        raise ConfigError("/data/normalization: must be 'per_shape' or 'global'")
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}")
    return validate_config(doc)


def merge_overrides(cfg, overrides):
    """Apply dotted-path overrides (e.g. 'sampling.steps' -> 25) in place."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return cfg
