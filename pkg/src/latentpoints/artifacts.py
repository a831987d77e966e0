"""On-disk artifacts shared by the CLI: dataset directories, model
checkpoints (with optimizer state for resume), and the effective-config echo
written into every output directory."""

from __future__ import annotations

import json
import os

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset
from .io_ply import read_ply, write_ply
from .priors import PriorBundle, PriorConfig
from .vae import HVaeConfig, VaeModel

__all__ = [
    "MissingArtifact",
    "write_dataset_dir",
    "read_dataset_dir",
    "save_vae",
    "load_vae",
    "save_bundle",
    "load_bundle",
    "write_effective_config",
]


class MissingArtifact(FileNotFoundError):
    def __init__(self, path, needed_command):
        super().__init__(
            f"missing {path}; produce it first with `latentpoints {needed_command}`"
        )
        self.needed_command = needed_command


def write_effective_config(out_dir, cfg, command):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "version": __version__, "config": cfg}
    with open(os.path.join(out_dir, "effective_config.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_dataset_dir(out_dir, dataset):
    os.makedirs(out_dir, exist_ok=True)
    for i, shape in enumerate(dataset.shapes):
        normals = dataset.normals[i] if dataset.normals is not None else None
        write_ply(os.path.join(out_dir, f"shape_{i:05d}.ply"), shape, normals)
    manifest = {
        "count": len(dataset.shapes),
        "split": dataset.split,
        "normalization": dataset.normalization,
        "meta": dataset.meta,
        "has_normals": dataset.normals is not None,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_dataset_dir(path):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingArtifact(manifest_path, "synth-data")
    with open(manifest_path) as f:
        manifest = json.load(f)
    shapes, normals = [], []
    for i in range(manifest["count"]):
        pts, nrm = read_ply(os.path.join(path, f"shape_{i:05d}.ply"))
        shapes.append(pts)
        normals.append(nrm)
    has_normals = manifest.get("has_normals") and all(n is not None for n in normals)
    return Dataset(
        shapes=shapes,
        normals=normals if has_normals else None,
        split={k: list(v) for k, v in manifest["split"].items()},
        normalization=manifest.get("normalization", {"mode": "none"}),
        meta=manifest.get("meta", {}),
    )


def _vae_cfg_fields(cfg):
    keys = ("d_z", "d_h", "n_points", "lr", "beta1", "beta2", "batch_size",
            "epochs", "kl_start", "kl_end", "anneal_fraction", "dropout")
    return {k: cfg[k] for k in keys if k in cfg}


def save_vae(path, model, seed, epoch, opt_state=None):
    arrays = dict(model.state_arrays())
    meta = {
        "kind": "vae",
        "seed": seed,
        "epoch": epoch,
        "config": vars(model.cfg),
        "opt_step": 0,
    }
    if opt_state is not None:
        arrays.update(opt_state[0])
        meta["opt_step"] = opt_state[1]
    save_checkpoint(path, arrays, meta)


def load_vae(path, needed_command="train-vae"):
    if not os.path.exists(path):
        raise MissingArtifact(path, needed_command)
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "vae":
        raise ValueError(f"{path}: expected a VAE checkpoint, got kind={meta.get('kind')!r}")
    cfg = HVaeConfig(**meta["config"])
    model = VaeModel(cfg, seed=meta.get("seed", 0))
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return model, meta, opt_arrays


def save_bundle(path, bundle, seed, epoch, opt_state=None):
    arrays = dict(bundle.state_arrays())
    meta = {
        "kind": "priors",
        "seed": seed,
        "epoch": epoch,
        "config": {**vars(bundle.config), "h_widths": list(bundle.config.h_widths)},
        "opt_step": 0,
    }
    if opt_state is not None:
        arrays.update(opt_state[0])
        meta["opt_step"] = opt_state[1]
    save_checkpoint(path, arrays, meta)


def load_bundle(path, vae, needed_command="train-prior"):
    if not os.path.exists(path):
        raise MissingArtifact(path, needed_command)
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "priors":
        raise ValueError(f"{path}: expected a priors checkpoint, got kind={meta.get('kind')!r}")
    cfg_doc = dict(meta["config"])
    cfg_doc["h_widths"] = tuple(cfg_doc.get("h_widths", (64, 128, 128, 128)))
    cfg = PriorConfig(**cfg_doc)
    bundle = PriorBundle(vae, cfg, seed=meta.get("seed", 0))
    bundle.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return bundle, meta, opt_arrays
