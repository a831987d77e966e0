"""Command-line surface: every pipeline stage as a subcommand, driven by a
JSON config (flags override config values) with full seed determinism.

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time

import numpy as np

from . import __version__
from ._threads import worker_count
from .artifacts import (
    MissingArtifact,
    load_bundle,
    load_vae,
    read_dataset_dir,
    save_bundle,
    save_vae,
    write_dataset_dir,
    write_effective_config,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, load_config, merge_overrides, validate_config
from .data import normalize, synth_dataset
from .guidance import (
    FinetuneConfig,
    NoiseSpec,
    finetune_encoders,
    grid_to_text,
    guided_synthesis,
    perturb,
    voxel_iou,
    voxel_surface_points,
    voxelize,
)
from .io_ply import PlyError, read_ply, write_ply
from .metrics import compute_report
from .nn.tensor import NumericError
from .ode import OdeFailure
from .priors import PriorConfig, Sampler, train_priors
from .recon import (
    SapConfig,
    UpsamplerNet,
    build_sap_pairs,
    finetune_on_lion,
    reconstruct,
    train_upsampler,
    write_indicator,
    write_obj,
)
from .vae import HVaeConfig, TrainingDiverged, train_vae

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _jsonl_logger(path):
    fh = open(path, "w")

    def hook(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    hook.close = fh.close
    return hook


def _vae_config(cfg):
    v = cfg["vae"]
    return HVaeConfig(
        d_z=v["d_z"], d_h=v["d_h"], n_points=cfg["data"]["n_points"],
        lr=v["lr"], beta1=v["beta1"], beta2=v["beta2"],
        batch_size=v["batch_size"], epochs=v["epochs"], kl_start=v["kl_start"],
        kl_end=v["kl_end"], anneal_fraction=v["anneal_fraction"], dropout=v["dropout"],
    )


def _prior_config(cfg):
    p = cfg["priors"]
    return PriorConfig(
        lr=p["lr"], weight_decay=p["weight_decay"], beta1=p["beta1"], beta2=p["beta2"],
        batch_size=p["batch_size"], epochs=p["epochs"], warmup_epochs=p["warmup_epochs"],
        ema_decay=p["ema_decay"], t_steps=p["t_steps"], beta_start=p["beta_start"],
        beta_end=p["beta_end"], prior_width=p["prior_width"], prior_blocks=p["prior_blocks"],
        h_widths=tuple(p["h_widths"]), t_dim_z=p["t_dim_z"], t_dim_h=p["t_dim_h"],
        dropout=p["dropout"], spectral_reg=p["spectral_reg"],
    )


def _sap_config(cfg):
    s = cfg["sap"]
    return SapConfig(
        resolution=s["resolution"], train_resolution=s["train_resolution"],
        sigma_smooth=s["sigma_smooth"], k=s["k"], offset_scale=s["offset_scale"],
        noise_std=s["noise_std"], lr=s["lr"], batch_size=s["batch_size"],
        epochs=s["epochs"], widths=tuple(s["widths"]),
        finetune_steps=tuple(s["finetune_steps"]),
        finetune_variants=s["finetune_variants"], finetune_epochs=s["finetune_epochs"],
    )


def _load_cloud(path):
    if not os.path.exists(path):
        raise MissingArtifact(path, "synth-data (or provide an existing PLY)")
    return read_ply(path)


def _read_ply_dir(path):
    files = sorted(glob.glob(os.path.join(path, "*.ply")))
    if not files:
        raise MissingArtifact(os.path.join(path, "*.ply"), "sample or synth-data")
    return [read_ply(f)[0] for f in files]


def _save_sap(path, net, cfg_sap, seed, epoch):
    meta = {
        "kind": "sap",
        "seed": seed,
        "epoch": epoch,
        "k": net.k,
        "offset_scale": net.offset_scale,
        "widths": list(cfg_sap.widths),
        "config": {**vars(cfg_sap), "widths": list(cfg_sap.widths),
                   "finetune_steps": list(cfg_sap.finetune_steps)},
    }
    save_checkpoint(path, net.state_arrays(), meta)


def _load_sap(path, needed_command="train-sap"):
    if not os.path.exists(path):
        raise MissingArtifact(path, needed_command)
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "sap":
        raise ValueError(f"{path}: expected a SAP checkpoint, got {meta.get('kind')!r}")
    net = UpsamplerNet(
        np.random.default_rng(0), k=meta["k"], widths=tuple(meta["widths"]),
        offset_scale=meta["offset_scale"],
    )
    net.load_state_arrays(arrays)
    return net, meta


# -- subcommand handlers -------------------------------------------------------


def cmd_synth_data(args, cfg):
    d = cfg["data"]
    ds = synth_dataset(d["families"], d["count"], d["n_points"], cfg["seed"],
                       with_normals=d["with_normals"])
    ds = normalize(ds, d["normalization"])
    write_dataset_dir(args.out, ds)
    write_effective_config(args.out, cfg, "synth-data")
    print(f"wrote {len(ds)} shapes to {args.out} "
          f"(splits: { {k: len(v) for k, v in ds.split.items()} })")


def cmd_train_vae(args, cfg):
    ds = read_dataset_dir(args.data)
    vcfg = _vae_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    hook = _jsonl_logger(os.path.join(args.out, "loss_log.jsonl"))
    model = None
    resume = None
    if args.resume:
        model, meta, opt_arrays = load_vae(args.resume)
        resume = (opt_arrays, meta["opt_step"], meta["epoch"] + 1)
        print(f"resuming from epoch {meta['epoch'] + 1}")
    try:
        model, log = train_vae(ds, vcfg, cfg["seed"], log_hook=hook,
                               model=model, resume=resume)
    finally:
        hook.close()
    save_vae(os.path.join(args.out, "vae.ckpt"), model, cfg["seed"],
             epoch=vcfg.epochs - 1, opt_state=model.last_opt_state)
    write_effective_config(args.out, cfg, "train-vae")
    print(f"vae trained: final recon {log[-1]['recon']:.4f}" if log else "no epochs run")


def cmd_train_prior(args, cfg):
    ds = read_dataset_dir(args.data)
    vae, _, _ = load_vae(args.vae)
    pcfg = _prior_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    hook = _jsonl_logger(os.path.join(args.out, "loss_log.jsonl"))
    bundle = None
    resume = None
    if args.resume:
        bundle, meta, opt_arrays = load_bundle(args.resume, vae)
        resume = (opt_arrays, meta["opt_step"], meta["epoch"] + 1)
        print(f"resuming from epoch {meta['epoch'] + 1}")
    try:
        bundle, log = train_priors(ds, vae, pcfg, cfg["seed"], log_hook=hook,
                                   bundle=bundle, resume=resume)
    finally:
        hook.close()
    save_bundle(os.path.join(args.out, "priors.ckpt"), bundle, cfg["seed"],
                epoch=pcfg.epochs - 1, opt_state=bundle.last_opt_state)
    write_effective_config(args.out, cfg, "train-prior")
    if log:
        print(f"priors trained: loss_z {log[-1]['loss_z']:.4f} loss_h {log[-1]['loss_h']:.4f}")


def _corrupt(kind, x, n_out, voxel_size, rng):
    if kind == "voxel":
        grid = voxelize(x, voxel_size)
        return voxel_surface_points(grid, n_out, rng)
    return perturb(x, NoiseSpec(kind), rng)


def cmd_finetune_encoder(args, cfg):
    ds = read_dataset_dir(args.data)
    vae, _, _ = load_vae(args.vae)
    load_bundle(args.priors, vae)  # stage-order check: priors must exist
    g = cfg["guidance"]
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 14]))
    mode = args.mode
    loss_mode = "l1" if mode in ("normal", "uniform") else "cd_emd"
    n_pts = cfg["data"]["n_points"]

    def pairs_for(split):
        return [
            (_corrupt(mode, ds.shapes[i], n_pts, g["voxel_size"], rng), ds.shapes[i])
            for i in ds.split[split]
        ]

    pairs_train = pairs_for("train")
    pairs_val = pairs_for("val")
    fcfg = FinetuneConfig(epochs=g["finetune_epochs"], batch_size=g["batch_size"],
                          lr=g["lr"], lambda_kl=g["lambda_kl"], patience=g["patience"])
    os.makedirs(args.out, exist_ok=True)
    hook = _jsonl_logger(os.path.join(args.out, "loss_log.jsonl"))
    try:
        model, log = finetune_encoders(vae, pairs_train, pairs_val, loss_mode,
                                       fcfg, cfg["seed"], log_hook=hook)
    finally:
        hook.close()
    path = os.path.join(args.out, "encoders.ckpt")
    save_vae(path, model, cfg["seed"], epoch=len(log) - 1)
    arrays, meta = load_checkpoint(path)
    meta["finetuned_for"] = mode
    save_checkpoint(path, arrays, meta)
    write_effective_config(args.out, cfg, "finetune-encoder")
    print(f"encoders fine-tuned for {mode}: best val recon "
          f"{min(r['val_recon'] for r in log):.4f}")


def cmd_train_sap(args, cfg):
    ds = read_dataset_dir(args.data)
    if ds.normals is None:
        raise ConfigError("train-sap needs a dataset generated with normals")
    scfg = _sap_config(cfg)
    pairs = build_sap_pairs(ds, scfg, cfg["seed"])
    net = UpsamplerNet(
        np.random.default_rng(np.random.SeedSequence([cfg["seed"], 17])),
        k=scfg.k, widths=scfg.widths, offset_scale=scfg.offset_scale,
    )
    os.makedirs(args.out, exist_ok=True)
    hook = _jsonl_logger(os.path.join(args.out, "loss_log.jsonl"))
    try:
        net, log = train_upsampler(net, pairs, scfg, cfg["seed"], log_hook=hook)
    finally:
        hook.close()
    _save_sap(os.path.join(args.out, "sap.ckpt"), net, scfg, cfg["seed"], scfg.epochs - 1)
    write_effective_config(args.out, cfg, "train-sap")
    print(f"sap upsampler trained: loss {log[-1]['loss']:.6f}")


def cmd_finetune_sap(args, cfg):
    ds = read_dataset_dir(args.data)
    vae, _, _ = load_vae(args.vae)
    bundle, _, _ = load_bundle(args.priors, vae)
    net, _ = _load_sap(args.sap)
    scfg = _sap_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    hook = _jsonl_logger(os.path.join(args.out, "loss_log.jsonl"))
    try:
        net, log = finetune_on_lion(net, vae, bundle, ds, scfg, cfg["seed"], log_hook=hook)
    finally:
        hook.close()
    _save_sap(os.path.join(args.out, "sap_finetuned.ckpt"), net, scfg, cfg["seed"],
              scfg.finetune_epochs - 1)
    write_effective_config(args.out, cfg, "finetune-sap")
    print(f"sap fine-tuned on generated data: loss {log[-1]['loss']:.6f}")


def cmd_sample(args, cfg):
    vae, _, _ = load_vae(args.vae)
    bundle, _, _ = load_bundle(args.priors, vae)
    s = cfg["sampling"]
    sampler = Sampler(s["sampler"], steps=s["steps"], eta=s["eta"])
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 11]))
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    clouds = bundle.generate(s["n"], rng, sampler)
    elapsed = time.perf_counter() - t0
    for i, cloud in enumerate(clouds):
        write_ply(os.path.join(args.out, f"sample_{i:05d}.ply"), cloud)
    timing = {
        "n": int(s["n"]),
        "sampler": s["sampler"],
        "steps": int(s["steps"]) if s["sampler"] == "ddim" else bundle.sched.T,
        "total_seconds": elapsed,
        "per_shape_seconds": elapsed / max(1, s["n"]),
    }
    with open(os.path.join(args.out, "timing.json"), "w") as f:
        json.dump(timing, f, indent=2, sort_keys=True)
        f.write("\n")
    write_effective_config(args.out, cfg, "sample")
    print(f"sampled {s['n']} clouds in {elapsed:.2f}s "
          f"({timing['per_shape_seconds']:.3f}s per shape)")


def cmd_eval(args, cfg):
    gen = _read_ply_dir(args.generated)
    ref = _read_ply_dir(args.reference)
    counts = {len(c) for c in gen} | {len(c) for c in ref}
    if len(counts) > 1:
        if not args.resample:
            raise ConfigError(
                f"point counts differ across clouds ({sorted(counts)}); EMD needs equal "
                "sizes - pass --resample N to subsample all clouds to N points"
            )
        n = min(counts) if args.resample == "min" else int(args.resample)
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 12]))
        gen = [c[rng.choice(len(c), n, replace=False)] for c in gen]
        ref = [c[rng.choice(len(c), n, replace=False)] for c in ref]
    workers = cfg["metrics"]["workers"] or None
    report = compute_report(gen, ref, workers=worker_count(workers), seed=cfg["seed"])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        f.write(report.to_json())
        f.write("\n")
    write_effective_config(args.out, cfg, "eval")
    print(report.table())


def cmd_interpolate(args, cfg):
    vae, _, _ = load_vae(args.vae)
    bundle, _, _ = load_bundle(args.priors, vae)
    xa, _ = _load_cloud(args.cloud_a)
    xb, _ = _load_cloud(args.cloud_b)
    clouds = bundle.interpolate(xa, xb, args.steps)
    os.makedirs(args.out, exist_ok=True)
    for i, cloud in enumerate(clouds):
        write_ply(os.path.join(args.out, f"interp_{i:03d}.ply"), cloud)
    write_effective_config(args.out, cfg, "interpolate")
    print(f"wrote {len(clouds)} interpolants to {args.out}")


def cmd_guide_voxel(args, cfg):
    vae, _, _ = load_vae(args.encoders, needed_command="finetune-encoder")
    bundle, _, _ = load_bundle(args.priors, vae)
    x, _ = _load_cloud(args.cloud)
    g = cfg["guidance"]
    tau = args.tau if args.tau is not None else g["tau"]
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 14]))
    grid = voxelize(x, g["voxel_size"])
    n_pts = cfg["data"]["n_points"]
    surface = voxel_surface_points(grid, n_pts, rng)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "input_grid.txt"), "w") as f:
        f.write(grid_to_text(grid))
    ious = []
    for i in range(args.n):
        out = guided_synthesis(vae, bundle, surface, tau, rng)
        write_ply(os.path.join(args.out, f"guided_{i:03d}.ply"), out)
        out_grid = voxelize(out, g["voxel_size"], origin=grid.origin)
        ious.append(voxel_iou(out_grid, grid))
    with open(os.path.join(args.out, "iou.json"), "w") as f:
        json.dump({"tau": tau, "iou": ious}, f, indent=2, sort_keys=True)
        f.write("\n")
    write_effective_config(args.out, cfg, "guide-voxel")
    print(f"guided synthesis at tau={tau}: mean IOU {np.mean(ious):.3f}")


def cmd_denoise(args, cfg):
    vae, _, _ = load_vae(args.encoders, needed_command="finetune-encoder")
    bundle, _, _ = load_bundle(args.priors, vae)
    x, _ = _load_cloud(args.cloud)
    tau = args.tau if args.tau is not None else cfg["guidance"]["tau"]
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 15]))
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n):
        out = guided_synthesis(vae, bundle, x, tau, rng)
        write_ply(os.path.join(args.out, f"denoised_{i:03d}.ply"), out)
    write_effective_config(args.out, cfg, "denoise")
    print(f"denoised {args.n} variants at tau={tau} (noise model: {args.noise})")


def cmd_mesh(args, cfg):
    x, normals = _load_cloud(args.cloud)
    res = args.res or cfg["sap"]["resolution"]
    scfg = _sap_config(cfg)
    if normals is not None and args.sap is None:
        mesh = reconstruct(x, net=None, resolution=res,
                           sigma_smooth=scfg.sigma_smooth, normals=normals)
    else:
        net, _ = _load_sap(args.sap or "", needed_command="train-sap")
        mesh = reconstruct(x, net=net, resolution=res, sigma_smooth=scfg.sigma_smooth)
    os.makedirs(args.out, exist_ok=True)
    write_obj(os.path.join(args.out, "mesh.obj"), mesh)
    if args.dump_grid:
        from .recon import indicator_from_oriented

        if normals is not None and args.sap is None:
            pts, nrm = x, normals
        else:
            net.set_training(False)
            pts_t, nrm_t = net(x)
            pts, nrm = pts_t.values, nrm_t.values
        chi, _, _ = indicator_from_oriented(pts, nrm, res, scfg.sigma_smooth)
        write_indicator(os.path.join(args.out, "indicator.sapgrid"), chi.values)
    write_effective_config(args.out, cfg, "mesh")
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {args.out}")


# -- argument parsing ----------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latentpoints",
        description="Hierarchical latent-point diffusion pipeline for 3D point clouds",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", required=True, help="JSON run config (seed mandatory)")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(handler=handler)
        return p

    add("synth-data", cmd_synth_data, help="generate a synthetic shape dataset")

    p = add("train-vae", cmd_train_vae, help="first-stage VAE training")
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("train-prior", cmd_train_prior, help="second-stage latent prior training")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--resume")

    p = add("finetune-encoder", cmd_finetune_encoder,
            help="fine-tune encoders for voxel or noisy inputs")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--mode", required=True, choices=["voxel", "normal", "uniform", "outlier"])

    p = add("train-sap", cmd_train_sap, help="train the surface upsampler")
    p.add_argument("--data", required=True)

    p = add("finetune-sap", cmd_finetune_sap, help="fine-tune the upsampler on generated clouds")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--sap", required=True)

    p = add("sample", cmd_sample, help="generate point clouds")
    p.add_argument("--vae", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--sampler", choices=["ddpm", "ddim"])
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--n", type=int)

    p = add("eval", cmd_eval, help="generation metrics between two PLY directories")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--resample", help="subsample clouds to N points (or 'min')")

    p = add("interpolate", cmd_interpolate, help="shape interpolation between two clouds")
    p.add_argument("cloud_a")
    p.add_argument("cloud_b")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--vae", required=True)
    p.add_argument("--priors", required=True)

    p = add("guide-voxel", cmd_guide_voxel, help="voxel-guided synthesis")
    p.add_argument("cloud")
    p.add_argument("--tau", type=int)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--encoders", required=True, help="fine-tuned encoder checkpoint")
    p.add_argument("--priors", required=True)

    p = add("denoise", cmd_denoise, help="multimodal denoising of a noisy cloud")
    p.add_argument("cloud")
    p.add_argument("--noise", required=True, choices=["normal", "uniform", "outlier"])
    p.add_argument("--tau", type=int)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--encoders", required=True)
    p.add_argument("--priors", required=True)

    p = add("mesh", cmd_mesh, help="reconstruct a mesh from a point cloud")
    p.add_argument("cloud")
    p.add_argument("--res", type=int)
    p.add_argument("--sap", help="upsampler checkpoint (needed when the PLY has no normals)")
    p.add_argument("--dump-grid", action="store_true")

    return parser


_FLAG_OVERRIDES = {
    "sampler": "sampling.sampler",
    "steps_sampling": "sampling.steps",
    "eta": "sampling.eta",
    "n_sampling": "sampling.n",
}


def _apply_flag_overrides(args, cfg):
    if args.command == "sample":
        merge_overrides(cfg, {
            "sampling.sampler": args.sampler,
            "sampling.steps": args.steps,
            "sampling.eta": args.eta,
            "sampling.n": args.n,
        })
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = _apply_flag_overrides(args, cfg)
        args.handler(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PlyError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"missing dependency: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, NumericError, OdeFailure) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
