"""Intermediate-scale probe: train the full two-stage pipeline and measure
1-NNA between generated and reference sets. Informs the desk-scale config."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from latentpoints.data import normalize, synth_dataset
from latentpoints.metrics import compute_report
from latentpoints.priors import PriorConfig, Sampler, train_priors
from latentpoints.vae import HVaeConfig, train_vae

FAMS = sys.argv[1].split(",") if len(sys.argv) > 1 else ["sphere", "box", "torus"]
PRIOR_EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 600
KL_END = float(sys.argv[3]) if len(sys.argv) > 3 else 0.02

t0 = time.time()
count, n_points = 192, 128
ds = normalize(synth_dataset(FAMS, count, n_points, seed=100), "per_shape")
print(f"families={FAMS} prior_epochs={PRIOR_EPOCHS} kl_end={KL_END}", flush=True)

vae_cfg = HVaeConfig(d_z=32, d_h=1, n_points=n_points, batch_size=16, epochs=100,
                     lr=1e-3, dropout=0.1, kl_end=KL_END)
vae, vlog = train_vae(ds, vae_cfg, seed=100)
x = np.stack(ds.subset("train")[:16])
recon = vae.reconstruct(x).values
print(f"[{time.time()-t0:6.0f}s] vae: recon/coord={np.abs(recon-x).mean():.4f} "
      f"kl_z={vlog[-1]['kl_z']:.2f} kl_h={vlog[-1]['kl_h']:.1f}", flush=True)

prior_cfg = PriorConfig(epochs=PRIOR_EPOCHS, warmup_epochs=10, lr=1e-3, ema_decay=0.999,
                        batch_size=32, prior_width=128, prior_blocks=4,
                        h_widths=tuple(int(w) for w in sys.argv[4].split('-')) if len(sys.argv) > 4 else (96, 160, 160, 160), t_dim_z=64, t_dim_h=32, dropout=0.1)
bundle, plog = train_priors(ds, vae, prior_cfg, seed=100)
print(f"[{time.time()-t0:6.0f}s] priors: loss_z={plog[-1]['loss_z']:.3f} "
      f"loss_h={plog[-1]['loss_h']:.2f}", flush=True)

rng = np.random.default_rng(7)
n_eval = 48
gen = bundle.generate(n_eval, rng)
ref = ds.subset("reference") + ds.subset("val")
ref = [ref[i % len(ref)] for i in range(n_eval)]

# ceiling check: how distinguishable are VAE reconstructions of train shapes?
rec_in = np.stack(ds.subset("train")[:n_eval])
rec = [vae.reconstruct(rec_in[i:i+1], rng=np.random.default_rng(i)).values[0] for i in range(n_eval)]
from latentpoints.metrics import pairwise_matrix, one_nna_from_matrix
U = pairwise_matrix(rec + ref, rec + ref, metric="cd", workers=4, symmetric=True)
print(f"recon-vs-ref 1-NNA (ceiling): {one_nna_from_matrix(U, n_eval):.3f}", flush=True)

g_ext = np.mean([g.max(0) - g.min(0) for g in gen], axis=0)
r_ext = np.mean([r.max(0) - r.min(0) for r in ref], axis=0)
print("mean bbox extents gen:", np.round(g_ext, 3), "ref:", np.round(r_ext, 3), flush=True)
g_spread = np.mean([np.linalg.norm(g - g.mean(0), axis=1).mean() for g in gen])
r_spread = np.mean([np.linalg.norm(r - r.mean(0), axis=1).mean() for r in ref])
print(f"mean radial spread gen {g_spread:.3f} ref {r_spread:.3f}", flush=True)

rep = compute_report(list(gen), ref, workers=4)
print(rep.table(), flush=True)
print(f"[{time.time()-t0:6.0f}s] nna_cd={rep.nna_cd:.3f} nna_emd={rep.nna_emd:.3f}", flush=True)

for steps, tag in ((25, "ddim25"), (5, "ddim5")):
    g2 = bundle.generate(n_eval, np.random.default_rng(8), Sampler("ddim", steps=steps, eta=0.5))
    r2 = compute_report(list(g2), ref, workers=4)
    print(f"{tag} nna_cd={r2.nna_cd:.3f}", flush=True)
print(f"[{time.time()-t0:6.0f}s] ALL DONE", flush=True)
