"""
Training the shared latent space
================================

The encoder maps any hand's surface cloud to a 64-dimensional vector and
the decoder maps that vector to a universal joint set covering every
registered hand. Co-training them on several embodiments at once is what
forces the latent space to be shared. Here we do a scaled-down run (small
widths, coarse clouds, two hands) that finishes in about a minute; the
command-line `galr train` does the full-width version.
"""

import numpy as np

from galr import handspec, trainkit
from galr.encoder import GalrConfig

# Architecture knobs live in one config. The cloud resolution fields
# (density / base_voxel / radius_scale) always follow the dataset; the
# rest describe the network itself.
arch = GalrConfig(
    widths=(8, 12, 16), d_t=16, layers=1, heads=2, d_latent=8,
    kernel_points=7, density=2e3, base_voxel=12e-3, radius_scale=2.0,
)

specs = [handspec.load_bundled(n) for n in ("planar2f", "planar3f")]
dataset = trainkit.build_dataset(
    specs, 80, seed=0, config=arch, materialize="plan"
)
print(f"dataset: {len(dataset.records)} states over "
      f"{sorted(dataset.embodiments())}")

# Each record carries a precomputed encode plan (neighbor lists and voxel
# assignments), so the training loop only does the network math.
cfg = trainkit.TrainConfig(
    epochs=8, batch_size=16, lr=2e-3, seed=0,
    encoder=arch, decoder_width=16, warmup_steps=10,
)
result = trainkit.train(dataset, cfg, log=print)

print(f"\nbest validation rmse {result.best_val:.4f} "
      f"at epoch {result.best_epoch}")

# ---------------------------------------------------------------------
# What did it learn? Encode held-out states of each hand and compare the
# decoded universal joints against ground truth, per embodiment.

reports = trainkit.evaluate(result, dataset, split="val")
for name in sorted(reports):
    r = reports[name]
    print(f"{name}: n={r.count} rmse_norm={r.rmse_norm:.4f} "
          f"self_retarget_max={r.self_retarget_max_frac:.4f}")

# The latent vectors themselves: nearby hand states should encode to
# nearby points. Open vs closed postures of the same hand land far
# apart; a slightly perturbed posture lands close.
from galr import encoder as enc
from galr.cloud import build_pyramid, sample_surface
from galr.retarget import encoder_view, pose_seed

spec = specs[1]
lo, hi = spec.limits_lo(), spec.limits_hi()
enc_params = encoder_view(result.params)
enc_cfg = result.encoder_config


def z_of(angles):
    q = handspec.make_joint_vector(spec, angles)
    posed = handspec.forward_kinematics(spec, q)
    sc = sample_surface(posed, enc_cfg.density, pose_seed(q))
    pyr = build_pyramid(sc, enc_cfg.base_voxel, enc_cfg.radius_scale)
    return enc.encode(pyr, enc_params, enc_cfg).z


z_open, z_closed = z_of(lo), z_of(hi)
z_near = z_of(lo + 0.02 * (hi - lo))
print(f"\n|z_open - z_closed| = {np.linalg.norm(z_open - z_closed):.3f}")
print(f"|z_open - z_near|   = {np.linalg.norm(z_open - z_near):.3f}")
