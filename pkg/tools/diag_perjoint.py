"""Per-joint validation error breakdown for a short co-training run.

Prints, for each embodiment, the normalized RMSE of every joint on the val
split so we can see whether the residual error is spread evenly or pinned
on specific joints (e.g. distal segments too small for the cloud resolution).
"""

import argparse
import time

import numpy as np

from galr import handspec, retarget, trainkit
from galr.encoder import GalrConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--per-emb", type=int, default=1500)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--lr", type=float, default=2.5e-3)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--density", type=float, default=4e3)
    ap.add_argument("--voxel", type=float, default=10e-3)
    ap.add_argument("--radius-scale", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    names = ["planar2f", "planar3f", "toy5f"]
    specs = [handspec.load_bundled(n) for n in names]
    arch = GalrConfig(
        density=args.density, base_voxel=args.voxel, radius_scale=args.radius_scale
    )

    t0 = time.perf_counter()
    ds = trainkit.build_dataset(
        specs, args.per_emb, seed=args.seed, config=arch, materialize="plan"
    )
    print(f"dataset built in {time.perf_counter() - t0:.1f}s", flush=True)

    cfg = trainkit.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=0,
        encoder=arch,
    )
    result = trainkit.train(ds, cfg, log=print)

    enc_cfg = result.encoder_config
    by_emb = {}
    for rec in ds.split("val"):
        by_emb.setdefault(rec.embodiment_id, []).append(rec)
    for name in names:
        recs = by_emb.get(name, [])
        spec = ds.specs[name]
        preds = trainkit._predict_rows(recs, ds, result.params, enc_cfg, np.float32)
        rows = preds[:, spec.universal_ids()]
        targets = np.stack([trainkit._target_for(rec, spec) for rec in recs])
        err = rows - targets
        per_joint = np.sqrt(np.mean(err**2, axis=0))
        print(f"=== {name} (n={len(recs)}) ===")
        for jname, e in zip([j.name for j in spec.joints], per_joint):
            print(f"  {jname:24s} rmse_norm={e:.4f}")


if __name__ == "__main__":
    main()
