"""Small-scale rehearsal of the policy-transfer experiments.

Trains a tiny encoder, lifts region-disjoint demo sets for two hands,
trains A-only / co-trained / few-shot policies, and prints the success
matrix the full-scale acceptance run asserts on. Cheap enough to iterate
on hyperparameters.
"""

import argparse
import time

import numpy as np

from galr import handspec, latentpolicy, trainkit
from galr.encoder import GalrConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--emb-a", default="planar2f")
    ap.add_argument("--emb-b", default="planar3f")
    ap.add_argument("--demos", type=int, default=72)
    ap.add_argument("--few", type=int, default=8)
    ap.add_argument("--enc-states", type=int, default=300)
    ap.add_argument("--enc-epochs", type=int, default=10)
    ap.add_argument("--policy-epochs", type=int, default=300)
    ap.add_argument("--policy-width", type=int, default=128)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--density", type=float, default=2e3)
    ap.add_argument("--voxel", type=float, default=12e-3)
    ap.add_argument("--radius-scale", type=float, default=2.0)
    ap.add_argument("--d-latent", type=int, default=8)
    args = ap.parse_args()

    t0 = time.time()
    arch = GalrConfig(
        widths=(8, 12, 16), d_t=16, layers=1, heads=2,
        d_latent=args.d_latent, kernel_points=7,
        density=args.density, base_voxel=args.voxel,
        radius_scale=args.radius_scale,
    )
    specs = [handspec.load_bundled(n) for n in (args.emb_a, args.emb_b)]
    ds = trainkit.build_dataset(
        specs, args.enc_states, seed=0, config=arch, materialize="plan"
    )
    cfg = trainkit.TrainConfig(
        epochs=args.enc_epochs, batch_size=16, lr=2e-3, seed=0,
        encoder=arch, decoder_width=16, warmup_steps=20,
    )
    bundle = trainkit.bundle_from_result(trainkit.train(ds, cfg))
    print(f"[{time.time()-t0:6.1f}s] encoder trained")

    env_a = latentpolicy.PlanarGraspEnv(specs[0])
    env_b = latentpolicy.PlanarGraspEnv(specs[1])
    demos_a = latentpolicy.generate_demos(env_a, args.demos, "A", seed=10)
    demos_b = latentpolicy.generate_demos(env_b, args.demos, "B", seed=11)
    print(f"[{time.time()-t0:6.1f}s] demos generated")

    lift_a = [latentpolicy.lift(t, bundle) for t in demos_a]
    lift_b = [latentpolicy.lift(t, bundle) for t in demos_b]
    print(f"[{time.time()-t0:6.1f}s] demos lifted")

    pcfg = latentpolicy.PolicyConfig(
        steps=10, width=args.policy_width, epochs=args.policy_epochs,
        batch_size=64, lr=1e-3, seed=0,
    )
    pol_a = latentpolicy.train_policy(lift_a, pcfg)
    pol_co = latentpolicy.train_policy(lift_a + lift_b, pcfg)
    pol_few = latentpolicy.train_policy(lift_a[: args.few] + lift_b, pcfg)
    for tag, p in (("A-only", pol_a), ("co", pol_co), ("few", pol_few)):
        print(f"  {tag}: loss {p.loss_curve[0]:.4f} -> {p.loss_curve[-1]:.4f}")
    print(f"[{time.time()-t0:6.1f}s] policies trained")

    def rate(policy, env, region):
        per_seed = []
        for s in range(args.seeds):
            wins = 0
            for ep in range(args.episodes):
                rec = latentpolicy.rollout(
                    policy, env, bundle, region, seed=s * 100000 + ep
                )
                wins += int(rec.success)
            per_seed.append(wins / args.episodes)
        return float(np.mean(per_seed)), per_seed

    cells = [
        ("A-only  on A in A", pol_a, env_a, "A"),
        ("A-only  on A in B", pol_a, env_a, "B"),
        ("co      on A in B", pol_co, env_a, "B"),
        ("co      on A in A", pol_co, env_a, "A"),
        ("few     on A in A", pol_few, env_a, "A"),
    ]
    results = {}
    for tag, pol, env, region in cells:
        mean, per_seed = rate(pol, env, region)
        results[tag] = mean
        print(f"[{time.time()-t0:6.1f}s] {tag}: {mean:.2f}  {per_seed}")

    gap = results["co      on A in B"] - results["A-only  on A in B"]
    few_frac = results["few     on A in A"] / max(results["A-only  on A in A"], 1e-9)
    print(f"\nco-training gap in B: {gap*100:+.0f} points (need >= +10)")
    print(f"few-shot vs baseline on A: {few_frac*100:.0f}% (need >= 80%)")


if __name__ == "__main__":
    main()
