"""Benchmark the encoder's training step cost across cloud resolutions.

Prints pyramid sizes and fwd+bwd wall time per sample for the default
encoder widths, so training-run settings (density, voxel, batch size)
can be chosen against a wall-clock budget.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import galr.diffcore as D  # noqa: E402
from galr import cloud, encoder, handspec  # noqa: E402


def sample_pyramids(spec_name, density, voxel, n_states, seed):
    spec = handspec.load_bundled(spec_name)
    rng = np.random.default_rng(seed)
    lo, hi = spec.limits_lo(), spec.limits_hi()
    out = []
    for i in range(n_states):
        angles = lo + (hi - lo) * rng.uniform(size=spec.dof)
        posed = handspec.forward_kinematics(spec, handspec.make_joint_vector(spec, angles))
        sc = cloud.sample_surface(posed, density=density, seed=seed * 1000 + i)
        out.append(cloud.build_pyramid(sc, base_voxel=voxel, radius_scale=2.5))
    return out


def bench(density, voxel, batch, dtype, reps=6):
    cfg = encoder.GalrConfig(density=density, base_voxel=voxel)
    params = {k: v.astype(dtype) for k, v in encoder.init_params(cfg, seed=0).items()}
    names = ["planar2f", "planar3f", "toy5f"]
    pyrs = []
    t0 = time.perf_counter()
    for i, name in enumerate(names):
        pyrs.extend(sample_pyramids(name, density, voxel, max(2, batch // 3 + 1), seed=i + 1))
    gen_time = (time.perf_counter() - t0) / len(pyrs)
    sizes = [(len(p.level0), len(p.points1), len(p.points2)) for p in pyrs]
    edges = [
        (len(p.neighbors01.indices), len(p.neighbors11.indices),
         len(p.neighbors12.indices), len(p.neighbors22.indices))
        for p in pyrs
    ]
    plans = [encoder.build_encode_plan(p, cfg) for p in pyrs][:batch]
    while len(plans) < batch:
        plans.append(plans[len(plans) % len(pyrs)])

    target = np.random.default_rng(0).normal(size=(batch, cfg.d_latent)).astype(dtype)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        tape = D.Tape(dtype=dtype)
        params_t = encoder.register_params(tape, params)
        z = encoder.encode_plans_on_tape(tape, plans, params_t, cfg)
        diff = D.add(z, D.scale(tape.input(target), -1.0))
        loss = D.sum_all(D.cmul(diff, diff))
        tape.backward(loss)
        times.append(time.perf_counter() - t0)
    step = min(times)
    mean_sizes = np.mean(sizes, axis=0).round(0).astype(int)
    mean_edges = np.mean(edges, axis=0).round(0).astype(int)
    print(
        f"density={density:8.0f} voxel={voxel*1000:4.1f}mm batch={batch:2d} {np.dtype(dtype).name}: "
        f"P={mean_sizes[0]:5d} P1={mean_sizes[1]:4d} P2={mean_sizes[2]:3d} "
        f"edges={tuple(mean_edges)} gen={gen_time*1000:6.1f}ms "
        f"step={step*1000:7.1f}ms per-sample={step/batch*1000:6.2f}ms"
    )
    return step / batch


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()
    for dtype in (np.float32,):
        for density, voxel in [
            (2e4, 8e-3),
            (1e4, 8e-3),
            (8e3, 8e-3),
            (6e3, 9e-3),
            (4e3, 10e-3),
            (3e3, 12e-3),
            (2e3, 14e-3),
        ]:
            try:
                bench(density, voxel, args.batch, dtype)
            except cloud.DegeneratePyramidError as e:
                print(f"density={density:8.0f} voxel={voxel*1000:4.1f}mm: degenerate ({e})")


if __name__ == "__main__":
    main()
