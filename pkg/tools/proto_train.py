"""Prototype training run: is held-out RMSE < 0.05 reachable, and how fast?

Throwaway experiment harness used to pick dataset resolution, batch size,
learning rate, and epoch count before wiring the real training loop.
"""

import argparse
import sys
import math
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import galr.diffcore as D  # noqa: E402
from galr import cloud, encoder, handspec, retarget  # noqa: E402


def gen_split(spec, n, cfg, seed, dtype=np.float32):
    """Generate pyramids, immediately reduce them to encode plans."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.limits_lo(), spec.limits_hi()
    plans, targets = [], []
    for i in range(n):
        angles = lo + (hi - lo) * rng.uniform(size=spec.dof)
        posed = handspec.forward_kinematics(spec, handspec.make_joint_vector(spec, angles))
        sc = cloud.sample_surface(posed, cfg.density, seed=seed * 1_000_003 + i)
        pyr = cloud.build_pyramid(sc, cfg.base_voxel, cfg.radius_scale)
        plans.append(encoder.build_encode_plan(pyr, cfg, dtype=dtype))
        targets.append(retarget.normalize_angles(angles, spec))
    return plans, np.array(targets)


def eval_rmse(spec, sample_plans, targets, params, cfg, batch=32):
    ids = spec.universal_ids()
    errs = []
    for at in range(0, len(sample_plans), batch):
        plans = sample_plans[at : at + batch]
        tape = D.Tape(dtype=params["head/W"].dtype)
        params_t = encoder.constant_params(tape, params)
        z = encoder.encode_plans_on_tape(
            tape, plans, {k: v for k, v in params_t.items() if not k.startswith("dec/")}, cfg
        )
        theta = retarget.decode_on_tape(tape, z, params_t)
        errs.append(theta.values[:, ids] - targets[at : at + batch])
    e = np.concatenate(errs)
    return float(np.sqrt(np.mean(e * e)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--per-emb", type=int, default=800)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--density", type=float, default=4e3)
    ap.add_argument("--voxel", type=float, default=10e-3)
    ap.add_argument("--radius-scale", type=float, default=2.5)
    ap.add_argument("--dtype", default="float32")
    ap.add_argument("--specs", nargs="+", default=["planar2f", "planar3f", "toy5f"])
    args = ap.parse_args()

    dtype = np.dtype(args.dtype)
    cfg = encoder.GalrConfig(
        density=args.density, base_voxel=args.voxel, radius_scale=args.radius_scale
    )
    specs = {name: handspec.load_bundled(name) for name in args.specs}

    t0 = time.perf_counter()
    train, val = {}, {}
    for i, (name, spec) in enumerate(specs.items()):
        plans, targets = gen_split(spec, args.per_emb, cfg, seed=100 + i, dtype=dtype)
        n_val = max(8, args.per_emb // 10)
        train[name] = (plans[n_val:], targets[n_val:])
        val[name] = (plans[:n_val], targets[:n_val])
    print(f"data gen: {time.perf_counter()-t0:.1f}s")

    plan_cache = {n: train[n][0] for n in specs}

    params = {k: v.astype(dtype) for k, v in encoder.init_params(cfg, seed=0).items()}
    params.update(
        {k: v.astype(dtype) for k, v in retarget.init_decoder_params(cfg.d_latent, seed=1).items()}
    )
    state = D.adam_init(params)
    selectors = {n: retarget.selector_matrix(s, dtype=dtype) for n, s in specs.items()}

    index = [(n, i) for n in specs for i in range(len(train[n][0]))]
    steps_per_epoch = len(index) // args.batch
    total_steps = steps_per_epoch * args.epochs
    warmup = min(100, total_steps // 10)
    step_no = 0
    rng = np.random.default_rng(7)
    for epoch in range(args.epochs):
        rng.shuffle(index)
        t0 = time.perf_counter()
        losses = []
        for at in range(0, len(index) - args.batch + 1, args.batch):
            batch = index[at : at + args.batch]
            plans = [plan_cache[n][i] for n, i in batch]
            tape = D.Tape(dtype=dtype)
            params_t = encoder.register_params(tape, params)
            enc_t = {k: v for k, v in params_t.items() if not k.startswith("dec/")}
            z = encoder.encode_plans_on_tape(tape, plans, enc_t, cfg)
            theta = retarget.decode_on_tape(tape, z, params_t)
            total, count = None, 0
            for name in specs:
                rows = np.array([j for j, (n, _) in enumerate(batch) if n == name])
                if rows.size == 0:
                    continue
                tgt = np.stack([train[name][1][i] for n, i in batch if n == name])
                th = D.gather_rows(theta, rows)
                s, c = retarget.masked_sq_err_on_tape(
                    tape, th, tape.input(selectors[name]), tape.input(tgt)
                )
                total = s if total is None else D.add(total, s)
                count += c
            loss = D.sqrt(D.scale(total, 1.0 / count))
            grads = tape.backward(loss)
            if step_no < warmup:
                lr = args.lr * (step_no + 1) / warmup
            else:
                frac = (step_no - warmup) / max(1, total_steps - warmup)
                lr = args.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))
            D.optimizer_step(params, grads, state, lr=lr)
            step_no += 1
            losses.append(float(loss.values[0, 0]))
        dt = time.perf_counter() - t0
        msg = f"epoch {epoch:3d} train_rmse={np.mean(losses):.4f} ({dt:5.1f}s"
        msg += f", {dt/len(losses)*1000:.0f}ms/step)"
        if epoch % 2 == 1 or epoch == args.epochs - 1:
            vals = {n: eval_rmse(specs[n], *val[n], params, cfg) for n in specs}
            msg += " val " + " ".join(f"{n}={v:.4f}" for n, v in vals.items())
        print(msg, flush=True)


if __name__ == "__main__":
    main()
