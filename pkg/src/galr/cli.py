"""Command-line entry point: the full pipeline as scriptable subcommands.

Exit codes: 0 success, 1 argument/validation problems, 2 runtime failure.
Every run directory gets a `run.json` echoing the fully merged parameters,
so a run can be reproduced bit-exactly from its output directory alone.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import diffcore as D
from . import encoder, handspec, latentpolicy, retarget, trainkit
from .encoder import GalrConfig
from .registry import REGISTRY_VERSION


class CliValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _write_run_json(out_dir, subcommand, params, workers):
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "subcommand": subcommand,
        "params": params,
        "workers": workers,
        "registry_version": REGISTRY_VERSION,
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _merge_config_file(args, parser_defaults):
    """Optional JSON config supplies values for flags left at their default."""
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config) as fh:
            file_vals = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CliValidationError(f"cannot read config file {args.config}: {e}")
    if not isinstance(file_vals, dict):
        raise CliValidationError("config file must hold a JSON object")
    for key, val in file_vals.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise CliValidationError(f"config file sets unknown parameter {key!r}")
        # flags that were given explicitly (differ from the parser default)
        # win over the file
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, val)
    return args


def _params_dict(args, skip=("func", "config")):
    return {
        k: v for k, v in sorted(vars(args).items()) if k not in skip
    }


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args):
    names = [n.strip() for n in args.embodiments.split(",") if n.strip()]
    if not names:
        raise CliValidationError("--embodiments must name at least one spec")
    specs = [handspec.load_bundled(n) for n in names]
    cfg = GalrConfig(
        density=args.density, base_voxel=args.voxel, radius_scale=args.radius_scale
    )
    ds = trainkit.build_dataset(
        specs,
        args.n_per,
        seed=args.seed,
        config=cfg,
        mode=args.mode,
        materialize="none",
        cache_dir=args.cache_dir,
        workers=args.workers,
    )
    trainkit.save_dataset(ds, args.out)
    _write_run_json(args.out, "gen-data", _params_dict(args), args.workers)
    print(f"wrote {len(ds.records)} states for {len(names)} embodiments to {args.out}")
    return 0


def _cmd_train(args):
    arch = GalrConfig()
    ds = trainkit.load_dataset(
        args.data,
        config=arch,
        materialize="plan",
        cache_dir=args.cache_dir,
        workers=args.workers,
    )
    cfg = trainkit.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        encoder=arch,
        decoder_width=args.decoder_width,
        warmup_steps=args.warmup_steps,
        workers=args.workers,
    )
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "galr.ckpt")
    metrics = os.path.join(args.out, "metrics.csv")
    log = print if args.verbose else None
    result = trainkit.train(ds, cfg, metrics_path=metrics, checkpoint_path=ckpt, log=log)
    _write_run_json(args.out, "train", _params_dict(args), args.workers)
    best = "n/a" if result.best_val is None else f"{result.best_val:.4f}"
    print(f"best val rmse {best} at epoch {result.best_epoch}; checkpoint {ckpt}")
    return 0


def _cmd_eval(args):
    bundle = trainkit.load_bundle(args.ckpt)
    ds = trainkit.load_dataset(
        args.data,
        config=bundle.encoder_config,
        materialize="plan",
        cache_dir=args.cache_dir,
        workers=args.workers,
    )
    reports = trainkit.evaluate(bundle, ds, split=args.split)
    lines = ["embodiment,count,rmse_norm,rmse_rad,self_retarget_max_frac"]
    for name in sorted(reports):
        r = reports[name]
        print(
            f"{name}: n={r.count} rmse_norm={r.rmse_norm:.4f} "
            f"rmse_rad={r.rmse_rad:.4f} self_retarget_max={r.self_retarget_max_frac:.4f}"
        )
        lines.append(
            f"{name},{r.count},{r.rmse_norm},{r.rmse_rad},{r.self_retarget_max_frac}"
        )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        _write_run_json(args.out, "eval", _params_dict(args), args.workers)
    return 0


def _cmd_retarget(args):
    bundle = trainkit.load_bundle(args.ckpt)
    source = handspec.load_bundled(args.source)
    target = handspec.load_bundled(args.target)
    try:
        angles = np.array([float(t) for t in args.angles.split(",")])
    except ValueError:
        raise CliValidationError("--angles must be a comma-separated list of numbers")
    if angles.shape != (source.dof,):
        raise CliValidationError(
            f"--angles: {args.source} needs {source.dof} values, got {len(angles)}"
        )
    q = handspec.make_joint_vector(source, angles)
    out = retarget.retarget(source, q, target, bundle.params, bundle.encoder_config)
    print(",".join(f"{a:.6f}" for a in out.angles))
    return 0


def _cmd_demos(args):
    spec = handspec.load_bundled(args.spec)
    env = latentpolicy.PlanarGraspEnv(spec, horizon=args.horizon)
    demos = latentpolicy.generate_demos(env, args.n, args.region, args.seed)
    latentpolicy.save_demos(args.out, demos, env, args.region, args.seed)
    _write_run_json(args.out, "demos", _params_dict(args), 1)
    print(f"wrote {len(demos)} demos for {args.spec} in region {args.region} to {args.out}")
    return 0


def _cmd_train_policy(args):
    bundle = trainkit.load_bundle(args.galr_ckpt)
    lifted = []
    for path in args.demos:
        demos, manifest = latentpolicy.load_demos(path)
        spec = handspec.load_bundled(manifest["env"]["embodiment"])
        for traj in demos:
            lifted.append(latentpolicy.lift(traj, bundle, spec))
        if args.verbose:
            print(f"lifted {len(demos)} demos from {path}")
    cfg = latentpolicy.PolicyConfig(
        steps=args.steps,
        width=args.width,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    log = print if args.verbose else None
    policy = latentpolicy.train_policy(lifted, cfg, log=log)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "policy.ckpt")
    latentpolicy.save_policy(ckpt, policy)
    with open(os.path.join(args.out, "loss.csv"), "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(policy.loss_curve):
            fh.write(f"{i},{v}\n")
    _write_run_json(args.out, "train-policy", _params_dict(args), 1)
    print(
        f"policy loss {policy.loss_curve[0]:.5f} -> {policy.loss_curve[-1]:.5f} "
        f"over {len(policy.loss_curve)} epochs; checkpoint {ckpt}"
    )
    return 0


def _cmd_eval_policy(args):
    try:
        with open(args.matrix) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CliValidationError(f"cannot read matrix config {args.matrix}: {e}")
    for key in ("galr_ckpt", "policies", "embodiments", "regions"):
        if key not in cfg:
            raise CliValidationError(f"matrix config missing {key!r}")
    if not isinstance(cfg["policies"], dict) or not cfg["policies"]:
        raise CliValidationError("matrix config: 'policies' must map names to paths")
    if int(cfg.get("episodes", 50)) < 20:
        raise CliValidationError("matrix config: need at least 20 episodes per cell")
    bundle = trainkit.load_bundle(cfg["galr_ckpt"])
    policies = {
        name: latentpolicy.load_policy(path) for name, path in cfg["policies"].items()
    }
    envs = [
        latentpolicy.PlanarGraspEnv(handspec.load_bundled(n))
        for n in cfg["embodiments"]
    ]
    rows = latentpolicy.eval_matrix(
        policies,
        envs,
        cfg["regions"],
        bundle,
        episodes=int(cfg.get("episodes", 50)),
        seeds=tuple(cfg.get("seeds", (0, 1, 2, 3, 4))),
        out_csv=args.out,
        workers=args.workers,
    )
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_run_json(out_dir, "eval-policy", _params_dict(args), args.workers)
    for r in rows:
        print(
            f"{r['policy']} on {r['embodiment']} in {r['region']} "
            f"(seed {r['seed']}): {r['success_rate']:.2f}"
        )
    return 0


# ---------------------------------------------------------------------------
# selftest: quick independent-oracle sweep


def _selftest_fk() -> bool:
    # homogeneous-matrix chain recomputed inline, compared to the package FK
    from .handspec import axis_angle_matrix, quat_to_matrix

    for name in ("planar2f", "toy5f"):
        spec = handspec.load_bundled(name)
        rng = np.random.default_rng(0)
        lo, hi = spec.limits_lo(), spec.limits_hi()
        for _ in range(10):
            q = handspec.make_joint_vector(spec, rng.uniform(lo, hi))
            posed = handspec.forward_kinematics(spec, q)
            poses = {spec.root_link: np.eye(4)}
            pending = {j.name: j for j in spec.joints}
            links = {l.name: l for l in spec.links}
            # walk until every link is posed (order-independent)
            remaining = [l for l in spec.links if l.parent_joint is not None]
            while remaining:
                nxt = []
                for l in remaining:
                    j = pending[l.parent_joint]
                    if j.parent_link in poses:
                        a = q.angles[[jj.name for jj in spec.joints].index(j.name)]
                        r4 = np.eye(4)
                        rot = axis_angle_matrix(j.axis, a)
                        r4[:3, :3] = rot @ quat_to_matrix(j.origin_quat)
                        r4[:3, 3] = rot @ np.asarray(j.origin_xyz)
                        poses[l.name] = poses[j.parent_link] @ r4
                    else:
                        nxt.append(l)
                if len(nxt) == len(remaining):
                    return False
                remaining = nxt
            for l in spec.links:
                got = posed.pose_of(l.name)[:3, 3]
                want = poses[l.name][:3, 3]
                if np.abs(got - want).max() > 1e-9:
                    return False
    return True


def _selftest_kpconv() -> bool:
    from .cloud import radius_neighbors

    rng = np.random.default_rng(1)
    for _ in range(5):
        n, k, din, dout = 12, 7, 3, 4
        pts = rng.normal(size=(n, 3)) * 0.05
        feats = rng.normal(size=(n, din))
        disp = encoder.make_disposition(k, 0.06)
        sigma = 0.06 * 0.6
        nl = radius_neighbors(pts, pts, 0.06)
        w = rng.normal(size=(k, din, dout))
        layer = encoder.KPConvLayer(weights=w, sigma=sigma, disposition=disp)
        got = encoder.kpconv_forward(layer, pts, pts, feats, nl)
        want = np.zeros((n, dout))
        for qi in range(n):
            for e in range(nl.offsets[qi], nl.offsets[qi + 1]):
                si = nl.indices[e]
                y = pts[si] - pts[qi]
                for kk in range(k):
                    h = encoder.correlation(y, disp.kernel_points[kk], sigma)
                    if h > 0:
                        want[qi] += h * feats[si] @ w[kk]
        if np.abs(got - want).max() > 1e-10:
            return False
    return True


def _selftest_correlation() -> bool:
    sigma = 0.05
    zero = encoder.correlation(np.zeros(3), np.zeros(3), sigma)
    far = encoder.correlation(np.array([sigma, 0, 0]), np.zeros(3), sigma)
    half = encoder.correlation(np.array([sigma / 2, 0, 0]), np.zeros(3), sigma)
    return zero == 1.0 and far == 0.0 and half == 0.5


def _selftest_fd() -> bool:
    rng = np.random.default_rng(2)
    params = {
        "a": rng.normal(size=(4, 3)),
        "b": rng.normal(size=(1, 3)),
    }
    x = rng.normal(size=(5, 4))

    def build(tape, p):
        pt = {k: tape.param(k, v) for k, v in p.items()}
        h = D.tanh(D.add_bias(D.matmul(tape.input(x), pt["a"]), pt["b"]))
        return D.scale(D.sum_all(D.cmul(h, h)), 1.0 / 15.0)

    rel, _ = D.fd_check(build, params)
    return rel < 1e-6


def _selftest_permutation() -> bool:
    from .cloud import build_pyramid, sample_surface

    spec = handspec.load_bundled("planar2f")
    q = handspec.make_joint_vector(spec, 0.5 * (spec.limits_lo() + spec.limits_hi()))
    posed = handspec.forward_kinematics(spec, q)
    sc = sample_surface(posed, 2e3, 7)
    cfg = GalrConfig(
        widths=(4, 6, 8), d_t=8, layers=1, heads=2, d_latent=4,
        kernel_points=7, density=2e3, base_voxel=12e-3, radius_scale=2.0,
    )
    params = encoder.init_params(cfg, 0)
    z0 = encoder.encode(build_pyramid(sc, cfg.base_voxel, cfg.radius_scale), params, cfg).z
    rng = np.random.default_rng(3)
    perm = rng.permutation(len(sc.points))
    from .cloud import SurfaceCloud

    shuffled = SurfaceCloud(
        points=sc.points[perm],
        semantics=sc.semantics[perm],
        source_embodiment=sc.source_embodiment,
        source_angles=sc.source_angles,
    )
    z1 = encoder.encode(
        build_pyramid(shuffled, cfg.base_voxel, cfg.radius_scale), params, cfg
    ).z
    return np.abs(z0 - z1).max() <= 1e-9


def _cmd_selftest(args):
    checks = [
        ("forward kinematics vs matrix chain", _selftest_fk),
        ("kpconv vs double loop", _selftest_kpconv),
        ("correlation endpoints", _selftest_correlation),
        ("autodiff vs finite differences", _selftest_fd),
        ("encode permutation invariance", _selftest_permutation),
    ]
    width = max(len(n) for n, _ in checks)
    failures = 0
    for name, fn in checks:
        try:
            ok = fn()
        except Exception:
            ok = False
        print(f"{name:<{width}}  {'pass' if ok else 'FAIL'}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 2


# ---------------------------------------------------------------------------
# parser wiring


def _add_common(p, cache=True):
    p.add_argument("--config", help="JSON file supplying defaults for any flag")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--verbose", action="store_true")
    if cache:
        p.add_argument(
            "--cache-dir",
            default=None,
            help="surface-cloud cache (default: GALR_CACHE_DIR)",
        )


def build_parser() -> _Parser:
    parser = _Parser(prog="galr", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand")

    p = sub.add_parser("gen-data", parents=[], help="sample reachable states into a dataset directory")
    p.add_argument("--embodiments", required=True, help="comma-separated bundled spec names")
    p.add_argument("--n-per", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--density", type=float, default=4e3)
    p.add_argument("--voxel", type=float, default=10e-3)
    p.add_argument("--radius-scale", type=float, default=1.5)
    p.add_argument("--mode", default="uniform+canonical", choices=trainkit.SAMPLING_MODES)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the encoder/decoder on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2.5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup-steps", type=int, default=100)
    p.add_argument("--decoder-width", type=int, default=retarget.DECODER_WIDTH)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=trainkit.SPLIT_TAGS)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("retarget", help="map one hand's pose onto another hand")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--angles", required=True, help="comma-separated source joint angles")
    _add_common(p, cache=False)
    p.set_defaults(func=_cmd_retarget)

    p = sub.add_parser("demos", help="scripted-expert demonstrations")
    p.add_argument("--spec", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--region", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=12)
    p.add_argument("--out", required=True)
    _add_common(p, cache=False)
    p.set_defaults(func=_cmd_demos)

    p = sub.add_parser("train-policy", help="train the latent denoising policy on demos")
    p.add_argument("--demos", nargs="+", required=True, help="demo directories")
    p.add_argument("--galr-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, cache=False)
    p.set_defaults(func=_cmd_train_policy)

    p = sub.add_parser("eval-policy", help="success-rate matrix over policies/embodiments/regions")
    p.add_argument("--matrix", required=True, help="JSON cell configuration")
    p.add_argument("--out", required=True, help="results CSV path")
    _add_common(p, cache=False)
    p.set_defaults(func=_cmd_eval_policy)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    _add_common(p, cache=False)
    p.set_defaults(func=_cmd_selftest)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "subcommand", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    defaults = {
        a.dest: a.default
        for a in parser._subparsers._group_actions[0].choices[args.subcommand]._actions
    }
    try:
        args = _merge_config_file(args, defaults)
        if getattr(args, "cache_dir", None) is None and "GALR_CACHE_DIR" in os.environ:
            if hasattr(args, "cache_dir"):
                args.cache_dir = os.environ["GALR_CACHE_DIR"]
        return args.func(args)
    except CliValidationError as e:
        print(f"galr {args.subcommand}: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:
        print(f"galr {args.subcommand}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
