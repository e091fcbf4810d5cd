"""Latent-space imitation on a planar grasp task.

Demonstrations recorded on any hand are lifted into the shared latent action
space (hand state and hand action both replaced by their latent vectors), a
small conditional denoising network is trained on the pooled steps, and
rollouts decode the denoised latent back into joint angles for whichever
embodiment is attached. The network input never contains an embodiment
identifier — that is the property the whole exercise is about.

The environment is a desk-scale stand-in: an object point in the plane, a
wrist moving in SE(2), and a purely geometric success predicate (all
fingertips near the object with the hand closed). No contact dynamics.
"""

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import diffcore as D
from .cloud import build_pyramid, sample_surface
from .encoder import encode
from .handspec import (
    HandSpec,
    clamp_to_limits,
    forward_kinematics,
    load_bundled,
    make_joint_vector,
)
from .registry import REGISTRY_VERSION
from .retarget import decode, encoder_view, pose_seed, select
from .trainkit import _unpack_bundle


class LatentPolicyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Observation:
    """What the policy sees before acting: task state plus raw hand state."""

    object_xy: np.ndarray  # (2,)
    wrist_pose: np.ndarray  # (3,) x, y, yaw
    joints: np.ndarray  # (dof,) current joint angles


@dataclass(frozen=True)
class Step:
    obs: Observation
    action: np.ndarray  # (dof,) absolute joint target
    wrist: np.ndarray  # (3,) absolute wrist pose command


@dataclass(frozen=True)
class Trajectory:
    embodiment_id: str
    steps: tuple

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class LatentStep:
    features: np.ndarray  # (5 + d_latent,) object, wrist pose, hand-state latent
    z: np.ndarray  # (d_latent,) latent of the hand action
    wrist_delta: np.ndarray  # (3,)


@dataclass(frozen=True)
class LatentTrajectory:
    embodiment_id: str
    steps: tuple
    d_latent: int
    encoder_fingerprint: str

    def __len__(self):
        return len(self.steps)


def validate_trajectory(traj: Trajectory, spec: HandSpec) -> None:
    if len(traj.steps) < 1:
        raise LatentPolicyError("trajectory must have at least one step")
    lo, hi = spec.limits_lo(), spec.limits_hi()
    for i, step in enumerate(traj.steps):
        a = np.asarray(step.action, dtype=float)
        if a.shape != (spec.dof,):
            raise LatentPolicyError(
                f"step {i}: action has shape {a.shape}, expected ({spec.dof},)"
            )
        if np.any(a < lo - 1e-12) or np.any(a > hi + 1e-12):
            raise LatentPolicyError(f"step {i}: action outside joint limits")


# ---------------------------------------------------------------------------
# the frozen encoder as a function of joint angles


def encoder_fingerprint(bundle) -> str:
    """Stable identity of an encoder checkpoint (params + architecture).

    Lifted datasets record this so that a policy is never trained on latents
    produced by two different encoders.
    """
    params, cfg, registry = _unpack_bundle(bundle)
    h = hashlib.sha256()
    h.update(registry.encode())
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for name in sorted(params):
        if name.startswith("dec/"):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def galr_of(spec: HandSpec, angles, bundle) -> np.ndarray:
    """Latent vector of a hand state: encode(pyramid(surface(FK(angles)))).

    The per-pose sampling seed is derived from the angles themselves, so the
    map is a deterministic function — the same state always yields the same
    latent, which is what makes lifted datasets reproducible.
    """
    params, cfg, _ = _unpack_bundle(bundle)
    q = make_joint_vector(spec, np.asarray(angles, dtype=float))
    posed = forward_kinematics(spec, q)
    cloud = sample_surface(posed, cfg.density, pose_seed(q))
    pyramid = build_pyramid(cloud, cfg.base_voxel, cfg.radius_scale)
    return encode(pyramid, encoder_view(params), cfg).z


def lift(traj: Trajectory, bundle, spec: Optional[HandSpec] = None) -> LatentTrajectory:
    """Replace hand states and hand actions with their latent vectors.

    Wrist commands stay metric; they are turned into deltas against the
    current wrist pose so the policy predicts motion, not absolute position.
    """
    if len(traj.steps) < 1:
        raise LatentPolicyError("trajectory must have at least one step")
    if spec is None:
        spec = load_bundled(traj.embodiment_id)
    tag = encoder_fingerprint(bundle)
    out = []
    for i, step in enumerate(traj.steps):
        try:
            z_state = galr_of(spec, step.obs.joints, bundle)
        except Exception as e:
            raise LatentPolicyError(f"encoding hand state at step {i}: {e}") from e
        try:
            z_action = galr_of(spec, step.action, bundle)
        except Exception as e:
            raise LatentPolicyError(f"encoding action at step {i}: {e}") from e
        features = np.concatenate(
            [step.obs.object_xy, step.obs.wrist_pose, z_state]
        )
        delta = np.asarray(step.wrist, dtype=float) - step.obs.wrist_pose
        out.append(LatentStep(features=features, z=z_action, wrist_delta=delta))
    return LatentTrajectory(
        embodiment_id=traj.embodiment_id,
        steps=tuple(out),
        d_latent=len(out[0].z),
        encoder_fingerprint=tag,
    )


# ---------------------------------------------------------------------------
# planar grasp environment


@dataclass(frozen=True)
class Region:
    name: str
    x: tuple
    y: tuple


# Disjoint object regions used by the co-training / few-shot experiments;
# the gap between them is deliberate.
REGIONS = {
    "A": Region("A", (-0.18, -0.02), (0.12, 0.30)),
    "B": Region("B", (0.02, 0.18), (0.12, 0.30)),
}

OBJECT_BOUNDS = ((-0.20, 0.20), (0.10, 0.32))
WRIST_BOUNDS = ((-0.30, 0.30), (-0.10, 0.40))


def _resolve_region(region) -> Region:
    if isinstance(region, Region):
        r = region
    elif isinstance(region, str):
        if region not in REGIONS:
            raise LatentPolicyError(
                f"unknown region {region!r}; have {sorted(REGIONS)}"
            )
        r = REGIONS[region]
    else:
        raise LatentPolicyError(f"region must be a name or Region, got {type(region)!r}")
    (xlo, xhi), (ylo, yhi) = OBJECT_BOUNDS
    if not (xlo <= r.x[0] <= r.x[1] <= xhi and ylo <= r.y[0] <= r.y[1] <= yhi):
        raise LatentPolicyError(f"region {r.name!r} is outside the object workspace")
    return r


def sample_object(rng: np.random.Generator, region) -> np.ndarray:
    r = _resolve_region(region)
    return np.array([rng.uniform(*r.x), rng.uniform(*r.y)])


def se2_matrix(pose) -> np.ndarray:
    """Lift a planar (x, y, yaw) pose to a 4x4 transform about the z axis."""
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    m = np.eye(4)
    m[0, 0], m[0, 1], m[1, 0], m[1, 1] = c, -s, s, c
    m[0, 3], m[1, 3] = x, y
    return m


def fingertip_points(spec: HandSpec, angles, wrist_pose) -> np.ndarray:
    """World XY of the outermost point of each finger's last segment."""
    q = make_joint_vector(spec, np.asarray(angles, dtype=float))
    posed = forward_kinematics(spec, q, wrist=se2_matrix(wrist_pose))
    tips = {}
    for link in posed.links:
        u, v = link.semantic
        if u == 0:
            continue
        if u not in tips or v > tips[u][0]:
            g = link.geometry
            reach = getattr(g, "length", 0.0) + getattr(g, "radius", 0.0)
            p = link.pose @ np.array([-reach, 0.0, 0.0, 1.0])
            tips[u] = (v, p[:2])
    return np.stack([tips[u][1] for u in sorted(tips)])


def _grip_postures(spec: HandSpec):
    """Search per-finger {lo, mid, hi} combinations for the tightest and
    loosest fingertip clusters (projected to the plane).

    The tight one is the canonical "closed" grasp posture, the loose one is
    "open". Doing this by search instead of assuming a limit matters: some
    hands pinch at mid-range where opposing fingers meet.
    """
    lo, hi = spec.limits_lo(), spec.limits_hi()
    mid = 0.5 * (lo + hi)
    fingers = sorted({l.semantic[0] for l in spec.links if l.semantic[0] > 0})
    joint_finger = _joint_finger_map(spec)

    best = worst = None
    n_f = len(fingers)
    for combo in range(3**n_f):
        choice = {}
        c = combo
        for f in fingers:
            choice[f] = c % 3
            c //= 3
        q = mid.copy()
        for j, f in enumerate(joint_finger):
            if f in choice:
                q[j] = (lo, mid, hi)[choice[f]][j]
        tips = fingertip_points(spec, q, (0.0, 0.0, 0.0))
        centroid = tips.mean(axis=0)
        spread = float(np.linalg.norm(tips - centroid, axis=1).max())
        if best is None or spread < best[0]:
            best = (spread, q, centroid)
        if worst is None or spread > worst[0]:
            worst = (spread, q, centroid)
    closed_spread, closed_q, closed_centroid = best
    return worst[1], closed_q, closed_spread, closed_centroid


def _joint_finger_map(spec: HandSpec):
    """Finger index for each joint: the finger of the subtree it moves."""
    child_finger = {}
    for link in spec.links:
        if link.parent_joint is not None:
            child_finger[link.parent_joint] = link.semantic[0]
    return [child_finger.get(j.name, 0) for j in spec.joints]


def success_predicate(
    spec: HandSpec,
    angles,
    wrist_pose,
    object_xy,
    grasp_radius: float,
    open_q,
    closed_q,
    closure_frac: float,
) -> bool:
    """Pure grasp test: every fingertip near the object, hand mostly closed.

    Closure is measured as mean progress from the open posture toward the
    closed one, so it is meaningful for hands that pinch mid-range.
    """
    tips = fingertip_points(spec, angles, wrist_pose)
    dist = np.linalg.norm(tips - np.asarray(object_xy), axis=1).max()
    if dist > grasp_radius:
        return False
    span = np.abs(np.asarray(closed_q) - np.asarray(open_q))
    with np.errstate(invalid="ignore", divide="ignore"):
        progress = 1.0 - np.abs(np.asarray(angles) - closed_q) / span
    progress = np.where(span < 1e-12, 1.0, np.clip(progress, 0.0, 1.0))
    return float(progress.mean()) >= closure_frac


class PlanarGraspEnv:
    """Deterministic position-controlled planar grasping.

    Each step the wrist pose and the joint targets are applied directly
    (clamped to bounds/limits); success is a geometric predicate. All the
    randomness lives outside: `reset` takes the object position explicitly.
    """

    def __init__(
        self,
        spec: HandSpec,
        grasp_margin: float = 0.025,
        closure_frac: float = 0.8,
        horizon: int = 12,
    ):
        self.spec = spec
        self.grasp_margin = grasp_margin
        self.closure_frac = closure_frac
        self.horizon = horizon
        open_q, closed_q, spread, centroid = _grip_postures(spec)
        self.open_q = open_q
        self.closed_q = closed_q
        self.grasp_radius = spread + grasp_margin
        self.closed_centroid = centroid  # XY, in the wrist frame at yaw 0
        self.object_xy = None
        self.wrist_pose = None
        self.q = None
        self.t = 0

    def config_dict(self) -> dict:
        return {
            "embodiment": self.spec.embodiment_id,
            "grasp_margin": self.grasp_margin,
            "closure_frac": self.closure_frac,
            "horizon": self.horizon,
        }

    def clone(self) -> "PlanarGraspEnv":
        """Fresh instance sharing the precomputed postures (cheap; the
        posture search is the expensive part of construction)."""
        new = object.__new__(PlanarGraspEnv)
        for k, v in self.__dict__.items():
            new.__dict__[k] = v.copy() if isinstance(v, np.ndarray) else v
        new.object_xy = None
        new.wrist_pose = None
        new.q = None
        new.t = 0
        return new

    def reset(self, object_xy) -> Observation:
        obj = np.asarray(object_xy, dtype=float)
        (xlo, xhi), (ylo, yhi) = OBJECT_BOUNDS
        if not (xlo <= obj[0] <= xhi and ylo <= obj[1] <= yhi):
            raise LatentPolicyError(f"object position {obj} outside the workspace")
        self.object_xy = obj
        self.wrist_pose = np.zeros(3)
        self.q = self.open_q.copy()
        self.t = 0
        return self.observe()

    def observe(self) -> Observation:
        return Observation(
            object_xy=self.object_xy.copy(),
            wrist_pose=self.wrist_pose.copy(),
            joints=self.q.copy(),
        )

    def step(self, hand_target, wrist_target) -> Observation:
        if self.object_xy is None:
            raise LatentPolicyError("step before reset")
        clamped, _ = clamp_to_limits(self.spec, np.asarray(hand_target, dtype=float))
        self.q = clamped.angles
        w = np.asarray(wrist_target, dtype=float).copy()
        (xlo, xhi), (ylo, yhi) = WRIST_BOUNDS
        w[0] = min(max(w[0], xlo), xhi)
        w[1] = min(max(w[1], ylo), yhi)
        w[2] = math.atan2(math.sin(w[2]), math.cos(w[2]))
        self.wrist_pose = w
        self.t += 1
        return self.observe()

    def success(self) -> bool:
        return success_predicate(
            self.spec,
            self.q,
            self.wrist_pose,
            self.object_xy,
            self.grasp_radius,
            self.open_q,
            self.closed_q,
            self.closure_frac,
        )

    def done(self) -> bool:
        return self.t >= self.horizon


# ---------------------------------------------------------------------------
# scripted expert and demo generation


def expert_grasp_pose(env: PlanarGraspEnv, object_xy) -> np.ndarray:
    """Wrist pose from which closing the hand captures the object.

    The approach yaw turns the palm toward the object, and the position
    backs off by the closed-posture fingertip centroid so the cluster of
    tips lands on the object point.
    """
    ox, oy = object_xy
    yaw = math.atan2(oy, ox) - math.pi / 2.0
    c, s = math.cos(yaw), math.sin(yaw)
    cx, cy = env.closed_centroid
    return np.array([ox - (c * cx - s * cy), oy - (s * cx + c * cy), yaw])


def _expert_plan(env: PlanarGraspEnv, object_xy, reach_steps=5, close_steps=5):
    grasp = expert_grasp_pose(env, object_xy)
    (xlo, xhi), (ylo, yhi) = WRIST_BOUNDS
    if not (xlo <= grasp[0] <= xhi and ylo <= grasp[1] <= yhi):
        raise LatentPolicyError(
            f"unreachable object placement {np.asarray(object_xy)}: "
            f"needs wrist at {grasp[:2]}"
        )
    home = np.zeros(3)
    plan = []
    for k in range(1, reach_steps + 1):
        frac = k / reach_steps
        plan.append((env.open_q.copy(), home + frac * (grasp - home)))
    for k in range(1, close_steps + 1):
        frac = k / close_steps
        q = env.open_q + frac * (env.closed_q - env.open_q)
        plan.append((q, grasp.copy()))
    return plan


def generate_demos(env: PlanarGraspEnv, n: int, region, seed: int):
    """Roll the scripted expert `n` times with objects sampled in `region`.

    Every demo ends in success; anything else is a bug worth crashing on.
    """
    if n < 1:
        raise LatentPolicyError("demo count must be positive")
    r = _resolve_region(region)
    demos = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        obj = sample_object(rng, r)
        obs = env.reset(obj)
        steps = []
        for hand_t, wrist_t in _expert_plan(env, obj):
            steps.append(Step(obs=obs, action=hand_t, wrist=wrist_t))
            obs = env.step(hand_t, wrist_t)
        if not env.success():
            raise LatentPolicyError(
                f"scripted expert failed on object {obj} for "
                f"{env.spec.embodiment_id!r}"
            )
        demos.append(Trajectory(embodiment_id=env.spec.embodiment_id, steps=tuple(steps)))
    return demos


# ---------------------------------------------------------------------------
# demo persistence

_DEMO_FORMAT = "galr-demos-v1"


def save_demos(path, demos: Sequence[Trajectory], env: PlanarGraspEnv, region, seed: int):
    os.makedirs(path, exist_ok=True)
    r = _resolve_region(region)
    manifest = {
        "format": _DEMO_FORMAT,
        "registry_version": REGISTRY_VERSION,
        "count": len(demos),
        "region": {"name": r.name, "x": list(r.x), "y": list(r.y)},
        "seed": seed,
        "env": env.config_dict(),
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    for i, traj in enumerate(demos):
        np.savez(
            os.path.join(path, f"demo_{i:04d}.npz"),
            object_xy=traj.steps[0].obs.object_xy,
            obs_wrist=np.stack([s.obs.wrist_pose for s in traj.steps]),
            obs_joints=np.stack([s.obs.joints for s in traj.steps]),
            actions=np.stack([s.action for s in traj.steps]),
            wrist_cmds=np.stack([s.wrist for s in traj.steps]),
        )


def load_demos(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise LatentPolicyError(f"no demo manifest at {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _DEMO_FORMAT:
        raise LatentPolicyError(
            f"unrecognized demo format {manifest.get('format')!r}"
        )
    if manifest["registry_version"] != REGISTRY_VERSION:
        raise LatentPolicyError(
            f"demos were recorded under registry {manifest['registry_version']!r}, "
            f"this build is {REGISTRY_VERSION!r}"
        )
    eid = manifest["env"]["embodiment"]
    demos = []
    for i in range(manifest["count"]):
        with np.load(os.path.join(path, f"demo_{i:04d}.npz")) as d:
            steps = tuple(
                Step(
                    obs=Observation(
                        object_xy=d["object_xy"].copy(),
                        wrist_pose=d["obs_wrist"][t],
                        joints=d["obs_joints"][t],
                    ),
                    action=d["actions"][t],
                    wrist=d["wrist_cmds"][t],
                )
                for t in range(len(d["actions"]))
            )
        demos.append(Trajectory(embodiment_id=eid, steps=steps))
    return demos, manifest


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (S,)
    alpha_bar: np.ndarray  # (S,) cumulative products, decreasing in (0, 1]

    @property
    def steps(self) -> int:
        return len(self.betas)


def cosine_schedule(steps: int = 10, offset: float = 0.008) -> NoiseSchedule:
    """Squared-cosine noise schedule; smooth and bounded away from both ends."""
    if steps < 1:
        raise LatentPolicyError("schedule needs at least one step")
    s = np.arange(steps + 1, dtype=float)
    f = np.cos(((s / steps + offset) / (1.0 + offset)) * math.pi / 2.0) ** 2
    raw = f[1:] / f[0]
    prev = np.concatenate([[1.0], raw[:-1]])
    betas = np.clip(1.0 - raw / prev, 0.0, 0.999)
    # rebuild the cumulative products from the clipped betas so the pair
    # stays consistent (the raw final product underflows toward zero)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bar=alpha_bar)


# ---------------------------------------------------------------------------
# denoising policy


@dataclass(frozen=True)
class PolicyConfig:
    steps: int = 10
    width: int = 128
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.width < 1:
            raise LatentPolicyError("steps and width must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise LatentPolicyError("epochs, batch_size and lr must be positive")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "width": self.width,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


@dataclass(frozen=True)
class PolicyCheckpoint:
    params: dict
    config: PolicyConfig
    d_latent: int
    encoder_fingerprint: str
    loss_curve: tuple
    registry_version: str = REGISTRY_VERSION

    @property
    def action_dim(self) -> int:
        return self.d_latent + 3


def init_policy_params(in_dim: int, out_dim: int, width: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    shapes = {
        "pol/W1": (in_dim, width),
        "pol/b1": (1, width),
        "pol/W2": (width, width),
        "pol/b2": (1, width),
        "pol/W3": (width, out_dim),
        "pol/b3": (1, out_dim),
    }
    params = {}
    for name, shape in shapes.items():
        if name.endswith("b1") or name.endswith("b2") or name.endswith("b3"):
            params[name] = np.zeros(shape)
        elif name.endswith("W3"):
            # tiny final layer: the untrained policy predicts near-zero noise
            params[name] = rng.normal(0.0, 0.01, size=shape)
        else:
            params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
    return params


def denoise_net(params: dict, x: np.ndarray) -> np.ndarray:
    """Plain forward pass of the noise predictor; `x` is (B, in_dim)."""
    h = np.maximum(x @ params["pol/W1"] + params["pol/b1"][0], 0.0)
    h = np.maximum(h @ params["pol/W2"] + params["pol/b2"][0], 0.0)
    return h @ params["pol/W3"] + params["pol/b3"][0]


def _step_onehot(s: np.ndarray, steps: int) -> np.ndarray:
    out = np.zeros((len(s), steps))
    out[np.arange(len(s)), np.asarray(s) - 1] = 1.0
    return out


def _pool_steps(latents: Sequence[LatentTrajectory]):
    feats, actions = [], []
    for traj in latents:
        for step in traj.steps:
            feats.append(step.features)
            actions.append(np.concatenate([step.z, step.wrist_delta]))
    return np.stack(feats), np.stack(actions)


def train_policy(
    latents: Sequence[LatentTrajectory],
    config: PolicyConfig = PolicyConfig(),
    log: Optional[Callable[[str], None]] = None,
) -> PolicyCheckpoint:
    """Noise-regression training over pooled lifted steps.

    The denoiser conditions on (observation features, noisy action, step
    index); nothing identifies the embodiment, so trajectories from any
    number of hands pool into one dataset.
    """
    if not latents:
        raise LatentPolicyError("no lifted trajectories given")
    tags = sorted({t.encoder_fingerprint for t in latents})
    if len(tags) > 1:
        raise LatentPolicyError(
            f"mixed encoder checkpoints in the lifted data: {tags[0]} vs {tags[1]}"
        )
    widths = sorted({t.d_latent for t in latents})
    if len(widths) > 1:
        raise LatentPolicyError(f"inconsistent latent widths: {widths}")
    d_latent = widths[0]

    feats, actions = _pool_steps(latents)
    n, out_dim = actions.shape
    sched = cosine_schedule(config.steps)
    in_dim = feats.shape[1] + out_dim + config.steps
    params = init_policy_params(in_dim, out_dim, config.width, config.seed)
    state = D.adam_init(params)
    rng = np.random.default_rng(config.seed)

    curve = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            s = rng.integers(1, config.steps + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), out_dim))
            ab = sched.alpha_bar[s - 1][:, None]
            noisy = np.sqrt(ab) * actions[idx] + np.sqrt(1.0 - ab) * eps
            x = np.concatenate(
                [feats[idx], noisy, _step_onehot(s, config.steps)], axis=1
            )
            tape = D.Tape()
            pt = {k: tape.param(k, v) for k, v in params.items()}
            h = D.relu(D.add_bias(D.matmul(tape.input(x), pt["pol/W1"]), pt["pol/b1"]))
            h = D.relu(D.add_bias(D.matmul(h, pt["pol/W2"]), pt["pol/b2"]))
            pred = D.add_bias(D.matmul(h, pt["pol/W3"]), pt["pol/b3"])
            diff = D.add(pred, tape.input(-eps))
            loss = D.scale(D.sum_all(D.cmul(diff, diff)), 1.0 / eps.size)
            grads = tape.backward(loss)
            D.optimizer_step(params, grads, state, lr=config.lr)
            losses.append(float(loss.values[0, 0]))
        curve.append(float(np.mean(losses)))
        if log is not None and (epoch % 50 == 0 or epoch == config.epochs - 1):
            log(f"policy epoch {epoch:4d} loss={curve[-1]:.5f}")

    return PolicyCheckpoint(
        params=params,
        config=config,
        d_latent=d_latent,
        encoder_fingerprint=tags[0],
        loss_curve=tuple(curve),
    )


def save_policy(path, policy: PolicyCheckpoint) -> None:
    meta = {
        "kind": "galr-policy",
        "config": policy.config.to_dict(),
        "d_latent": policy.d_latent,
        "encoder_fingerprint": policy.encoder_fingerprint,
        "loss_curve": list(policy.loss_curve),
    }
    ckpt_io.save_checkpoint(path, policy.params, meta)


def load_policy(path) -> PolicyCheckpoint:
    params, meta = ckpt_io.load_checkpoint(path)
    if meta.get("kind") != "galr-policy":
        raise LatentPolicyError(f"{path} is not a policy checkpoint")
    return PolicyCheckpoint(
        params={k: v.astype(np.float64) for k, v in params.items()},
        config=PolicyConfig.from_dict(meta["config"]),
        d_latent=int(meta["d_latent"]),
        encoder_fingerprint=meta["encoder_fingerprint"],
        loss_curve=tuple(meta["loss_curve"]),
    )


# ---------------------------------------------------------------------------
# sampling / rollout


def denoise_sample(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    out_dim: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run the reverse process from a unit Gaussian down to a sample.

    `eps_fn(x, s)` predicts the noise at step s. With perfect predictions
    and a single step this reduces to direct regression of the target.
    """
    x = rng.standard_normal(out_dim)
    for s in range(sched.steps, 0, -1):
        ab = sched.alpha_bar[s - 1]
        ab_prev = sched.alpha_bar[s - 2] if s > 1 else 1.0
        beta = sched.betas[s - 1]
        alpha = 1.0 - beta
        eps_hat = eps_fn(x, s)
        x = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
        if s > 1:
            var = (1.0 - ab_prev) / (1.0 - ab) * beta
            x = x + math.sqrt(var) * rng.standard_normal(out_dim)
    return x


@dataclass(frozen=True)
class EpisodeRecord:
    embodiment_id: str
    object_xy: np.ndarray
    success: bool
    steps: int
    trace: tuple  # per-step (joint angles, wrist pose) after acting


def rollout(
    policy: PolicyCheckpoint,
    env: PlanarGraspEnv,
    bundle,
    region,
    seed,
) -> EpisodeRecord:
    """One seeded episode: denoise a latent action, decode it for the
    attached hand, step, repeat until success or horizon."""
    tag = encoder_fingerprint(bundle)
    if tag != policy.encoder_fingerprint:
        raise LatentPolicyError(
            f"policy was lifted with encoder {policy.encoder_fingerprint}, "
            f"rollout got {tag}"
        )
    params, cfg, _ = _unpack_bundle(bundle)
    sched = cosine_schedule(policy.config.steps)
    rng = np.random.default_rng(seed)
    obj = sample_object(rng, region)
    obs = env.reset(obj)

    trace = []
    success = False
    t = 0
    while not env.done():
        z_state = galr_of(env.spec, obs.joints, bundle)
        feat = np.concatenate([obs.object_xy, obs.wrist_pose, z_state])

        def eps_fn(x, s):
            row = np.concatenate([feat, x, _step_onehot(np.array([s]), sched.steps)[0]])
            return denoise_net(policy.params, row[None, :])[0]

        action = denoise_sample(eps_fn, policy.action_dim, sched, rng)
        if not np.isfinite(action).all():
            raise LatentPolicyError(f"non-finite latent action at control step {t}")
        z_act, wrist_delta = action[: policy.d_latent], action[policy.d_latent :]
        theta = select(decode(z_act, params), env.spec)
        obs = env.step(theta.angles, obs.wrist_pose + wrist_delta)
        trace.append((obs.joints.copy(), obs.wrist_pose.copy()))
        t += 1
        if env.success():
            success = True
            break
    return EpisodeRecord(
        embodiment_id=env.spec.embodiment_id,
        object_xy=obj,
        success=success,
        steps=t,
        trace=tuple(trace),
    )


# ---------------------------------------------------------------------------
# evaluation matrix

EVAL_HEADER = ("policy", "embodiment", "region", "seed", "success_rate")


def eval_matrix(
    policies: dict,
    envs: Sequence[PlanarGraspEnv],
    regions: Sequence,
    bundle,
    episodes: int = 50,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    out_csv=None,
    workers: int = 1,
):
    """Success rate for every (policy, embodiment, region, seed) cell.

    Episodes are independently seeded, so the result does not depend on the
    worker count; rows come out in fixed iteration order either way.
    """
    if episodes < 20:
        raise LatentPolicyError("need at least 20 episodes per cell")
    rows = []
    for pname, policy in policies.items():
        for env in envs:
            for region in regions:
                rname = _resolve_region(region).name
                for seed in seeds:

                    def run(ep, _env=env, _p=policy, _r=region, _s=seed, fresh=False):
                        # a rollout mutates its env, so parallel episodes
                        # each take a clone
                        e = _env.clone() if fresh else _env
                        return rollout(_p, e, bundle, _r, [_s, ep]).success

                    if workers > 1:
                        with ThreadPoolExecutor(max_workers=workers) as pool:
                            results = list(
                                pool.map(lambda ep: run(ep, fresh=True), range(episodes))
                            )
                    else:
                        results = [run(ep) for ep in range(episodes)]
                    rate = float(np.mean(results))
                    rows.append(
                        {
                            "policy": pname,
                            "embodiment": env.spec.embodiment_id,
                            "region": rname,
                            "seed": seed,
                            "success_rate": rate,
                        }
                    )
    if out_csv is not None:
        with open(out_csv, "w") as fh:
            fh.write(",".join(EVAL_HEADER) + "\n")
            for r in rows:
                fh.write(
                    f"{r['policy']},{r['embodiment']},{r['region']},"
                    f"{r['seed']},{r['success_rate']}\n"
                )
    return rows
