"""Unified decoding from the latent space back to joint angles.

One decoder serves every embodiment: it predicts a normalized angle for all
joints of the universal hand model, and per-embodiment selection picks out
the joints a given hand actually has, denormalizing each into that joint's
limit range. The decoder never sees an embodiment id — only `select` does —
which is what makes the latent space transferable between hands.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as D
from .cloud import build_pyramid, sample_surface
from .encoder import GalrConfig, GaLRVector, encode
from .handspec import HandSpec, JointVector, forward_kinematics, make_joint_vector
from .registry import REGISTRY_VERSION, UNIVERSAL_MODEL_SIZE


class RetargetError(ValueError):
    pass


DECODER_WIDTH = 256  # smallest hidden width that reaches the target RMSE


@dataclass(frozen=True)
class UniversalJointPrediction:
    """Normalized angle predictions for every joint of the universal model."""

    theta_hat: np.ndarray  # (UNIVERSAL_MODEL_SIZE,) in [-1, 1] units
    producer: str = "unsaved"
    registry_version: str = REGISTRY_VERSION

    def __post_init__(self):
        if self.theta_hat.shape != (UNIVERSAL_MODEL_SIZE,):
            raise RetargetError(
                f"prediction length {self.theta_hat.shape} != registry size {UNIVERSAL_MODEL_SIZE}"
            )
        if not np.isfinite(self.theta_hat).all():
            raise RetargetError("non-finite joint prediction")


@dataclass(frozen=True)
class SelectionMask:
    """Which universal registry slots a hand occupies, in its joint order."""

    embodiment_id: str
    indices: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.indices)) != len(self.indices):
            raise RetargetError(f"duplicate universal indices for {self.embodiment_id}")


def selection_mask(spec: HandSpec) -> SelectionMask:
    return SelectionMask(embodiment_id=spec.embodiment_id, indices=spec.universal_ids())


# ---------------------------------------------------------------------------
# decoder parameters


def decoder_shapes(d_latent: int, width: int = DECODER_WIDTH) -> dict:
    return {
        "dec/W1": (d_latent, width),
        "dec/b1": (1, width),
        "dec/W2": (width, width),
        "dec/b2": (1, width),
        "dec/W3": (width, UNIVERSAL_MODEL_SIZE),
        "dec/b3": (1, UNIVERSAL_MODEL_SIZE),
    }


def init_decoder_params(d_latent: int, seed: int, width: int = DECODER_WIDTH) -> dict:
    rng = np.random.default_rng(seed)
    shapes = decoder_shapes(d_latent, width)
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(("b1", "b2", "b3")):
            params[name] = np.zeros(shape)
        elif name.endswith("W3"):
            # Keep the output layer tiny so the initial prediction sits at
            # mid-range, inside the linear region of tanh. A He-scaled final
            # layer saturates the nonlinearity and training never moves.
            params[name] = rng.normal(0.0, 0.01, size=shape)
        else:
            params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
    return params


def encoder_view(params: dict) -> dict:
    """The encoder's slice of a combined encoder+decoder parameter dict."""
    return {k: v for k, v in params.items() if not k.startswith("dec/")}


def _decoder_arrays(params: dict):
    try:
        return tuple(params[f"dec/{n}"] for n in ("W1", "b1", "W2", "b2", "W3", "b3"))
    except KeyError as e:
        raise RetargetError(f"decoder parameter {e.args[0]!r} missing from checkpoint") from e


# ---------------------------------------------------------------------------
# decode / select / loss


def decode(z, params: dict) -> UniversalJointPrediction:
    """3-layer feedforward map from the latent vector to normalized angles.

    The final tanh keeps every output in (-1, 1), so selection can always
    denormalize into physical limits. Reads no embodiment information.
    """
    producer = z.producer if isinstance(z, GaLRVector) else "unsaved"
    zv = z.z if isinstance(z, GaLRVector) else np.asarray(z, dtype=np.float64)
    w1, b1, w2, b2, w3, b3 = _decoder_arrays(params)
    if zv.shape != (w1.shape[0],):
        raise RetargetError(
            f"latent width {zv.shape} does not match decoder input {w1.shape[0]} "
            "(checkpoint mismatch)"
        )
    h = np.maximum(zv @ w1 + b1[0], 0.0)
    h = np.maximum(h @ w2 + b2[0], 0.0)
    theta = np.tanh(h @ w3 + b3[0])
    return UniversalJointPrediction(theta_hat=theta, producer=producer)


def decode_on_tape(tape: D.Tape, z: D.Tensor, params_t: dict) -> D.Tensor:
    """Taped decoder over a batch of latents: (B, d_latent) -> (B, |H|)."""
    h = D.relu(D.add_bias(D.matmul(z, params_t["dec/W1"]), params_t["dec/b1"]))
    h = D.relu(D.add_bias(D.matmul(h, params_t["dec/W2"]), params_t["dec/b2"]))
    return D.tanh(D.add_bias(D.matmul(h, params_t["dec/W3"]), params_t["dec/b3"]))


def select(prediction: UniversalJointPrediction, spec: HandSpec) -> JointVector:
    """Pick the spec's universal slots and denormalize into joint limits.

    The affine combination lo*(1-w) + hi*w hits both endpoints exactly; the
    final min/max only absorbs 1-ulp interior rounding, it never clamps a
    genuinely out-of-range value because w lies in [0, 1].
    """
    if prediction.registry_version != REGISTRY_VERSION:
        raise RetargetError(
            f"prediction registry {prediction.registry_version!r} does not match "
            f"this build's {REGISTRY_VERSION!r}"
        )
    t = prediction.theta_hat[spec.universal_ids()]
    w = (t + 1.0) / 2.0
    lo, hi = spec.limits_lo(), spec.limits_hi()
    angles = lo * (1.0 - w) + hi * w
    angles = np.minimum(np.maximum(angles, lo), hi)
    return make_joint_vector(spec, angles)


def normalize_angles(angles, spec: HandSpec) -> np.ndarray:
    """Map physical angles to [-1, 1] by each joint's limit range."""
    arr = np.asarray(angles, dtype=np.float64)
    lo, hi = spec.limits_lo(), spec.limits_hi()
    return 2.0 * (arr - lo) / (hi - lo) - 1.0


def _angle_array(q, spec: HandSpec, role: str) -> np.ndarray:
    if isinstance(q, JointVector):
        if q.embodiment_id != spec.embodiment_id:
            raise RetargetError(
                f"{role} belongs to {q.embodiment_id!r}, spec is {spec.embodiment_id!r}"
            )
        arr = q.angles
    else:
        arr = np.asarray(q, dtype=np.float64)
    if arr.shape != (spec.dof,):
        raise RetargetError(f"{role} has {arr.shape} angles, spec has {spec.dof} joints")
    return arr


def rmse_loss(predicted, target, spec: HandSpec) -> float:
    """Root-mean-square joint error in normalized [-1, 1] coordinates."""
    p = normalize_angles(_angle_array(predicted, spec, "prediction"), spec)
    t = normalize_angles(_angle_array(target, spec, "target"), spec)
    e = p - t
    return float(np.sqrt(np.mean(e * e)))


def rmse_radians(predicted, target, spec: HandSpec) -> float:
    """Companion metric in raw radians (wide-range joints dominate here)."""
    e = _angle_array(predicted, spec, "prediction") - _angle_array(target, spec, "target")
    return float(np.sqrt(np.mean(e * e)))


def selector_matrix(spec: HandSpec, dtype=np.float64) -> np.ndarray:
    """(|H|, d_m) 0/1 matrix whose columns pick the spec's universal slots.

    Selecting by matmul keeps gradients exactly zero on unselected slots.
    """
    ids = spec.universal_ids()
    m = np.zeros((UNIVERSAL_MODEL_SIZE, len(ids)), dtype=dtype)
    m[ids, np.arange(len(ids))] = 1.0
    return m


def masked_sq_err_on_tape(tape: D.Tape, theta: D.Tensor, selector: D.Tensor, target_norm: D.Tensor):
    """Sum of squared normalized errors over one embodiment's selected joints.

    Returns (scalar tensor, error count); callers pool several embodiments'
    sums and counts before the final sqrt(mean).
    """
    pred = D.matmul(theta, selector)
    diff = D.add(pred, D.scale(target_norm, -1.0))
    return D.sum_all(D.cmul(diff, diff)), int(np.prod(target_norm.shape))


def rmse_loss_on_tape(tape: D.Tape, theta: D.Tensor, spec: HandSpec, target_norm: D.Tensor) -> D.Tensor:
    """Differentiable normalized RMSE for a single-embodiment batch."""
    sel = tape.input(selector_matrix(spec, dtype=tape.dtype))
    total, count = masked_sq_err_on_tape(tape, theta, sel, target_norm)
    return D.sqrt(D.scale(total, 1.0 / count))


# ---------------------------------------------------------------------------
# end-to-end retargeting


def pose_seed(q: JointVector) -> int:
    """Deterministic sampling seed from a pose (stable across processes)."""
    digest = hashlib.sha256(
        q.embodiment_id.encode("utf-8") + np.asarray(q.angles, dtype=np.float64).tobytes()
    ).digest()
    return int.from_bytes(digest[:4], "little")


def retarget(
    source_spec: HandSpec,
    q_source: JointVector,
    target_spec: HandSpec,
    params: dict,
    config: GalrConfig,
) -> JointVector:
    """Encode a source pose and decode it as the target hand's joint angles.

    Every stage failure is re-raised with a stage tag so a pipeline error
    points at the stage that produced it.
    """

    def stage(tag, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as e:
            raise RetargetError(f"{tag}: {e}") from e

    seed = pose_seed(q_source)
    posed = stage("forward kinematics", forward_kinematics, source_spec, q_source)
    sc = stage("surface sampling", sample_surface, posed, config.density, seed)
    pyramid = stage("pyramid", build_pyramid, sc, config.base_voxel, config.radius_scale)
    z = stage("encode", encode, pyramid, encoder_view(params), config)
    prediction = stage("decode", decode, z, params)
    return stage("select", select, prediction, target_spec)
