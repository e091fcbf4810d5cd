"""Geometry-aware latent encoder.

Turns a multi-scale point-cloud pyramid into a fixed-width latent vector:
kernel-point convolutions extract local structure level by level, a small
transformer with coordinate and semantic positional embeddings mixes the
superpoints, and mean pooling plus a linear head produce z.

The convolution geometry (neighbor pairs and their correlation against every
kernel point) is precomputed into a ConvPlan whose sparse matrices are cached
per dtype, so the taped fast path pays the geometry cost once per pyramid.
`kpconv_forward` is the plain-numpy reference entry point; the taped route
registers a fused forward/backward through Tape.custom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import scipy.sparse as sp

from . import diffcore as D
from .cloud import MultiScaleCloud, NeighborList


class EncoderError(ValueError):
    pass


# Fraction of the ball radius at which the outer kernel points sit. The shell
# leaves margin so points influence the whole ball despite the linear decay.
KERNEL_SHELL = 0.66

# Additive attention mask value for cross-sample pairs in a batched forward.
# Finite (so finiteness checks stay meaningful) but large enough that softmax
# underflows the masked entries to exactly zero.
MASK_VALUE = -1e30


# ---------------------------------------------------------------------------
# kernel disposition and correlation


@dataclass(frozen=True)
class KernelDisposition:
    """Fixed kernel-point offsets inside the ball of a given radius."""

    kernel_points: np.ndarray  # (K, 3) float64
    radius: float

    def __post_init__(self):
        kp = self.kernel_points
        if kp.ndim != 2 or kp.shape[1] != 3 or kp.shape[0] == 0:
            raise EncoderError(f"kernel points must be (K, 3), got {kp.shape}")
        if np.abs(kp[0]).max() != 0.0:
            raise EncoderError("first kernel point must sit at the origin")
        norms = np.linalg.norm(kp, axis=1)
        if norms.max() > self.radius:
            raise EncoderError("kernel points must lie inside the ball radius")

    @property
    def count(self) -> int:
        return self.kernel_points.shape[0]


def _icosahedron_vertices() -> np.ndarray:
    """The 12 unit icosahedron vertices: cyclic families of (0, ±1, ±φ)."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = []
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            verts.append((0.0, s1, s2 * phi))
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            verts.append((s1, s2 * phi, 0.0))
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            verts.append((s1 * phi, 0.0, s2))
    v = np.array(verts, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_disposition(K: int, r: float) -> KernelDisposition:
    """Closed-form kernel point placement: the origin alone, or the origin
    plus octahedron (K=7) / icosahedron (K=13) vertices at 0.66·r."""
    if r <= 0:
        raise EncoderError(f"kernel radius must be positive, got {r}")
    if K == 1:
        pts = np.zeros((1, 3))
    elif K == 7:
        shell = KERNEL_SHELL * r
        axes = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
        pts = np.vstack([np.zeros((1, 3)), shell * np.array(axes, dtype=np.float64)])
    elif K == 13:
        pts = np.vstack([np.zeros((1, 3)), KERNEL_SHELL * r * _icosahedron_vertices()])
    else:
        raise EncoderError(f"unsupported kernel count {K}; choose 1, 7, or 13")
    return KernelDisposition(kernel_points=pts, radius=float(r))


def correlation(y, kernel_point, sigma: float) -> float:
    """Linear-decay proximity: max(0, 1 - ||y - x_k|| / sigma)."""
    if sigma <= 0:
        raise EncoderError(f"sigma must be positive, got {sigma}")
    d = np.linalg.norm(np.asarray(y, dtype=np.float64) - np.asarray(kernel_point, dtype=np.float64))
    return float(max(0.0, 1.0 - d / sigma))


def _correlations(offsets: np.ndarray, kernel_points: np.ndarray, sigma: float) -> np.ndarray:
    """Vectorized correlation: offsets (P, 3) x kernel points (K, 3) -> (P, K)."""
    diff = offsets[:, None, :] - kernel_points[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    return np.maximum(0.0, 1.0 - d / sigma)


# ---------------------------------------------------------------------------
# convolution plans


class ConvPlan:
    """Precomputed geometry for one kernel-point convolution.

    Per (query, neighbor) pair we keep the support row and the correlation
    against every kernel point, stored kernel-major. Each kernel's influence
    then becomes a sparse (Q, S) matrix; all K matrices share index arrays
    and differ only in their data, so `apply` is K sparse-dense products
    plus one dense matmul against the packed weights.
    """

    __slots__ = ("counts", "support_ids", "h_by_kernel", "n_supports", "_mats")

    def __init__(self, counts, support_ids, h_by_kernel, n_supports):
        self.counts = np.asarray(counts, dtype=np.int64)
        self.support_ids = np.asarray(support_ids, dtype=np.int32)
        self.h_by_kernel = np.ascontiguousarray(h_by_kernel)  # (K, P)
        self.n_supports = int(n_supports)
        self._mats: dict = {}

    @property
    def n_queries(self) -> int:
        return self.counts.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.support_ids.shape[0]

    @property
    def kernel_count(self) -> int:
        return self.h_by_kernel.shape[0]

    def _matrices(self, dtype):
        key = np.dtype(dtype).name
        if key in self._mats:
            return self._mats[key]
        nq, ns = self.n_queries, self.n_supports
        h = self.h_by_kernel.astype(dtype)
        indptr = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int32)
        fwd = [
            sp.csr_matrix((h[k], self.support_ids, indptr), shape=(nq, ns))
            for k in range(self.kernel_count)
        ]
        # Transpose with shared structure: stable-sort pairs by support row.
        perm = np.argsort(self.support_ids, kind="stable")
        qid = np.repeat(np.arange(nq, dtype=np.int32), self.counts)
        rows = qid[perm]
        col_counts = np.bincount(self.support_ids, minlength=ns)
        col_indptr = np.concatenate([[0], np.cumsum(col_counts)]).astype(np.int64)
        bwd = [
            sp.csr_matrix((h[k][perm], rows, col_indptr), shape=(ns, nq))
            for k in range(self.kernel_count)
        ]
        self._mats[key] = (fwd, bwd)
        return self._mats[key]

    def apply(self, feats: np.ndarray, packed_weights: np.ndarray):
        """Forward pass: returns (output (Q, D_out), aggregate (Q, K*D_in))."""
        k_count, d_in = self.kernel_count, feats.shape[1]
        fwd, _ = self._matrices(feats.dtype)
        agg = np.empty((self.n_queries, k_count * d_in), dtype=feats.dtype)
        for k in range(k_count):
            agg[:, k * d_in : (k + 1) * d_in] = fwd[k] @ feats
        return agg @ packed_weights, agg

    def apply_transpose(self, d_agg: np.ndarray, d_in: int) -> np.ndarray:
        """Push an aggregate gradient (Q, K*D_in) back onto support features."""
        _, bwd = self._matrices(d_agg.dtype)
        out = np.zeros((self.n_supports, d_in), dtype=d_agg.dtype)
        for k in range(self.kernel_count):
            out += bwd[k] @ np.ascontiguousarray(d_agg[:, k * d_in : (k + 1) * d_in])
        return out


def build_conv_plan(
    queries: np.ndarray,
    supports: np.ndarray,
    neighbors: NeighborList,
    disposition: KernelDisposition,
    sigma: float,
    dtype=np.float64,
) -> ConvPlan:
    if sigma <= 0:
        raise EncoderError(f"sigma must be positive, got {sigma}")
    queries = np.asarray(queries, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    if len(neighbors) != queries.shape[0]:
        raise EncoderError(
            f"neighbor list covers {len(neighbors)} queries, got {queries.shape[0]} query points"
        )
    if neighbors.n_supports != supports.shape[0]:
        raise EncoderError(
            f"neighbor list indexes {neighbors.n_supports} supports, got {supports.shape[0]}"
        )
    counts = np.diff(neighbors.offsets)
    sid = neighbors.indices
    qid = np.repeat(np.arange(queries.shape[0]), counts)
    offsets = supports[sid] - queries[qid]
    h = _correlations(offsets, disposition.kernel_points, sigma)
    return ConvPlan(counts, sid, h.T.astype(dtype), supports.shape[0])


def merge_conv_plans(plans: list[ConvPlan]) -> ConvPlan:
    """Disjoint union of plans: one block-diagonal convolution over a batch."""
    if len(plans) == 1:
        return plans[0]
    counts = np.concatenate([p.counts for p in plans])
    ids = []
    offset = 0
    for p in plans:
        ids.append(p.support_ids.astype(np.int64) + offset)
        offset += p.n_supports
    h = np.concatenate([p.h_by_kernel for p in plans], axis=1)
    return ConvPlan(counts, np.concatenate(ids), h, offset)


# ---------------------------------------------------------------------------
# spec-level convolution API


@dataclass(frozen=True)
class KPConvLayer:
    """One kernel-point convolution: K weight matrices tied to a disposition."""

    weights: np.ndarray  # (K, D_in, D_out)
    sigma: float
    disposition: KernelDisposition

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise EncoderError(f"weights must be (K, D_in, D_out), got {self.weights.shape}")
        if self.weights.shape[0] != self.disposition.count:
            raise EncoderError(
                f"{self.weights.shape[0]} weight matrices for {self.disposition.count} kernel points"
            )
        if self.sigma <= 0:
            raise EncoderError(f"sigma must be positive, got {self.sigma}")


def kpconv_forward(
    layer: KPConvLayer,
    queries: np.ndarray,
    supports: np.ndarray,
    support_features: np.ndarray,
    neighbors: NeighborList,
) -> np.ndarray:
    """Sum over neighbors and kernel points of h(y_i, x_k) * W_k f_i.

    Queries with empty neighborhoods produce zero rows.
    """
    queries = np.asarray(queries, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    feats = np.asarray(support_features, dtype=np.float64)
    k_count, d_in, d_out = layer.weights.shape
    if feats.ndim != 2 or feats.shape[1] != d_in:
        raise EncoderError(
            f"feature width {feats.shape[-1] if feats.ndim else feats.shape} "
            f"does not match layer D_in {d_in}"
        )
    if feats.shape[0] != supports.shape[0]:
        raise EncoderError(
            f"{feats.shape[0]} feature rows for {supports.shape[0]} support points"
        )
    plan = build_conv_plan(queries, supports, neighbors, layer.disposition, layer.sigma)
    out, _ = plan.apply(feats, layer.weights.reshape(k_count * d_in, d_out))
    return out


def kpconv_on_tape(tape: D.Tape, plan: ConvPlan, features: D.Tensor, weights: D.Tensor) -> D.Tensor:
    """Taped convolution: differentiable w.r.t. features and packed weights.

    `weights` packs the K kernel matrices row-wise: shape (K*D_in, D_out).
    """
    fv, wv = features.values, weights.values
    d_in = fv.shape[1]
    if wv.shape[0] != plan.kernel_count * d_in:
        raise EncoderError(
            f"packed weights have {wv.shape[0]} rows; expected K*D_in = "
            f"{plan.kernel_count}*{d_in}"
        )
    if fv.shape[0] != plan.n_supports:
        raise EncoderError(f"{fv.shape[0]} feature rows for {plan.n_supports} supports")
    out, agg = plan.apply(fv, wv)

    def grad_features(g):
        return plan.apply_transpose(g @ wv.T, d_in)

    def grad_weights(g):
        return agg.T @ g

    return tape.custom(out, [(features, grad_features), (weights, grad_weights)])


# ---------------------------------------------------------------------------
# positional embeddings


def semantic_embedding(s, W_S: np.ndarray) -> np.ndarray:
    """Project a (finger, segment) index pair through the shared 2 x d_t map.

    Identical pairs give identical embeddings no matter which embodiment
    produced them; that is the whole point of the shared projection.
    """
    u, v = int(s[0]), int(s[1])
    if not 0 <= u <= 5:
        raise EncoderError(f"finger index u must be in 0..5, got {u}")
    if v < 0:
        raise EncoderError(f"segment index v must be non-negative, got {v}")
    return np.array([u, v], dtype=np.float64) @ W_S


def coord_embedding(p, coord_proj: np.ndarray) -> np.ndarray:
    """Linear projection of a 3-D point into the superpoint feature space."""
    return np.asarray(p, dtype=np.float64) @ coord_proj


# ---------------------------------------------------------------------------
# configuration and parameters


@dataclass(frozen=True)
class GalrConfig:
    """Encoder hyperparameters plus the cloud-stage settings they assume.

    Everything here is serialized into checkpoints so a saved encoder can
    rebuild its exact pipeline.
    """

    widths: tuple = (32, 64, 128)
    d_t: int = 128
    layers: int = 2
    heads: int = 4
    d_latent: int = 64
    kernel_points: int = 13
    sigma_ratio: float = 1.0 / 1.5  # sigma = neighbor radius * sigma_ratio
    density: float = 2e4
    base_voxel: float = 8e-3
    radius_scale: float = 2.5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3 or min(self.widths) < 2:
            raise EncoderError(f"widths must be three integers >= 2, got {self.widths}")
        if self.kernel_points not in (1, 7, 13):
            raise EncoderError(f"kernel_points must be 1, 7, or 13, got {self.kernel_points}")
        if self.layers < 1 or self.heads < 1 or self.d_latent < 1:
            raise EncoderError("layers, heads, and d_latent must be positive")
        if self.d_t % self.heads != 0:
            raise EncoderError(f"d_t {self.d_t} not divisible by heads {self.heads}")
        if self.widths[2] != self.d_t:
            raise EncoderError(
                f"final convolution width {self.widths[2]} must equal d_t {self.d_t}"
            )
        for name in ("sigma_ratio", "density", "base_voxel", "radius_scale"):
            if getattr(self, name) <= 0:
                raise EncoderError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GalrConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise EncoderError(f"unknown config keys: {sorted(unknown)}")
        missing = names - set(d)
        if missing:
            raise EncoderError(f"missing config keys: {sorted(missing)}")
        return cls(**{k: tuple(v) if k == "widths" else v for k, v in d.items()})


def param_shapes(config: GalrConfig) -> dict:
    k = config.kernel_points
    w0, w1, w2 = config.widths
    dt, dh = config.d_t, config.d_t // config.heads
    shapes = {
        "conv01/W": (k * 1, w0),
        "conv01/b": (1, w0),
        "conv11/W": (k * w0, w1),
        "conv11/b": (1, w1),
        "conv12/W": (k * w1, w2),
        "conv12/b": (1, w2),
        "conv22/W": (k * w2, w2),
        "conv22/b": (1, w2),
        "pos/coord": (3, dt),
        "pos/sem": (2, dt),
        "head/W": (dt, config.d_latent),
        "head/b": (1, config.d_latent),
    }
    for layer in range(config.layers):
        for head in range(config.heads):
            for which in ("q", "k", "v"):
                shapes[f"attn{layer}/{which}{head}"] = (dt, dh)
        shapes[f"attn{layer}/out"] = (dt, dt)
        shapes[f"attn{layer}/out_b"] = (1, dt)
        shapes[f"ff{layer}/W1"] = (dt, 2 * dt)
        shapes[f"ff{layer}/b1"] = (1, 2 * dt)
        shapes[f"ff{layer}/W2"] = (2 * dt, dt)
        shapes[f"ff{layer}/b2"] = (1, dt)
    return shapes


def _init_scale(name: str, shape: tuple, config: GalrConfig) -> float:
    if name.startswith("conv"):
        return 1.0 / math.sqrt(shape[0])
    # Positional inputs are raw labels/coordinates, not unit-variance features:
    # semantic labels run up to ~5 and workspace coordinates sit around 0.1 m,
    # so these scales keep both contributions roughly O(0.1) in the residual
    # stream instead of drowning the convolution features.
    if name == "pos/sem":
        return 0.05
    if name == "pos/coord":
        return 1.0
    if "/W1" in name:
        return math.sqrt(2.0 / config.d_t)
    # Residual-branch outputs (attention out-projection, second FF layer) are
    # downscaled by sqrt(2 * layers) so the token stream keeps roughly unit
    # variance no matter how many blocks feed into it.
    if "/out" in name or "/W2" in name:
        return 1.0 / math.sqrt(shape[0] * 2 * config.layers)
    return 1.0 / math.sqrt(shape[0])


def init_params(config: GalrConfig, seed: int) -> dict:
    """Fresh float64 parameters, deterministically drawn in sorted name order."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith("b") or name.endswith("b1") or name.endswith("b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, _init_scale(name, shape, config), size=shape)
    return params


def validate_params(params: dict, config: GalrConfig) -> None:
    shapes = param_shapes(config)
    for name in sorted(shapes):
        if name not in params:
            raise EncoderError(f"missing parameter {name!r} for this config")
    for name in sorted(params):
        if name not in shapes:
            raise EncoderError(f"unexpected parameter {name!r} for this config")
        got = tuple(params[name].shape)
        if got != shapes[name]:
            raise EncoderError(
                f"parameter {name!r} has shape {got}, config expects {shapes[name]}"
            )


# ---------------------------------------------------------------------------
# encode


@dataclass(frozen=True)
class GaLRVector:
    """A latent gesture vector plus the checkpoint identity that produced it."""

    z: np.ndarray  # (d_latent,)
    producer: str = "unsaved"

    def __post_init__(self):
        if self.z.ndim != 1:
            raise EncoderError(f"latent vector must be 1-D, got shape {self.z.shape}")
        if not np.isfinite(self.z).all():
            raise EncoderError("non-finite latent vector")


@dataclass
class EncodePlan:
    """All precomputed geometry needed to run the encoder on one pyramid."""

    conv01: ConvPlan
    conv11: ConvPlan
    conv12: ConvPlan
    conv22: ConvPlan
    coords: np.ndarray  # (n_tokens, 3) superpoint positions
    sems: np.ndarray  # (n_tokens, 2) float copies of the semantic pairs
    n_points0: int
    # geometry-shaping settings the plan was built with, so cached plans
    # can be checked against the config they are used under
    kernel_points: int = 0
    sigma_ratio: float = 0.0

    @property
    def n_tokens(self) -> int:
        return self.coords.shape[0]

    def matches(self, config: "GalrConfig") -> bool:
        return (
            self.kernel_points == config.kernel_points
            and self.sigma_ratio == config.sigma_ratio
        )


def build_encode_plan(
    pyramid: MultiScaleCloud, config: GalrConfig, dtype=np.float64
) -> EncodePlan:
    """Precompute every convolution plan for one pyramid.

    `dtype` sets the storage type of the correlation tables; float32 halves
    the footprint of large cached datasets without touching the geometry
    (correlations are computed in float64 and rounded once).
    """
    r1 = pyramid.neighbors01.radius
    r2 = pyramid.neighbors12.radius
    disp1 = make_disposition(config.kernel_points, r1)
    disp2 = make_disposition(config.kernel_points, r2)
    s1 = r1 * config.sigma_ratio
    s2 = r2 * config.sigma_ratio
    p0 = pyramid.level0.points
    p1, p2 = pyramid.points1, pyramid.points2
    return EncodePlan(
        conv01=build_conv_plan(p1, p0, pyramid.neighbors01, disp1, s1, dtype),
        conv11=build_conv_plan(p1, p1, pyramid.neighbors11, disp1, s1, dtype),
        conv12=build_conv_plan(p2, p1, pyramid.neighbors12, disp2, s2, dtype),
        conv22=build_conv_plan(p2, p2, pyramid.neighbors22, disp2, s2, dtype),
        coords=np.array(p2, dtype=np.float64),
        sems=np.array(pyramid.semantics2, dtype=np.float64),
        n_points0=len(pyramid.level0),
        kernel_points=config.kernel_points,
        sigma_ratio=config.sigma_ratio,
    )


def register_params(tape: D.Tape, params: dict) -> dict:
    """Put every parameter on the tape as a gradient-carrying leaf."""
    return {name: tape.param(name, params[name]) for name in sorted(params)}


def constant_params(tape: D.Tape, params: dict) -> dict:
    """Put parameters on the tape as constants (evaluation only)."""
    return {name: tape.input(params[name]) for name in sorted(params)}


def _conv_block(tape, plan, feats, params_t, name, final=False):
    out = kpconv_on_tape(tape, plan, feats, params_t[name + "/W"])
    out = D.layer_norm_rows(out)
    out = D.add_bias(out, params_t[name + "/b"])
    return out if final else D.relu(out)


def _block_mask(sizes) -> np.ndarray:
    n = int(np.sum(sizes))
    mask = np.full((n, n), MASK_VALUE)
    at = 0
    for s in sizes:
        mask[at : at + s, at : at + s] = 0.0
        at += s
    return mask


def _transformer(tape, x, pos, params_t, config, mask_t):
    inv = 1.0 / math.sqrt(config.d_t // config.heads)
    for layer in range(config.layers):
        x = D.add(x, pos)  # positional signal re-injected at every layer
        y = D.layer_norm_rows(x)
        cat = None
        for head in range(config.heads):
            q = D.matmul(y, params_t[f"attn{layer}/q{head}"])
            k = D.matmul(y, params_t[f"attn{layer}/k{head}"])
            v = D.matmul(y, params_t[f"attn{layer}/v{head}"])
            scores = D.scale(D.matmul(q, D.transpose(k)), inv)
            if mask_t is not None:
                scores = D.add(scores, mask_t)
            out = D.matmul(D.softmax_rows(scores), v)
            cat = out if cat is None else D.concat_cols(cat, out)
        mixed = D.add_bias(D.matmul(cat, params_t[f"attn{layer}/out"]), params_t[f"attn{layer}/out_b"])
        x = D.add(x, mixed)
        y2 = D.layer_norm_rows(x)
        hidden = D.relu(D.add_bias(D.matmul(y2, params_t[f"ff{layer}/W1"]), params_t[f"ff{layer}/b1"]))
        ff = D.add_bias(D.matmul(hidden, params_t[f"ff{layer}/W2"]), params_t[f"ff{layer}/b2"])
        x = D.add(x, ff)
    return x


def tokens_on_tape(tape: D.Tape, plans: list, params_t: dict, config: GalrConfig):
    """Refined superpoint features for a batch of plans, plus token counts.

    Plans are evaluated as one disjoint union: block-diagonal convolutions,
    a block mask keeping attention within each sample, shared parameters.
    """
    if not plans:
        raise EncoderError("empty plan batch")
    m01 = merge_conv_plans([p.conv01 for p in plans])
    m11 = merge_conv_plans([p.conv11 for p in plans])
    m12 = merge_conv_plans([p.conv12 for p in plans])
    m22 = merge_conv_plans([p.conv22 for p in plans])
    n0 = sum(p.n_points0 for p in plans)
    feats = tape.input(np.ones((n0, 1)))
    x = _conv_block(tape, m01, feats, params_t, "conv01")
    x = _conv_block(tape, m11, x, params_t, "conv11")
    x = _conv_block(tape, m12, x, params_t, "conv12")
    x = _conv_block(tape, m22, x, params_t, "conv22", final=True)

    coords = tape.input(np.concatenate([p.coords for p in plans], axis=0))
    sems = tape.input(np.concatenate([p.sems for p in plans], axis=0))
    pos = D.add(D.matmul(coords, params_t["pos/coord"]), D.matmul(sems, params_t["pos/sem"]))
    sizes = np.array([p.n_tokens for p in plans], dtype=np.int64)
    mask_t = tape.input(_block_mask(sizes)) if len(plans) > 1 else None
    tokens = _transformer(tape, x, pos, params_t, config, mask_t)
    return tokens, sizes


def encode_plans_on_tape(tape: D.Tape, plans: list, params_t: dict, config: GalrConfig) -> D.Tensor:
    """Latent vectors for a batch of plans: (len(plans), d_latent)."""
    tokens, sizes = tokens_on_tape(tape, plans, params_t, config)
    if len(plans) == 1:
        pooled = D.mean_rows(tokens)
    else:
        seg = np.repeat(np.arange(len(plans)), sizes)
        inv_counts = tape.input((1.0 / sizes).reshape(-1, 1))
        pooled = D.row_scale(D.segment_sum(tokens, seg, len(plans)), inv_counts)
    return D.add_bias(D.matmul(pooled, params_t["head/W"]), params_t["head/b"])


def encode(pyramid: MultiScaleCloud, params: dict, config: GalrConfig, producer: str = "unsaved") -> GaLRVector:
    """Full pipeline on one pyramid: convolutions, transformer, mean pool, head."""
    validate_params(params, config)
    plan = build_encode_plan(pyramid, config)
    tape = D.Tape(dtype=params["head/W"].dtype)
    z = encode_plans_on_tape(tape, [plan], constant_params(tape, params), config)
    return GaLRVector(z=z.values[0].copy(), producer=producer)


def encode_tokens(pyramid: MultiScaleCloud, params: dict, config: GalrConfig) -> np.ndarray:
    """The refined per-superpoint features right before pooling."""
    validate_params(params, config)
    plan = build_encode_plan(pyramid, config)
    tape = D.Tape(dtype=params["head/W"].dtype)
    tokens, _ = tokens_on_tape(tape, [plan], constant_params(tape, params), config)
    return tokens.values.copy()
