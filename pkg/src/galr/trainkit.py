"""Dataset generation and the co-training loop for the latent hand model.

Everything here is annotation-free: supervision targets are the sampled
joint vectors themselves, so a dataset is fully determined by the hand
descriptions, the sampling seeds, and the cloud resolution settings.

The training loop optimizes the encoder and decoder jointly over
minibatches that mix embodiments uniformly at random. Runs are
bit-reproducible for a fixed seed and worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import diffcore as D
from . import retarget
from .cloud import (
    DegeneratePyramidError,
    MultiScaleCloud,
    SurfaceCloud,
    build_pyramid,
    load_cloud,
    sample_surface,
    save_cloud,
)
from .encoder import (
    EncodePlan,
    GalrConfig,
    build_encode_plan,
    constant_params,
    encode_plans_on_tape,
    init_params,
    register_params,
)
from .handspec import (
    HandSpec,
    JointVector,
    forward_kinematics,
    load_hand_spec,
    make_joint_vector,
    spec_to_dict,
)
from .registry import REGISTRY_VERSION


class TrainkitError(ValueError):
    pass


SAMPLING_MODES = ("uniform", "uniform+canonical")
SPLIT_TAGS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# reachable states


@dataclass(frozen=True)
class ReachableStateSet:
    embodiment_id: str
    states: tuple[JointVector, ...]
    seed: int
    distribution: str


def sample_reachable_states(
    spec: HandSpec, n: int, seed: int, mode: str = "uniform"
) -> ReachableStateSet:
    """Draw n joint vectors inside the limits, i.i.d. uniform per joint.

    Mode "uniform+canonical" prepends the all-lo, all-hi, and mid-range
    poses so the extremes of the reachable set are always covered.
    """
    if n <= 0:
        raise TrainkitError(f"state count must be positive, got {n}")
    if mode not in SAMPLING_MODES:
        raise TrainkitError(f"unknown sampling mode {mode!r}; have {SAMPLING_MODES}")
    lo, hi = spec.limits_lo(), spec.limits_hi()
    rows = []
    if mode == "uniform+canonical":
        rows = [lo.copy(), hi.copy(), 0.5 * (lo + hi)][:n]
    rng = np.random.default_rng(seed)
    remaining = n - len(rows)
    if remaining > 0:
        block = lo + (hi - lo) * rng.uniform(size=(remaining, spec.dof))
        rows.extend(block)
    states = tuple(make_joint_vector(spec, row) for row in rows)
    return ReachableStateSet(spec.embodiment_id, states, seed, mode)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetRecord:
    embodiment_id: str
    state_index: int  # index within the embodiment's sampled states
    joints: JointVector
    split: str
    pyramid: Optional[MultiScaleCloud] = None
    plan: Optional[EncodePlan] = None
    target_norm: Optional[np.ndarray] = None  # normalized angles, cached


@dataclass
class GaLRDataset:
    specs: dict[str, HandSpec]
    records: list[DatasetRecord]
    seed: int
    fractions: tuple[float, float, float]
    mode: str
    density: float
    base_voxel: float
    radius_scale: float

    def split(self, tag: str) -> list[DatasetRecord]:
        if tag not in SPLIT_TAGS:
            raise TrainkitError(f"unknown split {tag!r}; have {SPLIT_TAGS}")
        return [r for r in self.records if r.split == tag]

    def embodiments(self) -> tuple[str, ...]:
        seen = []
        for rec in self.records:
            if rec.embodiment_id not in seen:
                seen.append(rec.embodiment_id)
        return tuple(seen)


def record_cloud_seed(dataset_seed: int, embodiment_id: str, state_index: int) -> int:
    """Stable per-record sampling seed (independent of process hashing)."""
    tag = f"{dataset_seed}:{embodiment_id}:{state_index}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(tag).digest()[:4], "little")


def _cache_key(spec: HandSpec, rec: DatasetRecord, density, cloud_seed) -> str:
    """Cache key for a raw surface cloud: kinematics, pose, density, seed.

    Voxel settings are deliberately absent — the cache stores level-0
    clouds, and pyramids are rebuilt from them at whatever resolution the
    caller asks for.
    """
    h = hashlib.sha256()
    h.update(spec.embodiment_id.encode("utf-8"))
    h.update(REGISTRY_VERSION.encode("utf-8"))
    h.update(spec.universal_ids().tobytes())
    h.update(spec.limits_lo().tobytes())
    h.update(spec.limits_hi().tobytes())
    h.update(np.asarray(rec.joints.angles, dtype=np.float64).tobytes())
    h.update(np.array([density, cloud_seed], dtype=np.float64).tobytes())
    return h.hexdigest()[:32]


def _record_cloud(
    spec: HandSpec, rec: DatasetRecord, density, dataset_seed, cache_dir
) -> SurfaceCloud:
    cloud_seed = record_cloud_seed(dataset_seed, rec.embodiment_id, rec.state_index)
    path = None
    if cache_dir is not None:
        key = _cache_key(spec, rec, density, cloud_seed)
        path = Path(cache_dir) / f"{key}.cloud"
        if path.exists():
            points, semantics = load_cloud(path)
            return SurfaceCloud(
                points,
                semantics,
                source_embodiment=rec.embodiment_id,
                source_angles=np.asarray(rec.joints.angles, dtype=np.float64),
            )
    posed = forward_kinematics(spec, rec.joints)
    surf = sample_surface(posed, density, seed=cloud_seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_cloud(path, surf.points, surf.semantics)
    return surf


def _materialize_record(spec, rec, dataset, config, materialize, plan_dtype, cache_dir):
    surf = _record_cloud(spec, rec, dataset.density, dataset.seed, cache_dir)
    try:
        pyramid = build_pyramid(surf, dataset.base_voxel, dataset.radius_scale)
    except DegeneratePyramidError as exc:
        raise TrainkitError(
            f"pyramid degeneracy for embodiment {rec.embodiment_id!r} "
            f"state {rec.state_index}: {exc}"
        ) from exc
    if materialize == "plan":
        rec.plan = build_encode_plan(pyramid, config, dtype=plan_dtype)
        rec.pyramid = None
    else:
        rec.pyramid = pyramid


def materialize_records(
    dataset: GaLRDataset,
    config: GalrConfig,
    records: Optional[list[DatasetRecord]] = None,
    materialize: str = "pyramid",
    plan_dtype=np.float32,
    cache_dir=None,
    workers: int = 1,
) -> None:
    """Build pyramids (or encode plans) for records that lack them.

    With materialize="plan", each record keeps only the precomputed
    convolution plan — the cheapest representation that can still be
    encoded — and drops the pyramid to bound memory on large datasets.
    """
    if materialize not in ("pyramid", "plan"):
        raise TrainkitError(f"unknown materialize target {materialize!r}")
    if cache_dir is None:
        cache_dir = os.environ.get("GALR_CACHE_DIR") or None
    todo = [
        rec
        for rec in (records if records is not None else dataset.records)
        if (rec.plan is None if materialize == "plan" else rec.pyramid is None)
    ]

    def run(rec):
        spec = dataset.specs[rec.embodiment_id]
        _materialize_record(spec, rec, dataset, config, materialize, plan_dtype, cache_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # list() re-raises worker exceptions in submission order
            list(pool.map(run, todo))
    else:
        for rec in todo:
            run(rec)


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_dataset(
    specs: list[HandSpec],
    n_per: int,
    seed: int,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    *,
    config: Optional[GalrConfig] = None,
    mode: str = "uniform+canonical",
    materialize: str = "pyramid",
    plan_dtype=np.float32,
    cache_dir=None,
    workers: int = 1,
) -> GaLRDataset:
    """Sample reachable states per embodiment and attach surface pyramids.

    Splits are stratified per embodiment and disjoint by state. The train
    slice comes first, so canonical poses (when present) always land in it.
    """
    if not specs:
        raise TrainkitError("need at least one hand description")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise TrainkitError(f"need three non-negative split fractions, got {fractions!r}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise TrainkitError(f"split fractions must sum to 1, got {sum(fractions)}")
    ids = [s.embodiment_id for s in specs]
    if len(set(ids)) != len(ids):
        raise TrainkitError(f"duplicate embodiment ids in {ids}")
    config = config if config is not None else GalrConfig()

    dataset = GaLRDataset(
        specs={s.embodiment_id: s for s in specs},
        records=[],
        seed=seed,
        fractions=tuple(float(f) for f in fractions),
        mode=mode,
        density=config.density,
        base_voxel=config.base_voxel,
        radius_scale=config.radius_scale,
    )
    n_train, n_val, _ = _split_counts(n_per, fractions)
    for k, spec in enumerate(specs):
        states = sample_reachable_states(spec, n_per, seed + k, mode=mode)
        for i, jv in enumerate(states.states):
            tag = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            dataset.records.append(
                DatasetRecord(spec.embodiment_id, i, jv, tag)
            )
    if materialize != "none":
        materialize_records(
            dataset,
            config,
            materialize=materialize,
            plan_dtype=plan_dtype,
            cache_dir=cache_dir,
            workers=workers,
        )
    return dataset


_DATASET_FORMAT = "galr-dataset-v1"
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}
_SPLIT_NAME = {v: k for k, v in _SPLIT_CODE.items()}


def save_dataset(dataset: GaLRDataset, out_dir) -> None:
    """Persist states, splits, and hand descriptions (clouds are rebuilt)."""
    out = Path(out_dir)
    (out / "specs").mkdir(parents=True, exist_ok=True)
    (out / "states").mkdir(exist_ok=True)
    manifest = {
        "format": _DATASET_FORMAT,
        "registry_version": REGISTRY_VERSION,
        "seed": dataset.seed,
        "fractions": list(dataset.fractions),
        "mode": dataset.mode,
        "density": dataset.density,
        "base_voxel": dataset.base_voxel,
        "radius_scale": dataset.radius_scale,
        "embodiments": list(dataset.embodiments()),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    for eid in dataset.embodiments():
        with open(out / "specs" / f"{eid}.hand.json", "w", encoding="utf-8") as fh:
            json.dump(spec_to_dict(dataset.specs[eid]), fh, indent=2)
        recs = sorted(
            (r for r in dataset.records if r.embodiment_id == eid),
            key=lambda r: r.state_index,
        )
        angles = np.stack([r.joints.angles for r in recs])
        splits = np.array([_SPLIT_CODE[r.split] for r in recs], dtype=np.uint8)
        np.savez(out / "states" / f"{eid}.npz", angles=angles, splits=splits)


def load_dataset(
    in_dir,
    *,
    materialize: str = "none",
    config: Optional[GalrConfig] = None,
    plan_dtype=np.float32,
    cache_dir=None,
    workers: int = 1,
) -> GaLRDataset:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise TrainkitError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _DATASET_FORMAT:
        raise TrainkitError(f"unrecognized dataset format {manifest.get('format')!r}")
    if manifest.get("registry_version") != REGISTRY_VERSION:
        raise TrainkitError(
            f"dataset registry version {manifest.get('registry_version')!r} "
            f"does not match this build ({REGISTRY_VERSION!r})"
        )
    dataset = GaLRDataset(
        specs={},
        records=[],
        seed=int(manifest["seed"]),
        fractions=tuple(manifest["fractions"]),
        mode=manifest["mode"],
        density=float(manifest["density"]),
        base_voxel=float(manifest["base_voxel"]),
        radius_scale=float(manifest["radius_scale"]),
    )
    for eid in manifest["embodiments"]:
        spec = load_hand_spec(src / "specs" / f"{eid}.hand.json")
        dataset.specs[eid] = spec
        data = np.load(src / "states" / f"{eid}.npz")
        for i, (row, code) in enumerate(zip(data["angles"], data["splits"])):
            dataset.records.append(
                DatasetRecord(eid, i, make_joint_vector(spec, row), _SPLIT_NAME[int(code)])
            )
    if materialize != "none":
        base = config if config is not None else GalrConfig()
        materialize_records(
            dataset,
            replace(
                base,
                density=dataset.density,
                base_voxel=dataset.base_voxel,
                radius_scale=dataset.radius_scale,
            ),
            materialize=materialize,
            plan_dtype=plan_dtype,
            cache_dir=cache_dir,
            workers=workers,
        )
    return dataset


# ---------------------------------------------------------------------------
# training configuration


_DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that, together with the code version, pins down a run."""

    epochs: int = 20
    batch_size: int = 16
    lr: float = 2.5e-3
    seed: int = 0
    encoder: GalrConfig = field(default_factory=GalrConfig)
    decoder_width: int = retarget.DECODER_WIDTH
    embodiments: tuple[str, ...] = ()  # empty = every embodiment in the dataset
    workers: int = 1
    warmup_steps: int = 100
    min_lr_frac: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    dtype: str = "float32"
    train_metric_cap: int = 256  # per-embodiment sample cap for train-split metrics

    def __post_init__(self):
        if self.epochs <= 0:
            raise TrainkitError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise TrainkitError(f"batch size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise TrainkitError(f"learning rate must be positive, got {self.lr}")
        if self.decoder_width <= 0:
            raise TrainkitError(f"decoder width must be positive, got {self.decoder_width}")
        if self.workers < 1:
            raise TrainkitError(f"worker count must be >= 1, got {self.workers}")
        if self.dtype not in _DTYPES:
            raise TrainkitError(f"dtype must be one of {_DTYPES}, got {self.dtype!r}")
        if not 0 < self.min_lr_frac <= 1:
            raise TrainkitError(f"min_lr_frac must be in (0, 1], got {self.min_lr_frac}")
        object.__setattr__(self, "embodiments", tuple(self.embodiments))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
            "encoder": self.encoder.to_dict(),
            "decoder_width": self.decoder_width,
            "embodiments": list(self.embodiments),
            "workers": self.workers,
            "warmup_steps": self.warmup_steps,
            "min_lr_frac": self.min_lr_frac,
            "dtype": self.dtype,
            "train_metric_cap": self.train_metric_cap,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        expected = set(cls().to_dict())
        unknown = set(raw) - expected
        if unknown:
            raise TrainkitError(f"unknown training config keys {sorted(unknown)}")
        missing = expected - set(raw)
        if missing:
            raise TrainkitError(f"missing training config keys {sorted(missing)}")
        fields = dict(raw)
        fields["encoder"] = GalrConfig.from_dict(fields["encoder"])
        fields["embodiments"] = tuple(fields["embodiments"])
        return cls(**fields)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: dict  # best-validation parameters
    encoder_config: GalrConfig  # resolution-adjusted config actually trained
    train_config: TrainConfig
    history: list[dict]  # rows: epoch, embodiment, split, rmse_norm, rmse_rad
    best_epoch: int
    best_val: float


METRICS_HEADER = ("epoch", "embodiment", "split", "rmse_norm", "rmse_rad")


def _effective_encoder_config(dataset: GaLRDataset, config: TrainConfig) -> GalrConfig:
    """The model follows the architecture config, the data its own resolution."""
    return replace(
        config.encoder,
        density=dataset.density,
        base_voxel=dataset.base_voxel,
        radius_scale=dataset.radius_scale,
    )


def _lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    warmup = min(config.warmup_steps, max(1, total_steps // 10))
    if step < warmup:
        return config.lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total_steps - warmup)
    lo = config.min_lr_frac
    return config.lr * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * frac)))


def _plan_for(rec: DatasetRecord, dataset, enc_cfg, dtype) -> EncodePlan:
    if rec.plan is not None and rec.plan.matches(enc_cfg):
        return rec.plan
    if rec.pyramid is None:
        if rec.plan is not None:
            raise TrainkitError(
                f"record {rec.embodiment_id!r}/{rec.state_index} carries a plan "
                f"built for kernel_points={rec.plan.kernel_points}, "
                f"sigma_ratio={rec.plan.sigma_ratio}; re-materialize the dataset "
                f"for this architecture"
            )
        raise TrainkitError(
            f"record {rec.embodiment_id!r}/{rec.state_index} has no pyramid or plan; "
            "materialize the dataset first"
        )
    return build_encode_plan(rec.pyramid, enc_cfg, dtype=dtype)


def _target_for(rec: DatasetRecord, spec: HandSpec) -> np.ndarray:
    if rec.target_norm is None:
        rec.target_norm = retarget.normalize_angles(rec.joints.angles, spec)
    return rec.target_norm


def _batch_loss_and_grads(plans, targets, emb_names, params, selectors, enc_cfg, dtype):
    """One pooled-RMSE forward/backward over a mixed-embodiment batch."""
    tape = D.Tape(dtype=dtype)
    params_t = register_params(tape, params)
    enc_t = {k: v for k, v in params_t.items() if not k.startswith("dec/")}
    z = encode_plans_on_tape(tape, plans, enc_t, enc_cfg)
    theta = retarget.decode_on_tape(tape, z, params_t)
    total, count = None, 0
    for name in sorted(set(emb_names)):
        rows = np.array([j for j, e in enumerate(emb_names) if e == name])
        tgt = np.stack([targets[j] for j in rows])
        th = D.gather_rows(theta, rows)
        s, c = retarget.masked_sq_err_on_tape(
            tape, th, tape.input(selectors[name]), tape.input(tgt)
        )
        total = s if total is None else D.add(total, s)
        count += c
    loss = D.sqrt(D.scale(total, 1.0 / count))
    loss_val = float(loss.values[0, 0])
    if not math.isfinite(loss_val):
        return loss_val, None  # caller reports the offending batch
    return loss_val, tape.backward(loss)


def _predict_rows(records, dataset, params, enc_cfg, dtype, batch=32) -> np.ndarray:
    """Constant-parameter forward pass; rows of decoded universal angles."""
    outs = []
    for at in range(0, len(records), batch):
        chunk = records[at : at + batch]
        plans = [_plan_for(r, dataset, enc_cfg, dtype) for r in chunk]
        tape = D.Tape(dtype=dtype)
        params_t = constant_params(tape, params)
        enc_t = {k: v for k, v in params_t.items() if not k.startswith("dec/")}
        z = encode_plans_on_tape(tape, plans, enc_t, enc_cfg)
        theta = retarget.decode_on_tape(tape, z, params_t)
        outs.append(np.asarray(theta.values))
    return np.concatenate(outs, axis=0)


def _split_metrics(records, dataset, params, enc_cfg, dtype) -> dict:
    """rmse over normalized errors plus the radian-space equivalent."""
    theta = _predict_rows(records, dataset, params, enc_cfg, dtype)
    sq_norm, sq_rad, n_terms = 0.0, 0.0, 0
    for row, rec in zip(theta, records):
        spec = dataset.specs[rec.embodiment_id]
        err = row[spec.universal_ids()] - _target_for(rec, spec)
        half_range = 0.5 * (spec.limits_hi() - spec.limits_lo())
        sq_norm += float(np.sum(err * err))
        sq_rad += float(np.sum((err * half_range) ** 2))
        n_terms += spec.dof
    return {
        "rmse_norm": math.sqrt(sq_norm / n_terms),
        "rmse_rad": math.sqrt(sq_rad / n_terms),
    }


def train(
    dataset: GaLRDataset,
    config: TrainConfig,
    *,
    metrics_path=None,
    checkpoint_path=None,
    log=None,
) -> TrainResult:
    """Co-train encoder and decoder; returns the best-validation snapshot.

    Per-epoch train/val metrics are appended to `metrics_path` as CSV when
    given, and the best checkpoint is written to `checkpoint_path`.
    """
    if not dataset.records:
        raise TrainkitError("dataset is empty")
    emb_ids = config.embodiments or dataset.embodiments()
    missing = [e for e in emb_ids if e not in dataset.specs]
    if missing:
        raise TrainkitError(f"embodiments {missing} not present in the dataset")
    dtype = np.dtype(config.dtype)
    enc_cfg = _effective_encoder_config(dataset, config)

    train_recs = [r for r in dataset.split("train") if r.embodiment_id in emb_ids]
    val_recs = [r for r in dataset.split("val") if r.embodiment_id in emb_ids]
    if not train_recs:
        raise TrainkitError("train split is empty")

    plans = [_plan_for(r, dataset, enc_cfg, dtype) for r in train_recs]
    targets = [_target_for(r, dataset.specs[r.embodiment_id]) for r in train_recs]
    emb_of = [r.embodiment_id for r in train_recs]
    selectors = {
        e: retarget.selector_matrix(dataset.specs[e], dtype=dtype) for e in emb_ids
    }

    params = {
        k: v.astype(dtype) for k, v in init_params(enc_cfg, seed=config.seed).items()
    }
    params.update(
        {
            k: v.astype(dtype)
            for k, v in retarget.init_decoder_params(
                enc_cfg.d_latent, seed=config.seed + 1, width=config.decoder_width
            ).items()
        }
    )
    opt_state = D.adam_init(params)

    # fixed per-embodiment subsample for train-split metrics
    metric_rng = np.random.default_rng(config.seed)
    train_metric_recs = []
    for e in emb_ids:
        recs = [r for r in train_recs if r.embodiment_id == e]
        if len(recs) > config.train_metric_cap:
            pick = metric_rng.choice(len(recs), size=config.train_metric_cap, replace=False)
            recs = [recs[i] for i in sorted(pick)]
        train_metric_recs.append((e, recs))

    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", encoding="utf-8", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)

    order = np.arange(len(train_recs))
    n_batches = max(1, len(order) // config.batch_size)
    total_steps = n_batches * config.epochs
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    best_val, best_epoch, best_params = math.inf, -1, None
    step_no = 0

    try:
        for epoch in range(config.epochs):
            rng.shuffle(order)
            for b in range(n_batches):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                loss, grads = _batch_loss_and_grads(
                    [plans[i] for i in idx],
                    [targets[i] for i in idx],
                    [emb_of[i] for i in idx],
                    params,
                    selectors,
                    enc_cfg,
                    dtype,
                )
                if grads is None:
                    batch_embs = sorted({emb_of[i] for i in idx})
                    raise TrainkitError(
                        f"non-finite loss at epoch {epoch} step {b} "
                        f"(batch embodiments {batch_embs})"
                    )
                D.optimizer_step(params, grads, opt_state, lr=_lr_at(step_no, total_steps, config))
                step_no += 1

            epoch_rows = []
            for e, recs in train_metric_recs:
                m = _split_metrics(recs, dataset, params, enc_cfg, dtype)
                epoch_rows.append({"epoch": epoch, "embodiment": e, "split": "train", **m})
            val_mean = None
            if val_recs:
                vals = []
                for e in emb_ids:
                    recs = [r for r in val_recs if r.embodiment_id == e]
                    if not recs:
                        continue
                    m = _split_metrics(recs, dataset, params, enc_cfg, dtype)
                    vals.append(m["rmse_norm"])
                    epoch_rows.append({"epoch": epoch, "embodiment": e, "split": "val", **m})
                val_mean = float(np.mean(vals))
            history.extend(epoch_rows)
            if writer is not None:
                for row in epoch_rows:
                    writer.writerow([row[k] for k in METRICS_HEADER])
                fh.flush()
            if log is not None:
                val_txt = "" if val_mean is None else f" val_rmse={val_mean:.4f}"
                log(f"epoch {epoch}: train batches {n_batches}{val_txt}")

            train_scores = [r["rmse_norm"] for r in epoch_rows if r["split"] == "train"]
            score = val_mean if val_mean is not None else float(np.mean(train_scores))
            if score < best_val:
                best_val, best_epoch = score, epoch
                best_params = {k: v.copy() for k, v in params.items()}
    finally:
        if fh is not None:
            fh.close()

    result = TrainResult(
        params=best_params if best_params is not None else params,
        encoder_config=enc_cfg,
        train_config=config,
        history=history,
        best_epoch=best_epoch,
        best_val=best_val,
    )
    if checkpoint_path is not None:
        save_bundle(checkpoint_path, bundle_from_result(result))
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    embodiment_id: str
    count: int
    rmse_norm: float
    rmse_rad: float
    per_joint_worst_rad: np.ndarray  # aligned with spec.joint_names()
    self_retarget_max_frac: float  # worst |predicted - target| / joint range


def evaluate(bundle, dataset: GaLRDataset, split: str = "test") -> dict[str, EvalReport]:
    """Per-embodiment error metrics of a checkpoint on one dataset split."""
    params, enc_cfg, version = _unpack_bundle(bundle)
    if version != REGISTRY_VERSION:
        raise TrainkitError(
            f"checkpoint registry version {version!r} does not match "
            f"this build ({REGISTRY_VERSION!r})"
        )
    records = dataset.split(split)
    if not records:
        raise TrainkitError(f"empty split {split!r}")
    dtype = params[next(iter(params))].dtype
    reports = {}
    for eid in dataset.embodiments():
        recs = [r for r in records if r.embodiment_id == eid]
        if not recs:
            continue
        spec = dataset.specs[eid]
        theta = _predict_rows(recs, dataset, params, enc_cfg, dtype)
        targets = np.stack([_target_for(r, spec) for r in recs])
        err = theta[:, spec.universal_ids()] - targets
        half_range = 0.5 * (spec.limits_hi() - spec.limits_lo())
        err_rad = err * half_range
        reports[eid] = EvalReport(
            embodiment_id=eid,
            count=len(recs),
            rmse_norm=float(np.sqrt(np.mean(err * err))),
            rmse_rad=float(np.sqrt(np.mean(err_rad * err_rad))),
            per_joint_worst_rad=np.abs(err_rad).max(axis=0),
            self_retarget_max_frac=float(np.abs(err).max() / 2.0),
        )
    return reports


# ---------------------------------------------------------------------------
# checkpoint bundles


@dataclass
class CheckpointBundle:
    params: dict
    encoder_config: GalrConfig
    decoder_width: int
    registry_version: str = REGISTRY_VERSION
    train_config: Optional[dict] = None
    best_epoch: Optional[int] = None
    best_val: Optional[float] = None


def bundle_from_result(result: TrainResult) -> CheckpointBundle:
    return CheckpointBundle(
        params=result.params,
        encoder_config=result.encoder_config,
        decoder_width=result.train_config.decoder_width,
        train_config=result.train_config.to_dict(),
        best_epoch=result.best_epoch,
        best_val=result.best_val,
    )


def _unpack_bundle(bundle) -> tuple[dict, GalrConfig, str]:
    if isinstance(bundle, TrainResult):
        return bundle.params, bundle.encoder_config, REGISTRY_VERSION
    if isinstance(bundle, CheckpointBundle):
        return bundle.params, bundle.encoder_config, bundle.registry_version
    raise TrainkitError(f"expected a TrainResult or CheckpointBundle, got {type(bundle)!r}")


def save_bundle(path, bundle: CheckpointBundle) -> None:
    meta = {
        "registry_version": bundle.registry_version,
        "encoder": bundle.encoder_config.to_dict(),
        "decoder_width": bundle.decoder_width,
        "train": bundle.train_config,
        "best_epoch": bundle.best_epoch,
        "best_val": bundle.best_val,
    }
    ckpt_io.save_checkpoint(path, bundle.params, meta)


def load_bundle(path) -> CheckpointBundle:
    params, meta = ckpt_io.load_checkpoint(path)
    try:
        return CheckpointBundle(
            params=params,
            encoder_config=GalrConfig.from_dict(meta["encoder"]),
            decoder_width=int(meta["decoder_width"]),
            registry_version=meta["registry_version"],
            train_config=meta.get("train"),
            best_epoch=meta.get("best_epoch"),
            best_val=meta.get("best_val"),
        )
    except KeyError as exc:
        raise TrainkitError(f"checkpoint metadata missing field {exc.args[0]!r}") from exc
