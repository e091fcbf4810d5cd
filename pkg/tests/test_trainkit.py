"""Tests for dataset generation, the training loop, and evaluation."""

import math

import numpy as np
import pytest

from galr import handspec, retarget, trainkit
from galr.encoder import GalrConfig

# Cheap cloud resolution for unit tests; architecture stays small too.
FAST_CLOUD = dict(density=2e3, base_voxel=12e-3, radius_scale=2.0)


def tiny_arch(**over):
    base = dict(
        widths=(4, 6, 8), d_t=8, layers=1, heads=2, d_latent=4, kernel_points=7
    )
    base.update(over)
    return GalrConfig(**base)


def tiny_train_config(**over):
    base = dict(
        epochs=2,
        batch_size=8,
        lr=1e-3,
        seed=0,
        encoder=tiny_arch(),
        decoder_width=16,
        warmup_steps=4,
    )
    base.update(over)
    return trainkit.TrainConfig(**base)


def fast_dataset(names=("planar2f", "planar3f"), n=24, seed=5, **over):
    specs = [handspec.load_bundled(n_) for n_ in names]
    # plans must carry the same kernel disposition the tiny model uses
    kw = dict(config=tiny_arch(**FAST_CLOUD), materialize="plan")
    kw.update(over)
    return trainkit.build_dataset(specs, n, seed=seed, **kw)


# ---------------------------------------------------------------------------
# reachable states


def test_canonical_poses_come_first():
    spec = handspec.load_bundled("toy5f")
    got = trainkit.sample_reachable_states(spec, 3, seed=0, mode="uniform+canonical")
    lo, hi = spec.limits_lo(), spec.limits_hi()
    assert np.array_equal(got.states[0].angles, lo)
    assert np.array_equal(got.states[1].angles, hi)
    assert np.array_equal(got.states[2].angles, 0.5 * (lo + hi))


def test_states_within_limits():
    for name in ("planar2f", "toy4f", "toy5f-wide"):
        spec = handspec.load_bundled(name)
        lo, hi = spec.limits_lo(), spec.limits_hi()
        for mode in trainkit.SAMPLING_MODES:
            got = trainkit.sample_reachable_states(spec, 50, seed=11, mode=mode)
            assert len(got.states) == 50
            for jv in got.states:
                assert np.all(jv.angles >= lo) and np.all(jv.angles <= hi)


def test_uniform_sampling_mean_near_midrange():
    spec = handspec.load_bundled("planar3f")
    got = trainkit.sample_reachable_states(spec, 10_000, seed=2, mode="uniform")
    angles = np.stack([jv.angles for jv in got.states])
    lo, hi = spec.limits_lo(), spec.limits_hi()
    mid, rng = 0.5 * (lo + hi), hi - lo
    assert np.all(np.abs(angles.mean(axis=0) - mid) < 0.02 * rng)


def test_same_seed_same_states():
    spec = handspec.load_bundled("toy4f")
    a = trainkit.sample_reachable_states(spec, 20, seed=9)
    b = trainkit.sample_reachable_states(spec, 20, seed=9)
    for ja, jb in zip(a.states, b.states):
        assert np.array_equal(ja.angles, jb.angles)


def test_sampling_rejects_bad_arguments():
    spec = handspec.load_bundled("planar2f")
    with pytest.raises(trainkit.TrainkitError, match="positive"):
        trainkit.sample_reachable_states(spec, 0, seed=0)
    with pytest.raises(trainkit.TrainkitError, match="unknown sampling mode"):
        trainkit.sample_reachable_states(spec, 5, seed=0, mode="gaussian")


# ---------------------------------------------------------------------------
# dataset construction


def test_dataset_split_sizes():
    specs = [handspec.load_bundled("planar2f"), handspec.load_bundled("planar3f")]
    ds = trainkit.build_dataset(
        specs, 100, seed=1, config=GalrConfig(**FAST_CLOUD), materialize="none"
    )
    assert len(ds.split("train")) == 160
    assert len(ds.split("val")) == 20
    assert len(ds.split("test")) == 20


def test_dataset_splits_disjoint_by_state():
    ds = fast_dataset(n=30, materialize="none")
    seen = set()
    for rec in ds.records:
        key = (rec.embodiment_id, rec.state_index)
        assert key not in seen
        seen.add(key)


def test_dataset_fraction_validation():
    specs = [handspec.load_bundled("planar2f")]
    with pytest.raises(trainkit.TrainkitError, match="sum to 1"):
        trainkit.build_dataset(specs, 10, seed=0, fractions=(0.5, 0.2, 0.2))
    with pytest.raises(trainkit.TrainkitError, match="three non-negative"):
        trainkit.build_dataset(specs, 10, seed=0, fractions=(0.9, 0.1))


def test_dataset_degeneracy_reports_embodiment_and_state():
    specs = [handspec.load_bundled("planar2f")]
    with pytest.raises(trainkit.TrainkitError, match=r"planar2f.*state \d+"):
        trainkit.build_dataset(
            specs, 4, seed=0, config=GalrConfig(density=1.0, base_voxel=12e-3)
        )


def test_dataset_worker_count_does_not_change_clouds():
    a = fast_dataset(n=10, materialize="pyramid", workers=1)
    b = fast_dataset(n=10, materialize="pyramid", workers=3)
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.pyramid.level0.points, rb.pyramid.level0.points)
        assert np.array_equal(ra.pyramid.points2, rb.pyramid.points2)


def test_cloud_cache_round_trip(tmp_path):
    cache = tmp_path / "clouds"
    a = fast_dataset(n=6, materialize="pyramid", cache_dir=cache)
    n_files = len(list(cache.glob("*.cloud")))
    assert n_files == 12  # 6 states x 2 embodiments
    # second build must hit the cache and reproduce the pyramids bitwise
    b = fast_dataset(n=6, materialize="pyramid", cache_dir=cache)
    assert len(list(cache.glob("*.cloud"))) == n_files
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.pyramid.level0.points, rb.pyramid.level0.points)
        assert np.array_equal(ra.pyramid.level0.semantics, rb.pyramid.level0.semantics)
        assert np.array_equal(ra.pyramid.points1, rb.pyramid.points1)


def test_plan_materialization_drops_pyramids():
    ds = fast_dataset(n=8)
    for rec in ds.records:
        assert rec.pyramid is None
        assert rec.plan is not None


def test_unmaterialized_records_are_rejected_at_train_time():
    ds = fast_dataset(n=12, materialize="none")
    with pytest.raises(trainkit.TrainkitError, match="materialize"):
        trainkit.train(ds, tiny_train_config())


def test_plans_from_a_different_architecture_are_rejected():
    # plans built for the default 13-point kernel cannot serve a 7-point model
    ds = fast_dataset(n=12, config=GalrConfig(**FAST_CLOUD), materialize="plan")
    with pytest.raises(trainkit.TrainkitError, match="kernel_points=13"):
        trainkit.train(ds, tiny_train_config())


def test_dataset_save_load_round_trip(tmp_path):
    ds = fast_dataset(n=12, materialize="none")
    trainkit.save_dataset(ds, tmp_path / "data")
    back = trainkit.load_dataset(tmp_path / "data")
    assert back.embodiments() == ds.embodiments()
    assert back.density == ds.density and back.base_voxel == ds.base_voxel
    for ra, rb in zip(ds.records, back.records):
        assert ra.embodiment_id == rb.embodiment_id
        assert ra.split == rb.split
        assert np.array_equal(ra.joints.angles, rb.joints.angles)


def test_load_dataset_rejects_missing_and_foreign(tmp_path):
    with pytest.raises(trainkit.TrainkitError, match="manifest"):
        trainkit.load_dataset(tmp_path / "nope")
    ds = fast_dataset(n=6, materialize="none")
    trainkit.save_dataset(ds, tmp_path / "d")
    manifest = tmp_path / "d" / "manifest.json"
    text = manifest.read_text().replace("u24.1", "u99.9")
    manifest.write_text(text)
    with pytest.raises(trainkit.TrainkitError, match="registry version"):
        trainkit.load_dataset(tmp_path / "d")


# ---------------------------------------------------------------------------
# train config


def test_train_config_round_trip():
    cfg = tiny_train_config(embodiments=("planar2f",), epochs=7)
    back = trainkit.TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_train_config_validation():
    with pytest.raises(trainkit.TrainkitError, match="epochs"):
        tiny_train_config(epochs=0)
    with pytest.raises(trainkit.TrainkitError, match="worker"):
        tiny_train_config(workers=0)
    with pytest.raises(trainkit.TrainkitError, match="dtype"):
        tiny_train_config(dtype="float16")
    with pytest.raises(trainkit.TrainkitError, match="unknown training config keys"):
        trainkit.TrainConfig.from_dict({**tiny_train_config().to_dict(), "momentum": 0.9})
    with pytest.raises(trainkit.TrainkitError, match="missing training config keys"):
        trainkit.TrainConfig.from_dict({"epochs": 3})


# ---------------------------------------------------------------------------
# training loop


def test_training_is_deterministic():
    ds = fast_dataset(n=16)
    cfg = tiny_train_config(epochs=3)
    a = trainkit.train(ds, cfg)
    b = trainkit.train(ds, cfg)
    assert a.history == b.history
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    c = trainkit.train(ds, tiny_train_config(epochs=3, seed=1))
    assert c.history != a.history


def test_history_has_per_epoch_rows_for_every_embodiment():
    ds = fast_dataset(n=16)
    res = trainkit.train(ds, tiny_train_config(epochs=2))
    rows = {(r["epoch"], r["embodiment"], r["split"]) for r in res.history}
    for epoch in range(2):
        for eid in ("planar2f", "planar3f"):
            assert (epoch, eid, "train") in rows
            assert (epoch, eid, "val") in rows


def test_metrics_csv_layout(tmp_path):
    ds = fast_dataset(n=16)
    path = tmp_path / "metrics.csv"
    res = trainkit.train(ds, tiny_train_config(), metrics_path=path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,embodiment,split,rmse_norm,rmse_rad"
    assert len(lines) == 1 + len(res.history)
    first = lines[1].split(",")
    assert first[0] == "0" and first[2] in ("train", "val")
    float(first[3]), float(first[4])  # parseable numbers


def test_divergence_aborts_with_batch_description():
    ds = fast_dataset(n=16)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(trainkit.TrainkitError, match="non-finite loss at epoch"):
            trainkit.train(ds, tiny_train_config(epochs=4, lr=1e38))


def test_best_checkpoint_is_kept(tmp_path):
    ds = fast_dataset(n=20)
    res = trainkit.train(
        ds, tiny_train_config(epochs=3), checkpoint_path=tmp_path / "best.bin"
    )
    vals = {}
    for row in res.history:
        if row["split"] == "val":
            vals.setdefault(row["epoch"], []).append(row["rmse_norm"])
    means = {e: float(np.mean(v)) for e, v in vals.items()}
    assert res.best_epoch == min(means, key=means.get)
    assert math.isclose(res.best_val, means[res.best_epoch])
    bundle = trainkit.load_bundle(tmp_path / "best.bin")
    assert bundle.best_epoch == res.best_epoch
    assert bundle.encoder_config == res.encoder_config


def test_restricting_embodiments():
    ds = fast_dataset(n=16)
    res = trainkit.train(ds, tiny_train_config(embodiments=("planar2f",)))
    assert {r["embodiment"] for r in res.history} == {"planar2f"}
    with pytest.raises(trainkit.TrainkitError, match="not present"):
        trainkit.train(ds, tiny_train_config(embodiments=("toy5f",)))


def test_overfit_toy_set_reaches_low_train_rmse():
    # One embodiment, 32 states, 200 epochs: the loop must be able to
    # memorize a toy set (normalized train RMSE < 0.05), and after epoch 20
    # the train loss may never grow by more than 5% of its current value.
    specs = [handspec.load_bundled("planar3f")]
    ds = trainkit.build_dataset(
        specs,
        32,
        seed=3,
        fractions=(1.0, 0.0, 0.0),
        config=GalrConfig(density=4e3, base_voxel=10e-3, radius_scale=2.0),
        materialize="plan",
    )
    # a gentle peak rate and a warmup that ends before epoch 20, so the
    # post-warmup decay phase is the part the smoothness bound inspects
    cfg = trainkit.TrainConfig(
        epochs=200,
        batch_size=16,
        lr=1e-3,
        seed=0,
        encoder=GalrConfig(),
        warmup_steps=30,
        train_metric_cap=32,
    )
    res = trainkit.train(ds, cfg)
    per_epoch = [r["rmse_norm"] for r in res.history if r["split"] == "train"]
    assert len(per_epoch) == 200
    assert per_epoch[-1] < 0.05
    for e in range(20, 199):
        assert per_epoch[e + 1] <= per_epoch[e] * 1.05


# ---------------------------------------------------------------------------
# evaluation


def trained_pair():
    ds = fast_dataset(n=20)
    res = trainkit.train(ds, tiny_train_config())
    return ds, res


def test_evaluate_reports_every_embodiment():
    ds, res = trained_pair()
    reports = trainkit.evaluate(res, ds, "test")
    assert set(reports) == {"planar2f", "planar3f"}
    for eid, rep in reports.items():
        spec = ds.specs[eid]
        assert rep.count == len([r for r in ds.split("test") if r.embodiment_id == eid])
        assert rep.per_joint_worst_rad.shape == (spec.dof,)
        assert 0 <= rep.self_retarget_max_frac <= 1
        assert rep.rmse_norm >= 0 and rep.rmse_rad >= 0


def test_evaluate_empty_split_is_an_error():
    ds = fast_dataset(n=20, fractions=(0.5, 0.5, 0.0))
    res = trainkit.train(ds, tiny_train_config(epochs=1))
    with pytest.raises(trainkit.TrainkitError, match="empty split"):
        trainkit.evaluate(res, ds, "test")


def test_evaluate_rejects_registry_mismatch():
    ds, res = trained_pair()
    bundle = trainkit.bundle_from_result(res)
    bundle.registry_version = "u99.9"
    with pytest.raises(trainkit.TrainkitError, match="u99.9"):
        trainkit.evaluate(bundle, ds, "test")


def test_perfect_predictions_give_zero_metrics(monkeypatch):
    ds, res = trained_pair()

    def perfect(records, dataset, params, enc_cfg, dtype, batch=32):
        out = np.zeros((len(records), 24))
        for i, rec in enumerate(records):
            spec = dataset.specs[rec.embodiment_id]
            out[i, spec.universal_ids()] = trainkit._target_for(rec, spec)
        return out

    monkeypatch.setattr(trainkit, "_predict_rows", perfect)
    reports = trainkit.evaluate(res, ds, "test")
    for rep in reports.values():
        assert rep.rmse_norm == 0.0
        assert rep.rmse_rad == 0.0
        assert np.all(rep.per_joint_worst_rad == 0.0)
        assert rep.self_retarget_max_frac == 0.0


def test_prediction_rows_do_not_depend_on_eval_batching():
    ds, res = trained_pair()
    recs = ds.split("test")
    dtype = np.dtype("float32")
    full = trainkit._predict_rows(recs, ds, res.params, res.encoder_config, dtype, batch=32)
    single = trainkit._predict_rows(recs, ds, res.params, res.encoder_config, dtype, batch=1)
    assert np.allclose(full, single, atol=1e-5)


def test_evaluate_matches_unbatched_reference_pipeline():
    # Independent route: per-record encode via the public single-cloud API
    # and the plain numpy decoder, no shared batching code.
    from galr import cloud, encoder

    names = ("planar2f", "planar3f")
    specs = [handspec.load_bundled(n) for n in names]
    cfg = GalrConfig(**FAST_CLOUD)
    ds = trainkit.build_dataset(specs, 12, seed=8, config=cfg, materialize="pyramid")
    res = trainkit.train(ds, tiny_train_config(epochs=1))
    reports = trainkit.evaluate(res, ds, "test")

    for eid in names:
        spec = ds.specs[eid]
        sq, n_terms = 0.0, 0
        for rec in ds.split("test"):
            if rec.embodiment_id != eid:
                continue
            params64 = {k: v.astype(np.float64) for k, v in res.params.items()}
            vec = encoder.encode(
                rec.pyramid, retarget.encoder_view(params64), res.encoder_config
            )
            pred = retarget.decode(vec.z, params64)
            err = pred.theta_hat[spec.universal_ids()] - trainkit._target_for(rec, spec)
            sq += float(np.sum(err * err))
            n_terms += spec.dof
        assert abs(math.sqrt(sq / n_terms) - reports[eid].rmse_norm) < 1e-4


def test_checkpoint_round_trip_reproduces_metrics_bitwise(tmp_path):
    ds, res = trained_pair()
    before = trainkit.evaluate(res, ds, "test")
    path = tmp_path / "ck.bin"
    trainkit.save_bundle(path, trainkit.bundle_from_result(res))
    after = trainkit.evaluate(trainkit.load_bundle(path), ds, "test")
    for eid in before:
        assert before[eid].rmse_norm == after[eid].rmse_norm
        assert before[eid].rmse_rad == after[eid].rmse_rad
        assert np.array_equal(
            before[eid].per_joint_worst_rad, after[eid].per_joint_worst_rad
        )
