"""Decoder, selection, loss, and end-to-end retargeting tests."""

import inspect

import numpy as np
import pytest

import galr.diffcore as D
from galr import cloud, encoder, handspec, retarget
from galr.registry import UNIVERSAL_MODEL_SIZE


def tiny_config():
    return encoder.GalrConfig(
        widths=(4, 6, 8), d_t=8, layers=1, heads=2, d_latent=5, kernel_points=7
    )


def tiny_model(seed=0, dec_width=16):
    cfg = tiny_config()
    params = encoder.init_params(cfg, seed=seed)
    params.update(retarget.init_decoder_params(cfg.d_latent, seed=seed + 1, width=dec_width))
    return cfg, params


def random_pose(spec, rng):
    lo, hi = spec.limits_lo(), spec.limits_hi()
    return handspec.make_joint_vector(spec, lo + (hi - lo) * rng.uniform(size=spec.dof))


# ---------------------------------------------------------------------------
# selection mask


def test_selection_mask_matches_spec_order():
    spec = handspec.load_bundled("planar2f")
    mask = retarget.selection_mask(spec)
    assert mask.embodiment_id == "planar2f"
    assert len(mask.indices) == spec.dof == 2
    assert np.array_equal(mask.indices, spec.universal_ids())


def test_selection_mask_rejects_duplicates():
    with pytest.raises(retarget.RetargetError, match="duplicate"):
        retarget.SelectionMask("bad", np.array([1, 1, 2]))


def test_nested_specs_use_nested_masks():
    small = set(retarget.selection_mask(handspec.load_bundled("toy4f")).indices.tolist())
    big = set(retarget.selection_mask(handspec.load_bundled("toy5f")).indices.tolist())
    assert small < big


# ---------------------------------------------------------------------------
# decode


def test_decode_zero_final_layer_gives_midrange():
    cfg, params = tiny_model()
    params["dec/W3"][:] = 0.0
    params["dec/b3"][:] = 0.0
    z = np.random.default_rng(0).normal(size=cfg.d_latent)
    pred = retarget.decode(z, params)
    assert np.all(pred.theta_hat == 0.0)
    for name in ("planar2f", "toy5f"):
        spec = handspec.load_bundled(name)
        q = retarget.select(pred, spec)
        np.testing.assert_allclose(
            q.angles, (spec.limits_lo() + spec.limits_hi()) / 2.0, atol=1e-15
        )


def test_decode_deterministic_and_bounded():
    cfg, params = tiny_model(seed=3)
    z = np.random.default_rng(1).normal(size=cfg.d_latent) * 3.0
    a = retarget.decode(z, params)
    b = retarget.decode(z, params)
    assert np.array_equal(a.theta_hat, b.theta_hat)
    assert a.theta_hat.shape == (UNIVERSAL_MODEL_SIZE,)
    assert np.abs(a.theta_hat).max() < 1.0  # tanh range is open


def test_decode_rejects_latent_width_mismatch():
    _, params = tiny_model()
    with pytest.raises(retarget.RetargetError, match="checkpoint mismatch"):
        retarget.decode(np.zeros(9), params)


def test_decode_rejects_missing_decoder():
    cfg, params = tiny_model()
    enc_only = retarget.encoder_view(params)
    with pytest.raises(retarget.RetargetError, match="missing from checkpoint"):
        retarget.decode(np.zeros(cfg.d_latent), enc_only)


def test_decode_is_embodiment_blind():
    # No spec or embodiment argument exists, and one prediction serves any hand.
    assert "spec" not in inspect.signature(retarget.decode).parameters
    cfg, params = tiny_model(seed=5)
    pred = retarget.decode(np.random.default_rng(2).normal(size=cfg.d_latent), params)
    for name in handspec.BUNDLED_SPEC_NAMES:
        spec = handspec.load_bundled(name)
        q = retarget.select(pred, spec)
        assert np.all(q.angles >= spec.limits_lo()) and np.all(q.angles <= spec.limits_hi())


def test_taped_decoder_matches_plain():
    cfg, params = tiny_model(seed=7)
    zs = np.random.default_rng(3).normal(size=(4, cfg.d_latent))
    tape = D.Tape()
    params_t = {k: tape.input(v) for k, v in params.items() if k.startswith("dec/")}
    theta = retarget.decode_on_tape(tape, tape.input(zs), params_t)
    for i in range(4):
        np.testing.assert_allclose(
            theta.values[i], retarget.decode(zs[i], params).theta_hat, atol=1e-12
        )


# ---------------------------------------------------------------------------
# select


def test_select_endpoints_exact():
    spec = handspec.load_bundled("planar3f")
    ids = spec.universal_ids()
    theta = np.zeros(UNIVERSAL_MODEL_SIZE)
    theta[ids] = -1.0
    q_lo = retarget.select(retarget.UniversalJointPrediction(theta_hat=theta), spec)
    assert np.array_equal(q_lo.angles, spec.limits_lo())
    theta[ids] = 1.0
    q_hi = retarget.select(retarget.UniversalJointPrediction(theta_hat=theta), spec)
    assert np.array_equal(q_hi.angles, spec.limits_hi())


def test_select_cardinality_planar2f():
    pred = retarget.UniversalJointPrediction(theta_hat=np.zeros(UNIVERSAL_MODEL_SIZE))
    q = retarget.select(pred, handspec.load_bundled("planar2f"))
    assert q.angles.shape == (2,)


def test_select_registry_version_guard():
    pred = retarget.UniversalJointPrediction(
        theta_hat=np.zeros(UNIVERSAL_MODEL_SIZE), registry_version="u99.9"
    )
    with pytest.raises(retarget.RetargetError, match="u99.9"):
        retarget.select(pred, handspec.load_bundled("toy5f"))


def test_select_always_within_limits():
    rng = np.random.default_rng(11)
    spec = handspec.load_bundled("toy5f-wide")
    for _ in range(100):
        theta = rng.uniform(-1.0, 1.0, size=UNIVERSAL_MODEL_SIZE)
        q = retarget.select(retarget.UniversalJointPrediction(theta_hat=theta), spec)
        assert np.all(q.angles >= spec.limits_lo())
        assert np.all(q.angles <= spec.limits_hi())


def test_normalize_inverts_select():
    rng = np.random.default_rng(12)
    spec = handspec.load_bundled("toy4f")
    theta = rng.uniform(-0.99, 0.99, size=UNIVERSAL_MODEL_SIZE)
    q = retarget.select(retarget.UniversalJointPrediction(theta_hat=theta), spec)
    back = retarget.normalize_angles(q.angles, spec)
    np.testing.assert_allclose(back, theta[spec.universal_ids()], atol=1e-12)


# ---------------------------------------------------------------------------
# loss


def test_rmse_loss_zero_for_equal():
    spec = handspec.load_bundled("planar3f")
    q = random_pose(spec, np.random.default_rng(13))
    assert retarget.rmse_loss(q, q, spec) == 0.0


def test_rmse_loss_constant_offset():
    spec = handspec.load_bundled("toy5f")
    rng = np.random.default_rng(14)
    lo, hi = spec.limits_lo(), spec.limits_hi()
    target = lo + (hi - lo) * rng.uniform(0.2, 0.7, size=spec.dof)
    predicted = target + 0.05 * (hi - lo)  # +0.1 in normalized units
    assert retarget.rmse_loss(predicted, handspec.make_joint_vector(spec, target), spec) == pytest.approx(
        0.1, abs=1e-12
    )


def test_rmse_loss_matches_hand_computation():
    spec = handspec.load_bundled("planar3f")
    rng = np.random.default_rng(15)
    a = random_pose(spec, rng)
    b = random_pose(spec, rng)
    na = retarget.normalize_angles(a.angles, spec)
    nb = retarget.normalize_angles(b.angles, spec)
    want = np.sqrt(np.sum((na - nb) ** 2) / spec.dof)
    assert abs(retarget.rmse_loss(a, b, spec) - want) <= 1e-12


def test_rmse_loss_rejects_mismatches():
    p3 = handspec.load_bundled("planar3f")
    p2 = handspec.load_bundled("planar2f")
    q3 = random_pose(p3, np.random.default_rng(16))
    q2 = random_pose(p2, np.random.default_rng(17))
    with pytest.raises(retarget.RetargetError, match="belongs to"):
        retarget.rmse_loss(q2, q3, p3)
    with pytest.raises(retarget.RetargetError, match="angles"):
        retarget.rmse_loss(np.zeros(4), q3, p3)


def test_rmse_radians_reports_raw_scale():
    spec = handspec.load_bundled("planar2f")
    q = random_pose(spec, np.random.default_rng(18))
    shifted = q.angles + 0.02
    assert retarget.rmse_radians(shifted, q, spec) == pytest.approx(0.02, abs=1e-12)


def test_taped_rmse_matches_hand_computation():
    spec = handspec.load_bundled("toy4f")
    rng = np.random.default_rng(19)
    theta = rng.uniform(-0.9, 0.9, size=(2, UNIVERSAL_MODEL_SIZE))
    target = rng.uniform(-0.9, 0.9, size=(2, spec.dof))
    tape = D.Tape()
    loss = retarget.rmse_loss_on_tape(tape, tape.input(theta), spec, tape.input(target))
    err = theta[:, spec.universal_ids()] - target
    want = np.sqrt(np.mean(err * err))
    assert abs(float(loss.values[0, 0]) - want) <= 1e-12


def test_unselected_outputs_get_exactly_zero_gradient():
    spec = handspec.load_bundled("planar2f")
    cfg, params = tiny_model(seed=21, dec_width=8)
    rng = np.random.default_rng(22)
    zs = rng.normal(size=(3, cfg.d_latent))
    target = rng.uniform(-0.5, 0.5, size=(3, spec.dof))
    tape = D.Tape()
    params_t = {
        k: tape.param(k, v) for k, v in params.items() if k.startswith("dec/")
    }
    theta = retarget.decode_on_tape(tape, tape.input(zs), params_t)
    loss = retarget.rmse_loss_on_tape(tape, theta, spec, tape.input(target))
    grads = tape.backward(loss)
    selected = set(spec.universal_ids().tolist())
    unselected = [i for i in range(UNIVERSAL_MODEL_SIZE) if i not in selected]
    assert np.all(grads["dec/W3"][:, unselected] == 0.0)
    assert np.all(grads["dec/b3"][0, unselected] == 0.0)
    assert np.any(grads["dec/W3"][:, sorted(selected)] != 0.0)


def test_composite_encode_decode_loss_gradient():
    cfg = encoder.GalrConfig(
        widths=(2, 2, 4), d_t=4, layers=1, heads=1, d_latent=2, kernel_points=1
    )
    params = encoder.init_params(cfg, seed=23)
    params.update(retarget.init_decoder_params(cfg.d_latent, seed=24, width=6))
    spec = handspec.load_bundled("planar2f")
    rng = np.random.default_rng(25)
    pts = rng.normal(size=(60, 3)) * 0.05
    sems = np.zeros((60, 2), dtype=np.int32)
    pyr = cloud.build_pyramid(cloud.SurfaceCloud(points=pts, semantics=sems), 0.03, 2.5)
    plan = encoder.build_encode_plan(pyr, cfg)
    target = rng.uniform(-0.6, 0.6, size=(1, spec.dof))

    def build(tape, p):
        params_t = encoder.register_params(tape, p)
        z = encoder.encode_plans_on_tape(
            tape, [plan], {k: v for k, v in params_t.items() if not k.startswith("dec/")}, cfg
        )
        theta = retarget.decode_on_tape(tape, z, params_t)
        return retarget.rmse_loss_on_tape(tape, theta, spec, tape.input(target))

    err, coord = D.fd_check(build, params, step=1e-6)
    assert err < 1e-5, coord


# ---------------------------------------------------------------------------
# retarget pipeline


def test_retarget_untrained_still_within_limits():
    cfg, params = tiny_model(seed=31)
    source = handspec.load_bundled("planar2f")
    target = handspec.load_bundled("toy5f")
    q = random_pose(source, np.random.default_rng(32))
    out = retarget.retarget(source, q, target, params, cfg)
    assert out.embodiment_id == "toy5f"
    assert np.all(out.angles >= target.limits_lo())
    assert np.all(out.angles <= target.limits_hi())


def test_retarget_deterministic():
    cfg, params = tiny_model(seed=33)
    spec = handspec.load_bundled("planar3f")
    q = random_pose(spec, np.random.default_rng(34))
    a = retarget.retarget(spec, q, spec, params, cfg)
    b = retarget.retarget(spec, q, spec, params, cfg)
    assert np.array_equal(a.angles, b.angles)


def test_retarget_stage_tags():
    cfg, params = tiny_model(seed=35)
    spec = handspec.load_bundled("planar2f")
    q = random_pose(spec, np.random.default_rng(36))
    with pytest.raises(retarget.RetargetError, match="decode:"):
        retarget.retarget(spec, q, spec, retarget.encoder_view(params), cfg)
    starved = encoder.GalrConfig(
        widths=(4, 6, 8), d_t=8, layers=1, heads=2, d_latent=5, kernel_points=7,
        density=1.0,
    )
    with pytest.raises(retarget.RetargetError, match="pyramid:"):
        retarget.retarget(spec, q, spec, params, starved)


def test_pose_seed_stable_and_pose_sensitive():
    spec = handspec.load_bundled("planar2f")
    rng = np.random.default_rng(37)
    q1 = random_pose(spec, rng)
    q2 = random_pose(spec, rng)
    assert retarget.pose_seed(q1) == retarget.pose_seed(
        handspec.make_joint_vector(spec, q1.angles.copy())
    )
    assert retarget.pose_seed(q1) != retarget.pose_seed(q2)
