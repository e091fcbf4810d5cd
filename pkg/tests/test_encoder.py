"""Encoder tests: kernel dispositions, convolution against the explicit
double-loop oracle, taped gradients, and whole-pipeline properties."""

import numpy as np
import pytest

import galr.diffcore as D
from galr import cloud, encoder, handspec
from oracles import kpconv_oracle, rel_err


def tiny_config(**overrides):
    base = dict(
        widths=(4, 6, 8),
        d_t=8,
        layers=1,
        heads=2,
        d_latent=3,
        kernel_points=7,
    )
    base.update(overrides)
    return encoder.GalrConfig(**base)


def random_cloud(rng, n=200, spread=0.05):
    pts = rng.normal(size=(n, 3)) * spread
    sems = np.stack(
        [rng.integers(0, 6, size=n), rng.integers(0, 3, size=n)], axis=1
    ).astype(np.int32)
    return cloud.SurfaceCloud(points=pts, semantics=sems)


def random_pyramid(rng, n=200, voxel=0.02):
    return cloud.build_pyramid(random_cloud(rng, n=n), base_voxel=voxel, radius_scale=2.5)


# ---------------------------------------------------------------------------
# dispositions


def test_disposition_k1_is_origin():
    d = encoder.make_disposition(1, 0.05)
    assert d.kernel_points.shape == (1, 3)
    assert np.all(d.kernel_points == 0.0)


def test_disposition_k7_octahedron():
    d = encoder.make_disposition(7, 1.0)
    expected = {(0.66, 0, 0), (-0.66, 0, 0), (0, 0.66, 0), (0, -0.66, 0), (0, 0, 0.66), (0, 0, -0.66)}
    got = {tuple(np.round(p, 12)) for p in d.kernel_points[1:]}
    assert np.all(d.kernel_points[0] == 0.0)
    assert got == expected


def test_disposition_k13_icosahedron_shell():
    r = 0.04
    d = encoder.make_disposition(13, r)
    assert d.count == 13
    assert np.all(d.kernel_points[0] == 0.0)
    norms = np.linalg.norm(d.kernel_points[1:], axis=1)
    np.testing.assert_allclose(norms, 0.66 * r, rtol=1e-12)
    # vertices come in antipodal pairs
    total = d.kernel_points[1:].sum(axis=0)
    np.testing.assert_allclose(total, 0.0, atol=1e-15)


@pytest.mark.parametrize("k", [1, 7, 13])
def test_disposition_inside_ball_and_deterministic(k):
    a = encoder.make_disposition(k, 0.02)
    b = encoder.make_disposition(k, 0.02)
    assert np.linalg.norm(a.kernel_points, axis=1).max() <= 0.02
    assert np.array_equal(a.kernel_points, b.kernel_points)


def test_disposition_rejects_bad_args():
    with pytest.raises(encoder.EncoderError, match="unsupported kernel count"):
        encoder.make_disposition(5, 1.0)
    with pytest.raises(encoder.EncoderError, match="radius must be positive"):
        encoder.make_disposition(7, 0.0)


# ---------------------------------------------------------------------------
# correlation


def test_correlation_trivial_values():
    kp = np.array([0.01, -0.02, 0.03])
    sigma = 0.04
    assert encoder.correlation(kp, kp, sigma) == 1.0
    assert encoder.correlation(kp + [sigma, 0, 0], kp, sigma) == 0.0
    assert encoder.correlation(kp + [0, sigma / 2, 0], kp, sigma) == 0.5
    assert encoder.correlation(kp + [0, 0, 3 * sigma], kp, sigma) == 0.0


def test_correlation_requires_positive_sigma():
    with pytest.raises(encoder.EncoderError, match="sigma"):
        encoder.correlation([0, 0, 0], [0, 0, 0], 0.0)


def test_vectorized_correlations_match_scalar():
    rng = np.random.default_rng(7)
    offsets = rng.normal(size=(40, 3)) * 0.02
    disp = encoder.make_disposition(13, 0.03)
    h = encoder._correlations(offsets, disp.kernel_points, 0.02)
    for p in range(10):
        for k in range(13):
            assert h[p, k] == pytest.approx(
                encoder.correlation(offsets[p], disp.kernel_points[k], 0.02), abs=1e-15
            )


# ---------------------------------------------------------------------------
# convolution forward


def test_kpconv_single_kernel_coincident_neighbor():
    disp = encoder.make_disposition(1, 0.05)
    w = np.random.default_rng(0).normal(size=(1, 4, 6))
    layer = encoder.KPConvLayer(weights=w, sigma=0.05, disposition=disp)
    q = np.array([[0.1, 0.2, 0.3]])
    f = np.random.default_rng(1).normal(size=(1, 4))
    nb = cloud.radius_neighbors(q, q, 0.05)
    out = encoder.kpconv_forward(layer, q, q, f, nb)
    np.testing.assert_allclose(out, f @ w[0], atol=1e-15)


def test_kpconv_zero_features_zero_output():
    rng = np.random.default_rng(2)
    disp = encoder.make_disposition(7, 0.1)
    layer = encoder.KPConvLayer(weights=rng.normal(size=(7, 3, 5)), sigma=0.07, disposition=disp)
    s = rng.normal(size=(20, 3)) * 0.05
    q = rng.normal(size=(6, 3)) * 0.05
    nb = cloud.radius_neighbors(q, s, 0.1)
    out = encoder.kpconv_forward(layer, q, s, np.zeros((20, 3)), nb)
    assert np.all(out == 0.0)


def test_kpconv_empty_neighborhood_rows_are_zero():
    rng = np.random.default_rng(3)
    disp = encoder.make_disposition(7, 0.01)
    layer = encoder.KPConvLayer(weights=rng.normal(size=(7, 2, 2)), sigma=0.007, disposition=disp)
    s = rng.normal(size=(10, 3))
    q = s + 5.0  # far away from every support
    nb = cloud.radius_neighbors(q, s, 0.01)
    out = encoder.kpconv_forward(layer, q, s, rng.normal(size=(10, 2)), nb)
    assert out.shape == (10, 2)
    assert np.all(out == 0.0)


def test_kpconv_width_mismatch_rejected():
    rng = np.random.default_rng(4)
    disp = encoder.make_disposition(1, 0.1)
    layer = encoder.KPConvLayer(weights=rng.normal(size=(1, 4, 2)), sigma=0.05, disposition=disp)
    pts = rng.normal(size=(5, 3)) * 0.01
    nb = cloud.radius_neighbors(pts, pts, 0.1)
    with pytest.raises(encoder.EncoderError, match="width"):
        encoder.kpconv_forward(layer, pts, pts, rng.normal(size=(5, 3)), nb)


@pytest.mark.parametrize("seed", range(12))
def test_kpconv_matches_double_loop_oracle(seed):
    rng = np.random.default_rng(300 + seed)
    k = [1, 7, 13][seed % 3]
    n_s = int(rng.integers(4, 33))
    n_q = int(rng.integers(2, 17))
    d_in = int(rng.integers(1, 6))
    d_out = int(rng.integers(1, 7))
    radius = float(rng.uniform(0.05, 0.3))
    supports = rng.normal(size=(n_s, 3)) * 0.1
    queries = rng.normal(size=(n_q, 3)) * 0.1
    feats = rng.normal(size=(n_s, d_in))
    disp = encoder.make_disposition(k, radius)
    sigma = radius / 1.5
    w = rng.normal(size=(k, d_in, d_out))
    layer = encoder.KPConvLayer(weights=w, sigma=sigma, disposition=disp)
    nb = cloud.radius_neighbors(queries, supports, radius)
    got = encoder.kpconv_forward(layer, queries, supports, feats, nb)
    want = kpconv_oracle(
        queries, supports, feats, [nb.list_for(i) for i in range(n_q)],
        disp.kernel_points, w, sigma,
    )
    assert np.abs(got - want).max() <= 1e-10


# ---------------------------------------------------------------------------
# taped convolution


def _random_conv_instance(seed, k=7):
    rng = np.random.default_rng(seed)
    supports = rng.normal(size=(18, 3)) * 0.05
    queries = rng.normal(size=(7, 3)) * 0.05
    radius = 0.08
    disp = encoder.make_disposition(k, radius)
    nb = cloud.radius_neighbors(queries, supports, radius)
    plan = encoder.build_conv_plan(queries, supports, nb, disp, radius / 1.5)
    feats = rng.normal(size=(18, 3))
    weights = rng.normal(size=(k * 3, 4))
    return plan, feats, weights, (queries, supports, nb, disp, radius)


def test_taped_conv_matches_plain_forward():
    plan, feats, weights, (q, s, nb, disp, radius) = _random_conv_instance(11)
    layer = encoder.KPConvLayer(
        weights=weights.reshape(disp.count, 3, 4), sigma=radius / 1.5, disposition=disp
    )
    want = encoder.kpconv_forward(layer, q, s, feats, nb)
    tape = D.Tape()
    out = encoder.kpconv_on_tape(tape, plan, tape.input(feats), tape.input(weights))
    np.testing.assert_allclose(out.values, want, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_taped_conv_gradients_pass_fd(seed):
    plan, feats, weights, _ = _random_conv_instance(40 + seed)
    probe = np.random.default_rng(999 + seed).normal(size=(plan.n_queries, 4))

    def build(tape, params):
        f = tape.param("f", params["f"])
        w = tape.param("w", params["w"])
        out = encoder.kpconv_on_tape(tape, plan, f, w)
        return D.sum_all(D.cmul(out, tape.input(probe)))

    err, coord = D.fd_check(build, {"f": feats, "w": weights})
    assert err < 1e-7, coord


def test_taped_conv_shape_errors():
    plan, feats, weights, _ = _random_conv_instance(60)
    tape = D.Tape()
    with pytest.raises(encoder.EncoderError, match="K\\*D_in"):
        encoder.kpconv_on_tape(tape, plan, tape.input(feats), tape.input(weights[:-1]))
    with pytest.raises(encoder.EncoderError, match="support"):
        encoder.kpconv_on_tape(tape, plan, tape.input(feats[:-1]), tape.input(weights))


def test_merged_plan_equals_block_results():
    plan_a, feats_a, weights, _ = _random_conv_instance(70)
    plan_b, feats_b, _, _ = _random_conv_instance(71)
    merged = encoder.merge_conv_plans([plan_a, plan_b])
    out_a, _ = plan_a.apply(feats_a, weights)
    out_b, _ = plan_b.apply(feats_b, weights)
    out_m, _ = merged.apply(np.concatenate([feats_a, feats_b]), weights)
    np.testing.assert_allclose(out_m, np.concatenate([out_a, out_b]), atol=1e-12)


# ---------------------------------------------------------------------------
# positional embeddings


def test_semantic_embedding_basis_rows():
    rng = np.random.default_rng(8)
    w_s = rng.normal(size=(2, 16))
    assert np.all(encoder.semantic_embedding((0, 0), w_s) == 0.0)
    np.testing.assert_allclose(encoder.semantic_embedding((1, 0), w_s), w_s[0], atol=0)
    np.testing.assert_allclose(
        encoder.semantic_embedding((2, 3), w_s), 2 * w_s[0] + 3 * w_s[1], atol=1e-15
    )


def test_semantic_embedding_is_embodiment_blind():
    w_s = np.random.default_rng(9).normal(size=(2, 8))
    a = encoder.semantic_embedding((2, 1), w_s)  # as labeled by one hand
    b = encoder.semantic_embedding((2, 1), w_s)  # as labeled by another
    assert np.array_equal(a, b)


def test_semantic_embedding_range_checks():
    w_s = np.zeros((2, 4))
    with pytest.raises(encoder.EncoderError, match="u must be"):
        encoder.semantic_embedding((6, 0), w_s)
    with pytest.raises(encoder.EncoderError, match="non-negative"):
        encoder.semantic_embedding((1, -1), w_s)


def test_coord_embedding_linearity():
    proj = np.random.default_rng(10).normal(size=(3, 12))
    p = np.array([0.01, -0.02, 0.05])
    assert np.all(encoder.coord_embedding([0, 0, 0], proj) == 0.0)
    np.testing.assert_allclose(
        encoder.coord_embedding(2 * p, proj), 2 * encoder.coord_embedding(p, proj), atol=1e-15
    )


# ---------------------------------------------------------------------------
# configuration and parameters


def test_config_roundtrip():
    cfg = encoder.GalrConfig()
    again = encoder.GalrConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert isinstance(again.widths, tuple)


def test_config_validation():
    with pytest.raises(encoder.EncoderError, match="divisible"):
        encoder.GalrConfig(d_t=130, widths=(32, 64, 130), heads=4)
    with pytest.raises(encoder.EncoderError, match="must equal d_t"):
        encoder.GalrConfig(widths=(32, 64, 96))
    with pytest.raises(encoder.EncoderError, match="kernel_points"):
        encoder.GalrConfig(kernel_points=9)
    with pytest.raises(encoder.EncoderError, match="unknown config keys"):
        encoder.GalrConfig.from_dict({**encoder.GalrConfig().to_dict(), "extra": 1})


def test_init_params_shapes_and_determinism():
    cfg = tiny_config()
    params = encoder.init_params(cfg, seed=5)
    encoder.validate_params(params, cfg)
    again = encoder.init_params(cfg, seed=5)
    for name in params:
        assert np.array_equal(params[name], again[name])
    other = encoder.init_params(cfg, seed=6)
    assert any(not np.array_equal(params[n], other[n]) for n in params)


def test_validate_params_rejects_drift():
    cfg = tiny_config()
    params = encoder.init_params(cfg, seed=0)
    broken = dict(params)
    broken["head/W"] = broken["head/W"][:, :-1]
    with pytest.raises(encoder.EncoderError, match="shape"):
        encoder.validate_params(broken, cfg)
    missing = dict(params)
    del missing["pos/sem"]
    with pytest.raises(encoder.EncoderError, match="missing parameter"):
        encoder.validate_params(missing, cfg)
    extra = dict(params)
    extra["bogus"] = np.zeros((1, 1))
    with pytest.raises(encoder.EncoderError, match="unexpected parameter"):
        encoder.validate_params(extra, cfg)


# ---------------------------------------------------------------------------
# encode


def test_encode_single_superpoint_pooling_is_identity():
    # Arrange points so the pyramid bottoms out at exactly one superpoint.
    b = 0.01
    pts = np.array([[0.2, 0, 0], [0.3, 0, 0], [1.2, 0, 0], [2.2, 0, 0]]) * b
    sems = np.zeros((4, 2), dtype=np.int32)
    sc = cloud.SurfaceCloud(points=pts, semantics=sems)
    pyr = cloud.build_pyramid(sc, base_voxel=b, radius_scale=2.5)
    assert pyr.points2.shape[0] == 1
    cfg = tiny_config()
    params = encoder.init_params(cfg, seed=3)
    vec = encoder.encode(pyr, params, cfg)
    tokens = encoder.encode_tokens(pyr, params, cfg)
    assert tokens.shape == (1, cfg.d_t)
    manual = tokens[0] @ params["head/W"] + params["head/b"][0]
    np.testing.assert_allclose(vec.z, manual, atol=1e-12)


def test_encode_finite_and_fixed_width():
    rng = np.random.default_rng(21)
    pyr = random_pyramid(rng)
    cfg = tiny_config()
    params = encoder.init_params(cfg, seed=1)
    vec = encoder.encode(pyr, params, cfg)
    assert vec.z.shape == (cfg.d_latent,)
    assert np.isfinite(vec.z).all()
    assert vec.producer == "unsaved"


def test_encode_deterministic():
    rng = np.random.default_rng(22)
    sc = random_cloud(rng)
    cfg = tiny_config()
    params = encoder.init_params(cfg, seed=2)
    z1 = encoder.encode(cloud.build_pyramid(sc, 0.02, 2.5), params, cfg).z
    z2 = encoder.encode(cloud.build_pyramid(sc, 0.02, 2.5), params, cfg).z
    assert np.array_equal(z1, z2)


@pytest.mark.parametrize("spec_name", ["planar3f", "toy5f"])
def test_encode_permutation_invariant(spec_name):
    spec = handspec.load_bundled(spec_name)
    rng = np.random.default_rng(31)
    cfg = tiny_config(kernel_points=13)
    params = encoder.init_params(cfg, seed=4)
    for trial in range(3):
        angles = spec.limits_lo() + (spec.limits_hi() - spec.limits_lo()) * rng.uniform(
            size=spec.dof
        )
        posed = handspec.forward_kinematics(spec, handspec.make_joint_vector(spec, angles))
        sc = cloud.sample_surface(posed, density=2e4, seed=50 + trial)
        perm = rng.permutation(len(sc))
        shuffled = cloud.SurfaceCloud(points=sc.points[perm], semantics=sc.semantics[perm])
        z_a = encoder.encode(cloud.build_pyramid(sc, 8e-3, 2.5), params, cfg).z
        z_b = encoder.encode(cloud.build_pyramid(shuffled, 8e-3, 2.5), params, cfg).z
        assert np.abs(z_a - z_b).max() <= 1e-9


def test_batched_encode_matches_singles():
    rng = np.random.default_rng(41)
    cfg = tiny_config()
    params = encoder.init_params(cfg, seed=7)
    pyrs = [random_pyramid(rng, n=150 + 30 * i) for i in range(3)]
    plans = [encoder.build_encode_plan(p, cfg) for p in pyrs]
    tape = D.Tape()
    z_batch = encoder.encode_plans_on_tape(tape, plans, encoder.constant_params(tape, params), cfg)
    assert z_batch.shape == (3, cfg.d_latent)
    for i, pyr in enumerate(pyrs):
        z_single = encoder.encode(pyr, params, cfg).z
        assert np.abs(z_batch.values[i] - z_single).max() <= 1e-9


def test_encode_rejects_mismatched_params():
    rng = np.random.default_rng(51)
    pyr = random_pyramid(rng)
    cfg = tiny_config()
    params = encoder.init_params(tiny_config(widths=(4, 6, 10), d_t=10), seed=0)
    with pytest.raises(encoder.EncoderError):
        encoder.encode(pyr, params, cfg)


def test_full_encode_gradient_passes_fd():
    rng = np.random.default_rng(61)
    cfg = encoder.GalrConfig(
        widths=(2, 3, 4), d_t=4, layers=1, heads=2, d_latent=2, kernel_points=1
    )
    params = encoder.init_params(cfg, seed=8)
    pyr = random_pyramid(rng, n=60, voxel=0.03)
    plan = encoder.build_encode_plan(pyr, cfg)
    probe = rng.normal(size=(1, cfg.d_latent))

    def build(tape, p):
        params_t = encoder.register_params(tape, p)
        z = encoder.encode_plans_on_tape(tape, [plan], params_t, cfg)
        return D.sum_all(D.cmul(z, tape.input(probe)))

    err, coord = D.fd_check(build, params, step=1e-6)
    assert err < 1e-5, coord


def test_batched_encode_gradient_passes_fd():
    rng = np.random.default_rng(71)
    cfg = encoder.GalrConfig(
        widths=(2, 2, 4), d_t=4, layers=1, heads=1, d_latent=2, kernel_points=1
    )
    params = encoder.init_params(cfg, seed=9)
    plans = [
        encoder.build_encode_plan(random_pyramid(rng, n=50, voxel=0.03), cfg) for _ in range(2)
    ]
    probe = rng.normal(size=(2, cfg.d_latent))

    def build(tape, p):
        params_t = encoder.register_params(tape, p)
        z = encoder.encode_plans_on_tape(tape, plans, params_t, cfg)
        return D.sum_all(D.cmul(z, tape.input(probe)))

    err, coord = D.fd_check(build, params, step=1e-6)
    assert err < 1e-5, coord
