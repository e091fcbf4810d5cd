import json
import math

import numpy as np
import pytest

from galr import handspec
from galr.handspec import (
    HandSpecError,
    clamp_to_limits,
    forward_kinematics,
    load_bundled,
    load_hand_spec,
    make_joint_vector,
    spec_from_dict,
)

import oracles


ALL_SPECS = ["planar2f", "planar3f", "toy4f", "toy5f", "toy5f-wide"]


def minimal_spec_dict(**overrides):
    """A 1-joint hand used as the mutation target for validation tests."""
    d = {
        "embodiment_id": "stub",
        "registry_version": "u24.1",
        "root_link": "palm",
        "joints": [
            {
                "name": "j0",
                "universal_id": 1,
                "parent_link": "palm",
                "axis": [0.0, 0.0, 1.0],
                "origin": {"xyz": [1.0, 0.0, 0.0], "quat_wxyz": [1.0, 0.0, 0.0, 0.0]},
                "limits": [-2.0, 2.0],
            }
        ],
        "links": [
            {"name": "palm", "parent_joint": None, "geometry": {"type": "sphere", "radius": 0.02}, "semantic": [0, 0]},
            {"name": "f0", "parent_joint": "j0", "geometry": {"type": "capsule", "radius": 0.01, "length": 0.05}, "semantic": [1, 0]},
        ],
    }
    d.update(overrides)
    return d


# ---------------------------------------------------------------------------
# loading / validation


@pytest.mark.parametrize("name", ALL_SPECS)
def test_bundled_specs_load(name):
    spec = load_bundled(name)
    assert spec.embodiment_id == name
    assert spec.dof == len(spec.joints)
    uids = spec.universal_ids()
    assert len(set(uids.tolist())) == spec.dof


def test_bundled_planar2f_dof():
    assert load_bundled("planar2f").dof == 2


def test_nested_universal_id_family():
    """Each smaller bundled hand's ids are a subset of every larger one."""
    order = ["planar2f", "planar3f", "toy4f", "toy5f", "toy5f-wide"]
    sets = [set(load_bundled(n).universal_ids().tolist()) for n in order]
    for smaller, larger in zip(sets, sets[1:]):
        assert smaller < larger


def test_non_unit_axis_rejected():
    d = minimal_spec_dict()
    d["joints"][0]["axis"] = [0.0, 0.0, 2.0]
    with pytest.raises(HandSpecError, match="non-unit axis"):
        spec_from_dict(d)


def test_cycle_rejected():
    d = minimal_spec_dict()
    # second joint creates a 2-link cycle: f0 -> f1 -> f0 is impossible in a
    # pure child-pointer encoding, so build an orphan loop instead
    d["joints"].append(
        {
            "name": "j1",
            "universal_id": 2,
            "parent_link": "f1",
            "axis": [0.0, 0.0, 1.0],
            "origin": {"xyz": [1.0, 0.0, 0.0], "quat_wxyz": [1.0, 0.0, 0.0, 0.0]},
            "limits": [-1.0, 1.0],
        }
    )
    d["links"].append(
        {"name": "f1", "parent_joint": "j1", "geometry": {"type": "sphere", "radius": 0.01}, "semantic": [1, 1]}
    )
    with pytest.raises(HandSpecError, match="cyclic"):
        spec_from_dict(d)


def test_duplicate_universal_id_rejected():
    d = minimal_spec_dict()
    d["joints"].append(
        {
            "name": "j1",
            "universal_id": 1,
            "parent_link": "f0",
            "axis": [0.0, 1.0, 0.0],
            "origin": {"xyz": [0.5, 0.0, 0.0], "quat_wxyz": [1.0, 0.0, 0.0, 0.0]},
            "limits": [-1.0, 1.0],
        }
    )
    d["links"].append(
        {"name": "f1", "parent_joint": "j1", "geometry": {"type": "sphere", "radius": 0.01}, "semantic": [1, 1]}
    )
    with pytest.raises(HandSpecError, match="duplicate universal_id"):
        spec_from_dict(d)


def test_bad_limits_rejected():
    d = minimal_spec_dict()
    d["joints"][0]["limits"] = [1.0, 1.0]
    with pytest.raises(HandSpecError, match="lo"):
        spec_from_dict(d)


def test_registry_version_mismatch_rejected():
    d = minimal_spec_dict(registry_version="u99.0")
    with pytest.raises(HandSpecError, match="registry_version"):
        spec_from_dict(d)


def test_parse_error_reports_path(tmp_path):
    p = tmp_path / "broken.hand.json"
    p.write_text("{not json")
    with pytest.raises(HandSpecError, match="parse error"):
        load_hand_spec(p)


def test_error_messages_carry_field_paths():
    d = minimal_spec_dict()
    d["joints"][0]["axis"] = [1.0, 1.0, 0.0]
    with pytest.raises(HandSpecError, match=r"joints\[0\]\.axis"):
        spec_from_dict(d)


# ---------------------------------------------------------------------------
# joint vectors and clamping


def test_make_joint_vector_rejects_out_of_limits():
    spec = load_bundled("planar2f")
    hi = spec.limits_hi()
    with pytest.raises(ValueError, match="outside limits"):
        make_joint_vector(spec, hi + 0.1)


def test_clamp_flags():
    spec = load_bundled("planar2f")
    lo, hi = spec.limits_lo(), spec.limits_hi()
    q, flags = clamp_to_limits(spec, [hi[0] + 0.3, 0.0])
    assert q.angles[0] == hi[0]
    assert flags == [True, False]
    q2, flags2 = clamp_to_limits(spec, [0.0, 0.1])
    assert flags2 == [False, False]
    assert np.allclose(q2.angles, [0.0, 0.1])


def test_clamp_all_below():
    spec = load_bundled("planar3f")
    q, flags = clamp_to_limits(spec, [-1e9] * spec.dof)
    assert np.array_equal(q.angles, spec.limits_lo())
    assert all(flags)


def test_clamp_length_mismatch():
    spec = load_bundled("planar2f")
    with pytest.raises(ValueError, match="expected 2"):
        clamp_to_limits(spec, [0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# forward kinematics


def test_single_joint_quarter_turn():
    spec = spec_from_dict(minimal_spec_dict())
    q = make_joint_vector(spec, [math.pi / 2])
    posed = forward_kinematics(spec, q)
    np.testing.assert_allclose(posed.pose_of("f0")[:3, 3], [0.0, 1.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("name", ALL_SPECS)
def test_zero_angles_match_home_chain(name):
    spec = load_bundled(name)
    q = make_joint_vector(spec, np.zeros(spec.dof))
    posed = forward_kinematics(spec, q)
    raw = json.load(open(handspec.bundled_spec_path(name)))
    expected = oracles.fk_oracle(raw, np.zeros(spec.dof))
    for link in posed.links:
        np.testing.assert_allclose(link.pose, expected[link.name], atol=1e-12)


@pytest.mark.parametrize("name", ALL_SPECS)
def test_fk_matches_matrix_chain_oracle(name):
    spec = load_bundled(name)
    raw = json.load(open(handspec.bundled_spec_path(name)))
    rng = np.random.default_rng(101)
    lo, hi = spec.limits_lo(), spec.limits_hi()
    for _ in range(25):
        angles = rng.uniform(lo, hi)
        posed = forward_kinematics(spec, make_joint_vector(spec, angles))
        expected = oracles.fk_oracle(raw, angles)
        for link in posed.links:
            assert np.abs(link.pose - expected[link.name]).max() <= 1e-9


def test_fk_wrist_equivariance():
    spec = load_bundled("toy5f")
    rng = np.random.default_rng(7)
    angles = rng.uniform(spec.limits_lo(), spec.limits_hi())
    q = make_joint_vector(spec, angles)
    wrist = oracles.hom(oracles.axis_angle_to_matrix([0.3, -0.5, 0.81], 1.1), [0.2, -0.1, 0.4])
    with_wrist = forward_kinematics(spec, q, wrist=wrist)
    plain = forward_kinematics(spec, q)
    for a, b in zip(with_wrist.links, plain.links):
        np.testing.assert_allclose(a.pose, wrist @ b.pose, atol=1e-9)


def test_fk_chain_composition_split():
    """FK of the whole chain equals proximal FK composed with the distal
    sub-chain re-rooted at the proximal tip."""
    spec = load_bundled("planar3f")
    raw = json.load(open(handspec.bundled_spec_path("planar3f")))
    rng = np.random.default_rng(3)
    angles = rng.uniform(spec.limits_lo(), spec.limits_hi())
    full = oracles.fk_oracle(raw, angles)

    posed = forward_kinematics(spec, make_joint_vector(spec, angles))
    # seg0 pose from the full run, then the seg1 joint applied in that frame
    ji = {j.name: i for i, j in enumerate(spec.joints)}
    j = next(j for j in spec.joints if j.name == "index_mid_flex")
    local = handspec.transform(
        handspec.axis_angle_matrix(j.axis, angles[ji[j.name]]) @ handspec.quat_to_matrix(j.origin_quat),
        handspec.axis_angle_matrix(j.axis, angles[ji[j.name]]) @ j.origin_xyz,
    )
    np.testing.assert_allclose(
        posed.pose_of("index_seg1"), full["index_seg0"] @ local, atol=1e-9
    )


def test_fk_rejects_embodiment_mismatch():
    a = load_bundled("planar2f")
    b = load_bundled("planar3f")
    q = make_joint_vector(a, [0.0, 0.0])
    with pytest.raises(ValueError, match="embodiment mismatch"):
        forward_kinematics(b, q)


def test_fk_rejects_out_of_limit_and_names_joint():
    spec = load_bundled("planar2f")
    bad = handspec.JointVector(embodiment_id="planar2f", angles=np.array([9.0, 0.0]))
    with pytest.raises(ValueError, match="thumb_base_flex"):
        forward_kinematics(spec, bad)


def test_fingertips_present_per_finger():
    spec = load_bundled("toy5f")
    posed = forward_kinematics(spec, make_joint_vector(spec, np.zeros(spec.dof)))
    tips = handspec.fingertip_positions(spec, posed)
    assert len(tips) == 5
    assert all(name.endswith("_seg1") for name in tips)


def test_geometry_surface_areas():
    assert handspec.Sphere(1.0).surface_area() == pytest.approx(4 * math.pi)
    assert handspec.Box((1.0, 2.0, 3.0)).surface_area() == pytest.approx(22.0)
    cap = handspec.Capsule(radius=0.5, length=2.0)
    assert cap.surface_area() == pytest.approx(2 * math.pi * 0.5 * 2.0 + 4 * math.pi * 0.25)
