"""Embodiment descriptions and forward kinematics.

A hand is a tree of links connected by revolute joints. Each joint pivots
about a fixed axis at its parent link's frame origin, and the child link
frame is then placed by the joint's origin transform:

    M_child = M_parent @ Rot(axis, angle) @ T(origin.xyz) @ R(origin.quat)

Link geometry is restricted to spheres, boxes and capsules so surface
areas and surface sampling stay analytic. Capsules span x in [-length, 0]
in their own frame, i.e. the link frame sits at the distal end — a chain
of capsule links therefore pivots at the proximal end of each segment and
the frame origin of the last link is the fingertip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .registry import REGISTRY_VERSION, UNIVERSAL_MODEL_SIZE


class HandSpecError(ValueError):
    """Raised for malformed hand descriptions; message carries the field path."""


# ---------------------------------------------------------------------------
# geometry primitives


@dataclass(frozen=True)
class Sphere:
    radius: float

    def surface_area(self) -> float:
        return 4.0 * math.pi * self.radius * self.radius


@dataclass(frozen=True)
class Box:
    extents: tuple[float, float, float]  # full side lengths

    def surface_area(self) -> float:
        a, b, c = self.extents
        return 2.0 * (a * b + b * c + c * a)


@dataclass(frozen=True)
class Capsule:
    radius: float
    length: float  # cylinder part only; spans x in [-length, 0]

    def surface_area(self) -> float:
        return 2.0 * math.pi * self.radius * self.length + 4.0 * math.pi * self.radius * self.radius


Geometry = Sphere | Box | Capsule


# ---------------------------------------------------------------------------
# rotation helpers


def quat_to_matrix(quat_wxyz: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to 3x3 rotation matrix."""
    w, x, y, z = np.asarray(quat_wxyz, dtype=float)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0:
        raise HandSpecError("zero-norm quaternion")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation by `angle` about unit `axis` (Rodrigues)."""
    x, y, z = np.asarray(axis, dtype=float)
    c = math.cos(angle)
    s = math.sin(angle)
    cm = 1.0 - c
    return np.array(
        [
            [c + x * x * cm, x * y * cm - z * s, x * z * cm + y * s],
            [y * x * cm + z * s, c + y * y * cm, y * z * cm - x * s],
            [z * x * cm - y * s, z * y * cm + x * s, c + z * z * cm],
        ]
    )


def transform(rotation: np.ndarray, translation) -> np.ndarray:
    """4x4 homogeneous transform from a 3x3 rotation and a translation."""
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = np.asarray(translation, dtype=float)
    return m


# ---------------------------------------------------------------------------
# descriptors


@dataclass(frozen=True)
class JointDescriptor:
    name: str
    universal_id: int
    parent_link: str
    axis: np.ndarray  # unit 3-vector, parent-frame
    origin_xyz: np.ndarray  # child frame placement, meters
    origin_quat: np.ndarray  # (w, x, y, z)
    limits: tuple[float, float]  # radians, lo < hi


@dataclass(frozen=True)
class LinkDescriptor:
    name: str
    parent_joint: Optional[str]  # None for the root link
    geometry: Geometry
    semantic: tuple[int, int]  # (finger index u in 0..5, segment index v)


@dataclass(frozen=True)
class HandSpec:
    embodiment_id: str
    joints: tuple[JointDescriptor, ...]
    links: tuple[LinkDescriptor, ...]
    root_link: str
    dof: int
    # (link, joint index into self.joints, parent link) rows in root-first
    # order, precomputed so forward kinematics is a single pass
    _topo: tuple[tuple[str, int, str], ...] = field(default=(), repr=False, compare=False)

    def joint_names(self) -> tuple[str, ...]:
        return tuple(j.name for j in self.joints)

    def universal_ids(self) -> np.ndarray:
        return np.array([j.universal_id for j in self.joints], dtype=np.int64)

    def limits_lo(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints])

    def limits_hi(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints])


@dataclass(frozen=True)
class JointVector:
    embodiment_id: str
    angles: np.ndarray  # radians, one per joint descriptor


@dataclass(frozen=True)
class PosedLink:
    name: str
    pose: np.ndarray  # 4x4 world transform
    geometry: Geometry
    semantic: tuple[int, int]


@dataclass(frozen=True)
class PosedLinks:
    embodiment_id: str
    links: tuple[PosedLink, ...]

    def pose_of(self, name: str) -> np.ndarray:
        for link in self.links:
            if link.name == name:
                return link.pose
        raise KeyError(name)


# ---------------------------------------------------------------------------
# loading and validation


def _parse_geometry(raw: dict, path: str) -> Geometry:
    kind = raw.get("type")
    if kind == "sphere":
        geo = Sphere(radius=float(raw["radius"]))
        dims = (geo.radius,)
    elif kind == "box":
        ext = raw["extents"]
        if len(ext) != 3:
            raise HandSpecError(f"{path}.extents: expected 3 values")
        geo = Box(extents=(float(ext[0]), float(ext[1]), float(ext[2])))
        dims = geo.extents
    elif kind == "capsule":
        geo = Capsule(radius=float(raw["radius"]), length=float(raw["length"]))
        dims = (geo.radius, geo.length)
    else:
        raise HandSpecError(f"{path}.type: unknown geometry type {kind!r}")
    if any(d <= 0 for d in dims):
        raise HandSpecError(f"{path}: geometry dimensions must be strictly positive")
    return geo


def _validate_tree(spec: HandSpec) -> tuple[tuple[str, int, str], ...]:
    """Check the joint/link graph is a single tree; return topological rows."""
    link_names = [l.name for l in spec.links]
    if len(set(link_names)) != len(link_names):
        raise HandSpecError("links: duplicate link name")
    joint_names = [j.name for j in spec.joints]
    if len(set(joint_names)) != len(joint_names):
        raise HandSpecError("joints: duplicate joint name")
    if spec.root_link not in link_names:
        raise HandSpecError(f"root_link: {spec.root_link!r} is not a declared link")

    joint_idx = {j.name: i for i, j in enumerate(spec.joints)}
    for i, link in enumerate(spec.links):
        if link.name == spec.root_link:
            if link.parent_joint is not None:
                raise HandSpecError(f"links[{i}]: root link must have parent_joint null")
        elif link.parent_joint is None:
            raise HandSpecError(f"links[{i}]: non-root link lacks a parent joint")
        elif link.parent_joint not in joint_idx:
            raise HandSpecError(f"links[{i}].parent_joint: unknown joint {link.parent_joint!r}")

    child_links = {}
    for i, link in enumerate(spec.links):
        if link.parent_joint is not None:
            if link.parent_joint in child_links:
                raise HandSpecError(f"links[{i}].parent_joint: joint {link.parent_joint!r} used twice")
            child_links[link.parent_joint] = link.name
    for i, joint in enumerate(spec.joints):
        if joint.name not in child_links:
            raise HandSpecError(f"joints[{i}]: joint {joint.name!r} has no child link")
        if joint.parent_link not in link_names:
            raise HandSpecError(f"joints[{i}].parent_link: unknown link {joint.parent_link!r}")

    # breadth-first walk from the root; anything unreached sits on a cycle
    order: list[tuple[str, int, str]] = []
    placed = {spec.root_link}
    frontier = [spec.root_link]
    while frontier:
        nxt = []
        for joint in spec.joints:
            child = child_links[joint.name]
            if joint.parent_link in placed and child not in placed:
                order.append((child, joint_idx[joint.name], joint.parent_link))
                placed.add(child)
                nxt.append(child)
        if not nxt:
            break
    if len(placed) != len(link_names):
        raise HandSpecError("links: cyclic kinematic graph (unreachable links from root)")
    return tuple(order)


def spec_from_dict(raw: dict) -> HandSpec:
    """Build and validate a HandSpec from parsed JSON."""
    version = raw.get("registry_version")
    if version != REGISTRY_VERSION:
        raise HandSpecError(
            f"registry_version: file declares {version!r}, this build uses {REGISTRY_VERSION!r}"
        )

    joints = []
    seen_uids = set()
    for i, j in enumerate(raw.get("joints", [])):
        path = f"joints[{i}]"
        axis = np.asarray(j["axis"], dtype=float)
        if axis.shape != (3,):
            raise HandSpecError(f"{path}.axis: expected 3 values")
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise HandSpecError(f"{path}.axis: non-unit axis {j['axis']}")
        uid = int(j["universal_id"])
        if not 0 <= uid < UNIVERSAL_MODEL_SIZE:
            raise HandSpecError(f"{path}.universal_id: {uid} outside registry of size {UNIVERSAL_MODEL_SIZE}")
        if uid in seen_uids:
            raise HandSpecError(f"{path}.universal_id: duplicate universal_id {uid}")
        seen_uids.add(uid)
        lo, hi = (float(v) for v in j["limits"])
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise HandSpecError(f"{path}.limits: limits must be finite")
        if lo >= hi:
            raise HandSpecError(f"{path}.limits: lo {lo} >= hi {hi}")
        quat = np.asarray(j["origin"]["quat_wxyz"], dtype=float)
        if quat.shape != (4,):
            raise HandSpecError(f"{path}.origin.quat_wxyz: expected 4 values")
        joints.append(
            JointDescriptor(
                name=str(j["name"]),
                universal_id=uid,
                parent_link=str(j["parent_link"]),
                axis=axis,
                origin_xyz=np.asarray(j["origin"]["xyz"], dtype=float),
                origin_quat=quat,
                limits=(lo, hi),
            )
        )

    links = []
    for i, l in enumerate(raw.get("links", [])):
        path = f"links[{i}]"
        sem = l["semantic"]
        u, v = int(sem[0]), int(sem[1])
        if not 0 <= u <= 5:
            raise HandSpecError(f"{path}.semantic: finger index {u} outside 0..5")
        if v < 0:
            raise HandSpecError(f"{path}.semantic: segment index {v} negative")
        links.append(
            LinkDescriptor(
                name=str(l["name"]),
                parent_joint=l["parent_joint"],
                geometry=_parse_geometry(l["geometry"], f"{path}.geometry"),
                semantic=(u, v),
            )
        )

    spec = HandSpec(
        embodiment_id=str(raw["embodiment_id"]),
        joints=tuple(joints),
        links=tuple(links),
        root_link=str(raw["root_link"]),
        dof=len(joints),
    )
    topo = _validate_tree(spec)
    object.__setattr__(spec, "_topo", topo)
    return spec


def _geometry_to_dict(geo: Geometry) -> dict:
    if isinstance(geo, Sphere):
        return {"type": "sphere", "radius": geo.radius}
    if isinstance(geo, Box):
        return {"type": "box", "extents": list(geo.extents)}
    return {"type": "capsule", "radius": geo.radius, "length": geo.length}


def spec_to_dict(spec: HandSpec) -> dict:
    """JSON-serializable form; inverse of spec_from_dict."""
    return {
        "registry_version": REGISTRY_VERSION,
        "embodiment_id": spec.embodiment_id,
        "root_link": spec.root_link,
        "joints": [
            {
                "name": j.name,
                "universal_id": j.universal_id,
                "parent_link": j.parent_link,
                "axis": [float(v) for v in j.axis],
                "origin": {
                    "xyz": [float(v) for v in j.origin_xyz],
                    "quat_wxyz": [float(v) for v in j.origin_quat],
                },
                "limits": [j.limits[0], j.limits[1]],
            }
            for j in spec.joints
        ],
        "links": [
            {
                "name": l.name,
                "parent_joint": l.parent_joint,
                "geometry": _geometry_to_dict(l.geometry),
                "semantic": [l.semantic[0], l.semantic[1]],
            }
            for l in spec.links
        ],
    }


def load_hand_spec(path) -> HandSpec:
    """Load and validate a .hand.json file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise HandSpecError(f"parse error in {path}: {exc}") from exc
    try:
        return spec_from_dict(raw)
    except KeyError as exc:
        raise HandSpecError(f"missing field {exc.args[0]!r} in {path}") from exc


BUNDLED_SPEC_NAMES = ("planar2f", "planar3f", "toy4f", "toy5f", "toy5f-wide")


def bundled_spec_path(name: str):
    """Filesystem path of a spec shipped inside the package."""
    if name not in BUNDLED_SPEC_NAMES:
        raise HandSpecError(f"no bundled spec named {name!r}; have {BUNDLED_SPEC_NAMES}")
    return resources.files("galr").joinpath("specs").joinpath(f"{name}.hand.json")


def load_bundled(name: str) -> HandSpec:
    return load_hand_spec(bundled_spec_path(name))


# ---------------------------------------------------------------------------
# joint vectors


def make_joint_vector(spec: HandSpec, angles: Sequence[float]) -> JointVector:
    """Validating constructor: out-of-limit input is an error, never clamped."""
    arr = np.asarray(angles, dtype=float)
    if arr.shape != (spec.dof,):
        raise ValueError(f"expected {spec.dof} angles for {spec.embodiment_id}, got shape {arr.shape}")
    for j, a in zip(spec.joints, arr):
        lo, hi = j.limits
        if not lo <= a <= hi:
            raise ValueError(
                f"angle {a:.6g} for joint {j.name!r} outside limits [{lo:.6g}, {hi:.6g}]"
            )
    return JointVector(embodiment_id=spec.embodiment_id, angles=arr)


def clamp_to_limits(spec: HandSpec, raw: Sequence[float]) -> tuple[JointVector, list[bool]]:
    """Clamp raw values into joint limits; flags mark which entries moved."""
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (spec.dof,):
        raise ValueError(f"expected {spec.dof} values for {spec.embodiment_id}, got shape {arr.shape}")
    lo = spec.limits_lo()
    hi = spec.limits_hi()
    clamped = np.clip(arr, lo, hi)
    flags = [bool(c != r) for c, r in zip(clamped, arr)]
    return JointVector(embodiment_id=spec.embodiment_id, angles=clamped), flags


# ---------------------------------------------------------------------------
# forward kinematics


def forward_kinematics(
    spec: HandSpec, q: JointVector, wrist: Optional[np.ndarray] = None
) -> PosedLinks:
    """Pose every link of `spec` at joint angles `q`.

    The root link takes the wrist transform (identity when omitted); each
    further link composes its parent's pose with the joint rotation and the
    joint's origin transform.
    """
    if q.embodiment_id != spec.embodiment_id:
        raise ValueError(
            f"embodiment mismatch: joint vector is for {q.embodiment_id!r}, "
            f"spec is {spec.embodiment_id!r}"
        )
    angles = np.asarray(q.angles, dtype=float)
    if angles.shape != (spec.dof,):
        raise ValueError(f"expected {spec.dof} angles, got shape {angles.shape}")
    for j, a in zip(spec.joints, angles):
        lo, hi = j.limits
        if not lo <= a <= hi:
            raise ValueError(
                f"angle {a:.6g} for joint {j.name!r} outside limits [{lo:.6g}, {hi:.6g}]"
            )

    poses = {spec.root_link: np.eye(4) if wrist is None else np.asarray(wrist, dtype=float)}
    for child, ji, parent in spec._topo:
        joint = spec.joints[ji]
        rot = axis_angle_matrix(joint.axis, angles[ji])
        local = transform(rot @ quat_to_matrix(joint.origin_quat), rot @ joint.origin_xyz)
        poses[child] = poses[parent] @ local

    posed = tuple(
        PosedLink(name=l.name, pose=poses[l.name], geometry=l.geometry, semantic=l.semantic)
        for l in spec.links
    )
    return PosedLinks(embodiment_id=spec.embodiment_id, links=posed)


def fingertip_positions(spec: HandSpec, posed: PosedLinks) -> dict[str, np.ndarray]:
    """World positions of the most distal link frame of each finger.

    "Most distal" means the highest segment index v seen for that finger
    index u among capsule/sphere links; the palm (u = 0) is skipped.
    """
    best: dict[int, tuple[int, str]] = {}
    for link in posed.links:
        u, v = link.semantic
        if u == 0:
            continue
        if u not in best or v > best[u][0]:
            best[u] = (v, link.name)
    return {name: posed.pose_of(name)[:3, 3].copy() for _, name in best.values()}
