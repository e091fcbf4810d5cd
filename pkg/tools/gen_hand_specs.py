"""Regenerate the bundled .hand.json files.

The five bundled hands form a nested family: the universal-joint ids of
each smaller hand are a subset of every larger one, which is what makes
cross-embodiment transfer between them meaningful.

    planar2f   {1, 5}                                  2 DoF, planar pincer
    planar3f   {1, 2, 5, 6, 9, 10}                     6 DoF, planar 3-finger
    toy4f      + {13, 14}                              8 DoF, spatial 4-finger
    toy5f      + {17, 18}                             10 DoF, spatial 5-finger
    toy5f-wide + {0, 4}                               12 DoF, adds 2 yaw mounts

Geometry convention: digit chains hang off a hub at the palm-frame origin;
a finger's first capsule spans hub-radius r0 to r0+L along its station
direction, and every later joint pivots at the previous capsule's distal
frame. Run from the repo root:  python tools/gen_hand_specs.py
"""

import json
import math
import pathlib

OUT_DIR = pathlib.Path(__file__).resolve().parent.parent / "src" / "galr" / "specs"

REGISTRY_VERSION = "u24.1"
HUB_RADIUS = 0.05

# universal slot numbering: digit d in (thumb, index, middle, ring, little)
# occupies 4*d + (yaw, base_flex, mid_flex, tip_flex)
UID = {
    digit: {part: 4 * d + p for p, part in enumerate(("yaw", "base_flex", "mid_flex", "tip_flex"))}
    for d, digit in enumerate(("thumb", "index", "middle", "ring", "little"))
}
FINGER_U = {"thumb": 1, "index": 2, "middle": 3, "ring": 4, "little": 5}

FLEX_LIMITS = [-0.25, 1.35]
PLANAR_LIMITS = [-0.25, 1.30]
YAW_LIMITS = [-0.60, 0.60]


def rot_z(deg):
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


def quat_z(deg):
    half = math.radians(deg) / 2.0
    return [math.cos(half), 0.0, 0.0, math.sin(half)]


def radial(deg, r):
    c, s = rot_z(deg)
    return [r * c, r * s, 0.0]


def planar_finger(name, station_deg, curl_sign, segments, limits):
    """A finger flexing in the x-y plane about +-z axes.

    `segments` is a list of (radius, length) capsules, proximal first.
    Returns (joints, links). curl_sign +1 curls counterclockwise.
    """
    u = FINGER_U[name]
    parts = ("base_flex", "mid_flex", "tip_flex")
    joints, links = [], []
    parent = "palm"
    reach = HUB_RADIUS
    for v, (radius, length) in enumerate(segments):
        reach += length
        link = f"{name}_seg{v}"
        joint = f"{name}_{parts[v]}"
        if v == 0:
            origin = {"xyz": radial(station_deg, reach), "quat_wxyz": quat_z(station_deg)}
        else:
            origin = {"xyz": [length, 0.0, 0.0], "quat_wxyz": [1.0, 0.0, 0.0, 0.0]}
        joints.append(
            {
                "name": joint,
                "universal_id": UID[name][parts[v]],
                "parent_link": parent,
                "axis": [0.0, 0.0, float(curl_sign)],
                "origin": origin,
                "limits": list(limits),
            }
        )
        links.append(
            {
                "name": link,
                "parent_joint": joint,
                "geometry": {"type": "capsule", "radius": radius, "length": length},
                "semantic": [u, v],
            }
        )
        parent = link
    return joints, links


def spatial_finger(name, station_deg, segments, limits, yaw=False):
    """A finger curling toward -z (palm side), optionally with a yaw mount.

    Flex axes are the in-plane normal of the station direction; with a yaw
    joint the digit first swivels about the palm normal at the hub-edge
    knuckle, carried by a small mount sphere.
    """
    u = FINGER_U[name]
    c, s = rot_z(station_deg)
    joints, links = [], []
    parent = "palm"
    v = 0
    if yaw:
        mount = f"{name}_mount"
        joints.append(
            {
                "name": f"{name}_yaw",
                "universal_id": UID[name]["yaw"],
                "parent_link": parent,
                "axis": [0.0, 0.0, 1.0],
                "origin": {"xyz": radial(station_deg, HUB_RADIUS), "quat_wxyz": quat_z(station_deg)},
                "limits": list(YAW_LIMITS),
            }
        )
        links.append(
            {
                "name": mount,
                "parent_joint": f"{name}_yaw",
                "geometry": {"type": "sphere", "radius": 0.012},
                "semantic": [u, v],
            }
        )
        parent = mount
        v += 1

    parts = ("base_flex", "mid_flex", "tip_flex")
    reach = HUB_RADIUS
    for i, (radius, length) in enumerate(segments):
        reach += length
        link = f"{name}_seg{i}"
        joint = f"{name}_{parts[i]}"
        if parent == "palm":
            origin = {"xyz": radial(station_deg, reach), "quat_wxyz": quat_z(station_deg)}
            axis = [-s, c, 0.0]
        else:
            origin = {"xyz": [length, 0.0, 0.0], "quat_wxyz": [1.0, 0.0, 0.0, 0.0]}
            axis = [0.0, 1.0, 0.0]
        joints.append(
            {
                "name": joint,
                "universal_id": UID[name][parts[i]],
                "parent_link": parent,
                "axis": axis,
                "origin": origin,
                "limits": list(limits),
            }
        )
        links.append(
            {
                "name": link,
                "parent_joint": joint,
                "geometry": {"type": "capsule", "radius": radius, "length": length},
                "semantic": [u, v],
            }
        )
        parent = link
        v += 1
    return joints, links


def assemble(embodiment_id, palm_extents, fingers):
    joints, links = [], []
    links.append(
        {
            "name": "palm",
            "parent_joint": None,
            "geometry": {"type": "box", "extents": list(palm_extents)},
            "semantic": [0, 0],
        }
    )
    for fj, fl in fingers:
        joints.extend(fj)
        links.extend(fl)
    return {
        "embodiment_id": embodiment_id,
        "registry_version": REGISTRY_VERSION,
        "root_link": "palm",
        "joints": joints,
        "links": links,
    }


def build_all():
    hands = {}

    hands["planar2f"] = assemble(
        "planar2f",
        (0.07, 0.05, 0.02),
        [
            planar_finger("thumb", 120.0, -1, [(0.010, 0.060)], PLANAR_LIMITS),
            planar_finger("index", 60.0, +1, [(0.010, 0.060)], PLANAR_LIMITS),
        ],
    )

    planar_segs = [(0.010, 0.050), (0.009, 0.040)]
    hands["planar3f"] = assemble(
        "planar3f",
        (0.075, 0.055, 0.02),
        [
            planar_finger("thumb", 125.0, -1, planar_segs, PLANAR_LIMITS),
            planar_finger("index", 90.0, +1, planar_segs, PLANAR_LIMITS),
            planar_finger("middle", 55.0, +1, planar_segs, PLANAR_LIMITS),
        ],
    )

    toy_segs = [(0.010, 0.045), (0.009, 0.035)]
    palm = (0.095, 0.075, 0.025)
    hands["toy4f"] = assemble(
        "toy4f",
        palm,
        [
            spatial_finger("thumb", -95.0, toy_segs, FLEX_LIMITS),
            spatial_finger("index", 65.0, toy_segs, FLEX_LIMITS),
            spatial_finger("middle", 90.0, toy_segs, FLEX_LIMITS),
            spatial_finger("ring", 115.0, toy_segs, FLEX_LIMITS),
        ],
    )

    toy5_stations = {"thumb": -95.0, "index": 55.0, "middle": 80.0, "ring": 105.0, "little": 130.0}
    hands["toy5f"] = assemble(
        "toy5f",
        palm,
        [spatial_finger(n, d, toy_segs, FLEX_LIMITS) for n, d in toy5_stations.items()],
    )

    hands["toy5f-wide"] = assemble(
        "toy5f-wide",
        palm,
        [
            spatial_finger(n, d, toy_segs, FLEX_LIMITS, yaw=n in ("thumb", "index"))
            for n, d in toy5_stations.items()
        ],
    )
    return hands


def main():
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    for name, spec in build_all().items():
        path = OUT_DIR / f"{name}.hand.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(spec, fh, indent=2)
            fh.write("\n")
        print(f"wrote {path} ({len(spec['joints'])} joints, {len(spec['links'])} links)")


if __name__ == "__main__":
    main()
