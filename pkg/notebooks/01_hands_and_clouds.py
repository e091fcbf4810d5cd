"""
Hands, kinematics, and surface clouds
=====================================

Every embodiment in the toolkit is a JSON hand description: links with
capsule geometry, joints with axes and limits, and a semantic label per
link drawn from a shared registry. This walkthrough loads two very
different hands, poses them, and turns each pose into the multi-scale
point-cloud pyramid that the encoder consumes.
"""

import numpy as np

from galr import handspec
from galr.cloud import build_pyramid, sample_surface

# Bundled specs live inside the package; load_bundled resolves by name.
for name in ("planar2f", "toy5f"):
    spec = handspec.load_bundled(name)
    print(f"{name}: {spec.dof} dof, {len(spec.links)} links, "
          f"{len(spec.joints)} joints")

# A joint vector is just named angles, validated against the spec.
spec = handspec.load_bundled("toy5f")
lo, hi = spec.limits_lo(), spec.limits_hi()
q = handspec.make_joint_vector(spec, 0.5 * (lo + hi))

# Forward kinematics produces a 4x4 world pose per link.
posed = handspec.forward_kinematics(spec, q)
for link in spec.links[:4]:
    x, y, z = posed.pose_of(link.name)[:3, 3]
    print(f"  {link.name:<18} at ({x:+.3f}, {y:+.3f}, {z:+.3f})")

# Clamping reports which joints were out of range rather than failing.
wild = np.full(spec.dof, 10.0)
clamped, flags = handspec.clamp_to_limits(spec, wild)
print(f"clamped {int(flags.sum())}/{spec.dof} joints back into range")

# ---------------------------------------------------------------------
# From a posed hand to a point cloud. Sampling is area-proportional over
# the capsule surfaces and deterministic for a fixed seed, so the same
# state always yields the same cloud.

cloud = sample_surface(posed, density=4e3, seed=0)
print(f"\nsurface cloud: {len(cloud.points)} points, "
      f"{cloud.semantics.shape[1]} semantic channels")

# The pyramid voxel-subsamples twice (base voxel, then 4x coarser) and
# precomputes radius-neighbor lists between consecutive levels.
pyr = build_pyramid(cloud, base_voxel=8e-3, radius_scale=1.5)
print(f"pyramid levels: {len(pyr.level0.points)} -> "
      f"{len(pyr.points1)} -> {len(pyr.points2)} points")

# Neighbor lists are CSR-like: `offsets[i]:offsets[i+1]` indexes into
# `indices`. Average fan-in tells you how much context each query sees.
for tag, nl in (("0->1", pyr.neighbors01), ("1->2", pyr.neighbors12)):
    fan = np.diff(nl.offsets)
    print(f"  neighbors {tag}: radius {nl.radius*1e3:.0f} mm, "
          f"mean fan-in {fan.mean():.1f}")

# Determinism check: resampling the same state reproduces the cloud.
again = sample_surface(posed, density=4e3, seed=0)
assert np.array_equal(cloud.points, again.points)
print("\nsame state, same seed -> identical cloud (bitwise)")
