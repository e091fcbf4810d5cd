"""Surface point clouds and the three-level downsampling pyramid.

Posed link geometry becomes a labeled point cloud (`sample_surface`),
which is voxel-subsampled twice more into a coarse superpoint set. The
pyramid carries exact radius-neighbor lists between consecutive levels;
those lists are what the convolution layers consume.

Everything here is deterministic: sampling is driven by a seeded
generator, subsampling orders its output by voxel key, and the pyramid
canonically sorts its input so that any permutation of the same points
produces bit-identical artifacts.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .handspec import Box, Capsule, PosedLinks, Sphere


class DegeneratePyramidError(ValueError):
    """Subsampling failed to reduce the point count at some stage."""


@dataclass(frozen=True)
class SurfaceCloud:
    points: np.ndarray  # (N, 3) float64, meters, world frame
    semantics: np.ndarray  # (N, 2) int32 pairs (finger u, segment v)
    source_embodiment: str = "synthetic"
    source_angles: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] == 0:
            raise ValueError(f"points must be (N, 3) with N > 0, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("non-finite coordinates in surface cloud")
        if self.semantics.shape != (self.points.shape[0], 2):
            raise ValueError(
                f"semantics shape {self.semantics.shape} does not match points {self.points.shape}"
            )

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class NeighborList:
    """Per-query support indices within `radius`, CSR-packed.

    Query i's neighbors are indices[offsets[i]:offsets[i+1]], ascending.
    """

    indices: np.ndarray  # (E,) int64
    offsets: np.ndarray  # (Q+1,) int64
    radius: float
    n_supports: int

    def __len__(self):
        return self.offsets.shape[0] - 1

    def list_for(self, qi: int) -> np.ndarray:
        return self.indices[self.offsets[qi] : self.offsets[qi + 1]]


@dataclass(frozen=True)
class MultiScaleCloud:
    """The P / P-tilde / P-hat pyramid plus inter-level neighbor lists.

    Neighbor list names carry (support level, query level): neighbors01
    supports are dense level-0 points queried from level 1, neighbors12
    supports level 1 queried from level 2; neighbors11/22 are within-level.
    """

    level0: SurfaceCloud
    points1: np.ndarray
    semantics1: np.ndarray
    points2: np.ndarray
    semantics2: np.ndarray
    neighbors01: NeighborList
    neighbors11: NeighborList
    neighbors12: NeighborList
    neighbors22: NeighborList
    base_voxel: float
    radius_scale: float


# ---------------------------------------------------------------------------
# surface sampling


def _sample_sphere(rng, n, radius):
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return radius * np.column_stack((s * np.cos(phi), s * np.sin(phi), z))


def _sample_box(rng, n, extents):
    a, b, c = extents
    ha, hb, hc = a / 2.0, b / 2.0, c / 2.0
    # +x, -x, +y, -y, +z, -z
    face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    cum = np.cumsum(face_areas)
    pick = np.searchsorted(cum, rng.uniform(0.0, cum[-1], n), side="right")
    pick = np.minimum(pick, 5)
    counts = np.bincount(pick, minlength=6)
    out = []
    for face in range(6):
        m = counts[face]
        u = rng.uniform(-1.0, 1.0, m)
        v = rng.uniform(-1.0, 1.0, m)
        if face == 0:
            pts = np.column_stack((np.full(m, ha), u * hb, v * hc))
        elif face == 1:
            pts = np.column_stack((np.full(m, -ha), u * hb, v * hc))
        elif face == 2:
            pts = np.column_stack((u * ha, np.full(m, hb), v * hc))
        elif face == 3:
            pts = np.column_stack((u * ha, np.full(m, -hb), v * hc))
        elif face == 4:
            pts = np.column_stack((u * ha, v * hb, np.full(m, hc)))
        else:
            pts = np.column_stack((u * ha, v * hb, np.full(m, -hc)))
        out.append(pts)
    return np.concatenate(out, axis=0)


def _sample_capsule(rng, n, radius, length):
    lateral = 2.0 * math.pi * radius * length
    cap = 2.0 * math.pi * radius * radius  # one hemisphere
    cum = np.cumsum([lateral, cap, cap])
    pick = np.minimum(np.searchsorted(cum, rng.uniform(0.0, cum[-1], n), side="right"), 2)
    counts = np.bincount(pick, minlength=3)

    nc = counts[0]
    x = -rng.uniform(0.0, length, nc)
    th = rng.uniform(0.0, 2.0 * math.pi, nc)
    cyl = np.column_stack((x, radius * np.cos(th), radius * np.sin(th)))

    # hemisphere caps: the axial coordinate of a uniform sphere sample is
    # itself uniform, so draw it directly
    parts = [cyl]
    for sign, x0 in ((1.0, 0.0), (-1.0, -length)):
        m = counts[1] if sign > 0 else counts[2]
        ax = rng.uniform(0.0, 1.0, m) * radius
        th = rng.uniform(0.0, 2.0 * math.pi, m)
        rad = np.sqrt(np.maximum(0.0, radius * radius - ax * ax))
        parts.append(np.column_stack((x0 + sign * ax, rad * np.cos(th), rad * np.sin(th))))
    return np.concatenate(parts, axis=0)


def sample_surface(posed: PosedLinks, density: float, seed: int) -> SurfaceCloud:
    """Draw area-uniform surface points from every posed link.

    Each primitive contributes round(area * density) points, at least one;
    semantics are copied from the owning link. Fully determined by `seed`.
    """
    if density <= 0:
        raise ValueError(f"density must be positive, got {density}")
    rng = np.random.default_rng(seed)
    all_pts, all_sem = [], []
    for link in posed.links:
        geo = link.geometry
        n = max(1, int(round(geo.surface_area() * density)))
        if isinstance(geo, Sphere):
            local = _sample_sphere(rng, n, geo.radius)
        elif isinstance(geo, Box):
            local = _sample_box(rng, n, geo.extents)
        elif isinstance(geo, Capsule):
            local = _sample_capsule(rng, n, geo.radius, geo.length)
        else:
            raise TypeError(f"unsupported geometry {type(geo).__name__}")
        world = local @ link.pose[:3, :3].T + link.pose[:3, 3]
        all_pts.append(world)
        all_sem.append(np.tile(np.asarray(link.semantic, dtype=np.int32), (n, 1)))
    if not all_pts:
        raise ValueError("zero total points: posed link set is empty")
    return SurfaceCloud(
        points=np.concatenate(all_pts, axis=0),
        semantics=np.concatenate(all_sem, axis=0),
        source_embodiment=posed.embodiment_id,
    )


# ---------------------------------------------------------------------------
# voxel-grid subsampling


def grid_subsample(points: np.ndarray, semantics: np.ndarray, voxel: float):
    """One barycenter per occupied voxel, ordered by lexicographic voxel key.

    The output semantic of a voxel is the label of the member nearest the
    barycenter; exact ties break toward the lexicographically smallest
    member (point, then semantic), i.e. the lowest index once members sit
    in canonical order. Member sums run in that same canonical order, so
    the whole result is independent of the input ordering.
    """
    if voxel <= 0:
        raise ValueError(f"voxel must be positive, got {voxel}")
    points = np.asarray(points, dtype=float)
    semantics = np.asarray(semantics)
    if points.shape[0] == 0:
        return points.copy(), semantics.copy()
    if not np.isfinite(points).all():
        raise ValueError("non-finite coordinates")

    keys = np.floor(points / voxel).astype(np.int64)
    order = np.lexsort(
        (
            semantics[:, 1],
            semantics[:, 0],
            points[:, 2],
            points[:, 1],
            points[:, 0],
            keys[:, 2],
            keys[:, 1],
            keys[:, 0],
        )
    )
    p = points[order]
    s = semantics[order]
    k = keys[order]

    new_seg = np.r_[True, np.any(k[1:] != k[:-1], axis=1)]
    starts = np.flatnonzero(new_seg)
    counts = np.diff(np.r_[starts, len(p)])
    seg_of_row = np.repeat(np.arange(len(starts)), counts)
    # np.add.at accumulates row by row in the given order — a left fold over
    # the canonically sorted members, so the sums are order-reproducible
    sums = np.zeros((len(starts), p.shape[1]))
    np.add.at(sums, seg_of_row, p)
    bary = sums / counts[:, None]
    diff = p - bary[seg_of_row]
    # fixed evaluation order (x^2 + y^2) + z^2 keeps exact ties exact
    d2 = (diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]) + diff[:, 2] * diff[:, 2]
    pick = np.lexsort((d2, seg_of_row))  # stable: ties keep canonical order
    seg_sorted = seg_of_row[pick]
    firsts = pick[np.searchsorted(seg_sorted, np.arange(len(starts)), side="left")]
    return bary, s[firsts]


# ---------------------------------------------------------------------------
# radius search


def radius_neighbors(queries: np.ndarray, supports: np.ndarray, r: float) -> NeighborList:
    """Exact radius search (<= r), per-query indices ascending."""
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    queries = np.asarray(queries, dtype=float)
    supports = np.asarray(supports, dtype=float)
    n_q = queries.shape[0]
    if supports.shape[0] == 0 or n_q == 0:
        return NeighborList(
            indices=np.zeros(0, dtype=np.int64),
            offsets=np.zeros(n_q + 1, dtype=np.int64),
            radius=r,
            n_supports=supports.shape[0],
        )
    tree = cKDTree(supports)
    lists = tree.query_ball_point(queries, r, return_sorted=True)
    lengths = np.fromiter((len(l) for l in lists), dtype=np.int64, count=n_q)
    offsets = np.zeros(n_q + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    if offsets[-1] == 0:
        indices = np.zeros(0, dtype=np.int64)
    else:
        indices = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
    return NeighborList(indices=indices, offsets=offsets, radius=r, n_supports=supports.shape[0])


# ---------------------------------------------------------------------------
# pyramid


def build_pyramid(
    cloud: SurfaceCloud, base_voxel: float = 0.008, radius_scale: float = 2.5
) -> MultiScaleCloud:
    """Canonically sort the cloud, subsample three times, wire up neighbors.

    Voxel sizes double per stage (b, 2b, 4b); the middle stage is internal
    and only its endpoints (level 1 and level 2) are kept. Each neighbor
    list uses radius = radius_scale * the query level's voxel size.
    """
    if base_voxel <= 0 or radius_scale <= 0:
        raise ValueError("base_voxel and radius_scale must be positive")
    p = cloud.points
    s = cloud.semantics
    order = np.lexsort((s[:, 1], s[:, 0], p[:, 2], p[:, 1], p[:, 0]))
    level0 = SurfaceCloud(
        points=p[order],
        semantics=s[order],
        source_embodiment=cloud.source_embodiment,
        source_angles=cloud.source_angles,
    )

    # each stage must shrink the cloud, and the first two must leave at
    # least 2 points or the strict |P-hat| < |P-tilde| < |P| chain is
    # unsatisfiable further down
    p1, s1 = grid_subsample(level0.points, level0.semantics, base_voxel)
    if len(p1) >= len(level0) or len(p1) < 2:
        raise DegeneratePyramidError(
            f"degenerate pyramid at stage 1: {len(level0)} -> {len(p1)} points"
        )
    pi, si = grid_subsample(p1, s1, 2.0 * base_voxel)
    if len(pi) >= len(p1) or len(pi) < 2:
        raise DegeneratePyramidError(f"degenerate pyramid at stage 2: {len(p1)} -> {len(pi)} points")
    p2, s2 = grid_subsample(pi, si, 4.0 * base_voxel)
    if len(p2) >= len(pi):
        raise DegeneratePyramidError(f"degenerate pyramid at stage 3: {len(pi)} -> {len(p2)} points")

    r1 = radius_scale * base_voxel
    r2 = radius_scale * 4.0 * base_voxel
    return MultiScaleCloud(
        level0=level0,
        points1=p1,
        semantics1=np.asarray(s1, dtype=np.int32),
        points2=p2,
        semantics2=np.asarray(s2, dtype=np.int32),
        neighbors01=radius_neighbors(p1, level0.points, r1),
        neighbors11=radius_neighbors(p1, p1, r1),
        neighbors12=radius_neighbors(p2, p1, r2),
        neighbors22=radius_neighbors(p2, p2, r2),
        base_voxel=base_voxel,
        radius_scale=radius_scale,
    )


# ---------------------------------------------------------------------------
# cache file format


_MAGIC = b"GALRPC1"


def save_cloud(path, points: np.ndarray, semantics: np.ndarray) -> None:
    """Write a point cloud to the little-endian GALRPC1 cache format."""
    points = np.ascontiguousarray(points, dtype="<f8")
    semantics = np.ascontiguousarray(semantics, dtype="<i4")
    n = points.shape[0]
    if points.shape != (n, 3) or semantics.shape != (n, 2):
        raise ValueError(f"bad cloud shapes {points.shape} / {semantics.shape}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(points.tobytes())
        fh.write(semantics.tobytes())


def load_cloud(path):
    """Read a GALRPC1 cache file back into (points, semantics)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (n,) = struct.unpack("<I", fh.read(4))
        pts = np.frombuffer(fh.read(n * 3 * 8), dtype="<f8").reshape(n, 3).copy()
        sem = np.frombuffer(fh.read(n * 2 * 4), dtype="<i4").reshape(n, 2).copy()
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after cloud payload")
    return pts, sem
