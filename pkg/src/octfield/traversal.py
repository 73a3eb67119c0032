"""Breadth-first ray-octree intersection.

All rays descend the tree together, one level per pass. A pass classifies
every (ray, voxel) pair (decide), sizes the next list with an exclusive
scan, and either expands hit pairs into their occupied children front to
back (subdivide) or, at the target level, compacts the survivors. The
output per ray is its depth-ordered voxel list at the target level, plus
the intermediate lists.

Levels are tagged with stored-level indices; the coarse grids above the
stored root (resolution 1 and 2 for r0 = 4) appear as negative tags.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .geometry import DOMAIN_MAX, DOMAIN_MIN
from .octree import (
    SparseVoxelOctree,
    cell_origin,
    children_ranges,
    morton_decode,
    ray_aabb_batch,
)

_SPAN = DOMAIN_MAX - DOMAIN_MIN

# Row d holds the front-to-back octant order for direction-sign mask d
# (bit a set when direction component a is negative). Octant k ^ d is the
# k-th nearest because flipping a sign bit mirrors that axis.
FRONT_TO_BACK = np.array(
    [[k ^ d for k in range(8)] for d in range(8)], dtype=np.int64
)


@dataclass
class RayBundle:
    origins: np.ndarray     # (n, 3) float64
    directions: np.ndarray  # (n, 3) float64, unit length

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if self.origins.shape != self.directions.shape or self.origins.shape[1] != 3:
            raise StructuralError("origins and directions must both be (n, 3)")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise StructuralError("ray directions must be unit length")

    @property
    def count(self) -> int:
        return len(self.origins)


@dataclass
class RayVoxelPairList:
    """Pairs at one traversal level; voxels index that level's code list."""

    level: int
    rays: np.ndarray      # (k,) int64
    voxels: np.ndarray    # (k,) int64
    t_enter: np.ndarray | None = None  # filled on the final level
    t_exit: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rays)


def _codes_at(svo: SparseVoxelOctree, level: int) -> np.ndarray:
    steps = len(svo.virtual_codes)
    if level < -steps or level > svo.max_level:
        raise StructuralError(f"no traversal level {level}")
    if level < 0:
        return svo.virtual_codes[steps + level]
    return svo.levels[level].codes


def _level_res(svo: SparseVoxelOctree, level: int) -> int:
    return svo.r0 << level if level >= 0 else svo.r0 >> -level


def pair_bounds(svo: SparseVoxelOctree, pairs: RayVoxelPairList):
    """World AABBs of the voxels referenced by a pair list."""
    res = _level_res(svo, pairs.level)
    codes = _codes_at(svo, pairs.level)
    ijk = morton_decode(codes[pairs.voxels])
    lo = cell_origin(np.atleast_2d(ijk), res)
    return lo, lo + _SPAN / res


def decide(rays: RayBundle, pairs: RayVoxelPairList, svo: SparseVoxelOctree,
           final: bool = False) -> np.ndarray:
    """Per-pair decision: 0 on ray-voxel miss, 1 on a final-level hit,
    otherwise the voxel's occupied child count."""
    if len(pairs) == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = pair_bounds(svo, pairs)
    _, _, hit = ray_aabb_batch(
        rays.origins[pairs.rays], rays.directions[pairs.rays], lo, hi
    )
    if final:
        return hit.astype(np.int64)
    codes = _codes_at(svo, pairs.level)
    child_codes = _codes_at(svo, pairs.level + 1)
    start, end = children_ranges(codes[pairs.voxels], child_codes)
    return np.where(hit, end - start, 0)


def exclusive_sum_serial(d) -> np.ndarray:
    """Reference scan: S_i = sum of d_0..d_{i-1}."""
    a = np.asarray(d, dtype=np.int64)
    out = np.zeros(len(a), dtype=np.int64)
    np.cumsum(a[:-1], out=out[1:])
    return out


def exclusive_sum(d) -> np.ndarray:
    """Work-efficient up-sweep/down-sweep scan, bit-equal to the serial
    reference (integer arithmetic, so order cannot matter)."""
    a = np.asarray(d, dtype=np.int64)
    n = len(a)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    size = 1 << (n - 1).bit_length()
    buf = np.zeros(size, dtype=np.int64)
    buf[:n] = a
    step = 1
    while step < size:
        idx = np.arange(2 * step - 1, size, 2 * step)
        buf[idx] += buf[idx - step]
        step *= 2
    buf[-1] = 0
    step = size // 2
    while step >= 1:
        idx = np.arange(2 * step - 1, size, 2 * step)
        left = buf[idx - step].copy()
        buf[idx - step] = buf[idx]
        buf[idx] += left
        step //= 2
    return buf[:n]


def direction_masks(directions: np.ndarray) -> np.ndarray:
    """Sign-octant index per ray: bit a set when component a is negative."""
    neg = np.asarray(directions) < 0.0
    return (
        neg[:, 0].astype(np.int64)
        | (neg[:, 1].astype(np.int64) << 1)
        | (neg[:, 2].astype(np.int64) << 2)
    )


def ordered_children(direction) -> np.ndarray:
    """Front-to-back octant order for one ray direction."""
    d = np.asarray(direction, dtype=np.float64)
    if not d.any():
        raise StructuralError("ray direction must be nonzero")
    return FRONT_TO_BACK[int(direction_masks(d[None, :])[0])]


def subdivide(pairs: RayVoxelPairList, D: np.ndarray, S: np.ndarray,
              svo: SparseVoxelOctree, rays: RayBundle) -> RayVoxelPairList:
    """Expand hit pairs into their occupied children, each parent's block
    ordered front to back for its ray."""
    total = int(S[-1] + D[-1]) if len(D) else 0
    next_level = pairs.level + 1
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return RayVoxelPairList(next_level, empty, empty)
    hit_idx = np.flatnonzero(D > 0)
    counts = D[hit_idx]
    codes = _codes_at(svo, pairs.level)
    child_codes = _codes_at(svo, next_level)
    start, _ = children_ranges(codes[pairs.voxels[hit_idx]], child_codes)

    seg = np.repeat(np.arange(len(hit_idx)), counts)
    within = np.arange(total) - np.repeat(S[hit_idx], counts)
    child_idx = np.repeat(start, counts) + within
    ray_rep = np.repeat(pairs.rays[hit_idx], counts)

    octant = (child_codes[child_idx] & np.uint64(7)).astype(np.int64)
    key = octant ^ direction_masks(rays.directions)[ray_rep]
    order = np.lexsort((key, seg))
    out = RayVoxelPairList(next_level, ray_rep[order], child_idx[order])
    if len(out) != total:
        raise StructuralError("subdivide output size disagrees with the scan")
    return out


def compactify(pairs: RayVoxelPairList, D: np.ndarray, S: np.ndarray) -> RayVoxelPairList:
    """Drop non-intersecting pairs, preserving order (final level only)."""
    if len(D) and D.max() > 1:
        raise StructuralError("compactify expects final-level decisions in {0, 1}")
    total = int(S[-1] + D[-1]) if len(D) else 0
    rays_out = np.zeros(total, dtype=np.int64)
    vox_out = np.zeros(total, dtype=np.int64)
    keep = np.flatnonzero(D == 1)
    rays_out[S[keep]] = pairs.rays[keep]
    vox_out[S[keep]] = pairs.voxels[keep]
    return RayVoxelPairList(pairs.level, rays_out, vox_out)


def ray_trace_octree(rays: RayBundle, svo: SparseVoxelOctree,
                     level: int | None = None) -> list:
    """Full descent to the given stored level (default: finest).

    Returns the pair list per traversal level, coarsest first. Lists at
    intermediate levels hold the candidates entering that level's decide
    pass; the last list holds only actual hits, per ray in ascending
    t_enter order, with entry/exit distances attached.
    """
    target = svo.max_level if level is None else level
    if not 0 <= target <= svo.max_level:
        raise StructuralError(f"target level {target} outside 0..{svo.max_level}")
    steps = len(svo.virtual_codes)
    root = -steps
    n = rays.count
    pairs = RayVoxelPairList(
        root, np.arange(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    )
    out = [pairs]
    lvl = root
    while lvl < target:
        D = decide(rays, pairs, svo, final=False)
        S = exclusive_sum(D)
        pairs = subdivide(pairs, D, S, svo, rays)
        out.append(pairs)
        lvl += 1
    D = decide(rays, pairs, svo, final=True)
    S = exclusive_sum(D)
    final = compactify(pairs, D, S)
    if len(final):
        lo, hi = pair_bounds(svo, final)
        t0, t1, _ = ray_aabb_batch(
            rays.origins[final.rays], rays.directions[final.rays], lo, hi
        )
        final.t_enter = t0
        final.t_exit = t1
    else:
        final.t_enter = np.zeros(0)
        final.t_exit = np.zeros(0)
    out[-1] = final
    return out


def ray_segments(final: RayVoxelPairList, ray_count: int):
    """Per-ray [start, end) ranges into the final pair list."""
    idx = np.arange(ray_count, dtype=np.int64)
    start = np.searchsorted(final.rays, idx, side="left")
    end = np.searchsorted(final.rays, idx, side="right")
    return start, end


def dump_pairs(path, svo: SparseVoxelOctree, rays: RayBundle, lists) -> None:
    """CSV dump of every pair list: ray, level, morton, t_enter."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ray", "level", "morton", "t_enter"])
        for pairs in lists:
            if len(pairs) == 0:
                continue
            codes = _codes_at(svo, pairs.level)
            lo, hi = pair_bounds(svo, pairs)
            t0, _, hit = ray_aabb_batch(
                rays.origins[pairs.rays], rays.directions[pairs.rays], lo, hi
            )
            t0 = np.where(hit, t0, np.nan)
            for r, c, t in zip(pairs.rays, codes[pairs.voxels], t0):
                w.writerow([int(r), pairs.level, int(c), f"{t:.9g}"])
