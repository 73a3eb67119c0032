"""Sparse voxel octree over the domain box B = [-1, 1]^3.

Level ell has grid resolution r0 * 2^ell, with r0 = 4 by default, so level 0
is the coarsest stored level. Prediction consumes feature levels 1..max_level;
level 0 exists for parent closure and traversal entry. Two still-coarser grids
(resolution 1 and 2 for r0 = 4) are never stored: traversal starts from a
virtual root covering B and derives their occupancy from level 0 on the fly.

Occupied voxels are kept per level as strictly ascending Morton code lists;
a voxel's index is its position in that list. Morton codes interleave bits
with x in bit 0, y in bit 1, z in bit 2 of each triad. Cells are half open,
[lo, hi): a point exactly on a shared face belongs to the voxel with the
larger ijk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError
from .geometry import DOMAIN_MAX, DOMAIN_MIN

DEFAULT_R0 = 4
_DOMAIN_SPAN = DOMAIN_MAX - DOMAIN_MIN

# Corner j of a voxel at integer offset (j & 1, (j >> 1) & 1, (j >> 2) & 1),
# consistent with the Morton bit convention.
CORNER_OFFSETS = np.array(
    [[j & 1, (j >> 1) & 1, (j >> 2) & 1] for j in range(8)], dtype=np.int64
)


def morton_encode(ijk) -> np.ndarray:
    """Interleave 21-bit coordinates into a 63-bit Z-order code."""
    arr = np.asarray(ijk, dtype=np.uint64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise StructuralError("morton_encode expects integer triples")
    if (arr >> np.uint64(21)).any():
        raise StructuralError("coordinate does not fit in 21 bits")
    code = (
        _spread(arr[:, 0])
        | (_spread(arr[:, 1]) << np.uint64(1))
        | (_spread(arr[:, 2]) << np.uint64(2))
    )
    return code[0] if single else code


def _spread(v: np.ndarray) -> np.ndarray:
    """Space the low 21 bits of v three apart."""
    v = v & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact(v: np.ndarray) -> np.ndarray:
    v = v & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_decode(code) -> np.ndarray:
    arr = np.asarray(code, dtype=np.uint64)
    single = arr.ndim == 0
    arr = np.atleast_1d(arr)
    ijk = np.stack(
        [
            _compact(arr),
            _compact(arr >> np.uint64(1)),
            _compact(arr >> np.uint64(2)),
        ],
        axis=-1,
    ).astype(np.int64)
    return ijk[0] if single else ijk


@dataclass
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.lo > self.hi):
            raise StructuralError("Aabb with min > max")


@dataclass
class OctreeLevel:
    codes: np.ndarray               # (n,) uint64, strictly ascending
    parents: np.ndarray             # (n,) int32 into the previous level, -1 at level 0
    corners: np.ndarray | None      # (n, 8) int32 feature indices, None at level 0


@dataclass
class SparseVoxelOctree:
    r0: int
    max_level: int
    levels: list
    corner_count: int
    corner_offsets: np.ndarray      # (max_level + 1,) start of each level's corners
    region: Aabb                    # bounding box of the occupied finest-level voxels
    virtual_codes: list = field(default_factory=list)

    def resolution(self, level: int) -> int:
        return self.r0 << level

    def voxel_edge(self, level: int) -> float:
        return _DOMAIN_SPAN / self.resolution(level)

    def half_diagonal(self, level: int) -> float:
        return 0.5 * np.sqrt(3.0) * self.voxel_edge(level)

    def voxel_count(self, level: int) -> int:
        return len(self.levels[level].codes)

    def traversal_codes(self) -> list:
        """Sorted code lists from the virtual root down to the finest level."""
        return self.virtual_codes + [lv.codes for lv in self.levels]


def points_to_cells(x: np.ndarray, res: int) -> np.ndarray:
    """Half-open binning of points in B onto a res^3 grid. Points exactly on
    the far domain boundary fall into the last cell."""
    f = (np.asarray(x, dtype=np.float64) - DOMAIN_MIN) * (res / _DOMAIN_SPAN)
    cells = np.floor(f).astype(np.int64)
    return np.clip(cells, 0, res - 1)


def cell_origin(cells: np.ndarray, res: int) -> np.ndarray:
    return DOMAIN_MIN + cells.astype(np.float64) * (_DOMAIN_SPAN / res)


def build_octree(
    oracle,
    max_level: int,
    surface_samples: np.ndarray,
    r0: int = DEFAULT_R0,
    corner_test: bool = True,
) -> SparseVoxelOctree:
    """Construct the octree from surface occupancy.

    Finest-level occupancy is the union of (a) voxels containing at least one
    surface sample and (b), when an oracle is given and corner_test is on,
    voxels whose nearest corner is within half a face diagonal of the
    surface. The distance test catches sliver voxels that sampling missed;
    its tolerance deliberately stays below the half cell diagonal so that
    voxels merely near the surface are not allocated. Coarser levels are the
    parent closure.
    """
    if max_level < 1:
        raise StructuralError("max_level must be >= 1")
    if r0 < 2 or (r0 & (r0 - 1)) != 0:
        raise StructuralError("r0 must be a power of two >= 2")
    res = r0 << max_level
    if res >= 1 << 21:
        raise StructuralError("finest resolution exceeds the Morton range")
    samples = np.atleast_2d(np.asarray(surface_samples, dtype=np.float64))
    codes = (
        np.unique(morton_encode(points_to_cells(samples, res)))
        if len(samples)
        else np.zeros(0, dtype=np.uint64)
    )
    if oracle is not None and corner_test:
        tol = (_DOMAIN_SPAN / res) * (np.sqrt(2.0) / 2.0)
        near = _corner_test_codes(oracle, res, tol)
        codes = np.union1d(codes, near)
    if len(codes) == 0:
        raise StructuralError("no occupied voxels; is the surface inside B?")

    # parent closure up to level 0
    per_level = [codes]
    for _ in range(max_level):
        per_level.append(np.unique(per_level[-1] >> np.uint64(3)))
    per_level.reverse()

    levels = []
    corner_offsets = np.zeros(max_level + 1, dtype=np.int64)
    corner_total = 0
    for ell, lv_codes in enumerate(per_level):
        if ell == 0:
            parents = np.full(len(lv_codes), -1, dtype=np.int32)
            corners = None
        else:
            parents = np.searchsorted(per_level[ell - 1], lv_codes >> np.uint64(3))
            parents = parents.astype(np.int32)
            corner_offsets[ell] = corner_total
            corners, n_unique = _corner_table(lv_codes, corner_total)
            corner_total += n_unique
        levels.append(OctreeLevel(lv_codes, parents, corners))

    fine_ijk = morton_decode(per_level[-1])
    lo = cell_origin(fine_ijk, res).min(axis=0)
    hi = (cell_origin(fine_ijk, res) + _DOMAIN_SPAN / res).max(axis=0)

    virtual_codes = []
    steps = int(np.log2(r0))
    for s in range(steps):
        shift = np.uint64(3 * (steps - s))
        virtual_codes.append(np.unique(per_level[0] >> shift))

    return SparseVoxelOctree(
        r0=r0,
        max_level=max_level,
        levels=levels,
        corner_count=corner_total,
        corner_offsets=corner_offsets,
        region=Aabb(lo, hi),
        virtual_codes=virtual_codes,
    )


def _corner_test_codes(oracle, res: int, tol: float) -> np.ndarray:
    """Codes of voxels whose minimum corner distance is within tol."""
    n = res + 1
    axis = DOMAIN_MIN + np.arange(n) * (_DOMAIN_SPAN / res)
    absd = np.empty((n, n, n), dtype=np.float32)
    # evaluate the corner lattice in x-slabs to bound peak memory
    yy, zz = np.meshgrid(axis, axis, indexing="ij")
    plane = np.empty((n * n, 3))
    plane[:, 1] = yy.ravel()
    plane[:, 2] = zz.ravel()
    for i in range(n):
        plane[:, 0] = axis[i]
        absd[i] = np.abs(oracle(plane)).reshape(n, n).astype(np.float32)
    vmin = absd[:-1, :-1, :-1]
    for dx, dy, dz in CORNER_OFFSETS[1:]:
        vmin = np.minimum(
            vmin, absd[dx : dx + res, dy : dy + res, dz : dz + res]
        )
    ijk = np.argwhere(vmin <= tol)
    if len(ijk) == 0:
        return np.zeros(0, dtype=np.uint64)
    return np.unique(morton_encode(ijk))


def _corner_table(codes: np.ndarray, offset: int):
    """Deduplicated per-voxel corner feature indices for one level."""
    ijk = morton_decode(codes)
    corner_coords = ijk[:, None, :] + CORNER_OFFSETS[None, :, :]
    keys = morton_encode(corner_coords.reshape(-1, 3))
    uniq, inverse = np.unique(keys, return_inverse=True)
    table = (inverse.reshape(len(codes), 8) + offset).astype(np.int32)
    return table, len(uniq)


def locate(svo: SparseVoxelOctree, x, level: int) -> np.ndarray:
    """Index of the occupied voxel containing each point, or -1.

    Points must lie in B (closed); anything outside raises. A scalar point
    returns a scalar index.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if np.any(pts < DOMAIN_MIN) or np.any(pts > DOMAIN_MAX):
        raise StructuralError("point outside the domain box")
    res = svo.resolution(level)
    codes = morton_encode(points_to_cells(pts, res))
    idx = _find_codes(svo.levels[level].codes, codes)
    return idx[0] if single else idx


def _find_codes(sorted_codes: np.ndarray, codes: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_codes, codes)
    pos_clipped = np.minimum(pos, len(sorted_codes) - 1) if len(sorted_codes) else pos
    if len(sorted_codes) == 0:
        return np.full(len(codes), -1, dtype=np.int64)
    hit = sorted_codes[pos_clipped] == codes
    return np.where(hit, pos_clipped, -1).astype(np.int64)


def voxel_bounds(svo: SparseVoxelOctree, level: int, indices) -> tuple:
    """(lo, hi) world bounds of the given voxels at a level."""
    res = svo.resolution(level)
    ijk = morton_decode(svo.levels[level].codes[indices])
    lo = cell_origin(np.atleast_2d(ijk), res)
    return lo, lo + _DOMAIN_SPAN / res


def clamp_into(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Clamp points into [lo, hi) so they still bin into the cell.

    A one-ulp backoff from hi is not enough: points_to_cells rebases onto
    the domain before scaling, and that addition can round the nudge away
    again. Backing off by a fixed fraction of the cell survives it.
    """
    return np.clip(x, lo, hi - (hi - lo) * 1e-9)


def children_ranges(parent_codes: np.ndarray, child_codes: np.ndarray):
    """Half-open index ranges of each parent's children in the child list."""
    base = parent_codes << np.uint64(3)
    start = np.searchsorted(child_codes, base)
    end = np.searchsorted(child_codes, base + np.uint64(8))
    return start.astype(np.int64), end.astype(np.int64)


def ray_aabb_batch(origins, dirs, lo, hi):
    """Slab-method intersection, broadcast over matched rows.

    Returns (t_enter, t_exit, hit). Boxes are closed, so grazing contact
    counts; t_enter is clamped to 0 for origins inside.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    zero = dirs == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # a zero component never crosses its slab: the axis contributes no
    # constraint when the origin lies inside it and an empty interval when
    # outside, and the empty case must survive the min/max reduction
    inside = (origins >= lo) & (origins <= hi)
    axis_near = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    axis_far = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    near = axis_near.max(axis=-1)
    far = axis_far.min(axis=-1)
    hit = (near <= far) & (far >= 0.0)
    return np.maximum(near, 0.0), far, hit


def ray_aabb(origin, direction, box: Aabb):
    """Single-ray wrapper: (t_enter, t_exit) or None on miss."""
    direction = np.asarray(direction, dtype=np.float64)
    if not direction.any():
        raise StructuralError("ray direction must be nonzero")
    t_enter, t_exit, hit = ray_aabb_batch(
        np.asarray(origin, dtype=np.float64)[None, :],
        direction[None, :],
        box.lo[None, :],
        box.hi[None, :],
    )
    if not hit[0]:
        return None
    return float(t_enter[0]), float(t_exit[0])


def storage_bytes(svo: SparseVoxelOctree, m: int) -> int:
    """The coarse storage estimate (m + 1) * |V|, counting feature-bearing
    levels 1..max_level. modelio.serialized_bytes gives the exact on-disk
    size of a full model."""
    count = sum(svo.voxel_count(ell) for ell in range(1, svo.max_level + 1))
    return (m + 1) * count
