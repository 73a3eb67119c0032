"""Training point generation.

Each epoch draws a fresh 2:2:1 mixture of surface samples, near-surface
samples (surface plus Gaussian noise), and uniform samples over the domain
box. Surface points come from area-weighted triangle picks for meshes and
from sphere-traced random rays for analytic shapes. All samplers are pure
functions of their seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, SamplingError, StructuralError
from .geometry import DOMAIN_MAX, DOMAIN_MIN, AnalyticSdf, TriangleMesh, eval_analytic

SCHEME_SURFACE = 0
SCHEME_NEAR = 1
SCHEME_UNIFORM = 2
SCHEME_NAMES = ("surface", "near", "uniform")

NEAR_SIGMA = 0.01
SURFACE_HIT_TOL = 1e-3
_HIT_RATE_FLOOR = 1e-4

_DUMP_MAGIC = b"OFSS"


@dataclass
class SampleSet:
    """Points with ground-truth signed distances and per-point scheme tags."""

    points: np.ndarray      # (n, 3) float64 in B
    distances: np.ndarray   # (n,) float64
    scheme_tags: np.ndarray  # (n,) int8, see SCHEME_* constants

    def __post_init__(self):
        if not (len(self.points) == len(self.distances) == len(self.scheme_tags)):
            raise StructuralError("sample set field lengths differ")

    def __len__(self):
        return len(self.points)


def sample_uniform(count: int, rng_seed: int) -> np.ndarray:
    """count i.i.d. uniform points in the domain box."""
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(DOMAIN_MIN, DOMAIN_MAX, size=(count, 3))


def sample_surface_mesh(mesh: TriangleMesh, count: int, rng_seed: int) -> np.ndarray:
    """Area-weighted triangle picks with a uniform barycentric point each."""
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0.0:
        raise StructuralError("mesh has zero total area")
    rng = np.random.default_rng(rng_seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    a, b, c = mesh.corners()
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return a[tri] + u[:, None] * (b[tri] - a[tri]) + v[:, None] * (c[tri] - a[tri])


def sample_surface_sdf(
    sdf: AnalyticSdf,
    count: int,
    rng_seed: int,
    tol: float = SURFACE_HIT_TOL,
) -> np.ndarray:
    """Surface points of an analytic shape found by sphere tracing random rays.

    Origins are uniform in B, directions uniform on the sphere. Rays whose
    origin starts inside the solid trace the negated field, so both sides
    contribute. A sign change between steps is refined by bisection, which
    keeps CSG trees (whose min/max distances are not exact everywhere) from
    stepping over the surface. Raises SamplingError if the observed hit rate
    falls below a floor, which catches scenes with no reachable surface.
    """
    rng = np.random.default_rng(rng_seed)
    hits = []
    got = 0
    rays_cast = 0
    t_max = 2.0 * np.sqrt(3.0) * (DOMAIN_MAX - DOMAIN_MIN) / 2.0  # longest chord of B
    while got < count:
        n = max(4 * (count - got), 4096)
        origins = rng.uniform(DOMAIN_MIN, DOMAIN_MAX, size=(n, 3))
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = _trace_to_surface(sdf, origins, dirs, tol, t_max)
        rays_cast += n
        if len(pts):
            hits.append(pts)
            got += len(pts)
        if rays_cast >= 100000 and got / rays_cast < _HIT_RATE_FLOOR:
            raise SamplingError(
                f"surface hit rate {got}/{rays_cast} below floor {_HIT_RATE_FLOOR}; "
                "is the surface reachable inside the domain box?"
            )
    return np.concatenate(hits)[:count]


def _trace_to_surface(sdf, origins, dirs, tol, t_max, max_iters=128):
    f0 = eval_analytic(sdf, origins)
    side = np.where(f0 < 0.0, -1.0, 1.0)
    t = np.zeros(len(origins))
    f_prev = side * f0
    t_prev = t.copy()
    alive = np.abs(f0) >= tol
    hit_t = np.full(len(origins), np.nan)
    hit_t[~alive] = 0.0
    for _ in range(max_iters):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        t[idx] = t[idx] + f_prev[idx]
        overshot = t[idx] > t_max
        x = origins[idx] + t[idx, None] * dirs[idx]
        f = side[idx] * eval_analytic(sdf, x)
        done_hit = (np.abs(f) < tol) & ~overshot
        hit_t[idx[done_hit]] = t[idx[done_hit]]
        crossed = (f < 0.0) & ~done_hit & ~overshot
        if crossed.any():
            j = idx[crossed]
            hit_t[j] = _bisect_crossing(
                sdf, origins[j], dirs[j], t_prev[j], t[j], side[j]
            )
        stop = done_hit | crossed | overshot
        f_prev[idx] = f
        t_prev[idx] = t[idx]
        alive[idx[stop]] = False
    ok = np.isfinite(hit_t)
    return origins[ok] + hit_t[ok, None] * dirs[ok]


def _bisect_crossing(sdf, origins, dirs, t_lo, t_hi, side, iters=40):
    for _ in range(iters):
        mid = 0.5 * (t_lo + t_hi)
        f = side * eval_analytic(sdf, origins + mid[:, None] * dirs)
        hi_side = f < 0.0
        t_hi = np.where(hi_side, mid, t_hi)
        t_lo = np.where(hi_side, t_lo, mid)
    return 0.5 * (t_lo + t_hi)


def perturb_near(surface_points: np.ndarray, sigma: float, rng_seed: int) -> np.ndarray:
    """Gaussian offsets per coordinate, result clamped to the domain box."""
    rng = np.random.default_rng(rng_seed)
    out = surface_points + sigma * rng.standard_normal(surface_points.shape)
    return np.clip(out, DOMAIN_MIN, DOMAIN_MAX)


def split_counts(total: int) -> tuple[int, int, int]:
    """2:2:1 split (surface, near, uniform); leftovers go to surface."""
    uniform = total // 5
    near = (2 * total) // 5
    surface = total - near - uniform
    return surface, near, uniform


def surface_points(oracle, count: int, rng_seed: int) -> np.ndarray:
    """Surface sampler dispatch for either oracle kind."""
    if count == 0:
        return np.zeros((0, 3))
    if oracle.kind == "analytic":
        return sample_surface_sdf(oracle.sdf, count, rng_seed)
    return sample_surface_mesh(oracle.mesh, count, rng_seed)


def build_epoch_set(oracle, total: int, rng_seed: int, sigma: float = NEAR_SIGMA) -> SampleSet:
    """One epoch's sample mixture with ground-truth distances from the oracle."""
    n_surf, n_near, n_uni = split_counts(total)
    seed = np.random.SeedSequence(rng_seed).generate_state(1)[0]
    surf_all = surface_points(oracle, n_surf + n_near, int(seed))
    near = perturb_near(surf_all[n_surf:], sigma, int(seed) + 1)
    uni = sample_uniform(n_uni, int(seed) + 2)
    points = np.concatenate([surf_all[:n_surf], near, uni])
    tags = np.concatenate(
        [
            np.full(n_surf, SCHEME_SURFACE, dtype=np.int8),
            np.full(n_near, SCHEME_NEAR, dtype=np.int8),
            np.full(n_uni, SCHEME_UNIFORM, dtype=np.int8),
        ]
    )
    distances = oracle(points)
    return SampleSet(points, distances, tags)


def dump_samples(path, samples: SampleSet) -> None:
    """Binary dump: magic, u64 count, then x, y, z, d as little-endian f32.

    Scheme tags are not persisted; the format carries points and distances
    only.
    """
    rec = np.empty((len(samples), 4), dtype="<f4")
    rec[:, :3] = samples.points
    rec[:, 3] = samples.distances
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<Q", len(samples)))
        fh.write(rec.tobytes())


def load_samples(path) -> SampleSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _DUMP_MAGIC:
        raise FormatError(f"{path}: not a sample dump")
    (count,) = struct.unpack_from("<Q", raw, 4)
    want = 12 + 16 * count
    if len(raw) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype="<f4", offset=12).reshape(count, 4)
    return SampleSet(
        rec[:, :3].astype(np.float64),
        rec[:, 3].astype(np.float64),
        np.full(count, SCHEME_UNIFORM, dtype=np.int8),
    )
