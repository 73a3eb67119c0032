"""Sphere tracing of the octree field, and image output.

A frame starts with one breadth-first traversal that hands every ray its
depth-ordered voxel list at the traversal level (the ceiling of the
requested detail level). Tracing then marches each ray through its list:
outside the current voxel the ray jumps straight to the voxel's entry
point, inside it takes sphere-trace steps of the predicted distance. The
decoder therefore only ever runs at points inside occupied voxels, which
render() checks at the end of every frame.

A ray stops as a hit when the signed prediction falls under delta, which
also catches any step that lands past the surface. Stalled marches, where
consecutive in-voxel predictions stop shrinking while differing by less
than six delta, end as misses: that is a grazing ray passing its closest
approach above the hit band. The far plane, the iteration cap, and an
exhausted voxel list end the ray as a miss too.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OctfieldError, StructuralError
from .field import EvalCounter, NeuralField, empty_space_value
from .geometry import DOMAIN_MAX, DOMAIN_MIN
from .octree import clamp_into, locate
from .traversal import (
    RayBundle,
    RayVoxelPairList,
    pair_bounds,
    ray_segments,
    ray_trace_octree,
)

_RAY_SHARD = 8192  # fixed so output never depends on the worker count


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y_deg: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not 0.0 < self.fov_y_deg < 180.0:
            raise ConfigError("vertical FOV must be in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image dimensions must be positive")
        fwd = self.look_at - self.position
        if np.linalg.norm(fwd) < 1e-12:
            raise ConfigError("camera position and look_at coincide")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12:
            raise ConfigError("up vector is parallel to the view direction")

    def basis(self):
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return fwd, right, true_up

    def rays(self) -> RayBundle:
        """Primary rays through pixel centers, row-major, row 0 at the top."""
        fwd, right, true_up = self.basis()
        tan_half = math.tan(math.radians(self.fov_y_deg) / 2.0)
        aspect = self.width / self.height
        px = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * tan_half * aspect
        py = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * tan_half
        dirs = (
            fwd[None, None, :]
            + px[None, :, None] * right[None, None, :]
            + py[:, None, None] * true_up[None, None, :]
        ).reshape(-1, 3)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return RayBundle(origins, dirs)


@dataclass
class RenderConfig:
    delta: float = 0.0003
    max_iters: int = 200
    far_plane: float = 5.0
    lod: float | None = None            # None: thresholds if given, else finest
    lod_thresholds: list | None = None
    normal_eps: float | None = None     # None: half the finest voxel edge
    skip_eps: float = 1e-5
    osc_factor: float = 6.0              # stall window, in multiples of delta
    workers: int = 1
    light_dir: tuple = (-0.45, 0.8, -0.55)
    albedo: tuple = (0.82, 0.84, 0.88)
    ambient: float = 0.12
    background: tuple = (0.09, 0.10, 0.13)

    def __post_init__(self):
        for name in ("delta", "far_plane", "skip_eps", "osc_factor"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.max_iters < 1 or self.workers < 1:
            raise ConfigError("max_iters and workers must be positive")
        if self.normal_eps is not None and self.normal_eps <= 0.0:
            raise ConfigError("normal_eps must be positive")


@dataclass
class FrameBuffer:
    width: int
    height: int
    hit: np.ndarray          # (h, w) bool
    t: np.ndarray            # (h, w) hit depth, nan on miss
    points: np.ndarray       # (h, w, 3) hit positions
    normal: np.ndarray       # (h, w, 3) unit normals, zero where invalid
    normal_ok: np.ndarray    # (h, w) bool, False on degenerate gradient
    iterations: np.ndarray   # (h, w) sphere-trace steps taken
    evals: np.ndarray        # (h, w) decoder evaluations during tracing
    color: np.ndarray        # (h, w, 3) uint8 shaded image


@dataclass
class FrameReport:
    ms_trace: float
    ms_normals: float
    evals: int               # decoder evaluations, tracing plus normals
    visible: int             # hit pixel count
    lod: float


def select_lod(camera: Camera, svo, thresholds) -> float:
    """Piecewise-linear detail level from the eye-to-region distance: at or
    under the first threshold the finest level, at or past the last the
    coarsest, interpolated between."""
    th = np.asarray(thresholds, dtype=np.float64)
    if th.ndim != 1 or len(th) != svo.max_level:
        raise ConfigError(f"need {svo.max_level} distance thresholds")
    if np.any(np.diff(th) <= 0.0):
        raise ConfigError("thresholds must be strictly increasing")
    center = 0.5 * (svo.region.lo + svo.region.hi)
    dist = float(np.linalg.norm(np.asarray(camera.position) - center))
    levels = np.arange(svo.max_level, 0, -1, dtype=np.float64)
    return float(np.interp(dist, th, levels))


def query_field(fld: NeuralField, pts: np.ndarray, lod: float,
                counter: EvalCounter | None = None) -> np.ndarray:
    """Field lookup that never decodes outside the traversal level's
    voxels: points not inside one get the empty-space value directly."""
    lvl = min(int(math.ceil(max(lod, 1.0))), fld.max_level)
    idx = locate(fld.svo, pts, lvl)
    inside = idx >= 0
    out = np.empty(len(pts))
    rows = np.flatnonzero(inside)
    if len(rows):
        out[rows] = fld.blend(pts[rows], lod, counter)
    misses = np.flatnonzero(~inside)
    if len(misses):
        out[misses] = empty_space_value(fld.svo, pts[misses])
        if counter is not None:
            counter.empty_fallbacks += len(misses)
    return out


def sphere_trace(fld: NeuralField, rays: RayBundle, final: RayVoxelPairList,
                 lod: float, config: RenderConfig,
                 counter: EvalCounter | None = None):
    """March every ray through its voxel list. Returns (hit, t_hit,
    iterations, evals), each an array over the bundle."""
    n = rays.count
    hit = np.zeros(n, dtype=bool)
    t_hit = np.full(n, np.nan)
    iters = np.zeros(n, dtype=np.int32)
    evals = np.zeros(n, dtype=np.int64)
    if len(final) == 0:
        return hit, t_hit, iters, evals

    seg_start, seg_end = ray_segments(final, n)
    box_lo, box_hi = pair_bounds(fld.svo, final)
    t_enter = final.t_enter
    t_exit = final.t_exit

    cur = seg_start.copy()
    t = np.zeros(n)
    prev_d = np.full(n, np.nan)
    alive = cur < seg_end
    delta = config.delta
    osc_tol = config.osc_factor * config.delta
    passes = 1 if float(lod) == int(lod) or lod <= 1.0 else 2

    while alive.any():
        # move each live ray into its next voxel interval
        while True:
            a = np.flatnonzero(alive)
            if len(a) == 0:
                break
            exhausted = cur[a] >= seg_end[a]
            if exhausted.any():
                alive[a[exhausted]] = False
                a = a[~exhausted]
            if len(a) == 0:
                break
            too_far = t[a] > config.far_plane
            if too_far.any():
                alive[a[too_far]] = False
                a = a[~too_far]
            if len(a) == 0:
                break
            c = cur[a]
            passed = t[a] >= t_exit[c]
            if passed.any():
                rows = a[passed]
                cur[rows] += 1
                prev_d[rows] = np.nan
                continue
            before = a[~passed]
            c = cur[before]
            early = t[before] < t_enter[c]
            if early.any():
                rows = before[early]
                c = cur[rows]
                t_in = t_enter[c] + config.skip_eps
                sliver = t_in >= t_exit[c]
                if sliver.any():  # grazing contact thinner than the nudge
                    cur[rows[sliver]] += 1
                t[rows[~sliver]] = t_in[~sliver]
                if sliver.any():
                    continue
            break

        a = np.flatnonzero(alive)
        if len(a) == 0:
            break
        c = cur[a]
        x = rays.origins[a] + t[a, None] * rays.directions[a]
        x = clamp_into(x, box_lo[c], box_hi[c])
        d = query_field(fld, x, lod, counter)
        evals[a] += passes
        iters[a] += 1

        prev = prev_d[a]
        is_hit = d < delta
        # a signed hit test subsumes zero-straddling bounces (their negative
        # side is below delta), so the small-step stop only needs to catch a
        # stalled march: the prediction stopped shrinking while the steps are
        # tiny, which happens where a grazing ray passes its closest approach
        # above the hit band. A decreasing creep is normal convergence and
        # keeps going (comparisons with a nan prev are all False).
        stalled = ~is_hit & (d >= prev) & (np.abs(d - prev) < osc_tol)

        rows = a[is_hit]
        hit[rows] = True
        t_hit[rows] = t[a][is_hit] + d[is_hit]    # one final step onto the surface
        alive[rows] = False
        alive[a[stalled]] = False

        go = ~is_hit & ~stalled
        rows = a[go]
        capped = iters[rows] >= config.max_iters
        alive[rows[capped]] = False
        rows = rows[~capped]
        prev_d[rows] = d[go][~capped]
        t[rows] += d[go][~capped]

    return hit, t_hit, iters, evals


def normals(fld: NeuralField, points: np.ndarray, eps: float, lod: float,
            counter: EvalCounter | None = None):
    """Central-difference gradients of the field, normalized.

    Returns (normals, ok); ok is False where the gradient is degenerate.
    Probes leaving every voxel fall back to the empty-space value, so no
    decoder runs outside the structure.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    k = len(pts)
    if k == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    offsets = eps * np.eye(3)
    probes = np.concatenate(
        [pts[:, None, :] + offsets[None], pts[:, None, :] - offsets[None]], axis=1
    ).reshape(-1, 3)
    np.clip(probes, DOMAIN_MIN, DOMAIN_MAX, out=probes)
    vals = query_field(fld, probes, lod, counter).reshape(k, 2, 3)
    g = (vals[:, 0, :] - vals[:, 1, :]) / (2.0 * eps)
    norm = np.linalg.norm(g, axis=1)
    ok = np.isfinite(norm) & (norm > 1e-12)
    out = np.zeros((k, 3))
    out[ok] = g[ok] / norm[ok, None]
    return out, ok


def shade(hit, nrm, config: RenderConfig) -> np.ndarray:
    """Lambert shading with one fixed directional light, 8-bit RGB."""
    light = np.asarray(config.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.clip(nrm @ light, 0.0, 1.0)
    albedo = np.asarray(config.albedo)
    rgb = np.where(
        hit[..., None],
        albedo * (config.ambient + (1.0 - config.ambient) * lambert[..., None]),
        np.asarray(config.background),
    )
    return (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8-bit; byte-for-byte reproducible."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise StructuralError("write_ppm expects (h, w, 3) uint8")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def normal_image(fb: FrameBuffer) -> np.ndarray:
    rgb = np.where(fb.hit[..., None], 0.5 * (fb.normal + 1.0), 0.0)
    return (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def depth_image(fb: FrameBuffer, far: float) -> np.ndarray:
    g = np.where(fb.hit, 1.0 - np.nan_to_num(fb.t) / far, 0.0)
    g = (np.clip(g, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def _shard_slices(n: int) -> list:
    return [slice(s, min(s + _RAY_SHARD, n)) for s in range(0, n, _RAY_SHARD)]


def render(camera: Camera, fld: NeuralField, config: RenderConfig):
    """Trace a frame. Returns (FrameBuffer, FrameReport); the report times
    tracing and normal estimation only, matching the benchmark scope."""
    if config.lod is not None:
        lod = float(config.lod)
        if lod > fld.max_level:
            raise ConfigError(f"lod {lod} above max level {fld.max_level}")
    elif config.lod_thresholds is not None:
        lod = select_lod(camera, fld.svo, config.lod_thresholds)
    else:
        lod = float(fld.max_level)
    lod = max(lod, 1.0)
    trace_level = min(int(math.ceil(lod)), fld.max_level)
    eps = config.normal_eps
    if eps is None:
        eps = 0.5 * fld.svo.voxel_edge(fld.max_level)

    rays = camera.rays()
    n = rays.count
    hit = np.zeros(n, dtype=bool)
    t_hit = np.full(n, np.nan)
    iters = np.zeros(n, dtype=np.int32)
    evals = np.zeros(n, dtype=np.int64)
    counters = []

    t0 = time.perf_counter()
    lists = ray_trace_octree(rays, fld.svo, trace_level)
    final = lists[-1]
    seg_start, seg_end = ray_segments(final, n)

    def trace_shard(sl):
        c = EvalCounter()
        lo_pair = seg_start[sl.start]
        hi_pair = seg_end[sl.stop - 1]
        sub = RayVoxelPairList(
            final.level,
            final.rays[lo_pair:hi_pair] - sl.start,
            final.voxels[lo_pair:hi_pair],
            final.t_enter[lo_pair:hi_pair],
            final.t_exit[lo_pair:hi_pair],
        )
        bundle = RayBundle(rays.origins[sl], rays.directions[sl])
        hit[sl], t_hit[sl], iters[sl], evals[sl] = sphere_trace(
            fld, bundle, sub, lod, config, c
        )
        return c

    shards = _shard_slices(n)
    if config.workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            counters += list(pool.map(trace_shard, shards))
    else:
        counters += [trace_shard(sl) for sl in shards]
    hit_pts = np.zeros((n, 3))
    hit_pts[hit] = rays.origins[hit] + t_hit[hit, None] * rays.directions[hit]
    t1 = time.perf_counter()

    nrm = np.zeros((n, 3))
    nrm_ok = np.zeros(n, dtype=bool)
    hot = np.flatnonzero(hit)

    def normal_shard(sl):
        c = EvalCounter()
        rows = hot[sl]
        nrm[rows], nrm_ok[rows] = normals(fld, hit_pts[rows], eps, lod, c)
        return c

    shards = _shard_slices(len(hot))
    if config.workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            counters += list(pool.map(normal_shard, shards))
    else:
        counters += [normal_shard(sl) for sl in shards]
    t2 = time.perf_counter()

    total = EvalCounter()
    for c in counters:
        total.decoder_evals += c.decoder_evals
        total.evals_missing_level += c.evals_missing_level
        total.empty_fallbacks += c.empty_fallbacks
    if total.evals_missing_level != 0:
        raise OctfieldError(
            "internal: decoder ran outside the queried level's voxels"
        )

    h, w = camera.height, camera.width
    fb = FrameBuffer(
        width=w,
        height=h,
        hit=hit.reshape(h, w),
        t=t_hit.reshape(h, w),
        points=hit_pts.reshape(h, w, 3),
        normal=nrm.reshape(h, w, 3),
        normal_ok=nrm_ok.reshape(h, w),
        iterations=iters.reshape(h, w),
        evals=evals.reshape(h, w),
        color=np.zeros((h, w, 3), dtype=np.uint8),
    )
    fb.color = shade(fb.hit, fb.normal, config)
    report = FrameReport(
        ms_trace=(t1 - t0) * 1e3,
        ms_normals=(t2 - t1) * 1e3,
        evals=total.decoder_evals,
        visible=int(hit.sum()),
        lod=lod,
    )
    return fb, report
