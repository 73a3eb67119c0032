"""The neural distance field.

A flat feature volume Z holds one m-vector per unique voxel corner. A query
at detail level L trilinearly interpolates the corners of its containing
voxel at every feature level 1..L, sums the per-level results, and feeds
[x, z] through that level's small MLP (one hidden layer, relu, linear out).
Fractional levels linearly blend the two bracketing integer predictions.

Parameters are stored as 32-bit floats; all interpolation and decoder
arithmetic here upcasts to float64 so that face-continuity and gradient
checks hold to tight tolerances, with results cast back only at the
serialization boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OctfieldError, StructuralError
from .geometry import DOMAIN_MAX, DOMAIN_MIN
from .octree import SparseVoxelOctree, locate, morton_decode

FEATURE_DIM = 32
HIDDEN_DIM = 128
FEATURE_INIT_SIGMA = 0.01


@dataclass
class Decoder:
    """Single-hidden-layer MLP weights for one detail level."""

    W1: np.ndarray  # (h, 3 + m)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (1, h)
    b2: np.ndarray  # (1,)

    def param_count(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def astype(self, dtype) -> "Decoder":
        return Decoder(
            self.W1.astype(dtype),
            self.b1.astype(dtype),
            self.W2.astype(dtype),
            self.b2.astype(dtype),
        )


def init_features(svo: SparseVoxelOctree, m: int = FEATURE_DIM, seed: int = 0) -> np.ndarray:
    """Gaussian-initialized feature volume, one row per unique corner."""
    rng = np.random.default_rng(seed)
    return (FEATURE_INIT_SIGMA * rng.standard_normal((svo.corner_count, m))).astype(
        np.float32
    )


def init_decoders(
    max_level: int, m: int = FEATURE_DIM, h: int = HIDDEN_DIM, seed: int = 0
) -> list:
    """One decoder per detail level 1..max_level, uniform fan-in init."""
    rng = np.random.default_rng(seed)
    decoders = []
    for _ in range(max_level):
        k1 = 1.0 / np.sqrt(3 + m)
        k2 = 1.0 / np.sqrt(h)
        decoders.append(
            Decoder(
                rng.uniform(-k1, k1, size=(h, 3 + m)).astype(np.float32),
                rng.uniform(-k1, k1, size=h).astype(np.float32),
                rng.uniform(-k2, k2, size=(1, h)).astype(np.float32),
                rng.uniform(-k2, k2, size=1).astype(np.float32),
            )
        )
    return decoders


class EvalCounter:
    """Tallies decoder work for benchmarks and empty-space assertions."""

    def __init__(self):
        self.decoder_evals = 0          # (point, decoder) forward rows
        self.evals_missing_level = 0    # decoded rows not inside a voxel at the queried level
        self.empty_fallbacks = 0        # queries answered by the empty-space policy

    def reset(self):
        self.decoder_evals = 0
        self.evals_missing_level = 0
        self.empty_fallbacks = 0


@dataclass
class LevelInterp:
    """Interpolation record for one feature level of a point batch."""

    level: int
    mask: np.ndarray      # (n,) containing voxel exists
    ids: np.ndarray       # (k, 8) corner feature indices for masked rows
    weights: np.ndarray   # (k, 8) trilinear weights
    psi: np.ndarray       # (n, m) interpolated features, zero where absent


def _interp_level(svo, Z, pts, level) -> LevelInterp:
    res = svo.resolution(level)
    idx = locate(svo, pts, level)
    mask = idx >= 0
    m = Z.shape[1]
    psi = np.zeros((len(pts), m))
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        return LevelInterp(level, mask, np.zeros((0, 8), np.int32), np.zeros((0, 8)), psi)
    ids = svo.levels[level].corners[idx[rows]]
    cells = morton_decode(svo.levels[level].codes[idx[rows]])
    f = (pts[rows] - DOMAIN_MIN) * (res / (DOMAIN_MAX - DOMAIN_MIN))
    u = np.clip(f - cells, 0.0, 1.0)
    w = trilinear_weights(u)
    psi[rows] = np.einsum("kj,kjm->km", w, Z[ids].astype(np.float64))
    return LevelInterp(level, mask, ids, w, psi)


def trilinear_weights(u: np.ndarray) -> np.ndarray:
    """(k, 8) corner weights from local coordinates u in [0,1]^3.

    Corner j sits at offset (j & 1, j >> 1 & 1, j >> 2 & 1)."""
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    cx = np.stack([1.0 - ux, ux], axis=1)
    cy = np.stack([1.0 - uy, uy], axis=1)
    cz = np.stack([1.0 - uz, uz], axis=1)
    w = (
        cx[:, [0, 1, 0, 1, 0, 1, 0, 1]]
        * cy[:, [0, 0, 1, 1, 0, 0, 1, 1]]
        * cz[:, [0, 0, 0, 0, 1, 1, 1, 1]]
    )
    return w


def trilinear(svo, Z, x, level: int):
    """Interpolated feature vector(s) at one level.

    Returns (values (n, m), mask (n,)); rows outside any occupied voxel at
    the level are zero with mask False rather than an error.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rec = _interp_level(svo, Z, pts, level)
    return rec.psi, rec.mask


def interp_levels(svo, Z, pts, max_l: int) -> list:
    """LevelInterp records for feature levels 1..max_l."""
    return [_interp_level(svo, Z, pts, ell) for ell in range(1, max_l + 1)]


def sum_features(svo, Z, x, L: int):
    """z(x) at level L: the sum of per-level interpolations 1..L.

    Returns (z (n, m), mask (n, L)) where mask[:, ell-1] marks levels that
    contributed. Absent levels contribute zero.
    """
    if L < 1:
        raise StructuralError("L must be >= 1")
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    recs = interp_levels(svo, Z, pts, L)
    z = np.zeros((len(pts), Z.shape[1]))
    mask = np.zeros((len(pts), L), dtype=bool)
    for rec in recs:
        z += rec.psi
        mask[:, rec.level - 1] = rec.mask
    return z, mask


def decode(decoder: Decoder, x, z):
    """d = W2 relu(W1 [x, z] + b1) + b2, computed in float64."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = np.atleast_2d(z)
    inp = np.concatenate([pts, z], axis=1)
    if not np.all(np.isfinite(inp)):
        raise OctfieldError("non-finite decoder input")
    pre = inp @ decoder.W1.T.astype(np.float64) + decoder.b1.astype(np.float64)
    hidden = np.maximum(pre, 0.0)
    out = hidden @ decoder.W2.T.astype(np.float64) + decoder.b2.astype(np.float64)
    return out[:, 0]


def empty_space_value(svo: SparseVoxelOctree, x) -> np.ndarray:
    """Prediction policy for points outside every feature-level voxel:
    distance to the occupied-region bounding box plus the finest voxel half
    diagonal. Always positive, never runs a decoder."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    gap = np.maximum(svo.region.lo - pts, 0.0) + np.maximum(pts - svo.region.hi, 0.0)
    return np.linalg.norm(gap, axis=1) + svo.half_diagonal(svo.max_level)


def predict(svo, Z, decoders, x, L: int, counter: EvalCounter | None = None):
    """Distance prediction at integer level L for a point batch.

    Points inside at least one feature-level voxel are decoded from their
    (possibly partial) feature sum; the rest get the empty-space policy
    value. Scalar input returns a scalar.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    _check_level(L, len(decoders))
    z, mask = sum_features(svo, Z, pts, L)
    any_level = mask.any(axis=1)
    out = np.empty(len(pts))
    rows = np.flatnonzero(any_level)
    if len(rows):
        out[rows] = decode(decoders[L - 1], pts[rows], z[rows])
    misses = np.flatnonzero(~any_level)
    if len(misses):
        out[misses] = empty_space_value(svo, pts[misses])
    if counter is not None:
        counter.decoder_evals += len(rows)
        counter.evals_missing_level += int((~mask[rows, L - 1]).sum())
        counter.empty_fallbacks += len(misses)
    return float(out[0]) if single else out


def _check_level(L, max_level):
    if not 1 <= L <= max_level:
        raise StructuralError(f"level {L} outside 1..{max_level}")


def blend(svo, Z, decoders, x, L_tilde: float, counter: EvalCounter | None = None):
    """Continuous-level prediction: linear interpolation of the two
    bracketing integer levels. Values below 1 clamp to 1; above max_level
    is an error. Integer inputs take the discrete path exactly."""
    if L_tilde > len(decoders):
        raise StructuralError(f"blend level {L_tilde} above max {len(decoders)}")
    L_tilde = max(float(L_tilde), 1.0)
    base = int(np.floor(L_tilde))
    alpha = L_tilde - base
    if alpha == 0.0:
        return predict(svo, Z, decoders, x, base, counter)
    lo = predict(svo, Z, decoders, x, base, counter)
    hi = predict(svo, Z, decoders, x, base + 1, counter)
    return (1.0 - alpha) * lo + alpha * hi


@dataclass
class NeuralField:
    """Octree structure plus its learned parameters, as one unit."""

    svo: SparseVoxelOctree
    Z: np.ndarray
    decoders: list

    @property
    def max_level(self) -> int:
        return self.svo.max_level

    @property
    def feature_dim(self) -> int:
        return self.Z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.decoders[0].W1.shape[0]

    def predict(self, x, L: int, counter: EvalCounter | None = None):
        return predict(self.svo, self.Z, self.decoders, x, L, counter)

    def blend(self, x, L_tilde: float, counter: EvalCounter | None = None):
        return blend(self.svo, self.Z, self.decoders, x, L_tilde, counter)

    def forward(self, x, L: int):
        return forward(self.svo, self.Z, self.decoders, x, L)


def new_field(
    svo: SparseVoxelOctree,
    m: int = FEATURE_DIM,
    h: int = HIDDEN_DIM,
    seed: int = 0,
) -> NeuralField:
    """Freshly initialized field for an existing octree."""
    return NeuralField(
        svo,
        init_features(svo, m, seed),
        init_decoders(svo.max_level, m, h, seed + 1),
    )


@dataclass
class DecoderGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class FieldGradients:
    """Accumulated partials for the feature volume and each decoder.

    Decoder slots stay None until a backward pass touches that level.
    """

    dZ: np.ndarray
    decoders: list

    @classmethod
    def zeros(cls, Z: np.ndarray, n_decoders: int) -> "FieldGradients":
        return cls(np.zeros(Z.shape), [None] * n_decoders)

    def decoder_slot(self, L: int, decoder: Decoder) -> DecoderGrads:
        g = self.decoders[L - 1]
        if g is None:
            g = DecoderGrads(
                np.zeros(decoder.W1.shape),
                np.zeros(decoder.b1.shape),
                np.zeros(decoder.W2.shape),
                np.zeros(decoder.b2.shape),
            )
            self.decoders[L - 1] = g
        return g


@dataclass
class ForwardCache:
    """Everything backward needs from one predict-style forward pass."""

    svo: SparseVoxelOctree
    Z: np.ndarray
    decoder: Decoder
    L: int
    pts: np.ndarray
    recs: list          # LevelInterp per feature level 1..L
    rows: np.ndarray    # decoded row indices
    inp: np.ndarray     # (k, 3 + m)
    pre: np.ndarray     # (k, h)
    out: np.ndarray     # (n,)


def forward(svo, Z, decoders, x, L: int) -> tuple:
    """predict plus a cache for the matching backward call."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_level(L, len(decoders))
    recs = interp_levels(svo, Z, pts, L)
    z = np.zeros((len(pts), Z.shape[1]))
    any_level = np.zeros(len(pts), dtype=bool)
    for rec in recs:
        z += rec.psi
        any_level |= rec.mask
    rows = np.flatnonzero(any_level)
    decoder = decoders[L - 1]
    inp = np.concatenate([pts[rows], z[rows]], axis=1)
    pre = inp @ decoder.W1.T.astype(np.float64) + decoder.b1.astype(np.float64)
    hidden = np.maximum(pre, 0.0)
    out = np.empty(len(pts))
    out[rows] = (hidden @ decoder.W2.T.astype(np.float64) + decoder.b2.astype(np.float64))[:, 0]
    misses = np.flatnonzero(~any_level)
    if len(misses):
        out[misses] = empty_space_value(svo, pts[misses])
    return out, ForwardCache(svo, Z, decoder, L, pts, recs, rows, inp, pre, out)


def backward(cache: ForwardCache, upstream, grads: FieldGradients | None = None) -> FieldGradients:
    """Reverse-mode partials of sum(upstream * out) w.r.t. the level-L
    decoder and every contributing corner feature. Accumulates into grads.
    """
    if not isinstance(cache, ForwardCache):
        raise OctfieldError("backward needs the cache returned by forward")
    if grads is None:
        grads = FieldGradients.zeros(cache.Z, _decoder_count(cache))
    up = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if up.shape != (len(cache.pts),):
        raise StructuralError("upstream shape does not match the forward batch")
    rows = cache.rows
    if len(rows) == 0:
        return grads
    dec = cache.decoder
    dout = up[rows]                                  # (k,)
    hidden = np.maximum(cache.pre, 0.0)
    g = grads.decoder_slot(cache.L, dec)
    g.W2 += dout[None, :] @ hidden
    g.b2 += dout.sum(keepdims=True)
    dhidden = dout[:, None] * dec.W2.astype(np.float64)
    dpre = np.where(cache.pre > 0.0, dhidden, 0.0)
    g.W1 += dpre.T @ cache.inp
    g.b1 += dpre.sum(axis=0)
    dinp = dpre @ dec.W1.astype(np.float64)
    dz = dinp[:, 3:]                                 # (k, m)
    dz_full = np.zeros((len(cache.pts), dz.shape[1]))
    dz_full[rows] = dz
    for rec in cache.recs:
        r = np.flatnonzero(rec.mask)
        if len(r) == 0:
            continue
        contrib = rec.weights[:, :, None] * dz_full[r][:, None, :]
        scatter_add_rows(grads.dZ, rec.ids.ravel(), contrib.reshape(-1, dz.shape[1]))
    return grads


def scatter_add_rows(dst: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """dst[idx] += rows with duplicate indices accumulated.

    np.add.at loops per element in Python-free but scalar fashion; grouping
    by sorted index and reducing with reduceat is far faster for row blocks.
    """
    if len(idx) == 0:
        return
    order = np.argsort(idx, kind="stable")
    idx_s = idx[order]
    rows_s = rows[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(idx_s)) + 1])
    dst[idx_s[starts]] += np.add.reduceat(rows_s, starts, axis=0)


def _decoder_count(cache: ForwardCache) -> int:
    return cache.svo.max_level
