"""Binary model files.

One file carries the whole multi-level model: octree topology, the shared
feature volume, and one decoder per detail level. Everything is explicit
little-endian so files move between machines; floats are stored in 32 bits.
Loading with max_lod set keeps only levels up to that depth, which is how
storage-versus-quality comparisons are run without retraining.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, FormatError
from .field import Decoder, NeuralField
from .geometry import DOMAIN_MIN, DOMAIN_MAX
from .octree import (
    Aabb,
    OctreeLevel,
    SparseVoxelOctree,
    cell_origin,
    morton_decode,
)

MAGIC = b"NGLD"
VERSION = 1

_SPAN = DOMAIN_MAX - DOMAIN_MIN


def _counts(fld: NeuralField) -> list:
    return [fld.svo.voxel_count(ell) for ell in range(fld.max_level + 1)]


def serialized_bytes(fld: NeuralField) -> int:
    """Exact size of save_model's output for this model."""
    svo = fld.svo
    counts = _counts(fld)
    n = len(MAGIC) + 5 * 4                      # magic + version, r0, L_max, m, h
    n += 8 * (len(counts) + 1)                  # voxel counts + corner count
    n += 8 * sum(counts)                        # codes
    n += 4 * sum(counts[1:])                    # parents
    n += 4 * 8 * sum(counts[1:])                # corner tables
    n += 4 * svo.corner_count * fld.feature_dim
    h, width = fld.decoders[0].W1.shape
    n += 4 * fld.max_level * (h * width + h + h + 1)
    return n


def save_model(path, fld: NeuralField) -> None:
    """Write the model; float64 working parameters are cast down to f32."""
    svo = fld.svo
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        head = np.array(
            [VERSION, svo.r0, svo.max_level, fld.feature_dim, fld.hidden_dim],
            dtype="<u4",
        )
        fh.write(head.tobytes())
        fh.write(np.array(_counts(fld), dtype="<u8").tobytes())
        fh.write(np.array([svo.corner_count], dtype="<u8").tobytes())
        for lv in svo.levels:
            fh.write(lv.codes.astype("<u8").tobytes())
        for lv in svo.levels[1:]:
            fh.write(lv.parents.astype("<u4").tobytes())
        for lv in svo.levels[1:]:
            fh.write(lv.corners.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(fld.Z, dtype="<f4").tobytes())
        for dec in fld.decoders:
            for arr in (dec.W1, dec.b1, dec.W2, dec.b2):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        end = self.pos + dt.itemsize * count
        if end > len(self.buf):
            raise FormatError("model file is truncated")
        out = np.frombuffer(self.buf, dtype=dt, count=count, offset=self.pos)
        self.pos = end
        return out


def _region_of(codes: np.ndarray, res: int) -> Aabb:
    ijk = morton_decode(codes)
    origins = cell_origin(ijk, res)
    return Aabb(origins.min(axis=0), (origins + _SPAN / res).max(axis=0))


def load_model(path, max_lod: int | None = None) -> NeuralField:
    """Read a model file, optionally keeping only levels 1..max_lod.

    Truncation drops finer levels, their decoders, and the feature rows
    only they referenced; the region box is recomputed from the new finest
    level.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError("not a model file (bad magic)")
    r = _Reader(buf)
    r.pos = 4
    version, r0, max_level, m, h = (int(v) for v in r.take("<u4", 5))
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}")
    counts = r.take("<u8", max_level + 1).astype(np.int64)
    corner_count = int(r.take("<u8", 1)[0])

    codes = [r.take("<u8", int(c)).astype(np.uint64) for c in counts]
    parents = [r.take("<u4", int(c)).astype(np.int32) for c in counts[1:]]
    corners = [
        r.take("<u4", int(c) * 8).astype(np.int32).reshape(-1, 8) for c in counts[1:]
    ]
    Z = r.take("<f4", corner_count * m).astype(np.float32).reshape(corner_count, m)
    decoders = []
    for _ in range(max_level):
        W1 = r.take("<f4", h * (3 + m)).astype(np.float32).reshape(h, 3 + m)
        b1 = r.take("<f4", h).astype(np.float32)
        W2 = r.take("<f4", h).astype(np.float32).reshape(1, h)
        b2 = r.take("<f4", 1).astype(np.float32)
        decoders.append(Decoder(W1, b1, W2, b2))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after model data")

    for cs in codes:
        if len(cs) == 0 or np.any(np.diff(cs.astype(np.int64)) <= 0):
            raise FormatError("level codes must be strictly ascending")

    if max_lod is not None:
        if not 1 <= max_lod <= max_level:
            raise ConfigError(f"max_lod must be in [1, {max_level}]")
        if max_lod < max_level:
            corner_count = int(corners[max_lod].min())  # start of the first dropped block
            codes = codes[: max_lod + 1]
            parents = parents[:max_lod]
            corners = corners[:max_lod]
            Z = Z[:corner_count]
            decoders = decoders[:max_lod]
            max_level = max_lod

    levels = [OctreeLevel(codes[0], np.full(len(codes[0]), -1, np.int32), None)]
    offsets = np.zeros(max_level + 1, dtype=np.int64)
    for ell in range(1, max_level + 1):
        levels.append(OctreeLevel(codes[ell], parents[ell - 1], corners[ell - 1]))
        offsets[ell] = int(corners[ell - 1].min())

    steps = int(np.log2(r0))
    virtual = [
        np.unique(codes[0] >> np.uint64(3 * (steps - s))) for s in range(steps)
    ]
    svo = SparseVoxelOctree(
        r0=r0,
        max_level=max_level,
        levels=levels,
        corner_count=corner_count,
        corner_offsets=offsets,
        region=_region_of(codes[max_level], r0 << max_level),
        virtual_codes=virtual,
    )
    return NeuralField(svo, Z, decoders)
