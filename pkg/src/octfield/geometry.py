"""Ground-truth signed distance sources.

Analytic primitives and CSG composites are evaluated in closed form anywhere
inside the domain box B = [-1, 1]^3. Triangle meshes get an unsigned distance
from exact point-triangle tests (brute force, with an optional uniform-grid
accelerator for larger meshes) and a sign from a fixed set of jittered
stabbing rays with a per-ray crossing-parity majority vote.

CSG distances from min/max combinations are correct near the surface but may
be only a lower bound elsewhere; callers that need a metric field should stick
to primitives. Meshes are expected to be clean and watertight-ish; internal
triangles are not removed and non-manifold input is not repaired.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, SceneError, StructuralError

DOMAIN_MIN = -1.0
DOMAIN_MAX = 1.0

_PRIMITIVES = {"sphere", "box", "torus", "plane"}
_COMBINATORS = {"union", "intersection", "difference", "smooth-union"}

# Stabbing directions: the 8 cube-corner diagonals, each nudged by a fixed
# pseudo-random offset so that axis-aligned mesh edges are never hit exactly.
_STAB_COUNT = 8
_STAB_SEED = 20201

_EPS_PARALLEL = 1e-12
_EPS_RAY_T = 1e-9


@dataclass(frozen=True)
class AnalyticSdf:
    """A node in an analytic CSG tree.

    kind is one of sphere, box, torus, plane, union, intersection,
    difference, smooth-union. params holds the primitive's numbers
    (radius, half extents, plane coefficients, blend factor) and children
    holds the operand subtrees for combinators.
    """

    kind: str
    params: tuple = ()
    children: tuple = ()

    def __post_init__(self):
        _validate_node(self)


def _validate_node(node: AnalyticSdf) -> None:
    if node.kind not in _PRIMITIVES | _COMBINATORS:
        raise StructuralError(f"unknown sdf kind {node.kind!r}")
    if not all(np.isfinite(p) for p in node.params):
        raise StructuralError(f"{node.kind}: parameters must be finite")
    if node.kind in _PRIMITIVES:
        if node.children:
            raise StructuralError(f"{node.kind} takes no children")
        want = {"sphere": 1, "box": 3, "torus": 2, "plane": 4}[node.kind]
        if len(node.params) != want:
            raise StructuralError(
                f"{node.kind} takes {want} parameters, got {len(node.params)}"
            )
        if node.kind in ("sphere", "torus", "box") and min(node.params) <= 0.0:
            raise StructuralError(f"{node.kind}: size parameters must be positive")
        if node.kind == "plane" and np.linalg.norm(node.params[:3]) == 0.0:
            raise StructuralError("plane: zero normal")
    else:
        arity = 2
        if len(node.children) != arity:
            raise StructuralError(
                f"{node.kind} takes {arity} children, got {len(node.children)}"
            )
        if node.kind == "smooth-union":
            if len(node.params) != 1 or node.params[0] <= 0.0:
                raise StructuralError("smooth-union needs a positive blend factor")
        elif node.params:
            raise StructuralError(f"{node.kind} takes no parameters")


def sphere(radius: float) -> AnalyticSdf:
    return AnalyticSdf("sphere", (float(radius),))


def box(hx: float, hy: float, hz: float) -> AnalyticSdf:
    return AnalyticSdf("box", (float(hx), float(hy), float(hz)))


def torus(major: float, minor: float) -> AnalyticSdf:
    """Torus around the y axis: ring radius major, tube radius minor."""
    return AnalyticSdf("torus", (float(major), float(minor)))


def plane(nx: float, ny: float, nz: float, offset: float) -> AnalyticSdf:
    n = np.array([nx, ny, nz], dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        raise StructuralError("plane: zero normal")
    n = n / norm
    return AnalyticSdf("plane", (float(n[0]), float(n[1]), float(n[2]), float(offset)))


def union(a: AnalyticSdf, b: AnalyticSdf) -> AnalyticSdf:
    return AnalyticSdf("union", (), (a, b))


def intersection(a: AnalyticSdf, b: AnalyticSdf) -> AnalyticSdf:
    return AnalyticSdf("intersection", (), (a, b))


def difference(a: AnalyticSdf, b: AnalyticSdf) -> AnalyticSdf:
    """a minus b."""
    return AnalyticSdf("difference", (), (a, b))


def smooth_union(a: AnalyticSdf, b: AnalyticSdf, k: float) -> AnalyticSdf:
    return AnalyticSdf("smooth-union", (float(k),), (a, b))


def eval_analytic(sdf: AnalyticSdf, x) -> np.ndarray:
    """Evaluate the signed distance of an analytic CSG tree.

    Accepts a single 3-vector or an (n, 3) array; returns a scalar or (n,)
    array of float64 distances. Negative inside.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise StructuralError("query points must be 3-vectors")
    if not np.all(np.isfinite(pts)):
        raise StructuralError("query points must be finite")
    d = _eval_node(sdf, pts)
    return float(d[0]) if single else d


def _eval_node(node: AnalyticSdf, pts: np.ndarray) -> np.ndarray:
    kind = node.kind
    if kind == "sphere":
        return np.linalg.norm(pts, axis=-1) - node.params[0]
    if kind == "box":
        half = np.asarray(node.params)
        q = np.abs(pts) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    if kind == "torus":
        major, minor = node.params
        ring = np.hypot(pts[:, 0], pts[:, 2]) - major
        return np.hypot(ring, pts[:, 1]) - minor
    if kind == "plane":
        n = np.asarray(node.params[:3])
        return pts @ n - node.params[3]
    a = _eval_node(node.children[0], pts)
    b = _eval_node(node.children[1], pts)
    if kind == "union":
        return np.minimum(a, b)
    if kind == "intersection":
        return np.maximum(a, b)
    if kind == "difference":
        return np.maximum(a, -b)
    # smooth-union: polynomial smooth-min of the two operands
    k = node.params[0]
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * h - k * h * (1.0 - h)


# ---------------------------------------------------------------------------
# scene files
#
# Shapes are described as nested s-expressions, one form per tree:
#
#   (sphere 0.5)
#   (box 0.6 0.4 0.4)
#   (torus 0.5 0.2)
#   (plane 0 1 0 -0.25)
#   (union A B) (intersection A B) (difference A B)
#   (smooth-union A B k)
#
# Numbers are plain floats; whitespace and ; line comments are ignored.
# ---------------------------------------------------------------------------


def parse_scene(text: str) -> AnalyticSdf:
    """Parse a scene description into an AnalyticSdf tree."""
    stripped = re.sub(r";[^\n]*", "", text)
    tokens = re.findall(r"\(|\)|[^\s()]+", stripped)
    if not tokens:
        raise SceneError("empty scene description")
    tree, rest = _parse_form(tokens, 0)
    if rest != len(tokens):
        raise SceneError("trailing tokens after the top-level form")
    return tree


def _parse_form(tokens, i):
    if tokens[i] != "(":
        raise SceneError(f"expected '(' at token {i}, got {tokens[i]!r}")
    i += 1
    if i >= len(tokens) or tokens[i] in "()":
        raise SceneError("form is missing a shape name")
    kind = tokens[i]
    i += 1
    params = []
    children = []
    while i < len(tokens) and tokens[i] != ")":
        if tokens[i] == "(":
            child, i = _parse_form(tokens, i)
            children.append(child)
        else:
            try:
                params.append(float(tokens[i]))
            except ValueError:
                raise SceneError(f"expected a number, got {tokens[i]!r}") from None
            i += 1
    if i >= len(tokens):
        raise SceneError("unbalanced parentheses")
    try:
        node = AnalyticSdf(kind, tuple(params), tuple(children))
    except StructuralError as exc:
        raise SceneError(str(exc)) from None
    return node, i + 1


def format_scene(node: AnalyticSdf) -> str:
    parts = [node.kind]
    parts += [repr(float(p)) for p in node.params]
    parts += [format_scene(c) for c in node.children]
    return "(" + " ".join(parts) + ")"


# ---------------------------------------------------------------------------
# triangle meshes
# ---------------------------------------------------------------------------


@dataclass
class TriangleMesh:
    """Indexed triangle soup. vertices (n, 3) float64, triangles (t, 3) int64."""

    vertices: np.ndarray
    triangles: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise StructuralError("vertices must be (n, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise StructuralError("triangles must be (t, 3)")
        if len(self.triangles) == 0:
            raise StructuralError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise StructuralError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise StructuralError("vertices must be finite")

    def corners(self):
        """The three (t, 3) corner arrays of every triangle."""
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def load_obj(path) -> TriangleMesh:
    """Load an ASCII OBJ file. Only v and f records are used; polygons are
    fan-triangulated; texture/normal slots in f tokens are ignored."""
    verts = []
    tris = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: short vertex record")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    raw = tok.split("/")[0]
                    j = int(raw)
                    idx.append(j - 1 if j > 0 else len(verts) + j)
                if len(idx) < 3:
                    raise FormatError(f"{path}:{lineno}: face with <3 vertices")
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
    if not tris:
        raise StructuralError(f"{path}: no faces found")
    return TriangleMesh(np.array(verts), np.array(tris))


def normalize_mesh(mesh: TriangleMesh, margin: float = 0.1) -> TriangleMesh:
    """Uniformly scale and translate so the bounding box fits inside the
    domain box shrunk by margin. The longest axis spans the full reduced
    extent; the others are centered."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = (hi - lo).max()
    if extent <= 0.0:
        raise StructuralError("mesh has zero extent")
    scale = 2.0 * (1.0 - margin) / extent
    center = 0.5 * (lo + hi)
    verts = (mesh.vertices - center) * scale
    return TriangleMesh(verts, mesh.triangles.copy(), normalized=True)


def closest_point_on_triangles(p: np.ndarray, a, b, c) -> np.ndarray:
    """Exact closest point on each triangle (a[i], b[i], c[i]) to p[i].

    All inputs are (n, 3); pairs are matched row-wise. Uses the standard
    barycentric region classification.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom

    on_ab = a + t_ab[:, None] * ab
    on_ac = a + t_ac[:, None] * ac
    on_bc = b + t_bc[:, None] * (c - b)
    on_face = a + v_face[:, None] * ab + w_face[:, None] * ac

    conds = [
        (d1 <= 0) & (d2 <= 0),                      # vertex a
        (d3 >= 0) & (d4 <= d3),                     # vertex b
        (d6 >= 0) & (d5 <= d6),                     # vertex c
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),          # edge ab
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),          # edge ac
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),  # edge bc
    ]
    picks = [a, b, c, on_ab, on_ac, on_bc]
    out = on_face.copy()
    remaining = np.ones(len(p), dtype=bool)
    for cond, pick in zip(conds, picks):
        take = cond & remaining
        out[take] = pick[take]
        remaining &= ~cond
    # degenerate triangles: the face formula divides by ~0, fall back to the
    # best edge/vertex candidate
    bad = remaining & ~np.isfinite(out).all(axis=1)
    if np.any(bad):
        cands = np.stack([a[bad], b[bad], c[bad]], axis=1)
        d = np.linalg.norm(cands - p[bad][:, None, :], axis=2)
        out[bad] = cands[np.arange(bad.sum()), d.argmin(axis=1)]
    return out


class MeshDistanceGrid:
    """Uniform-grid accelerator for nearest-triangle queries.

    Cells bucket triangle ids by overlap of the triangle's bounding box.
    Queries expand cell shells around the query point and stop once every
    unvisited cell is provably farther than the best exact distance found.
    """

    def __init__(self, mesh: TriangleMesh, resolution: int | None = None):
        self.mesh = mesh
        a, b, c = mesh.corners()
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        self.bbox_lo = lo.min(axis=0)
        span = np.maximum(hi.max(axis=0) - self.bbox_lo, 1e-9)
        if resolution is None:
            resolution = int(np.clip(round(len(mesh.triangles) ** (1.0 / 3.0)) * 2, 4, 64))
        self.res = resolution
        self.cell = span / resolution
        lo_cells = self._cell_of(lo)
        hi_cells = self._cell_of(hi)
        buckets = [[] for _ in range(resolution ** 3)]
        for t in range(len(mesh.triangles)):
            x0, y0, z0 = lo_cells[t]
            x1, y1, z1 = hi_cells[t]
            for ix in range(x0, x1 + 1):
                for iy in range(y0, y1 + 1):
                    for iz in range(z0, z1 + 1):
                        buckets[(ix * resolution + iy) * resolution + iz].append(t)
        counts = np.array([len(bk) for bk in buckets], dtype=np.int64)
        self.start = np.concatenate([[0], np.cumsum(counts)])
        self.ids = (
            np.concatenate([np.array(bk, dtype=np.int64) for bk in buckets if bk])
            if counts.sum()
            else np.zeros(0, dtype=np.int64)
        )

    def _cell_of(self, pts):
        f = (pts - self.bbox_lo) / self.cell
        return np.clip(f.astype(np.int64), 0, self.res - 1)

    def _shell_ids(self, cx, cy, cz, ring):
        n = self.res
        out = []
        x0, x1 = cx - ring, cx + ring
        y0, y1 = cy - ring, cy + ring
        z0, z1 = cz - ring, cz + ring
        for ix in range(max(x0, 0), min(x1, n - 1) + 1):
            for iy in range(max(y0, 0), min(y1, n - 1) + 1):
                for iz in range(max(z0, 0), min(z1, n - 1) + 1):
                    if ring and not (ix in (x0, x1) or iy in (y0, y1) or iz in (z0, z1)):
                        continue  # interior of the cube was a previous shell
                    k = (ix * n + iy) * n + iz
                    s, e = self.start[k], self.start[k + 1]
                    if e > s:
                        out.append(self.ids[s:e])
        if not out:
            return None
        return np.unique(np.concatenate(out))

    def nearest(self, point):
        """Exact (distance, nearest point) to the mesh from one query point."""
        a, b, c = self.mesh.corners()
        cx, cy, cz = self._cell_of(np.asarray(point)[None, :])[0]
        min_edge = float(self.cell.min())
        best = np.inf
        best_pt = None
        for ring in range(self.res + 1):
            # a cell on this ring is at least (ring - 1) whole cells away
            if best < max(ring - 1, 0) * min_edge:
                break
            ids = self._shell_ids(cx, cy, cz, ring)
            if ids is None:
                continue
            p = np.broadcast_to(point, (len(ids), 3))
            cl = closest_point_on_triangles(p, a[ids], b[ids], c[ids])
            d = np.linalg.norm(cl - point, axis=1)
            j = d.argmin()
            if d[j] < best:
                best = float(d[j])
                best_pt = cl[j]
        return best, best_pt


def mesh_unsigned_distance(mesh: TriangleMesh, x, grid: MeshDistanceGrid | None = None):
    """Unsigned distance from each query point to the mesh surface.

    Returns (distances (n,), nearest points (n, 3)). Brute force over all
    triangles in memory-bounded chunks; if a grid accelerator is supplied,
    each point only tests the triangles its shell search reaches.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a, b, c = mesh.corners()
    n = len(pts)
    dist = np.empty(n)
    nearest = np.empty((n, 3))
    if grid is not None:
        for i in range(n):
            dist[i], nearest[i] = grid.nearest(pts[i])
        return dist, nearest
    t = len(mesh.triangles)
    chunk = max(1, int(4e6) // t)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        block = pts[s:e]
        k = e - s
        p = np.repeat(block, t, axis=0)
        cl = closest_point_on_triangles(
            p, np.tile(a, (k, 1)), np.tile(b, (k, 1)), np.tile(c, (k, 1))
        )
        d = np.linalg.norm(cl - p, axis=1).reshape(k, t)
        j = d.argmin(axis=1)
        dist[s:e] = d[np.arange(k), j]
        nearest[s:e] = cl.reshape(k, t, 3)[np.arange(k), j]
    return dist, nearest


def stabbing_directions(count: int = _STAB_COUNT, seed: int = _STAB_SEED) -> np.ndarray:
    """Fixed jittered ray directions for sign classification."""
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=np.float64,
    )
    rng = np.random.default_rng(seed)
    base = corners[np.arange(count) % 8]
    dirs = base + 0.15 * rng.standard_normal((count, 3))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def mesh_sign(mesh: TriangleMesh, x, dirs: np.ndarray | None = None):
    """Inside/outside classification by ray stabbing.

    Casts the fixed direction set from every query point, counts triangle
    crossings per ray, and takes a majority vote over per-ray parity.
    Returns (signs (n,) float64 with -1 inside / +1 outside, ambiguous (n,)
    bool set where the vote was tied; tied points are reported outside).
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if dirs is None:
        dirs = stabbing_directions()
    a, b, c = mesh.corners()
    e1 = b - a
    e2 = c - a
    degenerate = np.linalg.norm(np.cross(e1, e2), axis=1) < 1e-14
    keep = ~degenerate
    a, e1, e2 = a[keep], e1[keep], e2[keep]
    t = len(a)
    if t == 0:
        raise StructuralError("mesh has only degenerate triangles")
    n = len(pts)
    odd = np.zeros((n, len(dirs)), dtype=bool)
    chunk = max(1, int(2e6) // t)
    for di, u in enumerate(dirs):
        pvec = np.cross(u, e2)                      # (t, 3)
        det = np.einsum("ij,ij->i", e1, pvec)       # (t,)
        ok = np.abs(det) > _EPS_PARALLEL
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        for s in range(0, n, chunk):
            e = min(n, s + chunk)
            tvec = pts[s:e, None, :] - a[None, :, :]            # (k, t, 3)
            uu = np.einsum("ktj,tj->kt", tvec, pvec) * inv_det
            qvec = np.cross(tvec, e1[None, :, :])
            vv = (qvec @ u) * inv_det
            tt = np.einsum("ktj,tj->kt", qvec, e2) * inv_det
            hit = ok & (uu >= 0.0) & (vv >= 0.0) & (uu + vv <= 1.0) & (tt > _EPS_RAY_T)
            odd[s:e, di] = (hit.sum(axis=1) & 1).astype(bool)
    votes = odd.sum(axis=1)
    half = len(dirs) / 2.0
    signs = np.where(votes > half, -1.0, 1.0)
    ambiguous = votes == half
    return signs, ambiguous


# ---------------------------------------------------------------------------
# oracle wrappers: a uniform "signed distance at points" interface for the
# sampler, the octree builder, and the trainer
# ---------------------------------------------------------------------------


class AnalyticOracle:
    """Signed distance oracle backed by an analytic CSG tree."""

    kind = "analytic"

    def __init__(self, sdf: AnalyticSdf):
        self.sdf = sdf

    def __call__(self, pts) -> np.ndarray:
        return eval_analytic(self.sdf, pts)


class MeshOracle:
    """Signed distance oracle backed by a normalized triangle mesh.

    use_grid enables the uniform-grid accelerator; the brute-force path is
    the reference and remains available by passing use_grid=False.
    """

    kind = "mesh"

    def __init__(self, mesh: TriangleMesh, use_grid: bool | None = None):
        if not mesh.normalized:
            mesh = normalize_mesh(mesh)
        self.mesh = mesh
        if use_grid is None:
            use_grid = len(mesh.triangles) > 2048
        self.grid = MeshDistanceGrid(mesh) if use_grid else None
        self._dirs = stabbing_directions()

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        dist, _ = mesh_unsigned_distance(self.mesh, pts, self.grid)
        signs, _ = mesh_sign(self.mesh, pts, self._dirs)
        return dist * signs

    def unsigned(self, pts) -> np.ndarray:
        dist, _ = mesh_unsigned_distance(self.mesh, np.atleast_2d(pts), self.grid)
        return dist


def make_oracle(source) -> AnalyticOracle | MeshOracle:
    if isinstance(source, AnalyticSdf):
        return AnalyticOracle(source)
    if isinstance(source, TriangleMesh):
        return MeshOracle(source)
    raise StructuralError(f"cannot build an oracle from {type(source).__name__}")
