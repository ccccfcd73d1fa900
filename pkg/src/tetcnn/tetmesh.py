"""Tetrahedral meshes: construction, TetGen I/O, geometric primitives, validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

# local edge (a, b) of a tet and the edge opposite to it
LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
LOCAL_OPPOSITE = np.array([(2, 3), (1, 3), (1, 2), (0, 3), (0, 2), (0, 1)])

DEGENERATE_RTOL = 1e-12


class MeshError(ValueError):
    pass


class DegenerateTetError(MeshError):
    def __init__(self, tet: int, message: str = "degenerate tetrahedron"):
        super().__init__(f"{message} (tet {tet})")
        self.tet = tet


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Vertices (n, 3) float64 and tets (m, 4) int64.

    The dataclass itself does not enforce geometry so that :func:`validate`
    can report on broken meshes; use :func:`make_mesh` or :func:`parse_tetgen`
    to get a checked, canonically oriented mesh.
    """

    vertices: np.ndarray
    tets: np.ndarray
    source_id: str = ""
    orientation_fixes: tuple[int, ...] = ()

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        t = np.array(self.tets, dtype=np.int64, copy=True).reshape(-1, 4)
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "tets", t)

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def m(self) -> int:
        return len(self.tets)

    def edges(self) -> np.ndarray:
        """Unique edges as an (E, 2) array with i < j, sorted lexicographically."""
        pairs = self.tets[:, LOCAL_EDGES].reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    def adjacency(self) -> "VertexAdjacency":
        return VertexAdjacency.from_mesh(self)

    def scale(self) -> float:
        """Bounding-box diagonal length, the reference length for tolerances."""
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(span))

    def total_volume(self) -> float:
        return float(np.abs(signed_volumes(self.vertices, self.tets)).sum())


@dataclass(frozen=True)
class VertexAdjacency:
    neighbors: list[np.ndarray]
    vertex_tets: list[np.ndarray]
    edge_tets: dict[tuple[int, int], list[int]] = field(repr=False)

    @classmethod
    def from_mesh(cls, mesh: TetMesh) -> "VertexAdjacency":
        n = mesh.n
        edges = mesh.edges()
        graph = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
        graph = (graph + graph.T).tocsr()
        neighbors = [graph.indices[graph.indptr[i] : graph.indptr[i + 1]].copy() for i in range(n)]
        vertex_tets: list[list[int]] = [[] for _ in range(n)]
        edge_tets: dict[tuple[int, int], list[int]] = {}
        for t, quad in enumerate(mesh.tets.tolist()):
            for v in quad:
                vertex_tets[v].append(t)
            for a, b in LOCAL_EDGES:
                key = (min(quad[a], quad[b]), max(quad[a], quad[b]))
                edge_tets.setdefault(key, []).append(t)
        return cls(neighbors, [np.array(x, dtype=np.int64) for x in vertex_tets], edge_tets)


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = vertices[tets]
    e1, e2, e3 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


def _degenerate_threshold(vertices: np.ndarray) -> float:
    span = vertices.max(axis=0) - vertices.min(axis=0)
    return DEGENERATE_RTOL * float(np.linalg.norm(span)) ** 3


def make_mesh(vertices, tets, source_id: str = "") -> TetMesh:
    """Checked constructor: indices, duplicates, degeneracy; fixes orientation."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    t = np.array(tets, dtype=np.int64).reshape(-1, 4)
    if len(v) < 4:
        raise MeshError(f"need at least 4 vertices, got {len(v)}")
    if len(t) < 1:
        raise MeshError("need at least one tetrahedron")
    if not np.all(np.isfinite(v)):
        raise MeshError("non-finite vertex coordinates")
    bad = np.flatnonzero((t < 0).any(axis=1) | (t >= len(v)).any(axis=1))
    if len(bad):
        raise MeshError(f"tet {bad[0]} has a vertex index outside [0, {len(v)})")
    srt = np.sort(t, axis=1)
    dup = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
    if len(dup):
        raise MeshError(f"tet {dup[0]} repeats a vertex index: {t[dup[0]].tolist()}")
    vol = signed_volumes(v, t)
    degenerate = np.flatnonzero(np.abs(vol) <= _degenerate_threshold(v))
    if len(degenerate):
        raise DegenerateTetError(int(degenerate[0]))
    flip = np.flatnonzero(vol < 0)
    if len(flip):
        t[flip, 2], t[flip, 3] = t[flip, 3].copy(), t[flip, 2].copy()
    return TetMesh(v, t, source_id, tuple(int(i) for i in flip))


# --------------------------------------------------------------------------- TetGen I/O


def _records(text: str) -> list[list[str]]:
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line.replace(":", " ").split())
    return out


def parse_tetgen(node_text: str, ele_text: str, source_id: str = "") -> TetMesh:
    """Parse TetGen ``.node``/``.ele`` text into a checked mesh.

    The index base (0 or 1) is taken from the first ``.node`` record and
    applied to both files. Attribute and boundary-marker columns are dropped.
    """
    nodes = _records(node_text)
    if not nodes:
        raise MeshError("empty .node file")
    try:
        n, dim = int(nodes[0][0]), int(nodes[0][1])
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed .node header: {' '.join(nodes[0])}") from exc
    if dim != 3:
        raise MeshError(f".node header declares dimension {dim}, expected 3")
    body = nodes[1:]
    if len(body) != n:
        raise MeshError(f".node header declares {n} points but {len(body)} records follow")
    base = int(body[0][0]) if body else 0
    if base not in (0, 1):
        raise MeshError(f"first point index must be 0 or 1, got {base}")
    vertices = np.empty((n, 3))
    seen = np.zeros(n, dtype=bool)
    for rec in body:
        if len(rec) < 4:
            raise MeshError(f"short .node record: {' '.join(rec)}")
        idx = int(rec[0]) - base
        if not 0 <= idx < n:
            raise MeshError(f"point index {rec[0]} out of range")
        if seen[idx]:
            raise MeshError(f"point index {rec[0]} repeated")
        seen[idx] = True
        vertices[idx] = [float(x) for x in rec[1:4]]

    eles = _records(ele_text)
    if not eles:
        raise MeshError("empty .ele file")
    try:
        m, per = int(eles[0][0]), int(eles[0][1])
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed .ele header: {' '.join(eles[0])}") from exc
    if per != 4:
        raise MeshError(f".ele header declares {per} nodes per element; only linear tets (4) supported")
    ebody = eles[1:]
    if len(ebody) != m:
        raise MeshError(f".ele header declares {m} elements but {len(ebody)} records follow")
    tets = np.empty((m, 4), dtype=np.int64)
    for k, rec in enumerate(ebody):
        if len(rec) < 5:
            raise MeshError(f"short .ele record: {' '.join(rec)}")
        quad = [int(x) - base for x in rec[1:5]]
        if any(not 0 <= q < n for q in quad):
            raise MeshError(f"element {rec[0]} references a point index out of range")
        if len(set(quad)) < 4:
            raise MeshError(f"element {rec[0]} has a duplicate vertex")
        tets[k] = quad
    return make_mesh(vertices, tets, source_id)


def format_tetgen(mesh: TetMesh) -> tuple[str, str]:
    """Serialize to (node_text, ele_text), 0-based, 17 significant digits."""
    node = [f"{mesh.n} 3 0 0"]
    node += [f"{i} {x:.17g} {y:.17g} {z:.17g}" for i, (x, y, z) in enumerate(mesh.vertices.tolist())]
    ele = [f"{mesh.m} 4 0"]
    ele += [f"{k} {a} {b} {c} {d}" for k, (a, b, c, d) in enumerate(mesh.tets.tolist())]
    return "\n".join(node) + "\n", "\n".join(ele) + "\n"


def read_tetgen(path: str | Path) -> TetMesh:
    """Read ``<stem>.node`` + ``<stem>.ele``; ``path`` may name either file or the stem."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".node", ".ele") else path
    node = Path(str(stem) + ".node").read_text()
    ele = Path(str(stem) + ".ele").read_text()
    return parse_tetgen(node, ele, source_id=stem.name)


def write_tetgen(mesh: TetMesh, stem: str | Path) -> tuple[Path, Path]:
    from .container import write_atomic

    node, ele = format_tetgen(mesh)
    stem = Path(stem)
    node_path, ele_path = Path(str(stem) + ".node"), Path(str(stem) + ".ele")
    write_atomic(node_path, node.encode())
    write_atomic(ele_path, ele.encode())
    return node_path, ele_path


# --------------------------------------------------------------------------- geometry


def tet_volume(mesh: TetMesh, t: int) -> float:
    p = mesh.vertices[mesh.tets[t]]
    vol = abs(float(np.linalg.det(np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])))) / 6.0
    if vol <= _degenerate_threshold(mesh.vertices):
        raise DegenerateTetError(t)
    return vol


def opposite_edge(tet, e) -> tuple[int, int]:
    quad = [int(x) for x in tet]
    i, j = int(e[0]), int(e[1])
    if i == j or i not in quad or j not in quad:
        raise MeshError(f"edge {(i, j)} is not an edge of tet {tuple(quad)}")
    rest = sorted(v for v in quad if v not in (i, j))
    return rest[0], rest[1]


def _cot_and_angle(pi, pj, pk, pl):
    """Dihedral angle at edge (pi, pj) between faces (i, j, k) and (i, j, l).

    Works on stacked arrays. Returns (cot, angle, sin_measure) where
    ``sin_measure`` is |u x w| of the projected vectors (0 for degenerate faces).
    """
    e = pj - pi
    ee = np.einsum("...i,...i->...", e, e)[..., None]
    u = pk - pi
    w = pl - pi
    u = u - np.einsum("...i,...i->...", u, e)[..., None] / ee * e
    w = w - np.einsum("...i,...i->...", w, e)[..., None] / ee * e
    cos_part = np.einsum("...i,...i->...", u, w)
    sin_part = np.linalg.norm(np.cross(u, w), axis=-1)
    return cos_part / sin_part, np.arctan2(sin_part, cos_part), sin_part


def dihedral_angle(mesh: TetMesh, t: int, e) -> float:
    quad = mesh.tets[t].tolist()
    k, l = opposite_edge(quad, e)
    v = mesh.vertices
    _, angle, sin_part = _cot_and_angle(v[e[0]], v[e[1]], v[k], v[l])
    if sin_part <= 1e-12 * mesh.scale() ** 2:
        raise DegenerateTetError(t, "degenerate faces at edge")
    return float(angle)


def edge_cotangent_weights(mesh: TetMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per (tet, local edge): global edge endpoints (m*6, 2) and l_opp * cot(theta_opp).

    For edge (a, b) with opposite edge (c, d), ``l_opp = |c - d|`` and
    ``theta_opp`` is the interior dihedral angle along (c, d).
    """
    v = mesh.vertices
    t = mesh.tets
    a, b = t[:, LOCAL_EDGES[:, 0]], t[:, LOCAL_EDGES[:, 1]]
    c, d = t[:, LOCAL_OPPOSITE[:, 0]], t[:, LOCAL_OPPOSITE[:, 1]]
    cot, _, sin_part = _cot_and_angle(v[c], v[d], v[a], v[b])
    bad = np.flatnonzero((sin_part <= 1e-12 * mesh.scale() ** 2).any(axis=1) | ~np.isfinite(cot).all(axis=1))
    if len(bad):
        raise DegenerateTetError(int(bad[0]), "cotangent undefined")
    length = np.linalg.norm(v[c] - v[d], axis=-1)
    ends = np.stack([a, b], axis=-1).reshape(-1, 2)
    return np.sort(ends, axis=1), (length * cot).reshape(-1)


def dihedral_angles(mesh: TetMesh) -> np.ndarray:
    """All six interior dihedral angles per tet, shape (m, 6)."""
    v, t = mesh.vertices, mesh.tets
    a, b = t[:, LOCAL_EDGES[:, 0]], t[:, LOCAL_EDGES[:, 1]]
    c, d = t[:, LOCAL_OPPOSITE[:, 0]], t[:, LOCAL_OPPOSITE[:, 1]]
    return _cot_and_angle(v[a], v[b], v[c], v[d])[1]


def min_max_normalize(mesh_or_points) -> np.ndarray:
    """Map each coordinate axis independently to [0, 1]; constant axes map to 0."""
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TetMesh) else np.asarray(mesh_or_points, float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    out = np.zeros_like(pts, dtype=np.float64)
    ok = span > 0
    out[:, ok] = (pts[:, ok] - lo[ok]) / span[ok]
    return out


# --------------------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    index_violations: list[int] = field(default_factory=list)
    duplicate_vertex_tets: list[int] = field(default_factory=list)
    degenerate_tets: list[int] = field(default_factory=list)
    negative_tets: list[int] = field(default_factory=list)
    orientation_fixes: list[int] = field(default_factory=list)
    isolated_vertices: list[int] = field(default_factory=list)
    component_count: int = 0

    @property
    def findings(self) -> list[str]:
        out = []
        if self.index_violations:
            out.append(f"{len(self.index_violations)} tets with out-of-range indices")
        if self.duplicate_vertex_tets:
            out.append(f"{len(self.duplicate_vertex_tets)} tets with repeated vertices")
        if self.degenerate_tets:
            out.append(f"{len(self.degenerate_tets)} degenerate (zero-volume) tets")
        if self.negative_tets:
            out.append(f"{len(self.negative_tets)} negatively oriented tets")
        if self.isolated_vertices:
            out.append(f"{len(self.isolated_vertices)} vertices not used by any tet")
        if self.component_count > 1:
            out.append(f"mesh has {self.component_count} connected components")
        return out

    @property
    def ok(self) -> bool:
        return not self.findings


def validate(mesh: TetMesh) -> ValidationReport:
    rep = ValidationReport(orientation_fixes=list(mesh.orientation_fixes))
    n, t = mesh.n, mesh.tets
    bad_idx = (t < 0).any(axis=1) | (t >= n).any(axis=1)
    rep.index_violations = np.flatnonzero(bad_idx).tolist()
    good = ~bad_idx
    srt = np.sort(t, axis=1)
    dup = (srt[:, 1:] == srt[:, :-1]).any(axis=1) & good
    rep.duplicate_vertex_tets = np.flatnonzero(dup).tolist()
    ok_t = good & ~dup
    if n and ok_t.any():
        ids = np.flatnonzero(ok_t)
        vol = signed_volumes(mesh.vertices, t[ids])
        thr = _degenerate_threshold(mesh.vertices)
        rep.degenerate_tets = ids[np.abs(vol) <= thr].tolist()
        rep.negative_tets = ids[vol < -thr].tolist()
    used = np.zeros(n, dtype=bool)
    tt = t[good]
    used[tt.reshape(-1)] = True
    rep.isolated_vertices = np.flatnonzero(~used).tolist()
    if len(tt):
        pairs = tt[:, LOCAL_EDGES].reshape(-1, 2)
        g = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        ncomp, labels = connected_components(g, directed=False)
        rep.component_count = len(np.unique(labels[used]))
    return rep


# --------------------------------------------------------------------------- structured meshes

# Kuhn / Freudenthal split of the unit cube into 6 tets sharing the main diagonal
_KUHN = [
    (0, 1, 3, 7),
    (0, 1, 5, 7),
    (0, 2, 3, 7),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 4, 6, 7),
]


def box_mesh(nx: int, ny: int, nz: int, size=(1.0, 1.0, 1.0), source_id: str = "box") -> TetMesh:
    """Structured box with (nx, ny, nz) vertices per axis, 6 tets per cell."""
    xs = np.linspace(0.0, size[0], nx)
    ys = np.linspace(0.0, size[1], ny)
    zs = np.linspace(0.0, size[2], nz)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * ny + j) * nz + k

    i, j, k = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    corners = np.stack(
        [vid(i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1)) for c in range(8)], axis=1
    )
    tets = np.concatenate([corners[:, list(q)] for q in _KUHN])
    return make_mesh(verts, tets, source_id)


def regular_tet(edge: float = 1.0) -> TetMesh:
    s = edge / np.sqrt(2.0)
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) * s / 2.0
    return make_mesh(v, [[0, 1, 2, 3]], "regular")


def corner_tet() -> TetMesh:
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return make_mesh(v, [[0, 1, 2, 3]], "corner")


def random_mesh(n_points: int, rng: np.random.Generator, max_tets: int | None = None, source_id: str = "random") -> TetMesh:
    """Delaunay tetrahedralization of random points (drops sliver tets)."""
    from scipy.spatial import Delaunay

    pts = rng.random((n_points, 3))
    tri = Delaunay(pts)
    tets = tri.simplices
    vol = np.abs(signed_volumes(pts, tets))
    tets = tets[vol > 1e-4 * vol.max()]
    if max_tets is not None and len(tets) > max_tets:
        # keep a connected-ish subset: tets nearest the centroid
        cent = pts[tets].mean(axis=1)
        order = np.argsort(np.linalg.norm(cent - 0.5, axis=1), kind="stable")
        tets = tets[np.sort(order[:max_tets])]
    used = np.unique(tets)
    remap = -np.ones(n_points, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return make_mesh(pts[used], remap[tets], source_id)
