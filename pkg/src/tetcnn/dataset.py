"""Synthetic tetrahedral shells, dataset manifests and the operator/hierarchy cache."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import container
from . import rng as rng_mod
from .coarsen import Hierarchy, HierarchyError, Level, build_hierarchy
from .lbo import OperatorPair, assemble_operator
from .tetmesh import MeshError, TetMesh, make_mesh, read_tetgen, validate, write_tetgen

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "tetcnn-manifest"
MANIFEST_VERSION = 1
CACHE_VERSION = 1


class ShellGenerationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- shell geometry


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere: (vertices, faces) after ``subdivisions`` 4:1 splits."""
    t = (1.0 + 5.0**0.5) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        nf = len(f)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = inv[:nf] + len(v), inv[nf : 2 * nf] + len(v), inv[2 * nf :] + len(v)
        v = np.vstack([v, mid])
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    return v, f


@dataclass(frozen=True)
class Anomaly:
    direction: tuple[float, float, float]
    angular_radius: float  # radians
    multiplier: float


@dataclass(frozen=True)
class ShellSpec:
    radius: float = 1.0
    thickness: float = 0.2
    thickness_noise: float = 0.1  # relative amplitude of the smooth field
    jitter: float = 0.0  # radial vertex perturbation, absolute length
    subdivision: int = 3
    anomaly: Anomaly | None = None
    seed: int = 0

    def __post_init__(self):
        if self.thickness <= 0 or self.radius <= 0:
            raise ValueError("radius and thickness must be positive")
        if self.subdivision < 1:
            raise ValueError("subdivision must be >= 1")
        if self.anomaly is not None and self.anomaly.multiplier <= 0:
            raise ValueError("anomaly multiplier must be positive")


@dataclass(frozen=True, eq=False)
class ShellGeometry:
    directions: np.ndarray  # (s, 3) unit sphere points
    faces: np.ndarray  # (f, 3)
    inner: np.ndarray
    outer: np.ndarray
    thickness: np.ndarray  # per surface vertex
    in_anomaly: np.ndarray  # per surface vertex, bool


def _smooth_field(directions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random mixture of real spherical harmonics of degree 1 and 2, max |.| = 1."""
    x, y, z = directions.T
    basis = np.stack([x, y, z, x * y, y * z, z * x, x * x - y * y, 3 * z * z - 1.0], axis=1)
    field_ = basis @ rng.standard_normal(basis.shape[1])
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def shell_geometry(spec: ShellSpec) -> ShellGeometry:
    dirs, faces = icosphere(spec.subdivision)
    rng = rng_mod.stream(spec.seed, "generation")
    noise = _smooth_field(dirs, rng)
    jitter = rng.uniform(-1.0, 1.0, len(dirs)) * spec.jitter
    thickness = spec.thickness * (1.0 + spec.thickness_noise * noise)
    in_anom = np.zeros(len(dirs), dtype=bool)
    if spec.anomaly is not None:
        c = np.asarray(spec.anomaly.direction, float)
        c /= np.linalg.norm(c)
        in_anom = dirs @ c >= np.cos(spec.anomaly.angular_radius)
        if spec.anomaly.multiplier != 1.0:
            thickness = np.where(in_anom, thickness * spec.anomaly.multiplier, thickness)
    if np.any(thickness <= 0):
        raise ShellGenerationError("non-positive thickness; reduce thickness_noise")
    r_in = spec.radius + jitter
    if np.any(r_in <= 0):
        raise ShellGenerationError("vertex jitter collapses the inner surface")
    inner = dirs * r_in[:, None]
    outer = dirs * (r_in + thickness)[:, None]
    return ShellGeometry(dirs, faces, inner, outer, thickness, in_anom)


def prism_tets(faces: np.ndarray, n_surface: int) -> np.ndarray:
    """Split each prism (inner face a<b<c, outer a'<b'<c') into 3 tets.

    The shared quad diagonal always joins the larger inner index to the
    smaller outer index, so neighbouring prisms agree on it.
    """
    f = np.sort(faces, axis=1)
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    A, B, C = a + n_surface, b + n_surface, c + n_surface
    return np.concatenate([np.stack([a, b, c, A], 1), np.stack([b, c, A, B], 1), np.stack([c, A, B, C], 1)])


def generate_shell(spec: ShellSpec, source_id: str = "shell") -> TetMesh:
    geo = shell_geometry(spec)
    verts = np.vstack([geo.inner, geo.outer])
    try:
        mesh = make_mesh(verts, prism_tets(geo.faces, len(geo.inner)), source_id)
    except MeshError as exc:
        raise ShellGenerationError(f"shell self-intersects or degenerates: {exc}") from exc
    if mesh.orientation_fixes:
        # re-emit with canonical orientation so validate() has nothing to report
        mesh = TetMesh(mesh.vertices, mesh.tets, source_id)
    return mesh


def anomaly_vertex_mask(spec: ShellSpec) -> np.ndarray:
    """Anomaly membership for all 2s shell vertices (inner then outer)."""
    geo = shell_geometry(spec)
    return np.concatenate([geo.in_anomaly, geo.in_anomaly])


def cap_radius_for_fraction(volume_fraction: float, multiplier: float) -> float:
    """Angular radius of a cap holding ``volume_fraction`` of a thin shell's volume."""
    area = volume_fraction / (multiplier - volume_fraction * (multiplier - 1.0))
    return float(np.arccos(1.0 - 2.0 * area))


def analytic_shell_volume(radius: float, thickness: float) -> float:
    return 4.0 * np.pi / 3.0 * ((radius + thickness) ** 3 - radius**3)


# --------------------------------------------------------------------------- manifests


@dataclass
class SampleRecord:
    id: str
    mesh: str  # stem relative to the manifest directory
    label: int | None = None
    target: float | None = None
    split: str = "cv"
    mesh_sha256: str = ""
    spec: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    task: str
    records: list[SampleRecord]
    config: dict
    root: Path = Path(".")
    version: int = MANIFEST_VERSION

    def mesh_path(self, rec: SampleRecord) -> Path:
        return self.root / rec.mesh

    def labels(self) -> np.ndarray:
        if self.task == "classify":
            return np.array([r.label for r in self.records], dtype=np.int64)
        return np.array([r.target for r in self.records], dtype=np.float64)

    def to_text(self) -> str:
        head = {"format": MANIFEST_FORMAT, "version": self.version, "task": self.task, "config": self.config}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        container.write_atomic(path, self.to_text().encode())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        head = json.loads(lines[0])
        if head.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: not a dataset manifest")
        if head.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {head.get('version')}")
        records = [SampleRecord(**json.loads(ln)) for ln in lines[1:]]
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{path}: duplicate record ids")
        return cls(head["task"], records, head.get("config", {}), path.parent)


def _file_sha(stem: Path) -> str:
    h = hashlib.sha256()
    for ext in (".node", ".ele"):
        h.update(Path(str(stem) + ext).read_bytes())
    return h.hexdigest()


def _spec_dict(spec: ShellSpec) -> dict:
    d = asdict(spec)
    return json.loads(json.dumps(d))


# class-conditional defaults: label 1 = thinned shell
CLASSIFY_THICKNESS = {0: 0.25, 1: 0.15}
ANOMALY_DIRECTION = (1.0, 1.0, 1.0)


def dataset_specs(task: str, per_class: int, seed: int, variant: str = "thickness", subdivision: int = 3,
                  radius: float = 1.0, thickness_noise: float = 0.1, jitter: float = 0.01,
                  anomaly_fraction: float = 0.05, anomaly_multiplier: float = 1.8) -> list[tuple[str, ShellSpec, int | None]]:
    """Per-sample (id, spec, label) triples; labels are None for regression."""
    rng = rng_mod.stream(seed, "generation", 0)
    out = []
    if task == "classify":
        for label in (0, 1):
            for i in range(per_class):
                sid = f"c{label}_{i:04d}"
                s = rng_mod.derive_seed(seed, "generation", 1, label, i)
                if variant == "thickness":
                    spec = ShellSpec(radius, CLASSIFY_THICKNESS[label] * radius, thickness_noise, jitter * radius, subdivision, None, s)
                elif variant == "anomaly":
                    anom = None
                    if label == 1:
                        rho = cap_radius_for_fraction(anomaly_fraction, anomaly_multiplier)
                        anom = Anomaly(ANOMALY_DIRECTION, rho, anomaly_multiplier)
                    spec = ShellSpec(radius, 0.2 * radius, thickness_noise, jitter * radius, subdivision, anom, s)
                else:
                    raise ValueError(f"unknown dataset variant {variant!r}")
                out.append((sid, spec, label))
    elif task == "regress":
        means = rng.uniform(0.10, 0.30, per_class)
        for i in range(per_class):
            s = rng_mod.derive_seed(seed, "generation", 2, i)
            spec = ShellSpec(radius, float(means[i]) * radius, thickness_noise, jitter * radius, subdivision, None, s)
            out.append((f"r_{i:04d}", spec, None))
    else:
        raise ValueError(f"unknown task {task!r}")
    return out


def generate_dataset(out_dir: str | Path, task: str, per_class: int, seed: int, **kw) -> DatasetManifest:
    """Write meshes (TetGen format) and ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "meshes").mkdir(parents=True, exist_ok=True)
    records = []
    for sid, spec, label in dataset_specs(task, per_class, seed, **kw):
        try:
            mesh = generate_shell(spec, sid)
        except ShellGenerationError as exc:
            raise ShellGenerationError(f"{sid}: {exc}") from exc
        stem = out_dir / "meshes" / sid
        write_tetgen(mesh, stem)
        target = None
        if task == "regress":
            target = float(shell_geometry(spec).thickness.mean())
        records.append(SampleRecord(sid, f"meshes/{sid}", label, target, "cv", _file_sha(stem), _spec_dict(spec)))
    config = {"task": task, "per_class": per_class, "seed": seed, **{k: v for k, v in kw.items()}}
    manifest = DatasetManifest(task, records, config, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def spec_from_dict(d: dict) -> ShellSpec:
    anom = d.get("anomaly")
    anom = Anomaly(tuple(anom["direction"]), anom["angular_radius"], anom["multiplier"]) if anom else None
    return ShellSpec(d["radius"], d["thickness"], d["thickness_noise"], d["jitter"], d["subdivision"], anom, d["seed"])


# --------------------------------------------------------------------------- operator / hierarchy cache


def _csr_arrays(prefix: str, S: sp.csr_matrix) -> dict[str, np.ndarray]:
    return {f"{prefix}.indptr": S.indptr.astype(np.int64), f"{prefix}.indices": S.indices.astype(np.int64),
            f"{prefix}.data": S.data.astype(np.float64)}


def save_cache(path: str | Path, hierarchy: Hierarchy, meta: dict) -> None:
    arrays: dict[str, np.ndarray] = {}
    lam, ns, fakes = [], [], []
    for i, lv in enumerate(hierarchy.levels):
        arrays.update(_csr_arrays(f"L{i}.S", lv.op.S))
        arrays[f"L{i}.mass"] = lv.op.mass
        arrays[f"L{i}.perm"] = lv.perm
        if lv.parents is not None:
            arrays[f"L{i}.parents"] = lv.parents
        lam.append(lv.op.lambda_max)
        ns.append(lv.n)
        fakes.append(lv.n_fake)
    op0 = hierarchy.levels[0].op
    header = {"n": op0.n, "nnz": op0.nnz, "operator": op0.kind, "lumping": op0.lumping,
              "lambda_max": lam, "levels": hierarchy.depth, "level_sizes": ns, "fake_counts": fakes, **meta}
    container.save(path, "operator-cache", header, arrays, CACHE_VERSION)


def load_cache(path: str | Path) -> tuple[Hierarchy, dict]:
    _, version, header, arrays = container.load(path, "operator-cache")
    if version != CACHE_VERSION:
        raise container.ContainerError(path, f"unsupported cache version {version}")
    levels = []
    depth = header["levels"]
    for i in range(depth + 1):
        n = header["level_sizes"][i]
        S = sp.csr_matrix((arrays[f"L{i}.S.data"], arrays[f"L{i}.S.indices"], arrays[f"L{i}.S.indptr"]), shape=(n, n))
        op = OperatorPair(S, arrays[f"L{i}.mass"], header["lambda_max"][i], header["operator"], header["lumping"])
        levels.append(Level(op, arrays.get(f"L{i}.parents"), arrays[f"L{i}.perm"]))
    return Hierarchy(levels), header


def build_mesh_hierarchy(mesh: TetMesh, operator: str, lumping: str, levels: int, seed: int) -> Hierarchy:
    op = assemble_operator(mesh, operator, lumping)
    return build_hierarchy(op, levels, seed)


@dataclass
class PrecomputeSummary:
    built: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


def cache_path(manifest: DatasetManifest, rec: SampleRecord, operator: str, lumping: str, levels: int, seed: int) -> Path:
    tag = f"{operator}-{lumping if operator == 'lbo' else 'none'}-L{levels}-s{seed}"
    return manifest.root / "cache" / tag / f"{rec.id}.tcc"


def _cache_key(rec: SampleRecord, operator: str, lumping: str, levels: int, seed: int) -> dict:
    return {"mesh_sha256": rec.mesh_sha256, "key_operator": operator, "key_lumping": lumping,
            "key_levels": levels, "key_seed": seed}


def _cache_is_current(path: Path, key: dict) -> bool:
    if not path.exists():
        return False
    try:
        _, _, header, _ = container.load(path, "operator-cache")
    except container.ContainerError:
        return False
    return all(header.get(k) == v for k, v in key.items())


def precompute_one(manifest: DatasetManifest, rec: SampleRecord, operator: str, lumping: str, levels: int, seed: int) -> str:
    """Build one cache; returns 'built' or 'skipped'."""
    path = cache_path(manifest, rec, operator, lumping, levels, seed)
    key = _cache_key(rec, operator, lumping, levels, seed)
    if _cache_is_current(path, key):
        return "skipped"
    mesh = read_tetgen(manifest.mesh_path(rec))
    report = validate(mesh)
    if not report.ok:
        raise MeshError("; ".join(report.findings))
    hier = build_mesh_hierarchy(mesh, operator, lumping, levels, seed)
    save_cache(path, hier, key)
    return "built"


def precompute(manifest: DatasetManifest, operator: str = "lbo", lumping: str = "fem-quarter", levels: int = 8,
               seed: int = 0, threads: int = 1) -> PrecomputeSummary:
    summary = PrecomputeSummary()
    jobs = list(manifest.records)

    def record(rec, status):
        (summary.built if status == "built" else summary.skipped).append(rec.id)

    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(threads) as pool:
            futs = [(rec, pool.submit(precompute_one, manifest, rec, operator, lumping, levels, seed)) for rec in jobs]
            for rec, fut in futs:
                try:
                    record(rec, fut.result())
                except (MeshError, HierarchyError, RuntimeError, ValueError) as exc:
                    summary.failed[rec.id] = str(exc)
    else:
        for rec in jobs:
            try:
                record(rec, precompute_one(manifest, rec, operator, lumping, levels, seed))
            except (MeshError, HierarchyError, RuntimeError, ValueError) as exc:
                summary.failed[rec.id] = str(exc)
    for sid, msg in summary.failed.items():
        log.warning("precompute failed for %s: %s", sid, msg)
    return summary


def load_hierarchies(manifest: DatasetManifest, operator: str, lumping: str, levels: int, seed: int) -> list[Hierarchy]:
    return [load_cache(cache_path(manifest, rec, operator, lumping, levels, seed))[0] for rec in manifest.records]
