"""Grad-CAM heatmaps at the last conv block, lifted back to the input mesh."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import network as net
from .coarsen import Hierarchy
from .container import write_atomic
from .network import MeshInput, Model
from .tetmesh import TetMesh

DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray  # one nonnegative value per level-0 vertex
    cls: int
    normalized: bool = False

    def normalize(self) -> "Heatmap":
        peak = self.values.max() if len(self.values) else 0.0
        return Heatmap(self.values / peak if peak > 0 else self.values.copy(), self.cls, True)


def class_sign(cls: int) -> float:
    """``y^c`` is the logit for class 1 and its negation for class 0."""
    if cls not in (0, 1):
        raise ValueError(f"class must be 0 or 1, got {cls}")
    return 1.0 if cls == 1 else -1.0


def _gap_level(model: Model) -> int:
    return next(s.level for s in model.specs if s.kind == "gap")


def cam_inputs(model: Model, sample: MeshInput, cls: int) -> tuple[np.ndarray, np.ndarray]:
    """Channel weights and the padded last-block activations from one pass.

    The weights are the per-channel mean of ``dy^c/dX`` over the real vertices
    of the last block; inference-mode batch norm keeps them per-sample.
    """
    sign = class_sign(cls)
    out, cache = net.forward(model, sample, train=False)
    _, acts = net.backward(model, cache, np.full_like(out, sign))
    return acts["last"][sample.masks[_gap_level(model)]].mean(axis=0), cache.last_activation


def cam_weights(model: Model, sample: MeshInput, cls: int) -> np.ndarray:
    return cam_inputs(model, sample, cls)[0]


def heatmap_coarse(weights: np.ndarray, X_last: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if X_last.ndim != 2 or X_last.shape[1] != len(weights):
        raise ValueError(f"{len(weights)} channel weights for activations of shape {X_last.shape}")
    return np.maximum(X_last @ weights, 0.0)


def _coords(mesh_or_points) -> np.ndarray:
    return mesh_or_points.vertices if isinstance(mesh_or_points, TetMesh) else np.asarray(mesh_or_points, float)


def knn_smooth(values: np.ndarray, points, k: int = 3) -> np.ndarray:
    """Inverse-distance-weighted mean over each vertex's ``k`` nearest vertices (itself included)."""
    pts = _coords(points)
    n = len(pts)
    if k < 1 or k > n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    dist, idx = cKDTree(pts).query(pts, k=k)
    dist, idx = dist.reshape(n, k), idx.reshape(n, k)
    w = 1.0 / np.maximum(dist, DISTANCE_FLOOR)
    return (w * values[idx]).sum(axis=1) / w.sum(axis=1)


def upsample(coarse: np.ndarray, hierarchy: Hierarchy, points, k: int = 3, level: int | None = None) -> np.ndarray:
    """Copy unpadded coarse values down through the clusters, then KNN-smooth on the input mesh."""
    level = hierarchy.depth if level is None else level
    if len(coarse) != hierarchy.levels[level].n:
        raise ValueError(f"level {level} has {hierarchy.levels[level].n} vertices, got {len(coarse)} values")
    fine = hierarchy.prolong(np.asarray(coarse, dtype=np.float64), level, 0)
    return knn_smooth(fine, points, k)


def gradcam(model: Model, sample: MeshInput, cls: int, points, k: int = 3, normalize: bool = False) -> Heatmap:
    if sample.hierarchy is None:
        raise ValueError("sample carries no hierarchy to upsample through")
    level = _gap_level(model)
    alpha, X_last = cam_inputs(model, sample, cls)
    padded = heatmap_coarse(alpha, X_last)
    coarse = sample.hierarchy.unpad(padded, level)
    hm = Heatmap(upsample(coarse, sample.hierarchy, points, k, level), cls)
    return hm.normalize() if normalize else hm


def enrichment(values: np.ndarray, mass: np.ndarray, region: np.ndarray) -> float:
    """Share of heatmap mass inside ``region`` divided by the region's share of volume."""
    region = np.asarray(region, dtype=bool)
    heat = values * mass
    total = heat.sum()
    if total <= 0:
        return 0.0
    return float((heat[region].sum() / total) / (mass[region].sum() / mass.sum()))


# --------------------------------------------------------------------------- export


def vtk_text(mesh: TetMesh, values: np.ndarray, name: str = "gradcam") -> str:
    if len(values) != mesh.n:
        raise ValueError(f"{len(values)} values for {mesh.n} vertices")
    lines = ["# vtk DataFile Version 3.0", f"{name} heatmap", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n} double"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines.append(f"CELLS {mesh.m} {5 * mesh.m}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets]
    lines.append(f"CELL_TYPES {mesh.m}")
    lines += ["10"] * mesh.m
    lines += [f"POINT_DATA {mesh.n}", f"SCALARS {name} float 1", "LOOKUP_TABLE default"]
    lines += [f"{v:.9g}" for v in values]
    return "\n".join(lines) + "\n"


def write_vtk(path: str | Path, mesh: TetMesh, values: np.ndarray, name: str = "gradcam") -> None:
    write_atomic(path, vtk_text(mesh, values, name).encode())


def write_text(path: str | Path, values: np.ndarray) -> None:
    write_atomic(path, "".join(f"{i} {v:.9g}\n" for i, v in enumerate(values)).encode())


def read_text(path: str | Path) -> np.ndarray:
    data = np.loadtxt(path, ndmin=2)
    ids = data[:, 0].astype(np.int64)
    out = np.zeros(ids.max() + 1 if len(ids) else 0)
    out[ids] = data[:, 1]
    return out
