"""End-to-end finite-difference check of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network as net
from . import rng as rng_mod
from .coarsen import build_hierarchy
from .lbo import assemble_lbo
from .network import Batch, MeshInput, Model
from .tetmesh import TetMesh, box_mesh, min_max_normalize

DEFAULT_TOL = 1e-5


@dataclass
class GradCheckReport:
    errors: dict[str, float]  # per tensor: max |fd - analytic| / max(|fd|, |analytic|)
    tol: float

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    @property
    def ok(self) -> bool:
        return self.worst <= self.tol

    def lines(self) -> list[str]:
        out = [f"{name:<20} {err:.3e}  {'ok' if err <= self.tol else 'FAIL'}" for name, err in self.errors.items()]
        out.append(f"max relative error {self.worst:.3e} (tol {self.tol:.0e}): {'PASS' if self.ok else 'FAIL'}")
        return out


def toy_problem(seed: int = 0, meshes: int = 2) -> tuple[Model, Batch, np.ndarray]:
    """Two-block model on a pair of jittered 3x3x3 grids (27 vertices each)."""
    rng = rng_mod.stream(seed, "probe")
    inputs = []
    for _ in range(meshes):
        base = box_mesh(3, 3, 3)
        verts = base.vertices + rng.uniform(-0.08, 0.08, base.vertices.shape)
        mesh = TetMesh(verts, base.tets, "toy")
        hier = build_hierarchy(assemble_lbo(mesh), 2, seed)
        feats = min_max_normalize(mesh) + rng.normal(0.0, 0.1, (mesh.n, 3))
        inputs.append(MeshInput.from_hierarchy(hier, feats))
    model = net.build_model(widths=(4, 5), order=2, hidden=6, task="classify", stages_per_pool=2, seed=seed)
    for k in model.params:
        if k.endswith(("gamma", "beta", ".bias")):
            model.params[k] = model.params[k] + rng.normal(0.0, 0.3, model.params[k].shape)
    return model, Batch.stack(inputs), (np.arange(meshes) % 2).astype(np.float64)


def _loss(model: Model, batch: Batch, y: np.ndarray) -> float:
    out, _ = net.forward(model, batch, train=True)
    return net.loss(out, y, model.task)[0]


def _rel(fd: np.ndarray, an: np.ndarray) -> float:
    scale = max(np.abs(fd).max(), np.abs(an).max(), 1e-12)
    return float(np.abs(fd - an).max() / scale)


def gradient_check(seed: int = 0, eps: float = 1e-6, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Central differences over every trainable tensor and the input features."""
    model, batch, y = toy_problem(seed)
    out, cache = net.forward(model, batch, train=True)
    _, g = net.loss(out, y, model.task)
    grads, acts = net.backward(model, cache, g)
    errors: dict[str, float] = {}
    for name in model.trainable():
        w = model.params[name]
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + eps
            up = _loss(model, batch, y)
            w[idx] = old - eps
            down = _loss(model, batch, y)
            w[idx] = old
            fd[idx] = (up - down) / (2 * eps)
        errors[name] = _rel(fd, grads[name])
    X = batch.features
    real = np.flatnonzero(batch.masks[0])
    fd = np.zeros((len(real), X.shape[1]))
    for r, i in enumerate(real):
        for c in range(X.shape[1]):
            old = X[i, c]
            X[i, c] = old + eps
            up = _loss(model, batch, y)
            X[i, c] = old - eps
            down = _loss(model, batch, y)
            X[i, c] = old
            fd[r, c] = (up - down) / (2 * eps)
    errors["input.features"] = _rel(fd, acts["input"][real])
    return GradCheckReport(errors, tol)
