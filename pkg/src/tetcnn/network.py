"""The mesh CNN: Chebyshev conv blocks with batch norm and pooling, GAP, FC head.

Everything runs in numpy with explicit reverse mode. A batch of meshes is a
block-diagonal stack: operators are concatenated per level, features row-wise,
and batch norm pools statistics over every real vertex of every mesh in it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coarsen
from . import rng as rng_mod
from .coarsen import Hierarchy
from .lbo import ScaledOperator
from .spectral import cheb_conv_backward, cheb_conv_forward

BN_EPS = 1e-8
BN_MOMENTUM = 0.1
DEFAULT_WIDTHS = (16, 32, 64, 128, 128)
DEFAULT_HIDDEN = 128


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # chebconv | batchnorm | relu | pool | gap | fc | output
    name: str
    f_in: int = 0
    f_out: int = 0
    order: int = 0
    level: int = 0
    stages: int = 0


@dataclass
class Model:
    specs: list[LayerSpec]
    params: dict[str, np.ndarray]
    task: str = "classify"
    meta: dict = field(default_factory=dict)

    @property
    def blocks(self) -> list[LayerSpec]:
        return [s for s in self.specs if s.kind == "chebconv"]

    @property
    def levels_needed(self) -> int:
        return max(s.level for s in self.specs)

    def trainable(self) -> list[str]:
        return [k for k in self.params if not k.endswith(("running_mean", "running_var"))]

    def decayed(self) -> list[str]:
        return [k for k in self.params if k.endswith((".theta", ".weight"))]

    def copy(self) -> "Model":
        return Model(list(self.specs), {k: v.copy() for k, v in self.params.items()}, self.task, dict(self.meta))

    def n_parameters(self, trainable_only: bool = True) -> int:
        names = self.trainable() if trainable_only else list(self.params)
        return int(sum(self.params[k].size for k in names))


def build_model(widths=DEFAULT_WIDTHS, order: int = 1, hidden: int = DEFAULT_HIDDEN, in_dim: int = 3,
                task: str = "classify", stages_per_pool: int = 2, seed: int = 0,
                hierarchy_depth: int | None = None) -> Model:
    """Conv blocks ``[chebconv -> BN -> ReLU]`` with pooling between them, then
    ``GAP -> FC(hidden) -> ReLU -> FC(1)``."""
    widths = list(widths)
    if task not in ("classify", "regress"):
        raise ValueError(f"unknown task {task!r}")
    if order < 0:
        raise ValueError("order must be >= 0")
    needed = stages_per_pool * (len(widths) - 1)
    if hierarchy_depth is not None and hierarchy_depth < needed:
        raise ValueError(f"model needs {needed} coarsening stages, hierarchy has {hierarchy_depth}")
    rng = rng_mod.stream(seed, "init")
    specs: list[LayerSpec] = []
    params: dict[str, np.ndarray] = {}
    f_in = in_dim
    for i, w in enumerate(widths, start=1):
        level = (i - 1) * stages_per_pool
        specs.append(LayerSpec("chebconv", f"conv{i}", f_in, w, order, level))
        bound = 1.0 / np.sqrt(f_in * (order + 1))
        params[f"conv{i}.theta"] = rng.uniform(-bound, bound, (order + 1, f_in, w))
        specs.append(LayerSpec("batchnorm", f"bn{i}", w, w, level=level))
        params[f"bn{i}.gamma"] = np.ones(w)
        params[f"bn{i}.beta"] = np.zeros(w)
        params[f"bn{i}.running_mean"] = np.zeros(w)
        params[f"bn{i}.running_var"] = np.ones(w)
        specs.append(LayerSpec("relu", f"relu{i}", w, w, level=level))
        if i < len(widths):
            specs.append(LayerSpec("pool", f"pool{i}", w, w, level=level, stages=stages_per_pool))
        f_in = w
    specs.append(LayerSpec("gap", "gap", f_in, f_in, level=needed))
    for name, a, b in (("fc1", f_in, hidden), ("fc2", hidden, 1)):
        bound = 1.0 / np.sqrt(a)
        params[f"{name}.weight"] = rng.uniform(-bound, bound, (a, b))
        params[f"{name}.bias"] = np.zeros(b)
    specs.insert(len(specs), LayerSpec("fc", "fc1", f_in, hidden, level=needed))
    specs.append(LayerSpec("relu", "relu_fc", hidden, hidden, level=needed))
    specs.append(LayerSpec("output", "fc2", hidden, 1, level=needed))
    meta = {"widths": widths, "order": order, "hidden": hidden, "in_dim": in_dim, "stages_per_pool": stages_per_pool}
    return Model(specs, params, task, meta)


# --------------------------------------------------------------------------- inputs


@dataclass(frozen=True, eq=False)
class MeshInput:
    """Everything the network needs for one mesh, in padded layout."""

    features: np.ndarray  # (n0_padded, F)
    ops: list[ScaledOperator]  # per level
    masks: list[np.ndarray]  # per level, True for real vertices
    hierarchy: Hierarchy | None = None

    @classmethod
    def from_hierarchy(cls, hierarchy: Hierarchy, features: np.ndarray, levels: int | None = None) -> "MeshInput":
        levels = hierarchy.depth if levels is None else levels
        if levels > hierarchy.depth:
            raise ValueError(f"hierarchy has {hierarchy.depth} stages, {levels} requested")
        lvls = hierarchy.levels[: levels + 1]
        return cls(hierarchy.pad(np.asarray(features, dtype=np.float64)), [lv.padded_operator() for lv in lvls],
                   [lv.real_mask() for lv in lvls], hierarchy)


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    ops: list[ScaledOperator]
    masks: list[np.ndarray]
    segments: list[np.ndarray]  # per level, mesh index of every row
    size: int

    @classmethod
    def stack(cls, inputs: list[MeshInput]) -> "Batch":
        nlev = min(len(x.ops) for x in inputs)
        ops = [ScaledOperator.stack([x.ops[l] for x in inputs]) for l in range(nlev)]
        masks = [np.concatenate([x.masks[l] for x in inputs]) for l in range(nlev)]
        segs = [np.concatenate([np.full(len(x.masks[l]), b) for b, x in enumerate(inputs)]) for l in range(nlev)]
        return cls(np.concatenate([x.features for x in inputs]), ops, masks, segs, len(inputs))


# --------------------------------------------------------------------------- layers


def bn_forward(z, mask, gamma, beta, running_mean, running_var, train: bool):
    real = z[mask]
    if train:
        mu = real.mean(axis=0)
        var = real.var(axis=0)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (real - mu) * inv
    y = np.zeros_like(z)
    y[mask] = gamma * xhat + beta
    return y, (xhat, inv, mask, train, mu, var, len(real))


def bn_backward(dy, cache, gamma):
    xhat, inv, mask, train, _, _, N = cache
    d = dy[mask]
    dgamma = (d * xhat).sum(axis=0)
    dbeta = d.sum(axis=0)
    dxhat = d * gamma
    if train:
        dreal = inv / N * (N * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dreal = dxhat * inv
    dz = np.zeros_like(dy)
    dz[mask] = dreal
    return dz, dgamma, dbeta


def gap_forward(a, mask, segments, size):
    counts = np.bincount(segments[mask], minlength=size).astype(np.float64)
    sums = np.zeros((size, a.shape[1]))
    np.add.at(sums, segments[mask], a[mask])
    return sums / counts[:, None], counts


def gap_backward(dg, mask, segments, counts, n_rows):
    da = np.zeros((n_rows, dg.shape[1]))
    da[mask] = (dg / counts[:, None])[segments[mask]]
    return da


@dataclass
class ForwardCache:
    train: bool
    steps: list = field(default_factory=list)
    bn_stats: dict = field(default_factory=dict)
    last_activation: np.ndarray | None = None
    gap_counts: np.ndarray | None = None


def forward(model: Model, batch: Batch | MeshInput, train: bool = True) -> tuple[np.ndarray, ForwardCache]:
    """Returns one scalar per mesh (logit or prediction) and the backward cache."""
    if isinstance(batch, MeshInput):
        batch = Batch.stack([batch])
    p = model.params
    cache = ForwardCache(train)
    h = batch.features
    for spec in model.specs:
        top = spec.level + (spec.stages if spec.kind == "pool" else 0)
        if top >= len(batch.ops) and spec.kind in ("chebconv", "batchnorm", "pool", "gap"):
            raise ValueError(f"{spec.name} needs hierarchy level {top}, batch has {len(batch.ops) - 1}")
        if spec.kind == "chebconv":
            h, cc = cheb_conv_forward(p[f"{spec.name}.theta"], batch.ops[spec.level], h)
            cache.steps.append((spec, cc))
        elif spec.kind == "batchnorm":
            n = spec.name
            h, bc = bn_forward(h, batch.masks[spec.level], p[f"{n}.gamma"], p[f"{n}.beta"],
                               p[f"{n}.running_mean"], p[f"{n}.running_var"], train)
            cache.steps.append((spec, bc))
            if train:
                mu, var, N = bc[4], bc[5], bc[6]
                cache.bn_stats[n] = (mu, var * N / max(N - 1, 1))
        elif spec.kind == "relu":
            pos = h > 0
            h = np.where(pos, h, 0.0)
            cache.steps.append((spec, pos))
        elif spec.kind == "pool":
            pcs = []
            for s in range(spec.stages):
                h, pc = coarsen.pool_forward(h)
                pcs.append(pc)
            cache.steps.append((spec, pcs))
        elif spec.kind == "gap":
            cache.last_activation = h
            mask, seg = batch.masks[spec.level], batch.segments[spec.level]
            h, counts = gap_forward(h, mask, seg, batch.size)
            cache.gap_counts = counts
            cache.steps.append((spec, (mask, seg, counts, cache.last_activation.shape[0])))
        elif spec.kind in ("fc", "output"):
            cache.steps.append((spec, h))
            h = h @ p[f"{spec.name}.weight"] + p[f"{spec.name}.bias"]
        else:
            raise ValueError(f"unknown layer kind {spec.kind}")
    out = h[:, 0]
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite network output")
    return out, cache


def backward(model: Model, cache: ForwardCache, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Parameter gradients and a few activation gradients (``last``, ``input``)."""
    p = model.params
    grads: dict[str, np.ndarray] = {}
    acts: dict[str, np.ndarray] = {}
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, 1)
    if not cache.steps:
        raise ValueError("stale forward cache")
    for spec, c in reversed(cache.steps):
        n = spec.name
        if spec.kind in ("fc", "output"):
            grads[f"{n}.weight"] = c.T @ g
            grads[f"{n}.bias"] = g.sum(axis=0)
            g = g @ p[f"{n}.weight"].T
        elif spec.kind == "relu":
            g = np.where(c, g, 0.0)
        elif spec.kind == "gap":
            mask, seg, counts, rows = c
            g = gap_backward(g, mask, seg, counts, rows)
            acts["last"] = g
        elif spec.kind == "pool":
            for pc in reversed(c):
                g = coarsen.pool_backward(g, pc)
        elif spec.kind == "batchnorm":
            g, grads[f"{n}.gamma"], grads[f"{n}.beta"] = bn_backward(g, c, p[f"{n}.gamma"])
        elif spec.kind == "chebconv":
            grads[f"{n}.theta"], g = cheb_conv_backward(g, c, p[f"{n}.theta"])
    acts["input"] = g
    return grads, acts


def apply_running_stats(model: Model, cache: ForwardCache, momentum: float = BN_MOMENTUM) -> None:
    for name, (mu, var) in cache.bn_stats.items():
        rm, rv = model.params[f"{name}.running_mean"], model.params[f"{name}.running_var"]
        rm *= 1.0 - momentum
        rm += momentum * mu
        rv *= 1.0 - momentum
        rv += momentum * var


# --------------------------------------------------------------------------- loss and optimizer


def loss(output: np.ndarray, target: np.ndarray, task: str) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. ``output``."""
    z = np.asarray(output, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DivergenceError("non-finite network output")
    if task == "classify":
        value = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        grad = (sigmoid(z) - y) / len(z)
    elif task == "regress":
        value = (z - y) ** 2
        grad = 2.0 * (z - y) / len(z)
    else:
        raise ValueError(f"unknown task {task!r}")
    return float(value.mean()), grad


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def weight_decay_grad(model: Model, weight_decay: float) -> dict[str, np.ndarray]:
    """Gradient of ``weight_decay / 2 * ||w||^2`` over conv and FC weights."""
    return {k: weight_decay * model.params[k] for k in model.decayed()}


def adam_step(model: Model, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update with decoupled weight decay on conv/FC weights."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    decay = weight_decay_grad(model, state.weight_decay) if state.weight_decay else {}
    for k in model.trainable():
        g = grads.get(k)
        if g is None:
            continue
        w = model.params[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {w.shape}")
        m = state.m.setdefault(k, np.zeros_like(w))
        v = state.v.setdefault(k, np.zeros_like(w))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if k in decay:
            update = update + decay[k]
        w -= state.lr * update
