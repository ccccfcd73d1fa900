"""Training loop, k-fold evaluation, metrics and checkpoint I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from . import network as net
from . import rng as rng_mod
from .dataset import DatasetManifest, cache_path, load_cache, precompute
from .network import Batch, MeshInput, Model
from .tetmesh import min_max_normalize, read_tetgen

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "classify"
    epochs: int = 150
    batch_size: int = 8
    folds: int = 10
    val_fraction: float = 0.15
    seed: int = 0
    order: int = 1
    operator: str = "lbo"
    lumping: str = "fem-quarter"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"  # constant | cosine
    widths: tuple[int, ...] = net.DEFAULT_WIDTHS
    hidden: int = net.DEFAULT_HIDDEN
    levels: int = 8
    stages_per_pool: int = 2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.task not in ("classify", "regress"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.operator not in ("lbo", "graph"):
            raise ValueError(f"unknown operator {self.operator!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        for name in ("epochs", "batch_size", "folds", "levels", "hidden", "stages_per_pool"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.order < 0 or not self.widths or min(self.widths) < 1:
            raise ValueError("order must be >= 0 and widths positive")
        if self.stages_per_pool * (len(self.widths) - 1) > self.levels:
            raise ValueError("hierarchy too shallow for the requested number of pooling layers")


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    input: MeshInput
    y: float


def mesh_features(mesh) -> np.ndarray:
    return min_max_normalize(mesh)


def load_samples(manifest: DatasetManifest, config: TrainConfig, build_missing: bool = True) -> list[Sample]:
    """Hierarchies from the precompute cache (built on demand) plus xyz features."""
    if build_missing:
        summary = precompute(manifest, config.operator, config.lumping, config.levels, config.seed)
        if not summary.ok:
            raise TrainingError(f"precompute failed for {sorted(summary.failed)}")
    needed = config.stages_per_pool * (len(config.widths) - 1)
    out = []
    for rec in manifest.records:
        hier, _ = load_cache(cache_path(manifest, rec, config.operator, config.lumping, config.levels, config.seed))
        feats = mesh_features(read_tetgen(manifest.mesh_path(rec)))
        y = rec.label if manifest.task == "classify" else rec.target
        out.append(Sample(rec.id, MeshInput.from_hierarchy(hier, feats, needed), float(y)))
    return out


# --------------------------------------------------------------------------- splits


def stratified_folds(labels, k: int, seed: int, stratify: bool = True) -> list[np.ndarray]:
    """Test indices per fold. Classes are dealt round-robin so each fold's
    class count is within one of the ideal share."""
    labels = np.asarray(labels)
    n = len(labels)
    if k > n:
        raise ValueError(f"{k} folds for {n} samples")
    rng = rng_mod.stream(seed, "folds")
    buckets: list[list[int]] = [[] for _ in range(k)]
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)] if stratify else [np.arange(n)]
    offset = 0
    for idx in groups:
        for j, i in enumerate(rng.permutation(idx)):
            buckets[(offset + j) % k].append(int(i))
        offset += len(idx)
    return [np.sort(np.array(b, dtype=np.int64)) for b in buckets]


def split_validation(indices: np.ndarray, labels, fraction: float, seed: int, fold: int,
                     stratify: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Carve ``fraction`` of ``indices`` off as validation, per class when stratified."""
    labels = np.asarray(labels)
    rng = rng_mod.stream(seed, "folds", 1, fold)
    val: list[int] = []
    groups = [indices[labels[indices] == c] for c in np.unique(labels[indices])] if stratify else [indices]
    for idx in groups:
        take = max(1, int(round(fraction * len(idx)))) if len(idx) > 1 else 0
        val.extend(rng.permutation(idx)[:take].tolist())
    val_arr = np.sort(np.array(val, dtype=np.int64))
    return np.setdiff1d(indices, val_arr), val_arr


# --------------------------------------------------------------------------- metrics


def classification_metrics(y_true, y_pred) -> dict[str, float]:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    return {
        "acc": (tp + tn) / len(y_true),
        "sen": tp / (tp + fn) if tp + fn else float("nan"),
        "spe": tn / (tn + fp) if tn + fp else float("nan"),
    }


def regression_metrics(y_true, y_pred) -> dict[str, float]:
    d = np.asarray(y_pred, dtype=np.float64) - np.asarray(y_true, dtype=np.float64)
    return {"rmse": float(np.sqrt(np.mean(d * d)))}


@dataclass
class EvalMetrics:
    per_fold: list[dict[str, float]]

    @property
    def names(self) -> list[str]:
        return list(self.per_fold[0]) if self.per_fold else []

    def mean(self, name: str) -> float:
        return float(np.nanmean([m[name] for m in self.per_fold]))

    def sd(self, name: str) -> float:
        vals = np.array([m[name] for m in self.per_fold], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def summary(self) -> dict[str, dict[str, float]]:
        return {k: {"mean": self.mean(k), "sd": self.sd(k)} for k in self.names}

    def table(self) -> str:
        lines = []
        for k in self.names:
            if k == "rmse":
                lines.append(f"RMSE  {self.mean(k):.4f} ± {self.sd(k):.4f}")
            else:
                lines.append(f"{k.upper():<5} {100 * self.mean(k):.1f}% ± {100 * self.sd(k):.1f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------- training


def _batches(samples: list[Sample], idx: np.ndarray, size: int):
    for s in range(0, len(idx), size):
        chunk = idx[s : s + size]
        yield Batch.stack([samples[i].input for i in chunk]), np.array([samples[i].y for i in chunk])


def predict(model: Model, samples: list[Sample], idx=None, batch_size: int = 8) -> np.ndarray:
    """Raw outputs in target units (logits for classification)."""
    idx = np.arange(len(samples)) if idx is None else np.asarray(idx)
    outs = [net.forward(model, b, train=False)[0] for b, _ in _batches(samples, idx, batch_size)]
    z = np.concatenate(outs) if outs else np.zeros(0)
    if model.task == "regress":
        z = z * model.meta.get("target_std", 1.0) + model.meta.get("target_mean", 0.0)
    return z


def evaluate(model: Model, samples: list[Sample], idx=None) -> dict[str, float]:
    idx = np.arange(len(samples)) if idx is None else np.asarray(idx)
    z = predict(model, samples, idx)
    y = np.array([samples[i].y for i in idx])
    if model.task == "classify":
        return classification_metrics(y, net.sigmoid(z) >= 0.5)
    return regression_metrics(y, z)


def _scaled_targets(model: Model, y: np.ndarray) -> np.ndarray:
    if model.task == "regress":
        return (y - model.meta["target_mean"]) / model.meta["target_std"]
    return y


def validation_loss(model: Model, samples: list[Sample], idx: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for b, y in _batches(samples, idx, batch_size):
        out, _ = net.forward(model, b, train=False)
        total += net.loss(out, _scaled_targets(model, y), model.task)[0] * len(y)
    return total / len(idx)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "cosine":
        return 0.5 * config.lr * (1.0 + np.cos(np.pi * epoch / config.epochs))
    return config.lr


def new_model(config: TrainConfig, fold: int = 0) -> Model:
    return net.build_model(config.widths, config.order, config.hidden, 3, config.task, config.stages_per_pool,
                           rng_mod.derive_seed(config.seed, "init", fold))


def train_fold(samples: list[Sample], train_idx, val_idx, config: TrainConfig, fold: int = 0,
               log_records: list | None = None) -> Model:
    """Returns the parameters with the best validation loss."""
    model = new_model(config, fold)
    if config.task == "regress":
        y = np.array([samples[i].y for i in train_idx])
        model.meta["target_mean"] = float(y.mean())
        model.meta["target_std"] = float(y.std()) or 1.0
    state = net.AdamState(lr=config.lr, weight_decay=config.weight_decay)
    best, best_loss = model.copy(), np.inf
    for epoch in range(config.epochs):
        state.lr = learning_rate(config, epoch)
        order = rng_mod.stream(config.seed, "shuffle", fold, epoch).permutation(np.asarray(train_idx))
        total = 0.0
        try:
            for b, y in _batches(samples, order, config.batch_size):
                out, cache = net.forward(model, b, train=True)
                value, g = net.loss(out, _scaled_targets(model, y), config.task)
                grads, _ = net.backward(model, cache, g)
                net.adam_step(model, grads, state)
                net.apply_running_stats(model, cache)
                total += value * len(y)
        except net.DivergenceError as exc:
            raise TrainingError(f"fold {fold}, epoch {epoch}: training diverged ({exc})") from exc
        train_loss = total / len(order)
        val_loss = validation_loss(model, samples, val_idx, config.batch_size) if len(val_idx) else train_loss
        if val_loss < best_loss:
            best, best_loss = model.copy(), val_loss
        if log_records is not None:
            log_records.append({"fold": fold, "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
    best.meta["best_val_loss"] = float(best_loss)
    return best


@dataclass
class TrainResult:
    models: list[Model]
    metrics: EvalMetrics
    folds: list[np.ndarray]
    log: list[dict] = field(default_factory=list)


def train(samples: list[Sample], config: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    """k-fold cross-validation; writes per-fold checkpoints, a JSONL log and
    ``metrics.json`` when ``out_dir`` is given."""
    labels = np.array([s.y for s in samples])
    stratify = config.task == "classify"
    folds = stratified_folds(labels, config.folds, config.seed, stratify)
    models, per_fold, records = [], [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for f, test_idx in enumerate(folds):
        rest = np.setdiff1d(np.arange(len(samples)), test_idx)
        train_idx, val_idx = split_validation(rest, labels, config.val_fraction, config.seed, f, stratify)
        fold_log: list[dict] = []
        model = train_fold(samples, train_idx, val_idx, config, f, fold_log)
        m = evaluate(model, samples, test_idx)
        fold_log.append({"fold": f, "test": m})
        log.info("fold %d: %s", f, m)
        models.append(model)
        per_fold.append(m)
        records.extend(fold_log)
        if out is not None:
            save_checkpoint(out / f"fold{f:02d}.ckpt", model, config)
    metrics = EvalMetrics(per_fold)
    if out is not None:
        container.write_atomic(out / "train_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode())
        report = {"config": config_dict(config), "per_fold": per_fold, "summary": metrics.summary()}
        container.write_atomic(out / "metrics.json", (json.dumps(report, sort_keys=True, indent=1) + "\n").encode())
    return TrainResult(models, metrics, folds, records)


# --------------------------------------------------------------------------- checkpoints


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(config.widths)
    return d


def save_checkpoint(path: str | Path, model: Model, config: TrainConfig | None = None) -> None:
    header = {
        "task": model.task,
        "meta": model.meta,
        "layers": [asdict(s) for s in model.specs],
        "tensors": list(model.params),
        "config": config_dict(config) if config is not None else None,
    }
    container.save(path, "checkpoint", header, dict(model.params), CHECKPOINT_VERSION)


def load_checkpoint(path: str | Path) -> tuple[Model, TrainConfig | None]:
    _, version, header, arrays = container.load(path, "checkpoint")
    if version != CHECKPOINT_VERSION:
        raise container.ContainerError(path, f"unsupported checkpoint version {version}")
    specs = [net.LayerSpec(**s) for s in header["layers"]]
    params = {k: np.array(arrays[k]) for k in header["tensors"]}
    cfg = header.get("config")
    return Model(specs, params, header["task"], header["meta"]), (TrainConfig(**cfg) if cfg else None)
