"""Command-line entry point: synth, precompute, train, eval, gradcheck, gradcam, inspect.

Settings come from an optional flat ``key=value`` config file and from flags;
flags win. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import container, dataset, gradcam, gradcheck, lbo, training
from .tetmesh import MeshError, dihedral_angles, read_tetgen, validate

REQUIRED = {
    "synth": ("out", "per_class"),
    "precompute": ("manifest",),
    "train": ("manifest", "out"),
    "eval": ("checkpoint", "manifest"),
    "gradcam": ("checkpoint", "mesh", "out"),
    "inspect": (),
    "gradcheck": (),
}


class UsageError(Exception):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(w) for w in str(text).split(",") if w.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid widths {text!r}") from exc
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("widths must be positive integers")
    return widths


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tetcnn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value settings file; flags override it")
    p.add_argument("--threads", type=int, default=None, help="worker count (default: $TETCNN_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic shell dataset")
    s.add_argument("--out")
    s.add_argument("--task", choices=("classify", "regress"), default="classify")
    s.add_argument("--per-class", type=int, help="meshes per class (total count for regression)")
    s.add_argument("--variant", choices=("thickness", "anomaly"), default="thickness")
    s.add_argument("--subdivision", type=int, default=3)
    s.add_argument("--thickness-noise", type=float, default=0.1)
    s.add_argument("--jitter", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("precompute", help="build operator and hierarchy caches")
    s.add_argument("--manifest")
    _operator_flags(s)

    s = sub.add_parser("train", help="k-fold training")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--task", choices=("classify", "regress"))
    _operator_flags(s)
    s.add_argument("--order", type=int, default=1)
    s.add_argument("--epochs", type=int, default=150)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
    s.add_argument("--wd", type=float, default=1e-4)
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--val-fraction", type=float, default=0.15)
    s.add_argument("--widths", type=_widths, default=(16, 32, 64, 128, 128))
    s.add_argument("--hidden", type=int, default=128)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--out", help="optional JSON report path")

    s = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)

    s = sub.add_parser("gradcam", help="write a Grad-CAM heatmap for one mesh")
    s.add_argument("--checkpoint")
    s.add_argument("--mesh", help="TetGen stem (path without .node/.ele)")
    s.add_argument("--class", dest="cls", type=int, default=1)
    s.add_argument("--knn", type=int, default=3)
    s.add_argument("--out", help=".vtk for legacy VTK, anything else for 'vertex_id value' text")
    s.add_argument("--normalize", action="store_true", help="scale the heatmap to max 1")

    s = sub.add_parser("inspect", help="print mesh, cache or locality statistics")
    s.add_argument("--mesh")
    s.add_argument("--cache")
    s.add_argument("--probe", type=int, help="vertex for the L^k delta support probe (needs --mesh)")
    s.add_argument("--hops", type=int, default=1)
    s.add_argument("--operator", choices=("lbo", "graph"), default="lbo")
    s.add_argument("--lumping", choices=lbo.LUMPINGS, default="fem-quarter")
    return p


def _operator_flags(s: argparse.ArgumentParser) -> None:
    s.add_argument("--operator", choices=("lbo", "graph"), default="lbo")
    s.add_argument("--lumping", choices=lbo.LUMPINGS, default="fem-quarter")
    s.add_argument("--levels", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            conf = read_config(args.config)
        except (OSError, UsageError) as exc:
            parser.error(str(exc))
        sub = _subparser(parser, args.command)
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(conf) - set(known) - {"threads"})
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        defaults = {}
        for key, value in conf.items():
            if key == "threads":
                continue
            action = known[key]
            try:
                defaults[key] = action.type(value) if action.type else value
            except (ValueError, argparse.ArgumentTypeError) as exc:
                parser.error(f"config key {key}: {exc}")
            if action.choices and defaults[key] not in action.choices:
                parser.error(f"config key {key}: {value!r} not in {list(action.choices)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        if args.threads is None and "threads" in conf:
            args.threads = int(conf["threads"])
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        parser.error(f"{args.command}: missing required option(s) " + ", ".join("--" + k.replace("_", "-") for k in missing))
    if args.threads is None:
        args.threads = int(os.environ.get("TETCNN_THREADS", "1") or 1)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    return args


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _require_mesh(stem: str) -> Path:
    p = Path(stem)
    if p.suffix in (".node", ".ele"):
        p = p.with_suffix("")
    for ext in (".node", ".ele"):
        _require_file(str(p) + ext, "mesh file")
    return p


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.per_class < 1:
        raise UsageError("--per-class must be positive")
    man = dataset.generate_dataset(args.out, args.task, args.per_class, args.seed, variant=args.variant,
                                   subdivision=args.subdivision, thickness_noise=args.thickness_noise,
                                   jitter=args.jitter)
    print(f"wrote {len(man.records)} meshes and {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_precompute(args) -> int:
    man = dataset.DatasetManifest.read(_require_file(args.manifest, "manifest"))
    summary = dataset.precompute(man, args.operator, args.lumping, args.levels, args.seed, args.threads)
    print(f"{len(summary.built)} rebuilt, {len(summary.skipped)} up to date, {len(summary.failed)} failed")
    for sid, msg in sorted(summary.failed.items()):
        print(f"  {sid}: {msg}", file=sys.stderr)
    return 0 if summary.ok else 1


def cmd_train(args) -> int:
    man = dataset.DatasetManifest.read(_require_file(args.manifest, "manifest"))
    task = args.task or man.task
    if task != man.task:
        raise UsageError(f"--task {task} does not match the manifest task {man.task}")
    config = training.TrainConfig(task=task, epochs=args.epochs, batch_size=args.batch_size, folds=args.folds,
                                  val_fraction=args.val_fraction, seed=args.seed, order=args.order,
                                  operator=args.operator, lumping=args.lumping, lr=args.lr, weight_decay=args.wd,
                                  lr_schedule=args.lr_schedule, widths=args.widths, hidden=args.hidden,
                                  levels=args.levels)
    samples = training.load_samples(man, config)
    result = training.train(samples, config, args.out)
    print(result.metrics.table())
    return 0


def cmd_eval(args) -> int:
    model, config = training.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    man = dataset.DatasetManifest.read(_require_file(args.manifest, "manifest"))
    if config is None:
        raise UsageError("checkpoint carries no training configuration")
    samples = training.load_samples(man, config)
    metrics = training.evaluate(model, samples)
    print("\n".join(f"{k.upper():<5} {v:.4f}" for k, v in metrics.items()))
    if args.out:
        container.write_atomic(args.out, (json.dumps(metrics, sort_keys=True, indent=1) + "\n").encode())
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.gradient_check(args.seed, tol=args.tol)
    print("\n".join(report.lines()))
    return 0 if report.ok else 1


def cmd_gradcam(args) -> int:
    model, config = training.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    stem = _require_mesh(args.mesh)
    if args.cls not in (0, 1):
        raise UsageError(f"--class must be 0 or 1, got {args.cls}")
    if config is None:
        raise UsageError("checkpoint carries no training configuration")
    mesh = read_tetgen(stem)
    if args.knn < 1 or args.knn > mesh.n:
        raise UsageError(f"--knn must lie in [1, {mesh.n}]")
    hier = dataset.build_mesh_hierarchy(mesh, config.operator, config.lumping, config.levels, config.seed)
    needed = config.stages_per_pool * (len(config.widths) - 1)
    sample = training.MeshInput.from_hierarchy(hier, training.mesh_features(mesh), needed)
    hm = gradcam.gradcam(model, sample, args.cls, mesh, args.knn, args.normalize)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".vtk":
        gradcam.write_vtk(out, mesh, hm.values)
    else:
        gradcam.write_text(out, hm.values)
    print(f"class {args.cls}: max {hm.values.max():.4g}, mean {hm.values.mean():.4g} -> {out}")
    return 0


def cmd_inspect(args) -> int:
    if not (args.mesh or args.cache):
        raise UsageError("inspect needs --mesh and/or --cache")
    if args.mesh:
        mesh = read_tetgen(_require_mesh(args.mesh))
        report = validate(mesh)
        ang = np.degrees(dihedral_angles(mesh)).ravel()
        counts, edges = np.histogram(ang, bins=np.arange(0, 181, 20))
        print(f"mesh {args.mesh}: n={mesh.n} m={mesh.m} volume={mesh.total_volume():.6g} "
              f"components={report.component_count} findings={len(report.findings)}")
        print(f"dihedral angles: min {ang.min():.2f} max {ang.max():.2f} deg")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            print(f"  [{lo:3.0f}, {hi:3.0f}) {c}")
        if args.probe is not None:
            op = lbo.assemble_operator(mesh, args.operator, args.lumping)
            if not 0 <= args.probe < op.n:
                raise UsageError(f"--probe must lie in [0, {op.n})")
            hops = lbo.hop_distances(op.S, args.probe)
            support = lbo.power_support(op, args.probe, args.hops)
            within = np.flatnonzero((hops >= 0) & (hops <= args.hops))
            print(f"L^{args.hops} delta_{args.probe}: support {len(support)} vertices, "
                  f"{args.hops}-hop ball {len(within)}, max hop in support {hops[support].max()}")
    if args.cache:
        hier, header = dataset.load_cache(_require_file(args.cache, "cache"))
        print(f"cache {args.cache}: operator={header['operator']} lumping={header['lumping']} "
              f"n={header['n']} nnz={header['nnz']}")
        for i, lv in enumerate(hier.levels):
            print(f"  level {i}: n={lv.n} padded={lv.n_padded} fake={lv.n_fake} nnz={lv.op.nnz} "
                  f"lambda_max={lv.op.lambda_max:.10g}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "precompute": cmd_precompute,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "gradcam": cmd_gradcam,
    "inspect": cmd_inspect,
}


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(n)


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    limiter = _limit_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tetcnn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (container.ContainerError, MeshError, training.TrainingError, ValueError, RuntimeError, OSError) as exc:
        print(f"tetcnn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
