"""Cross-validated accuracy of the LBO and graph-Laplacian models on a thickness dataset.

    python scripts/compare_operators.py --out runs/compare --per-class 100 --seeds 0 1 2
"""

import argparse
import json
from pathlib import Path

from tetcnn import dataset, training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--subdivision", type=int, default=3)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--folds", type=int, default=10)
    args = ap.parse_args()

    data = args.out / "data"
    if (data / "manifest.jsonl").exists():
        man = dataset.DatasetManifest.read(data / "manifest.jsonl")
    else:
        man = dataset.generate_dataset(data, "classify", args.per_class, args.data_seed, subdivision=args.subdivision)

    rows = []
    for seed in args.seeds:
        for operator in ("lbo", "graph"):
            cfg = training.TrainConfig(task="classify", epochs=args.epochs, folds=args.folds, seed=seed,
                                       operator=operator)
            result = training.train(training.load_samples(man, cfg), cfg, args.out / f"{operator}-s{seed}")
            acc = result.metrics.mean("acc")
            rows.append({"seed": seed, "operator": operator, "acc": acc, "sd": result.metrics.sd("acc")})
            print(f"seed {seed} {operator:<5} {result.metrics.table().splitlines()[0]}", flush=True)
    (args.out / "summary.json").write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
