"""Mean-thickness regression with k-fold CV; reports RMSE against the target spread.

    python scripts/regression.py --out runs/regress --meshes 400 --epochs 60 --schedule cosine
"""

import argparse
import json
from pathlib import Path

import numpy as np

from tetcnn import dataset, training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--meshes", type=int, default=400)
    ap.add_argument("--data-seed", type=int, default=11)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--schedule", choices=("constant", "cosine"), default="cosine")
    ap.add_argument("--widths", default="16,32,64,128,128")
    args = ap.parse_args()

    data = args.out / "data"
    if (data / "manifest.jsonl").exists():
        man = dataset.DatasetManifest.read(data / "manifest.jsonl")
    else:
        man = dataset.generate_dataset(data, "regress", args.meshes, args.data_seed)
    widths = tuple(int(w) for w in args.widths.split(","))
    cfg = training.TrainConfig(task="regress", epochs=args.epochs, folds=args.folds, seed=args.seed,
                               lr_schedule=args.schedule, widths=widths)
    result = training.train(training.load_samples(man, cfg), cfg, args.out / "run")
    sd = float(np.std(man.labels(), ddof=1))
    rmse = result.metrics.mean("rmse")
    for f, m in enumerate(result.metrics.per_fold):
        print(f"fold {f}: rmse {m['rmse']:.4f}")
    print(f"{result.metrics.table()}  (target sd {sd:.4f}, ratio {rmse / sd:.3f})")
    (args.out / "summary.json").write_text(json.dumps({"rmse": rmse, "target_sd": sd}, indent=1) + "\n")


if __name__ == "__main__":
    main()
