"""Train on the planted-anomaly dataset and measure how much Grad-CAM mass lands in the cap.

Writes one VTK heatmap per evaluated mesh so the result can be checked in ParaView.

    python scripts/anomaly_gradcam.py --out runs/anomaly --per-class 100
"""

import argparse
import json
from pathlib import Path

import numpy as np

from tetcnn import dataset, gradcam, lbo, training
from tetcnn.tetmesh import read_tetgen


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--data-seed", type=int, default=21)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--widths", default="16,32,64")
    ap.add_argument("--count", type=int, default=20, help="held-out anomaly meshes to score")
    ap.add_argument("--knn", type=int, default=3)
    args = ap.parse_args()

    data = args.out / "data"
    if (data / "manifest.jsonl").exists():
        man = dataset.DatasetManifest.read(data / "manifest.jsonl")
    else:
        man = dataset.generate_dataset(data, "classify", args.per_class, args.data_seed, variant="anomaly")
    widths = tuple(int(w) for w in args.widths.split(","))
    cfg = training.TrainConfig(task="classify", epochs=args.epochs, folds=5, seed=args.seed, widths=widths)
    samples = training.load_samples(man, cfg)
    labels = man.labels()

    test = training.stratified_folds(labels, cfg.folds, cfg.seed)[0]
    rest = np.setdiff1d(np.arange(len(samples)), test)
    train_idx, val_idx = training.split_validation(rest, labels, cfg.val_fraction, cfg.seed, 0)
    model = training.train_fold(samples, train_idx, val_idx, cfg, 0)
    training.save_checkpoint(args.out / "model.ckpt", model, cfg)
    print("held-out", training.evaluate(model, samples, test))

    scores = {}
    for i in [i for i in test if labels[i] == 1][: args.count]:
        rec = man.records[i]
        mesh = read_tetgen(man.mesh_path(rec))
        hm = gradcam.gradcam(model, samples[i].input, 1, mesh, args.knn, normalize=True)
        region = dataset.anomaly_vertex_mask(dataset.spec_from_dict(rec.spec))
        scores[rec.id] = gradcam.enrichment(hm.values, lbo.assemble_mass(mesh), region)
        gradcam.write_vtk(args.out / "heatmaps" / f"{rec.id}.vtk", mesh, hm.values)
        print(f"{rec.id}: enrichment {scores[rec.id]:.2f}")
    mean = float(np.mean(list(scores.values())))
    print(f"mean enrichment {mean:.2f} over {len(scores)} meshes")
    (args.out / "enrichment.json").write_text(json.dumps({"mean": mean, "per_mesh": scores}, indent=1) + "\n")


if __name__ == "__main__":
    main()
