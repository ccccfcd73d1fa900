"""End-to-end acceptance criteria.

Each test records a one-line verdict that conftest prints in the terminal
summary, then asserts at the stated tolerance.  Criteria that the method
cannot meet stay red on purpose.
"""

import time

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from conftest import record_criterion
from oracles import dense_cot_stiffness, exact_filter, hop_ball
from tetcnn import cli, coarsen, dataset, gradcam, gradcheck, lbo, training
from tetcnn.spectral import cheb_conv_forward
from tetcnn.tetmesh import box_mesh, random_mesh, read_tetgen

pytestmark = pytest.mark.acceptance

# Reduced training budgets keep the suite under an hour on one core; the
# synthetic tasks converge well before the default 150 epochs.
CLASSIFY_EPOCHS = 20
REGRESS_EPOCHS = 60
REGRESS_MESHES = 400
CAM_WIDTHS = (16, 32, 64)


@pytest.fixture(scope="module")
def thickness_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_classify")
    return dataset.generate_dataset(root, "classify", 100, seed=7, subdivision=3)


def _cv_accuracy(manifest, operator, seed):
    cfg = training.TrainConfig(task="classify", epochs=CLASSIFY_EPOCHS, folds=10, seed=seed, operator=operator)
    samples = training.load_samples(manifest, cfg)
    return training.train(samples, cfg).metrics


_accuracy_cache: dict = {}


def cv_accuracy(manifest, operator, seed):
    key = (str(manifest.root), operator, seed)
    if key not in _accuracy_cache:
        _accuracy_cache[key] = _cv_accuracy(manifest, operator, seed)
    return _accuracy_cache[key]


def test_01_stiffness_matches_bruteforce_oracle():
    g = np.random.default_rng(2024)
    meshes = [random_mesh(int(g.integers(12, 24)), g, max_tets=60) for _ in range(20)]
    t0 = time.perf_counter()
    worst = 0.0
    for mesh in meshes:
        S = lbo.assemble_stiffness(mesh).toarray()
        worst = max(worst, float(np.abs(S - dense_cot_stiffness(mesh.vertices, mesh.tets)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5.0 and all(m.m <= 60 for m in meshes)
    record_criterion(1, "stiffness oracle", ok, f"max |diff| {worst:.2e} (<= 1e-12), {elapsed:.2f} s (< 5 s)")
    assert ok


def test_02_unit_cube_first_eigenvalue_near_pi_squared():
    t0 = time.perf_counter()
    mesh = box_mesh(12, 12, 12)
    op = lbo.assemble_lbo(mesh, "fem-quarter")
    vals = eigsh(op.S, k=3, M=sp.diags(op.mass), sigma=-1e-3, which="LM", return_eigenvectors=False)
    lam1 = float(np.sort(vals)[1])
    elapsed = time.perf_counter() - t0
    err = abs(lam1 - np.pi**2) / np.pi**2
    ok = err <= 0.10 and elapsed < 60.0
    record_criterion(2, "analytic spectrum", ok,
                     f"lambda_1 = {lam1:.4f} vs pi^2 = {np.pi**2:.4f}, rel err {err:.1%} (<= 10%), {elapsed:.1f} s; "
                     f"lambda_1 / (pi^2 / 2) = {lam1 / (np.pi**2 / 2):.4f}")
    assert ok


def test_03_chebyshev_matches_exact_spectral_path():
    g = np.random.default_rng(3)
    meshes = [random_mesh(int(g.integers(40, 300)), g, 900) for _ in range(8)]
    meshes += [dataset.generate_shell(dataset.ShellSpec(subdivision=1, jitter=0.01, seed=s)) for s in (1, 2)]
    worst = 0.0
    for mesh in meshes:
        assert mesh.n <= 300
        op = lbo.assemble_lbo(mesh, with_lambda_max=True)
        L = lbo.scaled_operator(op)
        for K in (1, 2, 5):
            theta = g.normal(size=(K + 1, 3, 4))
            X = g.normal(size=(op.n, 3))
            got, _ = cheb_conv_forward(theta, L, X)
            want = exact_filter(op.S.toarray(), op.mass, theta, X, op.lambda_max)
            worst = max(worst, float(np.abs(got - want).max() / np.abs(want).max()))
    ok = worst <= 1e-8
    record_criterion(3, "Chebyshev = exact spectral filter", ok, f"max relative error {worst:.2e} (<= 1e-8)")
    assert ok


def test_04_delta_support_is_exactly_the_k_hop_ball():
    g = np.random.default_rng(4)
    meshes = [random_mesh(int(g.integers(20, 60)), g, 200) for _ in range(6)]
    meshes.append(dataset.generate_shell(dataset.ShellSpec(subdivision=2, seed=4)))
    checked, failures = 0, []
    for mesh in meshes:
        op = lbo.assemble_lbo(mesh, with_lambda_max=True)
        L = lbo.scaled_operator(op)
        edges = mesh.edges()
        for src in g.choice(mesh.n, size=min(5, mesh.n), replace=False):
            x = np.zeros((mesh.n, 1))
            x[src] = 1.0
            for K in (1, 2, 3):
                theta = g.uniform(0.5, 1.5, size=(K + 1, 1, 1))
                Y, _ = cheb_conv_forward(theta, L, x)
                support = set(np.flatnonzero(Y[:, 0] != 0.0).tolist())
                ball = hop_ball(mesh.n, edges, int(src), K)
                outside = np.array(sorted(set(range(mesh.n)) - ball), dtype=np.int64)
                zero_outside = bool(np.all(Y[outside, 0] == 0.0)) if len(outside) else True
                if not (zero_outside and support == ball):
                    failures.append((mesh.n, int(src), K))
                checked += 1
    ok = not failures
    record_criterion(4, "locality", ok, f"{checked} delta responses, {len(failures)} differ from the K-hop ball")
    assert ok, failures[:5]


def test_05_end_to_end_gradient_check():
    t0 = time.perf_counter()
    report = gradcheck.gradient_check(0)
    elapsed = time.perf_counter() - t0
    ok = report.ok and report.tol == 1e-5 and elapsed < 60.0
    covered = {"conv1.theta", "bn1.gamma", "bn1.beta", "fc1.weight", "fc2.bias", "input.features"}
    ok = ok and covered <= set(report.errors)
    record_criterion(5, "gradient check", ok, f"max relative error {report.worst:.2e} (<= 1e-5), {elapsed:.1f} s")
    assert ok


def test_06_coarsening_invariants_on_50_hierarchies():
    g = np.random.default_rng(6)
    worst_galerkin = worst_literal = 0.0
    problems = []
    for trial in range(50):
        mesh = random_mesh(int(g.integers(15, 60)), g, 200)
        h = coarsen.build_hierarchy(lbo.assemble_lbo(mesh), int(g.integers(1, 4)), seed=trial)
        for lv in range(h.depth):
            fine, coarse = h.levels[lv], h.levels[lv + 1]
            partner = coarsen.graclus_match(fine.op, trial, level=lv).partner
            m = np.flatnonzero(partner != coarsen.SINGLETON)
            if not np.array_equal(partner[partner[m]], m) or np.any(fine.op.S[m, partner[m]].A1 >= 0):
                problems.append((trial, lv, "matching"))
            sizes = np.bincount(fine.parents)
            if not set(sizes.tolist()) <= {1, 2} or coarse.n < -(-fine.n // 2):
                problems.append((trial, lv, "cluster sizes"))
            if not np.array_equal(coarse.op.mass, np.bincount(fine.parents, weights=fine.op.mass)):
                problems.append((trial, lv, "mass"))
            G = coarsen.assignment_matrix(fine.parents)
            literal = coarsen.coarsen_operators(fine.op, G, "eq8-literal")
            worst_galerkin = max(worst_galerkin, float(np.abs(coarse.op.laplacian() @ np.ones(coarse.n)).max()))
            worst_literal = max(worst_literal, float(np.abs(literal @ np.ones(coarse.n)).max()))
    ok = not problems and worst_galerkin <= 1e-9 and worst_literal <= 1e-9
    record_criterion(6, "coarsening invariants", ok,
                     f"{len(problems)} violations; |L1| galerkin {worst_galerkin:.1e}, literal {worst_literal:.1e}")
    assert ok, problems[:5]


def test_07_synthetic_classification(thickness_data):
    t0 = time.perf_counter()
    metrics = cv_accuracy(thickness_data, "lbo", 0)
    elapsed = time.perf_counter() - t0
    acc = metrics.mean("acc")
    ok = acc >= 0.90 and elapsed < 45 * 60
    record_criterion(7, "synthetic classification", ok,
                     f"10-fold accuracy {acc:.3f} ± {metrics.sd('acc'):.3f} (>= 0.90), {elapsed / 60:.1f} min")
    assert ok


def test_08_graph_laplacian_trails_lbo(thickness_data):
    rows, ok = [], True
    for seed in (0, 1, 2):
        a_lbo = cv_accuracy(thickness_data, "lbo", seed).mean("acc")
        a_graph = cv_accuracy(thickness_data, "graph", seed).mean("acc")
        rows.append(f"seed {seed}: lbo {a_lbo:.3f} graph {a_graph:.3f}")
        ok = ok and a_graph <= a_lbo - 0.10
    record_criterion(8, "LBO vs graph Laplacian gap >= 10 points", ok, "; ".join(rows))
    assert ok


def test_09_synthetic_regression(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_regress")
    man = dataset.generate_dataset(root, "regress", REGRESS_MESHES, seed=11, subdivision=3)
    cfg = training.TrainConfig(task="regress", epochs=REGRESS_EPOCHS, folds=5, seed=0, lr_schedule="cosine")
    result = training.train(training.load_samples(man, cfg), cfg)
    sd = float(np.std(man.labels(), ddof=1))
    rmse = result.metrics.mean("rmse")
    ok = rmse <= 0.25 * sd
    record_criterion(9, "synthetic regression", ok,
                     f"5-fold RMSE {rmse:.4f} ± {result.metrics.sd('rmse'):.4f} vs 0.25 sd = {0.25 * sd:.4f}")
    assert ok


def test_10_gradcam_finds_the_planted_anomaly(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_anomaly")
    man = dataset.generate_dataset(root, "classify", 100, seed=21, subdivision=3, variant="anomaly")
    cfg = training.TrainConfig(task="classify", epochs=CLASSIFY_EPOCHS, folds=5, seed=0, widths=CAM_WIDTHS)
    samples = training.load_samples(man, cfg)
    labels = man.labels()
    test = training.stratified_folds(labels, cfg.folds, cfg.seed)[0]
    rest = np.setdiff1d(np.arange(len(samples)), test)
    train_idx, val_idx = training.split_validation(rest, labels, cfg.val_fraction, cfg.seed, 0)
    model = training.train_fold(samples, train_idx, val_idx, cfg, 0)
    acc = training.evaluate(model, samples, test)["acc"]
    held_out = [i for i in test if labels[i] == 1][:20]
    assert len(held_out) == 20
    scores = []
    for i in held_out:
        rec = man.records[i]
        mesh = read_tetgen(man.mesh_path(rec))
        hm = gradcam.gradcam(model, samples[i].input, 1, mesh, k=3)
        region = dataset.anomaly_vertex_mask(dataset.spec_from_dict(rec.spec))
        scores.append(gradcam.enrichment(hm.values, lbo.assemble_mass(mesh), region))
    mean = float(np.mean(scores))
    ok = mean >= 3.0
    record_criterion(10, "Grad-CAM enrichment", ok,
                     f"mean enrichment {mean:.2f} (>= 3) over 20 held-out anomaly meshes, classifier acc {acc:.2f}")
    assert ok


def test_11_identical_runs_are_byte_identical(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data), "--per-class", "10", "--subdivision", "2", "--seed", "3"]) == 0
    common = ["--threads", "1", "train", "--manifest", str(data / "manifest.jsonl"), "--epochs", "3",
              "--folds", "3", "--levels", "8", "--seed", "5"]
    assert cli.main(common + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(common + ["--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    ok = all(same) and "metrics.json" in names and sum(n.endswith(".ckpt") for n in names) == 3
    record_criterion(11, "determinism", ok, f"{sum(same)}/{len(names)} files byte-identical")
    assert ok
