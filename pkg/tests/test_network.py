import numpy as np
import pytest

from tetcnn import dataset, network as net
from tetcnn.coarsen import build_hierarchy
from tetcnn.lbo import assemble_graph_laplacian, assemble_lbo
from tetcnn.network import Batch, MeshInput
from tetcnn.tetmesh import TetMesh, min_max_normalize, random_mesh


def mesh_input(mesh, features=None, levels=2, operator="lbo", seed=0):
    op = assemble_lbo(mesh) if operator == "lbo" else assemble_graph_laplacian(mesh)
    h = build_hierarchy(op, levels, seed)
    feats = min_max_normalize(mesh) if features is None else features
    return MeshInput.from_hierarchy(h, feats, levels)


@pytest.fixture(scope="module")
def shells():
    specs = [dataset.ShellSpec(thickness=t, subdivision=1, seed=s) for t, s in ((0.15, 1), (0.25, 2), (0.2, 3))]
    return [dataset.generate_shell(s) for s in specs]


@pytest.mark.parametrize("widths, order, hidden", [((16, 32, 64, 128, 128), 1, 128), ((4, 5), 2, 6), ((3,), 0, 2)])
def test_parameter_count_closed_form(widths, order, hidden):
    model = net.build_model(widths, order, hidden, stages_per_pool=2)
    fins = (3,) + widths[:-1]
    conv = sum((order + 1) * a * b for a, b in zip(fins, widths))
    bn = sum(2 * w for w in widths)
    head = widths[-1] * hidden + hidden + hidden + 1
    assert model.n_parameters() == conv + bn + head
    assert model.n_parameters(trainable_only=False) == conv + 2 * bn + head


def test_layer_sequence():
    kinds = [s.kind for s in net.build_model((4, 5), 1, 6).specs]
    assert kinds == ["chebconv", "batchnorm", "relu", "pool", "chebconv", "batchnorm", "relu",
                     "gap", "fc", "relu", "output"]


def test_build_model_validation():
    with pytest.raises(ValueError, match="stages"):
        net.build_model((4, 4, 4), stages_per_pool=2, hierarchy_depth=3)
    with pytest.raises(ValueError, match="task"):
        net.build_model(task="segment")


def test_bce_at_zero_is_ln2_and_stable_at_extremes():
    value, grad = net.loss(np.zeros(4), np.array([0, 1, 0, 1.0]), "classify")
    assert value == pytest.approx(np.log(2.0), rel=1e-15)
    np.testing.assert_allclose(grad, [0.125, -0.125, 0.125, -0.125])
    value, grad = net.loss(np.array([100.0, -100.0]), np.array([0.0, 1.0]), "classify")
    assert value == pytest.approx(100.0, rel=1e-12)
    assert np.all(np.isfinite(grad))
    value, _ = net.loss(np.array([100.0, -100.0]), np.array([1.0, 0.0]), "classify")
    assert value == pytest.approx(np.exp(-100.0), rel=1e-6)


def test_mse_loss_and_divergence():
    value, grad = net.loss(np.array([1.0, 3.0]), np.array([0.0, 1.0]), "regress")
    assert value == 2.5
    np.testing.assert_array_equal(grad, [1.0, 2.0])
    with pytest.raises(net.DivergenceError):
        net.loss(np.array([np.nan]), np.array([0.0]), "regress")


def test_sigmoid_extremes():
    np.testing.assert_allclose(net.sigmoid(np.array([-800.0, 0.0, 800.0])), [0.0, 0.5, 1.0])


def test_batch_norm_train_statistics(rng):
    z = rng.normal(3.0, 2.0, (50, 4))
    mask = np.ones(50, bool)
    mask[-7:] = False
    y, _ = net.bn_forward(z, mask, np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), True)
    np.testing.assert_allclose(y[mask].mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(y[mask].var(axis=0), 1.0, atol=1e-6)
    assert np.all(y[~mask] == 0)


def test_batch_norm_eval_uses_running_stats(rng):
    z = rng.normal(size=(6, 2))
    mask = np.ones(6, bool)
    y, _ = net.bn_forward(z, mask, np.array([2.0, 1.0]), np.array([0.5, 0.0]), np.array([1.0, -1.0]),
                          np.array([4.0, 1.0]), False)
    want = np.array([2.0, 1.0]) * (z - [1.0, -1.0]) / np.sqrt(np.array([4.0, 1.0]) + net.BN_EPS) + [0.5, 0.0]
    np.testing.assert_allclose(y, want, rtol=1e-14)


def test_running_stats_update(shells):
    model = net.build_model((4, 5), 1, 6, seed=1)
    out, cache = net.forward(model, mesh_input(shells[0]), train=True)
    mu, var = cache.bn_stats["bn1"]
    net.apply_running_stats(model, cache)
    np.testing.assert_allclose(model.params["bn1.running_mean"], 0.1 * mu)
    np.testing.assert_allclose(model.params["bn1.running_var"], 0.9 + 0.1 * var)


def test_zero_output_gradient_gives_zero_gradients(shells):
    model = net.build_model((4, 5), 1, 6, seed=2)
    out, cache = net.forward(model, Batch.stack([mesh_input(m) for m in shells]), train=True)
    grads, acts = net.backward(model, cache, np.zeros_like(out))
    assert set(grads) == set(model.trainable())
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(acts["input"] == 0)


def test_adam_first_step_by_hand():
    model = net.Model([], {"fc.weight": np.array([1.0, -2.0]), "bn.gamma": np.array([0.5])})
    state = net.AdamState(lr=0.1, weight_decay=0.01)
    net.adam_step(model, {"fc.weight": np.array([0.3, -4.0]), "bn.gamma": np.array([2.0])}, state)
    # bias-corrected first step: m_hat / sqrt(v_hat) = g / |g|, plus decoupled decay on weights
    s = 1.0 / (1.0 + 1e-8 / np.array([0.3, 4.0]))
    np.testing.assert_allclose(model.params["fc.weight"], [1.0 - 0.1 * (s[0] + 0.01), -2.0 + 0.1 * (s[1] + 0.02)],
                               rtol=1e-12)
    np.testing.assert_allclose(model.params["bn.gamma"], [0.5 - 0.1 * (1 / (1 + 5e-9))], rtol=1e-12)
    assert state.step == 1


def test_adam_rejects_non_finite_gradients():
    model = net.Model([], {"fc.weight": np.ones(2)})
    with pytest.raises(net.DivergenceError, match="fc.weight"):
        net.adam_step(model, {"fc.weight": np.array([np.inf, 0.0])}, net.AdamState())


def _ten_steps(shells, seed):
    model = net.build_model((4, 5), 1, 6, seed=seed)
    batch = Batch.stack([mesh_input(m) for m in shells])
    y = np.array([0.0, 1.0, 0.0])
    state = net.AdamState()
    for _ in range(10):
        out, cache = net.forward(model, batch, train=True)
        _, g = net.loss(out, y, "classify")
        grads, _ = net.backward(model, cache, g)
        net.adam_step(model, grads, state)
        net.apply_running_stats(model, cache)
    return model


def test_training_steps_are_deterministic(shells):
    a, b = _ten_steps(shells, 5), _ten_steps(shells, 5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_gap_ignores_extra_padding(rng):
    a = rng.normal(size=(6, 3))
    mask = np.array([1, 1, 0, 1, 1, 0], bool)
    seg = np.array([0, 0, 0, 1, 1, 1])
    g1, _ = net.gap_forward(a, mask, seg, 2)
    a2 = np.vstack([a[:3], rng.normal(size=(2, 3)), a[3:], rng.normal(size=(1, 3))])
    mask2 = np.r_[mask[:3], False, False, mask[3:], False]
    seg2 = np.r_[seg[:3], 0, 0, seg[3:], 1]
    g2, _ = net.gap_forward(a2, mask2, seg2, 2)
    np.testing.assert_allclose(g1, g2, rtol=1e-15)
    np.testing.assert_allclose(g1[0], a[:2].mean(axis=0))


def test_batched_forward_matches_single_in_eval_mode(shells):
    model = net.build_model((4, 5), 1, 6, seed=3)
    inputs = [mesh_input(m) for m in shells]
    batched, _ = net.forward(model, Batch.stack(inputs), train=False)
    single = np.array([net.forward(model, x, train=False)[0][0] for x in inputs])
    np.testing.assert_allclose(batched, single, rtol=1e-12)


def test_lbo_separates_what_the_graph_laplacian_cannot(shells):
    """Same connectivity, same features, different geometry."""
    thin, thick = shells[0], shells[1]
    np.testing.assert_array_equal(thin.tets, thick.tets)
    feats = min_max_normalize(thin)
    model = net.build_model((4, 5), 2, 6, seed=4)
    lbo = [net.forward(model, mesh_input(m, feats), train=False)[0][0] for m in (thin, thick)]
    graph = [net.forward(model, mesh_input(m, feats, operator="graph"), train=False)[0][0] for m in (thin, thick)]
    assert graph[0] == graph[1]
    assert abs(lbo[0] - lbo[1]) > 1e-6


def test_single_block_output_is_permutation_invariant(rng):
    mesh = random_mesh(30, rng, 100)
    perm = rng.permutation(mesh.n)
    moved = TetMesh(mesh.vertices[perm], np.argsort(perm)[mesh.tets])
    feats = rng.normal(size=(mesh.n, 3))
    model = net.build_model((6,), 2, 4, seed=0)
    a = net.forward(model, mesh_input(mesh, feats, levels=1), train=True)[0]
    b = net.forward(model, mesh_input(moved, feats[perm], levels=1), train=True)[0]
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_forward_rejects_shallow_hierarchy(shells):
    model = net.build_model((4, 5, 6), 1, 6)
    with pytest.raises(ValueError, match="level"):
        net.forward(model, mesh_input(shells[0], levels=2))


@pytest.mark.parametrize("order", [1, 2, 3])
def test_first_layer_receptive_field_is_k_hops(shells, order, rng):
    from oracles import hop_ball
    from tetcnn.spectral import cheb_conv_forward

    mesh = shells[2]
    x = mesh_input(mesh)
    model = net.build_model((4, 5), order, 6, seed=order)
    theta = model.params["conv1.theta"]
    base, _ = cheb_conv_forward(theta, x.ops[0], x.features)
    src = int(rng.integers(mesh.n))
    bumped = x.features.copy()
    slot = int(np.flatnonzero(x.hierarchy.levels[0].perm == src)[0])
    bumped[slot] += 1.0
    moved, _ = cheb_conv_forward(theta, x.ops[0], bumped)
    changed = np.flatnonzero(np.any(moved != base, axis=1))
    changed_vertices = set(x.hierarchy.levels[0].perm[changed].tolist())
    assert src in changed_vertices
    assert changed_vertices <= hop_ball(mesh.n, mesh.edges(), src, order)
