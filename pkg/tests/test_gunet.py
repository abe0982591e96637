import itertools
import json

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.spatial import Delaunay

from stroke_eit.gunet import (
    CorruptModelError,
    Descriptor,
    GraphSignal,
    GUNetModel,
    TrainConfig,
    TrainingData,
    clone_cluster_unpool,
    gcn_layer_forward,
    gunet_forward,
    kmax_pool,
    load_model,
    predict,
    save_model,
    train,
)
from stroke_eit.gunet.layers import DegenerateProjectionError, cluster_assignment
from stroke_eit.gunet.train import mean_mse, sample_loss_and_grad
from stroke_eit.datagen import NoiseModel, simulate_pair
from stroke_eit.fem import default_patterns
from stroke_eit.mesh import extract_graph, graph_from_edges, interpolate_field
from stroke_eit.phantom import sample_phantom_pair
from stroke_eit.recon_linear import build_correlation_regularizer, reconstruct_ld

SMALL = Descriptor(channels=(4, 6, 8, 10), convs_per_level=2, pool_keep_fraction=0.5)


def delaunay_graph(n, seed=0):
    pts = np.random.default_rng(seed).random((n, 2))
    tri = Delaunay(pts).simplices
    pairs = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [0, 2]]]), axis=1)
    return graph_from_edges(n, np.unique(pairs, axis=0), pts)


def path_graph(n):
    return graph_from_edges(n, np.array([[i, i + 1] for i in range(n - 1)]))


def lively_model(desc=SMALL, seed=3):
    """Weights scaled up so activations are far from zero and gradients are well conditioned."""
    m = GUNetModel.initialize(desc, seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in m.params.items():
        m.params[k] = 3 * v if k.endswith(".W") or k.endswith(".p") else rng.uniform(-0.3, 0.3, v.shape)
    return m


# ----------------------------------------------------------------------
# convolution


def test_gcn_identity_configuration(rng):
    X = rng.random((5, 3))
    out, _ = gcn_layer_forward(X, sp.identity(5, format="csr"), np.eye(3), np.zeros(3))
    assert np.array_equal(out, X)


def test_gcn_zero_input_gives_activated_bias():
    b = np.array([0.5, -2.0])
    out, _ = gcn_layer_forward(np.zeros((4, 3)), sp.identity(4, format="csr"), np.ones((3, 2)), b)
    assert np.array_equal(out, np.tile([0.5, -0.02], (4, 1)))


def test_gcn_matches_dense_oracle(rng):
    g = delaunay_graph(10)
    X, W, b = rng.standard_normal((10, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
    out, _ = gcn_layer_forward(X, g.normalized_adjacency, W, b)
    A = g.adjacency.toarray() + np.eye(10)
    D = np.diag(1 / np.sqrt(A.sum(axis=1)))
    Z = D @ A @ D @ X @ W + b
    assert np.abs(out - np.where(Z > 0, Z, 0.01 * Z)).max() < 1e-12


# ----------------------------------------------------------------------
# pooling and unpooling


def test_keep_everything_is_gating_only(rng):
    g = delaunay_graph(12)
    X, p = rng.standard_normal((12, 3)), rng.standard_normal(3)
    Xp, lvl = kmax_pool(X, g.adjacency, p, 1.0)
    assert sorted(lvl.kept) == list(range(12))
    y = X @ p / np.linalg.norm(p)
    assert np.abs(Xp - X[lvl.kept] * np.tanh(y[lvl.kept])[:, None]).max() < 1e-14
    back = clone_cluster_unpool(Xp, 12, lvl.kept, lvl.assignment)
    assert np.abs(back - X * np.tanh(y)[:, None]).max() < 1e-14


def test_one_eighth_of_eight_keeps_one(rng):
    g = path_graph(8)
    _, lvl = kmax_pool(rng.standard_normal((8, 2)), g.adjacency, np.ones(2), 1 / 8)
    assert len(lvl.kept) == 1


def test_path_graph_against_brute_force():
    g = path_graph(6)
    X = np.array([[0.1], [0.9], [0.3], [-0.2], [0.8], [0.0]])
    _, lvl = kmax_pool(X, g.adjacency, np.array([1.0]), 1 / 3)
    # brute force: best pair of nodes by score, then nearest kept node by hops
    best = max(itertools.combinations(range(6), 2), key=lambda s: X[list(s), 0].sum())
    kept = sorted(best, key=lambda i: -X[i, 0])
    assert list(lvl.kept) == kept
    for v in range(6):
        dist = [abs(v - k) for k in kept]
        assert lvl.assignment[v] == int(np.argmin(dist))  # ties go to the better score
    # pooled graph joins nodes within two hops
    assert lvl.A.nnz == 0  # nodes 1 and 4 are three hops apart


def test_zero_projection_is_rejected(rng):
    with pytest.raises(DegenerateProjectionError):
        kmax_pool(rng.standard_normal((4, 2)), path_graph(4).adjacency, np.zeros(2), 0.5)


def test_unpool_clones_rows_bitwise(rng):
    g = delaunay_graph(10)
    X = rng.standard_normal((10, 3))
    Xp, lvl = kmax_pool(X, g.adjacency, rng.standard_normal(3), 0.3)
    out = clone_cluster_unpool(Xp, 10, lvl.kept, lvl.assignment)
    for v in range(10):
        assert np.array_equal(out[v], Xp[lvl.assignment[v]])
    const = clone_cluster_unpool(np.full_like(Xp, 2.5), 10, lvl.kept, lvl.assignment)
    assert np.all(const == 2.5)


def test_unreachable_nodes_go_to_the_best_kept_node():
    A = sp.csr_matrix((4, 4))
    assert list(cluster_assignment(A, np.array([2]))) == [0, 0, 0, 0]


# ----------------------------------------------------------------------
# the network


def test_default_parameter_count():
    d = Descriptor()
    assert d.parameter_count() == GUNetModel.initialize(d, 0).parameter_count == 327_009


def test_zero_output_projection_gives_zero(rng):
    m = GUNetModel.initialize(SMALL, 1)
    m.params["out.W"][:] = 0
    g = delaunay_graph(30)
    assert not np.any(gunet_forward(m, GraphSignal(rng.standard_normal((30, 1)), g)).features)


def test_same_model_runs_on_2d_and_3d_graphs(mesh2d_coarse, small3d, rng):
    m = GUNetModel.initialize(Descriptor(), 0)
    for mesh in (mesh2d_coarse, small3d):
        g = extract_graph(mesh)
        out = m(GraphSignal(rng.standard_normal((mesh.node_count, 1)), g))
        assert out.features.shape == (mesh.node_count, 1) and np.all(np.isfinite(out.features))


def test_input_jacobian_vector_product(rng):
    g = delaunay_graph(30)
    m = lively_model()
    X = rng.standard_normal((30, 1))
    c = rng.standard_normal((30, 1))
    out, state = m.forward(X, g.adjacency, g.normalized_adjacency, keep_cache=True)
    _, dX = m.backward(c, state)
    for _ in range(3):
        v = rng.standard_normal((30, 1))
        h = 1e-6
        fp = (c * m.forward(X + h * v, g.adjacency, g.normalized_adjacency)).sum()
        fm = (c * m.forward(X - h * v, g.adjacency, g.normalized_adjacency)).sum()
        fd = (fp - fm) / (2 * h)
        assert abs(fd - (dX * v).sum()) < 1e-5 * abs(fd)


def test_parameter_gradients_per_block(rng):
    g = delaunay_graph(40)
    m = lively_model()
    x, y = rng.standard_normal(40), rng.standard_normal(40)
    _, grads = sample_loss_and_grad(m, g, x, y)
    for name, value in m.params.items():
        # steepest-ascent direction, so the directional derivative is the block's gradient norm
        d = grads[name] / np.linalg.norm(grads[name])
        h = 1e-6
        orig = value.copy()
        m.params[name] = orig + h * d
        fp, _ = sample_loss_and_grad(m, g, x, y)
        m.params[name] = orig - h * d
        fm, _ = sample_loss_and_grad(m, g, x, y)
        m.params[name] = orig
        fd = (fp - fm) / (2 * h)
        an = float((grads[name] * d).sum())
        assert abs(fd - an) <= 1e-5 * an, name


def test_permutation_equivariance(rng):
    g = delaunay_graph(40)
    m = lively_model()
    X = rng.standard_normal((40, 1))
    perm = rng.permutation(40)
    inv = np.argsort(perm)
    gp = graph_from_edges(40, inv[g.edges])  # node perm[i] of g becomes node i
    out = m.forward(X, g.adjacency, g.normalized_adjacency)
    outp = m.forward(X[perm], gp.adjacency, gp.normalized_adjacency)
    assert np.abs(outp - out[perm]).max() < 1e-12


# ----------------------------------------------------------------------
# persistence


def test_save_load_bitwise(tmp_path, rng):
    g = delaunay_graph(30)
    m = lively_model()
    save_model(m, tmp_path / "m.json", {"configHash": "z"})
    back = load_model(tmp_path / "m.json")
    X = rng.standard_normal((30, 1))
    assert np.array_equal(m.forward(X, g.adjacency, g.normalized_adjacency),
                          back.forward(X, g.adjacency, g.normalized_adjacency))
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["parameterCount"] == SMALL.parameter_count()


def test_corrupt_model_files(tmp_path):
    m = GUNetModel.initialize(SMALL, 0)
    path = tmp_path / "m.json"
    save_model(m, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CorruptModelError):
        load_model(path)
    data = json.loads(text)
    data["parameterCount"] += 1
    path.write_text(json.dumps(data))
    with pytest.raises(CorruptModelError):
        load_model(path)
    data = json.loads(text)
    data["parameters"] = data["parameters"][:-1]
    path.write_text(json.dumps(data))
    with pytest.raises(CorruptModelError):
        load_model(path)


# ----------------------------------------------------------------------
# training


def toy_data(g, n, seed):
    """Blurred bumps as inputs, sharp bumps as targets."""
    rng = np.random.default_rng(seed)
    A = g.normalized_adjacency
    X, Y = [], []
    for _ in range(n):
        y = np.zeros(g.node_count)
        y[rng.integers(g.node_count)] = 1.0
        y = A @ y
        x = 0.3 * (A @ (A @ y))
        X.append(x)
        Y.append(y)
    return np.array(X), np.array(Y)


def test_zero_learning_rate_changes_nothing():
    g = delaunay_graph(40)
    X, Y = toy_data(g, 6, 0)
    m = GUNetModel.initialize(SMALL, 0)
    best, hist = train(m, TrainingData(g, X[:4], Y[:4], X[4:], Y[4:]),
                       TrainConfig(learning_rate=0.0, max_epochs=3, patience_epochs=10))
    assert all(np.array_equal(best.params[k], m.params[k]) for k in m.params)
    assert len(set(hist.val_mse)) == 1 and len(set(hist.train_loss)) == 1


def test_few_samples_reduce_validation_error():
    g = delaunay_graph(60)
    X, Y = toy_data(g, 24, 1)
    best, hist = train(GUNetModel.initialize(SMALL, 0), TrainingData(g, X[:20], Y[:20], X[20:], Y[20:]),
                       TrainConfig(max_epochs=30, patience_epochs=10, learning_rate=3e-3))
    assert hist.best_val_mse < hist.initial_val_mse
    # early stopping returns the best epoch's model
    assert mean_mse(best, g, X[20:], Y[20:], "perSampleMaxAbs") == pytest.approx(hist.best_val_mse, rel=1e-12)
    assert all(hist.best_val_mse <= v for v in hist.val_mse[hist.best_epoch:])


def test_single_sample_overfits(mesh2d, mesh2d_coarse):
    # one simulated LD image and its truth on the coarse 2D mesh, default network
    pats = default_patterns(2, 16)
    pair = sample_phantom_pair(11, mesh2d)
    mp = simulate_pair(pair, mesh2d, 1e-3, pats, NoiseModel(), 11)
    x = reconstruct_ld(mp, mesh2d_coarse, 1e-3, pats, build_correlation_regularizer(mesh2d_coarse)).delta
    y = interpolate_field(mesh2d, pair.delta_true, mesh2d_coarse)
    g = extract_graph(mesh2d_coarse)
    X, Y = x[None], y[None]
    m = GUNetModel.initialize(Descriptor(), 0)
    cfg = TrainConfig(max_epochs=2000, patience_epochs=10**9, batch_size=1)
    initial = mean_mse(m, g, X, Y, cfg.normalization_mode)
    best, _ = train(m, TrainingData(g, X, Y, X, Y), cfg)
    assert mean_mse(best, g, X, Y, cfg.normalization_mode) < 1e-3 * initial


def test_training_is_deterministic():
    g = delaunay_graph(40)
    X, Y = toy_data(g, 8, 3)
    data = TrainingData(g, X[:6], Y[:6], X[6:], Y[6:])
    cfg = TrainConfig(max_epochs=4, patience_epochs=10, rng_seed=5)
    a, _ = train(GUNetModel.initialize(SMALL, 0), data, cfg)
    b, _ = train(GUNetModel.initialize(SMALL, 0), data, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_per_sample_normalization_is_scale_equivariant(rng):
    g = delaunay_graph(40)
    m = lively_model()
    x = rng.standard_normal(40)
    assert np.allclose(predict(m, g, 7.0 * x, "perSampleMaxAbs"), 7.0 * predict(m, g, x, "perSampleMaxAbs"),
                       rtol=1e-12, atol=1e-14)


def test_config_validation():
    for bad in (TrainConfig(learning_rate=-1), TrainConfig(patience_epochs=0), TrainConfig(normalization_mode="x")):
        with pytest.raises(ValueError):
            bad.validate()


def test_learning_rate_decays_on_plateau():
    g = delaunay_graph(40)
    X, Y = toy_data(g, 6, 4)
    data = TrainingData(g, X[:4], Y[:4], X[4:], Y[4:])
    # zero-length steps never improve on the initial validation MSE
    _, hist = train(GUNetModel.initialize(SMALL, 0), data,
                    TrainConfig(learning_rate=0.0, max_epochs=5, patience_epochs=10, lr_decay_patience=2))
    assert hist.learning_rate == [0.0] * 5
    _, hist = train(GUNetModel.initialize(SMALL, 0), data,
                    TrainConfig(learning_rate=1e-3, max_epochs=12, patience_epochs=100, lr_decay_patience=1,
                                lr_decay_factor=0.5))
    lr = np.array(hist.learning_rate)
    assert lr[0] <= 1e-3 and np.all(np.diff(lr) <= 0)
    stalled = np.diff(np.minimum.accumulate([hist.initial_val_mse] + hist.val_mse))[1:] == 0
    assert np.all((np.diff(lr) < 0) == stalled)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_patience=0).validate()
