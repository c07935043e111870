import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probe_eit.errors import DegenerateDataset, DimensionMismatch
from probe_eit.forward import MeasurementFrame
from probe_eit.linear import ConductivityImage
from probe_eit.mesh import ReducedIndexSet
from probe_eit.network import (NetworkParams, PsoConfig, _Layout, apply_pca, fit_pca,
                               forward_net, init_swarm, invert_direct, invert_pca, postprocess,
                               predict, read_network, train_pso, training_mse, write_network,
                               write_training_log)

XOR_X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], float)
XOR_Y = np.array([0, 1, 1, 0], float)


def random_params(rng, n_in=5, h=4, n_out=3):
    return NetworkParams(rng.normal(size=(h, n_in)), rng.normal(size=h),
                         rng.normal(size=(n_out, h)), rng.normal(size=n_out),
                         rng.normal(size=n_in), rng.uniform(0.5, 2, n_in),
                         rng.normal(size=n_out), rng.uniform(0.5, 2, n_out))


def test_zero_network_returns_output_mean():
    p = NetworkParams(np.zeros((3, 2)), np.zeros(3), np.zeros((2, 3)), np.zeros(2),
                      np.array([1.0, 2.0]), np.ones(2), np.array([0.5, -4.0]), np.full(2, 3.0))
    np.testing.assert_array_equal(forward_net(p, [7.0, -1.0]), [0.5, -4.0])


def test_two_two_one_by_hand():
    W1 = [[1.0, -1.0], [0.5, 2.0]]
    b1 = [0.0, -1.0]
    W2 = [[2.0, -3.0]]
    b2 = [0.25]
    p = NetworkParams(np.array(W1), np.array(b1), np.array(W2), np.array(b2),
                      np.array([1.0, 0.0]), np.array([2.0, 1.0]), np.array([10.0]),
                      np.array([0.1]))
    # x = (3, 0.5) -> normalized (1, 0.5); hidden pre-activations (0.5, 0.5)
    h = np.tanh(0.5)
    expect = (2 * h - 3 * h + 0.25) * 0.1 + 10.0
    assert forward_net(p, [3.0, 0.5])[0] == pytest.approx(expect, abs=1e-14)


def test_hidden_permutation_invariance(rng):
    p = random_params(rng)
    perm = rng.permutation(4)
    q = NetworkParams(p.W1[perm], p.b1[perm], p.W2[:, perm], p.b2, p.in_mean, p.in_scale,
                      p.out_mean, p.out_scale)
    x = rng.normal(size=(6, 5))
    np.testing.assert_allclose(forward_net(q, x), forward_net(p, x), rtol=1e-13, atol=1e-13)


def test_batch_matches_single(rng):
    p = random_params(rng)
    x = rng.normal(size=(3, 5))
    np.testing.assert_allclose(forward_net(p, x)[1], forward_net(p, x[1]), rtol=1e-14, atol=1e-14)


def test_dimension_checks(rng):
    p = random_params(rng)
    with pytest.raises(DimensionMismatch):
        forward_net(p, np.zeros(4))
    with pytest.raises(DimensionMismatch):
        NetworkParams(p.W1, p.b1[:2], p.W2, p.b2, p.in_mean, p.in_scale, p.out_mean,
                      p.out_scale)
    with pytest.raises(ValueError):
        NetworkParams(p.W1 * np.nan, p.b1, p.W2, p.b2, p.in_mean, p.in_scale, p.out_mean,
                      p.out_scale)


def test_no_search_returns_initialization():
    cfg = PsoConfig(swarm_size=1, max_iters=0, seed=11, output_layer="pso")
    res = train_pso(XOR_X, XOR_Y, 4, cfg)
    layout = _Layout(2, 4, 1, with_output=True)
    pos, _, _, _ = init_swarm(layout, cfg, np.random.default_rng(11))
    W1, b1 = layout.hidden(pos[0])
    W2, b2 = layout.output(pos[0])
    p = res.params
    assert np.array_equal(p.W1, W1) and np.array_equal(p.b1, b1)
    assert np.array_equal(p.W2, W2) and np.array_equal(p.b2, b2)
    assert len(res.log) == 1


@pytest.mark.parametrize("mode", ["pso", "lstsq"])
def test_xor(mode):
    cfg = PsoConfig(swarm_size=40, max_iters=500, seed=1, output_layer=mode)
    res = train_pso(XOR_X, XOR_Y, 4, cfg)
    out = predict(res.params, XOR_X).ravel()
    assert float(np.mean((out - XOR_Y) ** 2)) < 0.05
    best = [f for _, f in res.log]
    assert len(best) == 501
    assert np.all(np.diff(best) <= 0)


def test_lstsq_log_matches_final_fit(rng):
    X = rng.normal(size=(80, 6))
    Y = np.column_stack([np.sin(X[:, 0]), X[:, 1] * X[:, 2]])
    res = train_pso(X, Y, 8, PsoConfig(swarm_size=10, max_iters=30, target_rank=2))
    # with full target rank the fitness is the exact ridge fit
    assert training_mse(res.params, X, Y) == pytest.approx(res.log[-1][1], rel=1e-6)


def test_seed_determinism(rng):
    X = rng.normal(size=(30, 4))
    Y = rng.normal(size=(30, 3))
    cfg = PsoConfig(swarm_size=8, max_iters=15, seed=5)
    a = train_pso(X, Y, 5, cfg).params
    b = train_pso(X, Y, 5, cfg).params
    for name in ("W1", "b1", "W2", "b2", "in_mean", "in_scale", "out_mean", "out_scale"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = train_pso(X, Y, 5, PsoConfig(swarm_size=8, max_iters=15, seed=6)).params
    assert not np.array_equal(a.W1, c.W1)


def test_constant_targets_allowed(rng):
    X = rng.normal(size=(10, 3))
    res = train_pso(X, np.full((10, 2), 4.0), 3, PsoConfig(swarm_size=4, max_iters=3))
    np.testing.assert_allclose(predict(res.params, X), 4.0, atol=1e-9)


def test_degenerate_dataset():
    with pytest.raises(DegenerateDataset):
        train_pso(np.zeros((0, 3)), np.zeros((0, 1)), 2)
    with pytest.raises(DimensionMismatch):
        train_pso(np.zeros((4, 3)), np.zeros((5, 1)), 2)


@pytest.mark.parametrize("kw", [dict(swarm_size=0), dict(max_iters=-1), dict(inertia=1.0),
                                dict(inertia=0.0), dict(output_layer="adam")])
def test_pso_config_validation(kw):
    with pytest.raises(ValueError):
        PsoConfig(**kw)


def test_pca_line():
    t = np.linspace(-2, 3, 20)
    X = np.outer(t, [1.0, -2.0, 0.5]) + [3.0, 1.0, 0.0]
    b = fit_pca(X, 0.99)
    assert b.k == 1
    assert np.abs(invert_pca(b, apply_pca(b, X)) - X).max() < 1e-8


def test_pca_full_roundtrip(rng):
    X = rng.normal(size=(30, 6))
    b = fit_pca(X, 1.0)
    assert b.k == 6
    np.testing.assert_allclose(b.components @ b.components.T, np.eye(6), atol=1e-8)
    assert np.abs(invert_pca(b, apply_pca(b, X)) - X).max() < 1e-8


def test_pca_captured_variance(rng):
    X = rng.normal(size=(100, 10)) * np.linspace(3, 0.3, 10)
    b = fit_pca(X, 0.8)
    Xc = X - X.mean(axis=0)
    total = float(np.sum(Xc ** 2)) / X.shape[0]
    mse = float(np.sum((invert_pca(b, apply_pca(b, X)) - X) ** 2)) / X.shape[0]
    assert abs(mse - (1 - b.retained_variance) * total) < 1e-6
    assert b.retained_variance >= 0.8
    ev = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1]
    np.testing.assert_allclose(b.explained, ev[:b.k], rtol=1e-9)


def test_pca_rank_cap(rng):
    X = rng.normal(size=(4, 9))
    assert fit_pca(X, 1.0).k == 3
    with pytest.raises(DegenerateDataset):
        fit_pca(X[:1])
    with pytest.raises(ValueError):
        fit_pca(X, 0.0)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(3, 30), d=st.integers(1, 8), seed=st.integers(0, 10 ** 6))
def test_pca_components_orthonormal(n, d, seed):
    X = np.random.default_rng(seed).normal(size=(n, d))
    b = fit_pca(X, 0.9)
    assert 1 <= b.k <= min(d, n - 1)
    np.testing.assert_allclose(b.components @ b.components.T, np.eye(b.k), atol=1e-8)


def test_pca_network_input(rng):
    X = rng.normal(size=(40, 6))
    Y = X[:, :2] ** 2
    b = fit_pca(X, 0.9)
    res = train_pso(X, Y, 4, PsoConfig(swarm_size=6, max_iters=5), pca=b)
    assert res.params.layer_sizes[0] == b.k
    assert predict(res.params, X).shape == (40, 2)


def test_invert_direct_and_postprocess_stay_inside(rng):
    reduced = ReducedIndexSet(np.array([1, 4, 5]), 1.0)
    p = random_params(rng, n_in=3, h=4, n_out=3)
    img = ConductivityImage(rng.normal(size=8), "m")
    out = postprocess(img, p, reduced)
    outside = np.setdiff1d(np.arange(8), reduced.element_indices)
    assert np.all(out.values[outside] == 0.0)
    np.testing.assert_array_equal(out.values[reduced.element_indices],
                                  predict(p, img.values[[1, 4, 5]]))
    assert np.array_equal(postprocess(img, p, reduced).values, out.values)

    class Mesh:
        n_elements = 8
        mesh_id = "m"

    mask = np.array([True, False, True, True])
    frame = MeasurementFrame(rng.normal(size=4), mask)
    direct = invert_direct(frame, p, reduced, Mesh())
    assert np.all(direct.values[outside] == 0.0)
    with pytest.raises(DimensionMismatch):
        postprocess(img, p, ReducedIndexSet(np.array([1, 2]), 1.0))


def test_network_roundtrip(tmp_path, rng):
    X = rng.normal(size=(20, 5))
    b = fit_pca(X, 0.9)
    p = train_pso(X, X[:, :2], 3, PsoConfig(swarm_size=4, max_iters=2), pca=b).params
    write_network(p, tmp_path / "n.eitnet")
    text = (tmp_path / "n.eitnet").read_text()
    assert text.startswith("eitnet v1\nlayers ")
    q = read_network(tmp_path / "n.eitnet")
    assert np.array_equal(predict(p, X), predict(q, X))
    write_network(q, tmp_path / "again.eitnet")
    assert (tmp_path / "again.eitnet").read_text() == text
    (tmp_path / "bad").write_text("nope\n")
    with pytest.raises(ValueError):
        read_network(tmp_path / "bad")


def test_training_log_csv(tmp_path):
    write_training_log([(0, 1.5), (1, 0.25)], tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text() == "iteration,best_mse\n0,1.5\n1,0.25\n"
