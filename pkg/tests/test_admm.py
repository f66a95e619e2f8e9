import itertools

import numpy as np
import pytest

from structsparse.objectives import LayerReconstruction, ToyCNN, least_squares, toy_classification_data
from structsparse.pruning import (
    AdmmConfig,
    Column,
    Connectivity,
    Filter,
    Pattern,
    PruneTask,
    PruningError,
    admm_prune,
    project,
    sparsity_report,
)


def ls_instance(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((16, 4))
    Y = X @ rng.standard_normal((4, 4)) + 0.1 * rng.standard_normal((16, 4))
    W0 = 0.1 * rng.standard_normal((4, 4))
    return X, Y, W0


def curvature_config(X):
    """rho matched to the largest Hessian eigenvalue of the least-squares loss."""
    return AdmmConfig(rho=float(np.linalg.eigvalsh(2 * X.T @ X)[-1]))


def best_subset_loss(X, Y, k=2):
    best = np.inf
    for cols in itertools.combinations(range(Y.shape[1]), k):
        W = np.zeros((X.shape[1], Y.shape[1]))
        W[:, cols] = np.linalg.lstsq(X, Y[:, cols], rcond=None)[0]
        best = min(best, float(np.sum((X @ W - Y) ** 2)))
    return best


def test_rho_must_be_positive():
    with pytest.raises(PruningError):
        AdmmConfig(rho=0.0)
    with pytest.raises(PruningError):
        AdmmConfig(step_size=0.0)


def test_unknown_layer_rejected():
    with pytest.raises(PruningError):
        PruneTask({0: np.zeros((2, 2))}, {1: Column(0.5)}, lambda w: (0.0, {}))


def test_full_keep_equals_plain_gradient_descent():
    X, Y, W0 = ls_instance(3)
    f = least_squares(X, Y)
    cfg = AdmmConfig(admm_iters=4, primal_steps=5, finetune_steps=7, step_size=1e-2)
    res = admm_prune(PruneTask({0: W0}, {0: Column(1.0)}, f), cfg)
    W = W0.copy()
    for _ in range(4 * 5 + 7):
        W = W - 1e-2 * f({0: W})[1][0]
    assert np.array_equal(res.weights[0], W)


@pytest.mark.parametrize("seed", range(4))
def test_least_squares_example(seed):
    X, Y, W0 = ls_instance(seed)
    f = least_squares(X, Y)
    res = admm_prune(PruneTask({0: W0}, {0: Column(0.5)}, f), curvature_config(X))
    assert sparsity_report({0: res.weights[0]}, {0: Column(0.5)})[0]["satisfies"]
    assert res.final_loss >= best_subset_loss(X, Y) * (1 - 1e-9)
    cfg = curvature_config(X)
    mask = project(W0, Column(0.5)) != 0
    W = project(W0, Column(0.5))
    for _ in range(cfg.admm_iters * cfg.primal_steps + cfg.finetune_steps):
        W = W - cfg.step_size * f({0: W})[1][0] * mask
    assert res.final_loss <= f({0: W})[0] * (1 + 1e-9)


def test_filter_structure_on_least_squares():
    X, Y, W0 = ls_instance(1)
    res = admm_prune(PruneTask({0: W0}, {0: Filter(0.5)}, least_squares(X, Y)))
    assert np.count_nonzero(res.weights[0].any(axis=1)) == 2


def test_residual_trend_and_feasibility():
    for seed in range(5):
        X, Y, W0 = ls_instance(seed)
        res = admm_prune(PruneTask({0: W0}, {0: Column(0.5)}, least_squares(X, Y)),
                         curvature_config(X))
        r = res.residuals[0]
        assert len(r) == AdmmConfig().admm_iters
        assert r[-1] <= r[0]
        assert np.array_equal(project(res.weights[0], Column(0.5)), res.weights[0])
        st = res.state
        assert st.W[0].shape == st.Z[0].shape == st.U[0].shape
        assert np.array_equal(project(st.Z[0], Column(0.5)), st.Z[0])


def test_non_finite_loss_reports_iteration_and_layer():
    def bad(weights):
        w = weights[7]
        return 1.0, {7: np.full_like(w, np.inf)}
    with pytest.raises(PruningError, match="layer 7"):
        admm_prune(PruneTask({7: np.ones((2, 2))}, {7: Column(0.5)}, bad))


def test_toy_cnn_gradient_matches_finite_differences():
    x, y = toy_classification_data(n=12, classes=3, size=6, seed=1)
    net = ToyCNN(x, y, 3)
    W = net.init_weights(4, seed=2)
    _, g = net(W)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for layer in W:
        for _ in range(6):
            idx = tuple(rng.integers(0, s) for s in W[layer].shape)
            plus = {k: v.copy() for k, v in W.items()}
            minus = {k: v.copy() for k, v in W.items()}
            plus[layer][idx] += eps
            minus[layer][idx] -= eps
            fd = (net(plus)[0] - net(minus)[0]) / (2 * eps)
            assert abs(fd - g[layer][idx]) <= 1e-5 * max(1.0, abs(fd))


def test_toy_cnn_pruning_satisfies_all_structures():
    x, y = toy_classification_data(n=30, classes=3, size=6, seed=3)
    net = ToyCNN(x, y, 3)
    W = net.init_weights(8, seed=4)
    structures = {0: Pattern(3, 3, 4, 4, keep_ratio=0.5), 1: Column(0.5)}
    cfg = AdmmConfig(admm_iters=10, primal_steps=10, step_size=0.1, finetune_steps=30)
    res = admm_prune(PruneTask(W, structures, net), cfg)
    rep = sparsity_report(res.weights, res.structures)
    assert all(r["satisfies"] for r in rep.values())
    assert rep[1]["retained_fraction"] == 0.5
    assert np.isfinite(res.final_loss)


def test_layer_reconstruction_gradient_and_minimum(rng):
    W0 = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
    X = LayerReconstruction.lower("Conv2D", x, (3, 3), 1, 1)
    f = LayerReconstruction({0: W0}, {0: X})
    val, g = f({0: W0})
    assert val == pytest.approx(0.0, abs=1e-9)
    W = W0 + 0.1 * rng.standard_normal(W0.shape)
    val, g = f({0: W})
    D = (W - W0).reshape(3, -1)
    G = X.astype(np.float64) @ X.T.astype(np.float64)
    expect = np.sum((D @ G) * D) / np.linalg.eigvalsh(G)[-1]
    assert val == pytest.approx(expect, rel=1e-9)
    E = np.zeros_like(W)
    E[1, 0, 2, 1] = 1e-6
    fd = (f({0: W + E})[0] - f({0: W - E})[0]) / 2e-6
    assert fd == pytest.approx(g[0][1, 0, 2, 1], rel=1e-5)


def test_connectivity_admm_on_reconstruction(rng):
    W0 = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    f = LayerReconstruction({0: W0}, {0: LayerReconstruction.lower("Conv2D", x, (3, 3), 1, 1)})
    res = admm_prune(PruneTask({0: W0}, {0: Connectivity(0.5)}, f),
                     AdmmConfig(step_size=0.5, admm_iters=10, primal_steps=5, finetune_steps=20))
    one_shot = f({0: project(W0, Connectivity(0.5))})[0]
    assert res.final_loss <= one_shot
    assert res.weights[0].dtype == np.float32
