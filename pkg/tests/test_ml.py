import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crimeflow.ml import (Binner, MlpFit, TreeParams, WindowImportance, aggregate_ranks, early_stop, fit_gbm,
                          fit_mlp, fit_regression_tree, fit_rf, grid_search, load_grid_file,
                          permutation_importance)
from crimeflow.ml import _split_py, kernels
from crimeflow.ml.mlp import loss_and_grad, init_params


# ---------------------------------------------------------------- trees


def test_constant_target_is_single_leaf():
    x = np.random.default_rng(0).normal(size=(50, 3))
    t = fit_regression_tree(x, np.full(50, 4.0))
    assert t.n_leaves == 1 and t.predict(x).tolist() == [4.0] * 50


def test_step_function_recovered():
    x = np.arange(100.0)[:, None]
    y = np.where(x[:, 0] < 37, 1.0, 5.0)
    t = fit_regression_tree(x, y, TreeParams(n_bins=128, min_rows=1))
    assert t.n_leaves == 2 and t.feature[0] == 0 and t.threshold[0] == 36
    assert t.predict(np.array([[36.0], [36.5]])).tolist() == [1.0, 5.0]


def brute_force_split(x, y, min_rows):
    """Largest SSE reduction over every column and every observed threshold."""
    sse = lambda v: float(np.sum((v - v.mean()) ** 2)) if len(v) else 0.0
    best = 0.0
    for j in range(x.shape[1]):
        for thr in np.unique(x[:, j])[:-1]:
            m = x[:, j] <= thr
            if m.sum() >= min_rows and (~m).sum() >= min_rows:
                best = max(best, sse(y) - sse(y[m]) - sse(y[~m]))
    return best


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_root_split_matches_exhaustive_search(seed, min_rows):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 12, size=(40, 3)).astype(float)
    y = rng.normal(size=40)
    t = fit_regression_tree(x, y, TreeParams(max_depth=1, min_rows=min_rows, n_bins=64,
                                             min_split_improvement=0))
    want = brute_force_split(x, y, min_rows)
    if t.n_leaves == 1:
        assert want <= 1e-12
        return
    m = x[:, t.feature[0]] <= t.threshold[0]
    got = np.sum((y - y.mean()) ** 2) - np.sum((y[m] - y[m].mean()) ** 2) - np.sum((y[~m] - y[~m].mean()) ** 2)
    assert got == pytest.approx(want, rel=1e-10)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernel not built")
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kernel_parity(seed, min_rows):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(2, 200)), int(rng.integers(1, 6))
    x = rng.normal(size=(n, k))
    x[:, 0] = np.round(x[:, 0])
    b = Binner(x, int(rng.integers(2, 40)))
    codes = b.transform(x)
    y = rng.normal(size=n)
    rows = np.sort(rng.choice(n, int(rng.integers(1, n + 1)), replace=True)).astype(np.intp)
    cols = np.arange(k, dtype=np.intp)
    f1, b1, g1 = kernels.best_split(codes, y, rows, cols, b.n_bins, min_rows)
    f2, b2, g2 = _split_py.best_split(codes, y, rows, cols, b.n_bins, min_rows)
    assert g1 == pytest.approx(g2, rel=1e-9, abs=1e-12)
    if g2 > 1e-9:
        assert (f1, b1) == (f2, b2)


def test_binner_boundaries():
    x = np.arange(10.0)[:, None]
    b = Binner(x, 4)
    codes = b.transform(x)[:, 0]
    assert len(b.cuts[0]) == 3 and codes.max() == 3
    for c, v in zip(codes, x[:, 0]):
        assert all((c <= j) == (v <= cut) for j, cut in enumerate(b.cuts[0]))


def test_tree_params_validation():
    for kw in ({"max_depth": 0}, {"n_bins": 1}, {"row_sample_rate": 0}, {"min_rows": 0}):
        with pytest.raises(ValueError):
            TreeParams(**kw)


# ---------------------------------------------------------------- ensembles


def nonlinear(n, rng):
    x = rng.uniform(-2, 2, size=(n, 3))
    return x, np.sin(2 * x[:, 0]) * x[:, 1] + (x[:, 2] > 0) + 0.1 * rng.normal(size=n)


def test_rf_is_mean_of_trees_and_deterministic():
    rng = np.random.default_rng(0)
    x, y = nonlinear(200, rng)
    f = fit_rf(x, y, TreeParams(max_depth=5), k=7, rng=3)
    np.testing.assert_allclose(f.predict(x), f.tree_predictions(x).mean(axis=0), rtol=1e-14)
    g = fit_rf(x, y, TreeParams(max_depth=5), k=7, rng=3)
    assert f.predict(x).tobytes() == g.predict(x).tobytes()


def test_single_tree_forest_without_bootstrap_is_a_tree():
    x, y = nonlinear(150, np.random.default_rng(1))
    p = TreeParams(max_depth=6)
    assert fit_rf(x, y, p, k=1, rng=0, bootstrap=False).predict(x).tolist() == \
        fit_regression_tree(x, y, p).predict(x).tolist()


def test_gbm_single_full_rate_tree_is_a_tree():
    x, y = nonlinear(150, np.random.default_rng(2))
    p = TreeParams(max_depth=4)
    g = fit_gbm(x, y, p, learn_rate=1.0, max_trees=1, early_stopping=None, rng=0)
    # the first tree fits residuals about the mean, then the mean is added back
    np.testing.assert_allclose(g.predict(x), fit_regression_tree(x, y, p).predict(x), atol=1e-12)


def test_gbm_training_error_decreases():
    x, y = nonlinear(300, np.random.default_rng(3))
    g = fit_gbm(x, y, TreeParams(max_depth=3), learn_rate=0.1, max_trees=60, early_stopping=None, rng=0)
    mse = []
    for m in range(1, 61, 5):
        g.n_trees_used = m
        mse.append(np.mean((y - g.predict(x)) ** 2))
    assert all(a >= b for a, b in zip(mse, mse[1:]))


def test_early_stop_rule():
    assert not early_stop([10, 9, 8, 7, 6])
    assert not early_stop([10, 9, 9, 9, 9, 9, 8.99])
    assert early_stop([10, 9, 9, 9, 9, 9, 9])
    assert early_stop([10, 9, 9.5, 9.2, 9.0, 8.9995, 9.1])
    assert not early_stop([10, 9, 9.5, 9.2, 9.0, 8.999, 9.1])


def test_gbm_early_stopping_truncates_to_best():
    rng = np.random.default_rng(4)
    x, y = nonlinear(200, rng)
    xv, yv = nonlinear(100, rng)
    g = fit_gbm(x, y, TreeParams(max_depth=6, min_rows=2), learn_rate=0.5, max_trees=1000,
                x_valid=xv, y_valid=yv, rng=0)
    assert len(g.trees) < 1000
    assert g.n_trees_used == 10 * (int(np.argmin(g.scores)) + 1)
    assert np.mean((yv - g.predict(xv)) ** 2) == pytest.approx(min(g.scores), rel=1e-12)
    with pytest.raises(ValueError, match="validation"):
        fit_gbm(x, y)


def test_ensembles_beat_linear_on_nonlinear_signal():
    rng = np.random.default_rng(5)
    x, y = nonlinear(1000, rng)
    xt, yt = nonlinear(500, rng)
    xv, yv = nonlinear(200, rng)
    design = lambda a: np.column_stack([np.ones(len(a)), a])
    beta = np.linalg.lstsq(design(x), y, rcond=None)[0]
    lr = np.mean((yt - design(xt) @ beta) ** 2)
    rf = np.mean((yt - fit_rf(x, y, TreeParams(max_depth=10), k=30, rng=0).predict(xt)) ** 2)
    gbm = np.mean((yt - fit_gbm(x, y, TreeParams(max_depth=4), max_trees=300, x_valid=xv, y_valid=yv,
                                rng=0).predict(xt)) ** 2)
    assert rf < 0.5 * lr and gbm < 0.5 * lr


# ---------------------------------------------------------------- MLP


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    z, t = rng.normal(size=(20, 4)), rng.normal(size=20)
    ws, bs = init_params([4, 6, 5, 1], rng)
    # nonzero biases keep pre-activations away from the ReLU kink
    bs = [rng.normal(size=b.shape) for b in bs]
    _, gw, gb = loss_and_grad(ws, bs, z, t)
    for params, grads in ((ws, gw), (bs, gb)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-6
                up = loss_and_grad(ws, bs, z, t)[0]
                p[idx] = old - 1e-6
                down = loss_and_grad(ws, bs, z, t)[0]
                p[idx] = old
                assert g[idx] == pytest.approx((up - down) / 2e-6, abs=1e-6)


def test_linear_network_matches_ols():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3))
    y = x @ [1, -2, 0.5] + 3 + 0.3 * rng.normal(size=200)
    ols = np.linalg.lstsq(np.column_stack([np.ones(200), x]), y, rcond=None)[0]
    w, b = fit_mlp(x, y, hidden=(), epochs=2000, batch_size=None, rng=1).linear_coefficients()
    np.testing.assert_allclose(np.r_[b, w], ols, atol=1e-3)


def test_zero_output_weights_predict_bias():
    rng = np.random.default_rng(2)
    ws, bs = init_params([3, 8, 1], rng)
    ws[-1][:] = 0
    bs[-1][:] = 0.25
    m = MlpFit([3, 8, 1], ws, bs, 0, np.zeros(3), np.ones(3), y_mean=1.0, y_scale=2.0)
    assert m.predict(rng.normal(size=(5, 3))).tolist() == [1.5] * 5


def test_mlp_training_reduces_loss_and_is_deterministic():
    x, y = nonlinear(300, np.random.default_rng(6))
    a = fit_mlp(x, y, hidden=(32,), epochs=10, rng=4)
    b = fit_mlp(x, y, hidden=(32,), epochs=10, rng=4)
    assert a.losses[-1] < a.losses[0]
    assert a.predict(x).tobytes() == b.predict(x).tobytes()
    with pytest.raises(ValueError):
        fit_mlp(x, y, lr_decay=1.0)


# ---------------------------------------------------------------- grid search


class Const:
    def __init__(self, v):
        self.v = v

    def predict(self, x):
        return np.full(len(x), self.v)


def test_grid_search_finds_injected_cell():
    xv, yv = np.zeros((5, 1)), np.full(5, 3.0)
    res = grid_search(lambda c, *a: Const(c["v"]), {"v": [0.0, 1.0, 2.0, 3.0, 4.0]}, (xv, yv), (xv, yv))
    assert res.best_index == 3 and res.best_mse == 0.0
    assert res.best_mse == res.mse.min()
    assert res.best_params == {"v": 3.0}


def test_grid_search_singleton_and_ties():
    xv, yv = np.zeros((4, 1)), np.ones(4)
    res = grid_search(lambda c, *a: Const(c["v"]), {"v": [0.0, 2.0]}, (xv, yv), (xv, yv))
    assert res.best_index == 0
    one = grid_search("RF", {"max_depth": [3], "n_trees": [2]}, (xv, yv), (xv, yv))
    assert one.best_params == {"max_depth": 3, "n_trees": 2} and len(one.cells) == 1


def test_grid_search_seeding_is_per_cell():
    x, y = nonlinear(120, np.random.default_rng(7))
    grid = {"max_depth": [3, 4], "n_trees": [5]}
    a = grid_search("RF", grid, (x, y), (x, y), seed=1, window=5)
    b = grid_search("RF", {"max_depth": [3, 4, 5], "n_trees": [5]}, (x, y), (x, y), seed=1, window=5)
    np.testing.assert_array_equal(a.mse, b.mse[:2])


def test_grid_file_validation(tmp_path):
    p = tmp_path / "grid.yaml"
    p.write_text("gbm:\n  learn_rate: [0.05, 0.1]\n  max_depth: 3\n")
    assert load_grid_file(p) == {"GBM": {"learn_rate": [0.05, 0.1], "max_depth": [3]}}
    p.write_text("RF:\n  learn_rate: [0.1]\n")
    with pytest.raises(ValueError, match="unknown RF grid parameter 'learn_rate'"):
        load_grid_file(p)
    p.write_text("SVM:\n  c: [1]\n")
    with pytest.raises(ValueError, match="unknown ML model kind"):
        load_grid_file(p)
    p.write_text("GBM:\n  histogram_type: [random]\n")
    with pytest.raises(ValueError, match="quantiles_global"):
        load_grid_file(p)


# ---------------------------------------------------------------- importance


class Linear:
    def __init__(self, coef):
        self.coef = np.asarray(coef, float)

    def predict(self, x):
        return x @ self.coef


def test_importance_orders_by_effect_size():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3))
    y = 10 * x[:, 0] + 0.1 * x[:, 1]
    imp = permutation_importance(Linear([10, 0.1, 0]), x, y, rng=1, names=["a", "b", "c"])
    assert imp.ranks.tolist() == [1, 2, 3] and imp.importance[2] == 0


def test_importance_mean_rank_one_across_windows():
    rng = np.random.default_rng(1)
    wins = []
    for _ in range(6):
        x = rng.normal(size=(100, 3))
        wins.append(permutation_importance(Linear([10, 0.1, 0]), x, 10 * x[:, 0] + 0.1 * x[:, 1], rng=rng))
    rep = aggregate_ranks(wins)
    assert rep.mean_rank[0] == 1.0 and rep.ordered()[0] == ("x0", 1.0)
    assert rep.ranks_by_window.shape == (6, 3)


def test_importance_errors_and_constant_column():
    x = np.column_stack([np.ones(40), np.arange(40.0)])
    imp = permutation_importance(Linear([1, 1]), x, x.sum(1), rng=0)
    assert imp.importance[0] == 0 and imp.ranks.tolist() == [2, 1]
    with pytest.raises(ValueError, match="at least 30"):
        permutation_importance(Linear([1, 1]), x[:10], x[:10].sum(1))
    with pytest.raises(ValueError, match="disagree"):
        aggregate_ranks([WindowImportance(("a",), np.zeros(1), np.ones(1)),
                         WindowImportance(("b",), np.zeros(1), np.ones(1))])
