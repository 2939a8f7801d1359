import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aedetect.detectors import (ContractError, FitError, average_path_length,
                                fit_isolation_forest, fit_linear_svm, fit_random_forest, grid_search_cv, harmonic,
                                iso_score, load_model, load_scores, path_score, rf_importances, rf_score,
                                save_model, save_scores, stratified_folds, svm_score)
from aedetect.evaluation import auroc


def _separable_20(seed=0):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, (200, 2))
    w = np.array([np.cos(0.7), np.sin(0.7)])
    m = x @ w - 0.1
    keep = np.flatnonzero(np.abs(m) > 0.25)[:20]
    return x[keep], (m[keep] > 0).astype(int)


def _exhaustively_separable(x, y) -> bool:
    """Try every direction on a fine angle grid and every threshold between sorted projections."""
    for theta in np.linspace(0, 2 * np.pi, 3600, endpoint=False):
        proj = x @ np.array([np.cos(theta), np.sin(theta)])
        order = np.argsort(proj)
        ys = y[order]
        for k in range(len(ys) + 1):
            if np.all(ys[:k] == 0) and np.all(ys[k:] == 1):
                return True
    return False


def test_svm_one_dimensional_sign():
    x = np.array([[-1.0], [1.0]])
    y = np.array([0, 1])
    s = svm_score(fit_linear_svm(x, y), x).values
    assert s[0] < 0 < s[1]


def test_svm_separates_twenty_points():
    x, y = _separable_20()
    assert len(x) == 20 and 0 < y.sum() < 20
    assert _exhaustively_separable(x, y)
    m = fit_linear_svm(x, y, C=100.0, epochs=2000)
    assert np.array_equal(svm_score(m, x).values > 0, y == 1)


def test_svm_duplication_keeps_decisions(rng):
    x = rng.normal(size=(40, 3))
    y = (x[:, 0] + 0.5 * rng.normal(size=40) > 0).astype(int)
    a = fit_linear_svm(x, y, seed=2)
    b = fit_linear_svm(np.vstack([x, x]), np.concatenate([y, y]), seed=2)
    probe = rng.normal(size=(200, 3))
    assert np.array_equal(svm_score(a, probe).values > 0, svm_score(b, probe).values > 0)


def test_svm_single_class_and_contracts():
    with pytest.raises(FitError):
        fit_linear_svm(np.ones((4, 2)), np.zeros(4, int))
    with pytest.raises(ContractError):
        fit_linear_svm(np.empty((0, 2)), np.empty(0, int))
    with pytest.raises(ContractError):
        fit_linear_svm(np.array([[np.nan, 1.0], [0.0, 1.0]]), [0, 1])
    with pytest.raises(ContractError):
        fit_linear_svm(np.ones((2, 2)), [0, 2])
    with pytest.raises(ContractError):
        fit_random_forest(np.empty((0, 3)), np.empty(0, int))
    with pytest.raises(ContractError):
        fit_isolation_forest(np.empty((0, 3)))
    with pytest.raises(FitError):
        fit_isolation_forest(np.ones((1, 3)))


def test_constant_column_gets_unit_std(rng):
    x = np.column_stack([rng.normal(size=30), np.full(30, 4.0)])
    m = fit_linear_svm(x, (x[:, 0] > 0).astype(int))
    assert m.std[1] == 1.0 and np.all(m.std > 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.sampled_from([0.5, 2.0, 8.0, 1024.0]), shift=st.integers(-64, 64))
def test_svm_auroc_invariant_to_affine_column_rescaling(seed, scale, shift):
    r = np.random.default_rng(seed)
    x = r.normal(size=(60, 3))
    y = (x[:, 0] - x[:, 2] + r.normal(size=60) > 0).astype(int)
    if y.min() == y.max():
        return
    x2 = x.copy()
    x2[:, 1] = x2[:, 1] * scale + shift
    a = auroc(svm_score(fit_linear_svm(x, y, epochs=50), x).values, y)
    b = auroc(svm_score(fit_linear_svm(x2, y, epochs=50), x2).values, y)
    assert a == pytest.approx(b, abs=1e-12)


def test_grid_single_value_and_ties(rng):
    x = rng.normal(size=(30, 2))
    y = np.repeat([0, 1], 15)
    assert grid_search_cv(x, y, grid=[3.0], folds=3)["C"] == 3.0
    # identical feature rows: every C scores the same fold AUROC
    flat = np.zeros((30, 2))
    out = grid_search_cv(flat, y, grid=[10.0, 0.1, 1.0], folds=3)
    assert len(set(out["cv_auroc"].values())) == 1
    assert out["C"] == 0.1


def test_grid_avoids_overfitting_noise():
    r = np.random.default_rng(7)
    n, d = 80, 40
    x = r.normal(size=(n, d))
    y = (x[:, 0] > 0).astype(int)
    flip = r.choice(n, 16, replace=False)
    y[flip] = 1 - y[flip]
    grid = [0.001, 0.01, 0.1, 1.0, 10.0, 1000.0]
    out = grid_search_cv(x, y, grid=grid, folds=5, seed=1, epochs=400)
    assert out["C"] < max(grid)


def test_fold_feasibility():
    with pytest.raises(FitError):
        stratified_folds(np.array([0, 0, 0, 1, 1]), 3, 0)
    parts = stratified_folds(np.repeat([0, 1], [10, 15]), 5, 0)
    assert sorted(np.concatenate(parts).tolist()) == list(range(25))


def test_rf_dominant_feature(rng):
    x = rng.normal(size=(200, 6))
    y = (x[:, 4] > 0).astype(int)
    imp = rf_importances(fit_random_forest(x, y, trees=30, seed=1))
    assert imp.argmax() == 4 and np.all(imp[4] > np.delete(imp, 4))
    assert abs(imp.sum() - 1) <= 1e-9


def test_rf_independent_labels_stay_near_uniform():
    d = 8
    for seed in range(5):
        r = np.random.default_rng(100 + seed)
        x = r.normal(size=(300, d))
        y = r.integers(0, 2, 300)
        imp = rf_importances(fit_random_forest(x, y, trees=50, seed=seed))
        assert imp.max() <= 3.0 / d
        assert abs(imp.sum() - 1) <= 1e-9


def test_rf_bit_reproducible(rng):
    x = rng.normal(size=(80, 4))
    y = (x[:, 0] * x[:, 1] > 0).astype(int)
    a, b = fit_random_forest(x, y, trees=10, seed=3), fit_random_forest(x, y, trees=10, seed=3)
    assert a.to_dict() == b.to_dict()
    assert rf_score(a, x).values.tobytes() == rf_score(b, x).values.tobytes()


def test_rf_constant_features_warn():
    m = fit_random_forest(np.ones((20, 3)), np.repeat([0, 1], 10), trees=5)
    with pytest.warns(RuntimeWarning, match="no splits"):
        imp = rf_importances(m)
    np.testing.assert_allclose(imp, [1 / 3] * 3)


def test_average_path_length_closed_form():
    for n in (3, 10, 256):
        assert average_path_length(n) == pytest.approx(2 * harmonic(n - 1) - 2 * (n - 1) / n)
        assert harmonic(n) == pytest.approx(sum(1 / k for k in range(1, n + 1)))
    assert average_path_length(1) == 0.0 and average_path_length(2) == 1.0


def test_score_at_expected_path_equals_half():
    c = average_path_length(256)
    assert path_score(c, c) == 0.5
    paths = np.linspace(0, 3 * c, 50)
    s = path_score(paths, c)
    assert np.all(np.diff(s) <= 0) and np.all((s > 0) & (s <= 1))


def test_iforest_outlier_scores_highest(rng):
    train = rng.normal(0, 0.1, (400, 2))
    probe = np.vstack([train[:100], [[10.0, 10.0]]])
    s = iso_score(fit_isolation_forest(train, seed=4), probe).values
    assert s.argmax() == 100 and s[100] > s[:100].max()
    assert np.all((s > 0) & (s < 1))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_iforest_scores_in_open_unit_interval(seed):
    r = np.random.default_rng(seed)
    model = fit_isolation_forest(r.normal(size=(40, 3)), trees=10, psi=32, seed=seed)
    s = iso_score(model, r.normal(scale=50, size=(30, 3))).values
    assert np.all((s > 0) & (s < 1))


def test_iforest_psi_clamped_with_warning(rng):
    with pytest.warns(RuntimeWarning, match="clamping"):
        m = fit_isolation_forest(rng.normal(size=(50, 2)), trees=5, psi=256)
    assert m.psi == 50 and m.c_psi == average_path_length(50)


def test_iforest_tree_height_limit(rng):
    m = fit_isolation_forest(rng.normal(size=(300, 2)), trees=5, psi=64)
    _, depth = m.trees[0].leaf_index(rng.normal(size=(500, 2)))
    assert depth.max() <= math.ceil(math.log2(64))


def test_model_and_score_persistence(tmp_path, rng):
    x = rng.normal(size=(60, 3))
    y = (x[:, 0] > 0).astype(int)
    models = [fit_linear_svm(x, y), fit_random_forest(x, y, trees=4), fit_isolation_forest(x, trees=4, psi=32)]
    scorers = [svm_score, rf_score, iso_score]
    for m, score in zip(models, scorers):
        save_model(m, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert score(back, x).values.tobytes() == score(m, x).values.tobytes()
    s = iso_score(models[2], x).values
    save_scores(tmp_path / "s.csv", np.arange(60) * 3, s, y)
    ids, s2, y2 = load_scores(tmp_path / "s.csv")
    assert np.array_equal(ids, np.arange(60) * 3) and np.array_equal(s2, s) and np.array_equal(y2, y)
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "sample_id,score,label"
