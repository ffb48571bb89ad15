import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from tlroadmap.learners import NLL, LearnerSpec, fit, parse_learner, predict
from tlroadmap.simulation import DGP_A, generate
from tlroadmap.super_learner import (
    SuperLearnerError,
    SuperLearnerWarning,
    cv_predictions,
    fit_super_learner,
    make_folds,
    solve_weights,
)


def ensemble_risk(Z, y, w):
    return NLL(y, Z @ w)


class TestFolds:
    def test_225_into_20(self):
        sizes = make_folds(225, 20, seed=1).sizes()
        assert sorted(sizes.tolist()) == [11] * 15 + [12] * 5

    def test_leave_one_out(self):
        assert make_folds(4, 4, seed=3).sizes().tolist() == [1, 1, 1, 1]

    def test_stratified_events_balanced(self):
        y = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], dtype=float)
        folds = make_folds(10, 2, seed=5, stratify=y)
        for v in range(2):
            assert y[folds.fold == v].sum() == 2

    @pytest.mark.parametrize("n, V", [(5, 6), (10, 1)])
    def test_bad_fold_counts(self, n, V):
        with pytest.raises(ValueError):
            make_folds(n, V)

    def test_tiny_stratum_is_named(self):
        y = np.array([1.0] + [0.0] * 9)
        with pytest.raises(ValueError, match="stratum 1.0"):
            make_folds(10, 2, stratify=y)

    def test_deterministic_per_seed(self):
        a, b = make_folds(50, 7, seed=11), make_folds(50, 7, seed=11)
        np.testing.assert_array_equal(a.fold, b.fold)
        assert not np.array_equal(a.fold, make_folds(50, 7, seed=12).fold)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(4, 120), st.integers(2, 20), st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
    def test_balance_overall_and_within_strata(self, n, V, seed, frac):
        V = min(V, n)
        y = (np.arange(n) < max(2, int(frac * n))).astype(float)
        if n - y.sum() < 2:
            y[-2:] = 0.0
        f = make_folds(n, V, seed, stratify=y)
        sizes = f.sizes()
        assert sizes.max() - sizes.min() <= 1
        for level in (0.0, 1.0):
            within = np.bincount(f.fold[y == level], minlength=V)
            assert within.max() - within.min() <= 1


class TestCvPredictions:
    def test_intercept_only_hand_computed(self):
        y = np.array([1, 0, 0, 1, 1, 1, 0, 1], dtype=float)
        X = np.zeros((8, 1))
        folds = make_folds(8, 2, seed=0)
        Z, risks, kept = cv_predictions([LearnerSpec("intercept_only")], X, y, folds)
        expected = np.empty(8)
        for v in range(2):
            train, test = folds.split(v)
            expected[test] = y[train].mean()
        np.testing.assert_allclose(Z[:, 0], expected, atol=1e-15)
        assert risks[0] == pytest.approx(NLL(y, expected), abs=1e-15)

    def test_identical_specs_identical_columns(self):
        X, y = _dgp_xy(200, 1)
        lib = [LearnerSpec("logistic"), LearnerSpec("logistic")]
        Z, risks, _ = cv_predictions(lib, X, y, make_folds(200, 5, 2))
        np.testing.assert_allclose(Z[:, 0], Z[:, 1], atol=1e-12)
        assert abs(risks[0] - risks[1]) < 1e-12

    def test_held_out_discipline(self):
        X, y = _dgp_xy(120, 2)
        folds = make_folds(120, 4, seed=3)
        Z, _, _ = cv_predictions([LearnerSpec("logistic")], X, y, folds)
        train, test = folds.split(1)
        refit = fit(LearnerSpec("logistic"), X[train], y[train])
        np.testing.assert_allclose(Z[test, 0], predict(refit, X[test]), atol=1e-15)
        # Changing a training row outside fold 1 leaves fold-1 predictions of a model
        # trained without that row unchanged.
        y2 = y.copy()
        y2[test[0]] = 1 - y2[test[0]]
        Z2, _, _ = cv_predictions([LearnerSpec("logistic")], X, y2, folds)
        np.testing.assert_array_equal(Z2[test, 0], Z[test, 0])

    def test_learner_failing_everywhere_is_dropped(self):
        _, y = _dgp_xy(60, 4)
        lib = [LearnerSpec("stratified_mean"), LearnerSpec("logistic")]
        with pytest.warns(SuperLearnerWarning, match="dropped"):
            Z, risks, kept = cv_predictions(lib, np.full((60, 1), np.nan), y, make_folds(60, 3, 0))
        assert kept == []
        assert Z.shape == (60, 0)
        assert np.all(np.isnan(risks))
        with pytest.raises(SuperLearnerError), pytest.warns(SuperLearnerWarning):
            fit_super_learner(lib, np.full((60, 1), np.nan), y, make_folds(60, 3, 0))

    def test_threaded_matches_serial(self):
        X, y = _dgp_xy(150, 5)
        lib = [LearnerSpec("logistic"), parse_learner("boosted_stumps:rounds=20")]
        folds = make_folds(150, 5, 6)
        a = cv_predictions(lib, X, y, folds, n_jobs=1)
        b = cv_predictions(lib, X, y, folds, n_jobs=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


def _dgp_xy(n, seed):
    ds = generate(DGP_A, n, seed)
    X = ds.frame[["W1", "W2", "W3"]].to_numpy()
    return X, ds.A


class TestSolveWeights:
    def test_single_column(self):
        y = np.array([0.0, 1.0, 1.0])
        assert solve_weights(np.array([[0.2], [0.7], [0.6]]), y).tolist() == [1.0]

    def test_dominating_column(self):
        rng = np.random.default_rng(0)
        y = (rng.random(300) < 0.4).astype(float)
        good = np.where(y == 1, 0.8, 0.2)
        bad = np.where(y == 1, 0.6, 0.4)
        w = solve_weights(np.column_stack([bad, good]), y)
        assert w[1] >= 0.999

    def test_duplicate_columns(self):
        X, y = _dgp_xy(300, 7)
        Z, _, _ = cv_predictions([LearnerSpec("intercept_only"), LearnerSpec("logistic")], X, y, make_folds(300, 5, 1))
        w1 = solve_weights(Z, y)
        w2 = solve_weights(np.column_stack([Z, Z[:, 1]]), y)
        assert w2[1] + w2[2] == pytest.approx(w1[1], abs=1e-9)
        np.testing.assert_allclose(np.column_stack([Z, Z[:, 1]]) @ w2, Z @ w1, atol=1e-9)

    def test_degenerate_matrix_uniform_with_warning(self):
        Z = np.full((10, 3), 0.3)
        with pytest.warns(SuperLearnerWarning):
            w = solve_weights(Z, np.r_[np.zeros(5), np.ones(5)])
        np.testing.assert_allclose(w, 1 / 3)

    def test_tie_goes_to_lower_index(self):
        y = np.array([0.0, 1.0, 0.0, 1.0])
        col = np.array([0.3, 0.7, 0.4, 0.6])
        worse = np.full(4, 0.5)
        w = solve_weights(np.column_stack([worse, col, col]), y)
        assert w[1] > 0.999 and w[2] < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_simplex_and_optimality(self, seed, k):
        rng = np.random.default_rng(seed)
        n = 60
        y = (rng.random(n) < 0.5).astype(float)
        Z = expit(rng.normal(size=(n, k)) + (y[:, None] - 0.5) * rng.uniform(0, 2, k))
        w = solve_weights(Z, y)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1) < 1e-12
        vertex = min(NLL(y, Z[:, j]) for j in range(k))
        assert ensemble_risk(Z, y, w) <= vertex + 1e-9
        # no random simplex point does better
        for _ in range(20):
            u = rng.dirichlet(np.ones(k))
            assert ensemble_risk(Z, y, w) <= ensemble_risk(Z, y, u) + 1e-9


class TestFitSuperLearner:
    def test_intercept_only_library(self):
        X, y = _dgp_xy(100, 8)
        sl = fit_super_learner([LearnerSpec("intercept_only")], X, y, make_folds(100, 5, 1))
        assert sl.weights.tolist() == [1.0]
        np.testing.assert_allclose(sl.predict(X), y.mean(), atol=1e-15)

    def test_library_of_one_equals_learner(self):
        X, y = _dgp_xy(150, 9)
        sl = fit_super_learner([LearnerSpec("logistic")], X, y, make_folds(150, 5, 1))
        np.testing.assert_array_equal(sl.predict(X), predict(fit(LearnerSpec("logistic"), X, y), X))

    def test_dgp_a_prefers_logistic(self):
        X, y = _dgp_xy(2000, 1)
        sl = fit_super_learner([LearnerSpec("intercept_only"), LearnerSpec("logistic")], X, y, make_folds(2000, 10, 1, stratify=y))
        assert sl.weights[1] >= 0.9

    @pytest.mark.parametrize("seed", range(4))
    def test_ensemble_risk_not_worse_than_best_learner(self, seed):
        X, y = _dgp_xy(250, seed + 20)
        lib = [LearnerSpec(k) for k in ("intercept_only", "logistic", "lasso_logistic", "spline_logistic", "boosted_stumps")]
        sl = fit_super_learner(lib, X, y, make_folds(250, 5, seed, stratify=y))
        assert sl.ensemble_cv_risk <= np.min(sl.cv_risks) + 1e-9
        assert abs(sl.weights.sum() - 1) < 1e-12

    def test_deterministic(self):
        X, y = _dgp_xy(200, 30)
        lib = [LearnerSpec("logistic"), LearnerSpec("boosted_stumps")]
        a = fit_super_learner(lib, X, y, make_folds(200, 5, 2))
        b = fit_super_learner(lib, X, y, make_folds(200, 5, 2))
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.predict(X), b.predict(X))

    def test_predictions_in_open_interval(self):
        X, y = _dgp_xy(200, 31)
        sl = fit_super_learner([LearnerSpec("logistic"), LearnerSpec("boosted_stumps")], X, y, make_folds(200, 5, 2))
        p = sl.predict(X)
        assert np.all((p > 0) & (p < 1))

    def test_empty_library(self):
        with pytest.raises(SuperLearnerError):
            fit_super_learner([], np.zeros((4, 1)), np.zeros(4), make_folds(4, 2))

    def test_summary_lists_every_learner(self):
        X, y = _dgp_xy(100, 32)
        sl = fit_super_learner([LearnerSpec("intercept_only"), LearnerSpec("logistic")], X, y, make_folds(100, 4, 2))
        rows = sl.summary()
        assert [r["learner"] for r in rows] == ["intercept_only", "logistic"]
        assert sum(r["weight"] for r in rows) == pytest.approx(1.0)
