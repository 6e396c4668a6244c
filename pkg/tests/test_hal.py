import json

import numpy as np
import pytest

from msmrisk import hal
from msmrisk.core import make_folds
from msmrisk.hal import BasisError

from conftest import ista_lasso, kkt_gap


class TestBuildBasis:
    def test_one_dim_two_knots(self):
        basis = hal.build_basis(np.array([[0.2], [0.5]]), max_order=1)
        assert basis.n_columns == 2
        row = basis.evaluate(np.array([[0.3]]))
        assert list(row[0]) == [1.0, 0.0]

    def test_column_count_bound(self, rng):
        X = rng.normal(size=(3, 2))
        basis = hal.build_basis(X, max_order=2)
        assert basis.n_columns <= 3 * (2**2 - 1)

    def test_identical_rows_dedup(self):
        X = np.tile([[1.0, 2.0, 3.0]], (5, 1))
        basis = hal.build_basis(X, max_order=3)
        assert basis.n_columns == 2**3 - 1

    def test_rejects_nonfinite(self):
        with pytest.raises(BasisError):
            hal.build_basis(np.array([[np.inf]]), max_order=1)

    def test_knot_capping(self, rng):
        X = rng.normal(size=(200, 1))
        basis = hal.build_basis(X, max_order=1, max_knots=10)
        assert basis.n_columns <= 10


class TestFitPath:
    def test_huge_lambda_gives_weighted_mean(self, rng):
        X = rng.normal(size=(40, 2))
        y = rng.normal(size=40)
        w = rng.random(40) + 0.1
        basis = hal.build_basis(X, max_order=1)
        path = hal.fit_path(basis, y, w, "squared", np.array([1e6]))
        fit = path.fits[0]
        assert fit.active.size == 0
        assert fit.intercept == pytest.approx(float(w @ y / w.sum()), abs=1e-12)

    def test_matches_reference_solver_squared(self, rng):
        X = rng.normal(size=(5, 1))
        y = np.array([0.1, 1.4, -0.2, 0.8, 0.5])
        basis = hal.build_basis(X, max_order=1)
        lam = 0.02
        path = hal.fit_path(basis, y, None, "squared", np.array([lam]))
        b0, b = ista_lasso(basis.train_design, y, np.ones(5), lam)
        assert path.fits[0].intercept == pytest.approx(b0, abs=1e-6)
        assert np.allclose(path.fits[0].coef, b, atol=1e-6)

    def test_matches_reference_solver_bernoulli(self, rng):
        X = rng.normal(size=(30, 2))
        y = (X[:, 0] + 0.3 * rng.normal(size=30) > 0).astype(float)
        basis = hal.build_basis(X, max_order=1, max_knots=8)
        lam = 0.03
        path = hal.fit_path(basis, y, None, "bernoulli", np.array([lam]))
        b0, b = ista_lasso(basis.train_design, y, np.ones(30), lam, loss="bernoulli")
        assert path.fits[0].intercept == pytest.approx(b0, abs=1e-4)
        assert np.allclose(path.fits[0].coef, b, atol=1e-4)

    def test_separable_bernoulli_saturates(self):
        basis = hal.build_basis(np.linspace(0, 1, 12)[:, None], max_order=1)
        y = np.ones(12)
        path = hal.fit_path(basis, y, None, "bernoulli", np.array([0.1, 0.01]))
        for fit in path.fits:
            assert fit.saturated
            assert fit.intercept == pytest.approx(np.log((1 - 1e-6) / 1e-6))

    def test_grid_validation(self, rng):
        basis = hal.build_basis(rng.normal(size=(10, 1)), max_order=1)
        y = rng.normal(size=10)
        with pytest.raises(BasisError):
            hal.fit_path(basis, y, None, "squared", np.array([0.1, 0.2]))
        with pytest.raises(BasisError):
            hal.fit_path(basis, y, None, "squared", np.array([0.1, -0.1]))

    def test_l1_norm_bookkeeping(self, rng):
        X = rng.normal(size=(60, 2))
        y = X[:, 0] + rng.normal(0, 0.2, 60)
        basis = hal.build_basis(X, max_order=2, max_knots=10)
        path = hal.fit_path(basis, y, None, "squared")
        for fit in path.fits:
            expected = abs(fit.intercept) + np.abs(fit.coef).sum()
            assert fit.l1_norm == pytest.approx(expected, abs=1e-10)

    def test_l1_monotone_as_lambda_decreases(self, rng):
        X = rng.normal(size=(80, 3))
        y = (X[:, 0] > 0).astype(float) + 0.5 * X[:, 1] + rng.normal(0, 0.3, 80)
        basis = hal.build_basis(X, max_order=2, max_knots=12)
        path = hal.fit_path(basis, y, None, "squared")
        assert np.all(np.diff(path.l1_norms) >= -1e-9)

    def test_training_loss_monotone(self, rng):
        X = rng.normal(size=(50, 2))
        y = X[:, 0] + rng.normal(0, 0.3, 50)
        basis = hal.build_basis(X, max_order=1, max_knots=15)
        path = hal.fit_path(basis, y, None, "squared")
        w = np.full(50, 1 / 50)
        losses = [
            float(w @ (y - f.intercept - basis.train_design @ f.coef) ** 2)
            for f in path.fits
        ]
        assert np.all(np.diff(losses) <= 1e-12)


class TestKkt:
    # stationarity at tolerance 1e-6 * max(1, lambda_max), across random
    # instances of both losses (the acceptance suite runs 50 of these)
    @pytest.mark.parametrize("loss", ["squared", "bernoulli"])
    def test_kkt_random_instances(self, loss):
        rng = np.random.default_rng(99)
        for rep in range(6):
            n = int(rng.integers(30, 90))
            d = int(rng.integers(1, 4))
            X = rng.normal(size=(n, d))
            signal = X[:, 0] - 0.8 * (X[:, min(1, d - 1)] > 0.3)
            if loss == "squared":
                y = signal + rng.normal(0, 0.4, n)
            else:
                y = (rng.random(n) < 1 / (1 + np.exp(-signal))).astype(float)
            basis = hal.build_basis(X, max_order=min(2, d), max_knots=12)
            grid = hal.default_lambda_grid(basis, y, None, loss, size=12)
            path = hal.fit_path(basis, y, None, loss, grid)
            scale = max(1.0, grid[0])
            for lam, fit in zip(grid, path.fits):
                if fit.saturated:
                    continue
                gap = kkt_gap(basis.train_design, y, np.ones(n), fit, lam, loss)
                assert gap <= 1e-6 * scale

    def test_zero_lambda_matches_least_squares_fit(self, rng):
        # the unpenalized fit equals the least-squares projection; fitted
        # values are compared because the all-ones column of each 1-d
        # section is collinear with the intercept, so coefficients are not
        # identified even after deduplication
        X = rng.normal(size=(40, 2))
        y = X[:, 0] - 2 * X[:, 1] + rng.normal(0, 0.1, 40)
        basis = hal.build_basis(X, max_order=1, max_knots=5)
        D = np.column_stack([np.ones(40), basis.train_design])
        path = hal.fit_path(basis, y, None, "squared", np.array([1e-3, 0.0]))
        ols = np.linalg.lstsq(D, y, rcond=None)[0]
        fit = path.fits[-1]
        fitted = fit.intercept + basis.train_design @ fit.coef
        assert np.allclose(fitted, D @ ols, atol=1e-6)

    def test_zero_lambda_full_rank_coefficients(self):
        # hand-built design with no all-ones column: coefficients identified
        D = np.array(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.0, 0.0]]
        )
        y = np.array([0.2, 1.1, -0.7, 0.5, 1.3, 0.1])
        basis = hal.build_basis(D, max_order=1)
        # keep only the two singleton columns at knot 1.0 (drop all-ones)
        cols = [
            c
            for c in range(basis.n_columns)
            if basis.knots[basis.col_section[c]][basis.col_knot[c]][0] == 1.0
        ]
        sub = basis.train_design[:, cols]
        full = np.column_stack([np.ones(6), sub])
        assert np.linalg.matrix_rank(full) == 3
        ols = np.linalg.lstsq(full, y, rcond=None)[0]
        path = hal.fit_path(basis, y, None, "squared", np.array([1e-2, 0.0]))
        fit = path.fits[-1]
        fitted = fit.intercept + basis.train_design @ fit.coef
        assert np.allclose(fitted, full @ ols, atol=1e-6)


class TestPredict:
    def test_intercept_only_constant(self, rng):
        basis = hal.build_basis(rng.normal(size=(10, 1)), max_order=1)
        fit = hal.HalFit(intercept=2.5, coef=np.zeros(basis.n_columns))
        assert np.allclose(hal.predict(fit, basis, rng.normal(size=(4, 1))), 2.5)

    def test_training_point_reproduces_fitted_value(self, rng):
        X = rng.normal(size=(25, 2))
        y = X[:, 0] + rng.normal(0, 0.1, 25)
        basis = hal.build_basis(X, max_order=1)
        path = hal.fit_path(basis, y, None, "squared")
        fit = path.fits[20]
        in_sample = fit.intercept + basis.train_design @ fit.coef
        assert np.allclose(hal.predict(fit, basis, X), in_sample, atol=1e-12)

    def test_piecewise_constant(self, rng):
        X = np.array([[0.0], [1.0], [2.0]])
        basis = hal.build_basis(X, max_order=1)
        fit = hal.HalFit(intercept=0.0, coef=np.array([0.5, 1.0, -0.25]))
        # points in the same inter-knot cell share every indicator value
        preds = hal.predict(fit, basis, np.array([[1.2], [1.7]]))
        assert preds[0] == preds[1]

    def test_monotone_when_coefs_nonnegative(self, rng):
        X = rng.normal(size=(30, 2))
        basis = hal.build_basis(X, max_order=2, max_knots=6)
        fit = hal.HalFit(intercept=0.1, coef=rng.random(basis.n_columns))
        grid = np.linspace(-2, 2, 9)
        for j, fixed in ((0, 0.3), (1, -0.5)):
            pts = np.tile([[fixed, fixed]], (9, 1))
            pts[:, j] = grid
            preds = hal.predict(fit, basis, pts)
            assert np.all(np.diff(preds) >= -1e-12)

    def test_dimension_mismatch(self, rng):
        basis = hal.build_basis(rng.normal(size=(10, 2)), max_order=1)
        fit = hal.HalFit(intercept=0.0, coef=np.zeros(basis.n_columns))
        with pytest.raises(BasisError):
            hal.predict(fit, basis, rng.normal(size=(3, 3)))

    def test_probabilities_for_bernoulli(self, rng):
        X = rng.normal(size=(40, 1))
        y = (X[:, 0] > 0).astype(float)
        basis = hal.build_basis(X, max_order=1, max_knots=10)
        path = hal.fit_path(basis, y, None, "bernoulli")
        probs = hal.predict_proba(path.fits[10], basis, X)
        assert np.all((probs > 0) & (probs < 1))


class TestCvSelect:
    def test_single_lambda(self, rng):
        X = rng.normal(size=(30, 1))
        y = rng.normal(size=30)
        basis = hal.build_basis(X, max_order=1, max_knots=10)
        folds = make_folds(30, 3, seed=2)
        lam = hal.cv_select_lambda(basis, y, None, "squared", np.array([0.33]), folds)
        assert lam == 0.33

    def test_pure_noise_selects_heavy_penalty(self):
        # with no signal the selector should sit at or near the top of the
        # grid in most repetitions
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(60, 1))
            y = rng.normal(size=60)
            basis = hal.build_basis(X, max_order=1, max_knots=20)
            grid = hal.default_lambda_grid(basis, y, None, "squared", size=20)
            folds = make_folds(60, 5, seed=seed)
            lam = hal.cv_select_lambda(basis, y, None, "squared", grid, folds)
            if lam >= grid[4]:
                hits += 1
        assert hits >= 12

    def test_signal_beats_endpoints(self, rng):
        X = rng.normal(size=(120, 1))
        y = 2.0 * (X[:, 0] > 0.2) + rng.normal(0, 0.3, 120)
        basis = hal.build_basis(X, max_order=1, max_knots=25)
        grid = hal.default_lambda_grid(basis, y, None, "squared", size=25)
        folds = make_folds(120, 5, seed=7)
        lam = hal.cv_select_lambda(basis, y, None, "squared", grid, folds)
        assert grid[-1] < lam < grid[0]

    def test_empty_grid(self, rng):
        basis = hal.build_basis(rng.normal(size=(10, 1)), max_order=1)
        with pytest.raises(BasisError):
            hal.cv_select_lambda(
                basis, np.zeros(10), None, "squared", np.array([]), make_folds(10, 2, 0)
            )

    def test_grouped_rows_follow_subject_folds(self, rng):
        # two rows per subject must land in the same training split
        n_subj = 20
        X = rng.normal(size=(2 * n_subj, 1))
        y = rng.normal(size=2 * n_subj)
        groups = np.repeat(np.arange(n_subj), 2)
        basis = hal.build_basis(X, max_order=1, max_knots=8)
        folds = make_folds(n_subj, 4, seed=1)
        lam = hal.cv_select_lambda(
            basis, y, None, "squared", np.array([0.5, 0.05]), folds, groups=groups
        )
        assert lam in (0.5, 0.05)


class TestSerialization:
    def test_round_trip_predictions(self, rng):
        X = rng.normal(size=(40, 2))
        y = X[:, 0] * (X[:, 1] > 0) + rng.normal(0, 0.2, 40)
        basis = hal.build_basis(X, max_order=2, max_knots=8)
        path = hal.fit_path(basis, y, None, "squared")
        fit = path.fits[30]
        doc = hal.fit_to_json(fit, basis)
        parsed = json.loads(doc)
        assert parsed["loss_kind"] == "squared"
        Xnew = rng.normal(size=(15, 2))
        assert np.allclose(
            hal.predict_from_json(doc, Xnew), hal.predict(fit, basis, Xnew), atol=1e-12
        )
