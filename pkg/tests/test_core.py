import numpy as np
import pytest

from msmrisk.core import (
    CrossValPlan,
    DatasetError,
    InvalidPlanError,
    LongitudinalDataset,
    RegimeFamily,
    ThetaMeasure,
    cumulative_compliance,
    dataset_from_csv,
    make_folds,
    regime_indicator,
    theta_draws,
    theta_grid,
)


def toy_dataset(n=6, T=2, seed=0):
    rng = np.random.default_rng(seed)
    covs = tuple(rng.normal(size=(n, 2)) for _ in range(T))
    treats = rng.integers(0, 2, size=(n, T))
    y = rng.normal(size=n)
    return LongitudinalDataset(covariates=covs, treatments=treats, outcome=y)


class TestMakeFolds:
    def test_balanced_sizes(self):
        plan = make_folds(10, 5, seed=1)
        counts = np.bincount(plan.assignment)[1:]
        assert list(counts) == [2, 2, 2, 2, 2]

    def test_deterministic(self):
        a = make_folds(10, 5, seed=1).assignment
        b = make_folds(10, 5, seed=1).assignment
        assert np.array_equal(a, b)

    def test_near_balanced(self):
        plan = make_folds(7, 3, seed=9)
        counts = sorted(np.bincount(plan.assignment)[1:], reverse=True)
        assert counts == [3, 2, 2]

    def test_partition(self):
        plan = make_folds(23, 4, seed=3)
        seen = np.concatenate([plan.val_idx(b) for b in range(1, 5)])
        assert sorted(seen) == list(range(23))
        for b in range(1, 5):
            assert set(plan.train_idx(b)).isdisjoint(plan.val_idx(b))

    def test_invalid_plans(self):
        with pytest.raises(InvalidPlanError):
            make_folds(10, 1, seed=0)
        with pytest.raises(InvalidPlanError):
            make_folds(4, 5, seed=0)

    def test_unbalanced_assignment_rejected(self):
        with pytest.raises(InvalidPlanError):
            CrossValPlan(n=4, B=2, assignment=np.array([1, 1, 1, 2]))


class TestRegimes:
    def test_scalar_threshold_below(self):
        ds = LongitudinalDataset(
            covariates=(np.array([[0.3, 0.0]]),),
            treatments=np.array([[1]]),
            outcome=np.array([1.0]),
        )
        fam = RegimeFamily(kind="scalar_threshold_below", index=0)
        assert regime_indicator(ds, fam, 0.5, t=1)[0] == 1  # rule says treat
        assert regime_indicator(ds, fam, 0.1, t=1)[0] == 0  # rule says don't

    def test_linear_threshold_degenerate(self):
        ds = toy_dataset(n=5)
        fam = RegimeFamily(kind="linear_threshold")
        d = fam.prescribe(ds.covariates[0], np.zeros(2))
        assert np.array_equal(d, np.zeros(5))

    def test_scalar_above_matches_below(self):
        ds = toy_dataset(n=8)
        below = RegimeFamily(kind="scalar_threshold_below", index=1)
        above = RegimeFamily(kind="scalar_threshold_above", index=1)
        assert np.array_equal(
            below.prescribe(ds.covariates[0], 0.2),
            above.prescribe(ds.covariates[0], 0.2),
        )

    def test_dimension_mismatch(self):
        ds = toy_dataset()
        fam = RegimeFamily(kind="linear_threshold")
        with pytest.raises(DatasetError):
            regime_indicator(ds, fam, np.zeros(3), t=1)

    def test_permutation_invariance(self):
        ds = toy_dataset(n=12, seed=4)
        fam = RegimeFamily(kind="scalar_threshold_below", index=0)
        perm = np.random.default_rng(0).permutation(12)
        direct = regime_indicator(ds, fam, 0.1, t=2)[perm]
        permuted = regime_indicator(ds.subset(perm), fam, 0.1, t=2)
        assert np.array_equal(direct, permuted)


class TestCompliance:
    def test_all_comply(self):
        ds = LongitudinalDataset(
            covariates=(np.array([[-1.0, 0.0]]), np.array([[-2.0, 0.0]])),
            treatments=np.array([[1, 1]]),
            outcome=np.array([0.0]),
        )
        fam = RegimeFamily(kind="scalar_threshold_below", index=0)
        assert cumulative_compliance(ds, fam, 0.0, upto=2)[0] == 1

    def test_one_deviation_zeroes(self):
        ds = LongitudinalDataset(
            covariates=(np.array([[-1.0, 0.0]]), np.array([[-2.0, 0.0]])),
            treatments=np.array([[1, 0]]),
            outcome=np.array([0.0]),
        )
        fam = RegimeFamily(kind="scalar_threshold_below", index=0)
        assert cumulative_compliance(ds, fam, 0.0, upto=2)[0] == 0

    def test_first_stage_matches_indicator(self):
        ds = toy_dataset(n=9, seed=5)
        fam = RegimeFamily(kind="scalar_threshold_below", index=0)
        assert np.array_equal(
            cumulative_compliance(ds, fam, 0.3, upto=1),
            regime_indicator(ds, fam, 0.3, t=1),
        )

    def test_monotone_in_horizon(self):
        ds = toy_dataset(n=20, seed=6)
        fam = RegimeFamily(kind="scalar_threshold_below", index=0)
        c1 = cumulative_compliance(ds, fam, 0.1, upto=1)
        c2 = cumulative_compliance(ds, fam, 0.1, upto=2)
        assert np.all(c2 <= c1)


class TestThetaMeasure:
    def test_equal_weights(self):
        m = theta_draws(50, seed=3)
        assert m.k == 50
        assert np.allclose(m.weights, 0.02)

    def test_seed_determinism(self):
        a = theta_draws(50, seed=3)
        b = theta_draws(50, seed=3)
        assert np.array_equal(a.points, b.points)

    def test_mean_within_standard_error_bound(self):
        # 4-sigma bound on the sample mean, checked across seeds
        for seed in range(12):
            m = theta_draws(50, seed=seed, mean=0.0, sd=0.1)
            assert abs(m.points.mean()) < 4 * 0.1 / np.sqrt(50)

    def test_rejects_bad_weights(self):
        with pytest.raises(DatasetError):
            ThetaMeasure(points=np.array([0.0, 1.0]), weights=np.array([0.7, 0.2]))
        with pytest.raises(DatasetError):
            theta_draws(0, seed=1)

    def test_grid_uniform(self):
        g = theta_grid([0.0, 0.5, 1.0])
        assert np.allclose(g.weights, 1 / 3)


class TestHistory:
    def test_history_concatenates_past(self):
        ds = toy_dataset(n=4, T=2, seed=7)
        h2 = ds.history(2)
        assert h2.shape == (4, 5)
        assert np.array_equal(h2[:, :2], ds.covariates[0])
        assert np.array_equal(h2[:, 2:4], ds.covariates[1])
        assert np.array_equal(h2[:, 4], ds.treatments[:, 0].astype(float))

    def test_baseline_selector(self):
        ds = LongitudinalDataset(
            covariates=(np.array([[1.0, 2.0], [3.0, 4.0]]),),
            treatments=np.array([[0], [1]]),
            outcome=np.array([0.0, 1.0]),
            baseline_cols=(1,),
        )
        assert np.array_equal(ds.baseline(), np.array([[2.0], [4.0]]))

    def test_validation(self):
        with pytest.raises(DatasetError):
            LongitudinalDataset(
                covariates=(np.array([[np.nan, 0.0]]),),
                treatments=np.array([[0]]),
                outcome=np.array([0.0]),
            )
        with pytest.raises(DatasetError):
            LongitudinalDataset(
                covariates=(np.array([[0.0, 0.0]]),),
                treatments=np.array([[2]]),
                outcome=np.array([0.0]),
            )


class TestCsvRoundTrip:
    @pytest.mark.parametrize("y_mode", ["last", "all"])
    def test_round_trip(self, tmp_path, y_mode):
        ds = toy_dataset(n=7, T=2, seed=11)
        path = tmp_path / "ds.csv"
        ds.to_csv(path, y_mode=y_mode)
        back = dataset_from_csv(path)
        assert back.n == ds.n and back.T == ds.T
        for t in range(ds.T):
            assert np.array_equal(back.covariates[t], ds.covariates[t])
        assert np.array_equal(back.treatments, ds.treatments)
        assert np.array_equal(back.outcome, ds.outcome)

    def test_varying_stage_dims(self, tmp_path):
        ds = LongitudinalDataset(
            covariates=(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]])),
            treatments=np.array([[0, 1], [1, 0]]),
            outcome=np.array([1.5, -0.5]),
        )
        path = tmp_path / "varying.csv"
        ds.to_csv(path)
        back = dataset_from_csv(path)
        assert back.stage_dims == (2, 1)
        assert np.array_equal(back.covariates[1], ds.covariates[1])
