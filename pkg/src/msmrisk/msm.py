"""Working-model families for the rule-parameter response and their
training rule on one fold.

Fitting pools (subject, theta) rows, weights each row by the product of
rule-compliance indicators over inverse stage propensities (times the theta
weight), and minimizes weighted squared loss within the family: weighted
least squares for the parametric families, a penalized indicator-basis fit
in theta for the nonparametric one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hal
from .core import LongitudinalDataset, RegimeFamily, ThetaMeasure, make_folds
from .nuisance import FitError

FAMILIES = ("linear_theta", "quadratic_theta", "hal_theta")


@dataclass
class WorkingModel:
    """A fitted approximation of the mean outcome as a function of theta
    (and, for the nonparametric family, optionally the baseline summary)."""

    family: str
    beta: np.ndarray | None = None
    payload: dict = field(default_factory=dict)
    fold: int | None = None

    def predict(self, theta, V=None) -> np.ndarray:
        th = float(np.asarray(theta).reshape(-1)[0])
        size = 1 if V is None else np.asarray(V).shape[0]
        if self.family == "linear_theta":
            val = self.beta[0] + self.beta[1] * th
            return np.full(size, val)
        if self.family == "quadratic_theta":
            val = self.beta[0] + self.beta[1] * th + self.beta[2] * th * th
            return np.full(size, val)
        if self.family == "hal_theta":
            basis: hal.HalBasis = self.payload["basis"]
            if self.payload["uses_baseline"]:
                X = np.column_stack([np.full(size, th), np.asarray(V, dtype=np.float64)])
            else:
                X = np.full((size, 1), th)
            return hal.predict(self.payload["fit"], basis, X)
        raise FitError(f"unknown working-model family {self.family!r}")

    def curve(self, theta_grid: np.ndarray, V_row=None) -> np.ndarray:
        """m(theta) on a probe grid (plot-ready)."""
        Vr = None if V_row is None else np.asarray(V_row)[None, :]
        return np.array([float(self.predict(th, Vr)[0]) for th in theta_grid])


def predict_m(m: WorkingModel, theta, V) -> np.ndarray:
    """Family evaluation at (theta, V)."""
    return m.predict(theta, V)


def compliance_weights(
    ds: LongitudinalDataset,
    prop,
    fam: RegimeFamily,
    thetas: ThetaMeasure,
    lam_by_stage=None,
) -> np.ndarray:
    """(n, k) inverse-probability weights: prod_t I(A_t = rule_t) / pi_t."""
    n, K = ds.n, thetas.k
    w = np.ones((n, K))
    for t in range(1, ds.T + 1):
        lam = None if lam_by_stage is None else lam_by_stage[t - 1]
        for k in range(K):
            d = fam.prescribe(ds.covariates[t - 1], thetas.points[k])
            pi = prop[t - 1].regime_prob(ds, d, lam=lam)
            ind = (ds.treatments[:, t - 1] == d).astype(np.float64)
            w[:, k] *= ind / pi
    return w


def fit_msm(
    train: LongitudinalDataset,
    family: str,
    prop,
    fam: RegimeFamily,
    thetas: ThetaMeasure,
    weights: np.ndarray | None = None,
    include_baseline: bool = False,
    hal_max_knots=25,
    hal_grid_size: int = 25,
    hal_min_ratio: float = 1e-3,
    hal_lambda: float | None = None,
    cv_seed: int = 0,
    fold: int | None = None,
) -> WorkingModel:
    """Train a working model on one fold via weighted squared loss.

    `weights` (n, k) overrides the inverse-probability weights computed from
    `prop`; rows are (subject, theta) pairs with total weight equal to the
    compliance weight times the theta-measure weight.
    """
    if family not in FAMILIES:
        raise FitError(f"unknown working-model family {family!r}")
    n, K = train.n, thetas.k
    if weights is None:
        weights = compliance_weights(train, prop, fam, thetas)
    w = (weights * thetas.weights[None, :]).reshape(-1)
    if not np.any(w > 0):
        raise FitError("all pooled weights are zero: no subject follows the rule anywhere")
    y = np.repeat(train.outcome, K)
    th = np.asarray(thetas.points, dtype=np.float64)
    th_col = np.tile(th.reshape(K, -1)[:, 0], n)

    if family in ("linear_theta", "quadratic_theta"):
        pos = w > 0
        distinct = np.unique(th_col[pos])
        if distinct.size < 2:
            # degenerate theta spread: weighted mean intercept, zero slope
            wy = float(w @ y) / float(w.sum())
            beta = np.zeros(2 if family == "linear_theta" else 3)
            beta[0] = wy
            return WorkingModel(family=family, beta=beta, fold=fold)
        cols = [np.ones_like(th_col), th_col]
        if family == "quadratic_theta":
            cols.append(th_col**2)
        D = np.column_stack(cols)
        sw = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(D * sw[:, None], y * sw, rcond=None)
        return WorkingModel(family=family, beta=beta, fold=fold)

    # hal_theta
    if include_baseline:
        V = train.baseline()
        X = np.column_stack([th_col, np.repeat(V, K, axis=0)])
    else:
        X = th_col[:, None]
    keep = w > 0
    Xf, yf, wf = X[keep], y[keep], w[keep]
    basis = hal.build_basis(Xf, max_order=min(2, Xf.shape[1]), max_knots=hal_max_knots)
    grid = hal.default_lambda_grid(basis, yf, wf, "squared", size=hal_grid_size,
                                   min_ratio=hal_min_ratio)
    lam = hal_lambda
    if lam is None:
        groups = np.repeat(np.arange(n), K)[keep]
        folds = make_folds(n, min(5, max(2, n // 4)), seed=cv_seed)
        lam = hal.cv_select_lambda(basis, yf, wf, "squared", grid, folds, groups=groups)
    kept_grid = np.append(grid[grid > lam], lam)
    fit = hal.fit_path(basis, yf, wf, "squared", kept_grid).fits[-1]
    return WorkingModel(
        family=family,
        payload={"basis": basis.without_train_design(), "fit": fit,
                 "uses_baseline": include_baseline, "lambda": float(lam)},
        fold=fold,
    )
