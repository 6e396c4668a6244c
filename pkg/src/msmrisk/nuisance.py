"""Stage-wise treatment-probability fits and the backward sequential
regression that feeds the augmented estimators.

The propensity object models P(A_t = 1 | history) once per stage; the
probability of following a given rule is read off as p or 1-p and clipped
away from 0 and 1. The sequential regression starts from the squared
working-model residual at the horizon and regresses each stage's
pseudo-outcome on (history features, theta) among the subjects whose
observed treatment matches the rule at that stage, pooling theta points as
rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import hal
from .core import CrossValPlan, LongitudinalDataset, RegimeFamily, ThetaMeasure, make_folds


class FitError(RuntimeError):
    pass


def history_features(ds: LongitudinalDataset, t: int) -> np.ndarray:
    return ds.history(t)


def logistic_mle(X: np.ndarray, y: np.ndarray, max_iter: int = 60, tol: float = 1e-10):
    """Plain Newton-Raphson logistic regression with intercept.

    Returns (coef, covariance) where coef[0] is the intercept and the
    covariance is the inverse observed information.
    """
    D = np.column_stack([np.ones(len(y)), X])
    beta = np.zeros(D.shape[1])
    for _ in range(max_iter):
        p = expit(D @ beta)
        g = D.T @ (y - p)
        W = p * (1 - p) + 1e-10
        H = (D * W[:, None]).T @ D
        step = np.linalg.solve(H, g)
        # halve until the log-likelihood does not decrease
        ll = float(y @ np.log(np.clip(p, 1e-12, 1)) + (1 - y) @ np.log(np.clip(1 - p, 1e-12, 1)))
        tstep = 1.0
        for _ in range(30):
            cand = beta + tstep * step
            pc = np.clip(expit(D @ cand), 1e-12, 1 - 1e-12)
            llc = float(y @ np.log(pc) + (1 - y) @ np.log(1 - pc))
            if llc >= ll - 1e-12:
                break
            tstep *= 0.5
        beta = beta + tstep * step
        if np.max(np.abs(g)) < tol:
            break
    p = expit(D @ beta)
    W = p * (1 - p) + 1e-10
    cov = np.linalg.inv((D * W[:, None]).T @ D)
    return beta, cov


@dataclass
class PropensityStageFit:
    """Fitted stage-t treatment probability model.

    method 'hal' keeps the whole penalty path (payload carries the basis,
    the path, and the selected penalty) so callers can also query
    probabilities at other penalty levels. method 'parametric_logistic'
    stores Newton MLE coefficients, and 'known' wraps a user-supplied
    probability function of (stage, history features).
    """

    stage: int
    method: str
    clip_eps: float
    payload: dict = field(default_factory=dict)

    def prob_treated(self, ds: LongitudinalDataset, lam: float | None = None) -> np.ndarray:
        H = history_features(ds, self.stage)
        if self.method == "hal":
            basis: hal.HalBasis = self.payload["basis"]
            path: hal.HalPath = self.payload["path"]
            fit = path.fit_at(self.payload["lambda"] if lam is None else lam)
            return expit(hal.predict(fit, basis, H))
        if self.method == "parametric_logistic":
            beta = self.payload["coef"]
            return expit(beta[0] + H @ beta[1:])
        if self.method == "known":
            return np.asarray(self.payload["fn"](self.stage, H), dtype=np.float64)
        raise FitError(f"unknown propensity method {self.method!r}")

    def regime_prob(self, ds: LongitudinalDataset, prescribed: np.ndarray,
                    lam: float | None = None) -> np.ndarray:
        """Clipped probability that A_t equals the prescription."""
        p1 = self.prob_treated(ds, lam=lam)
        pi = np.where(prescribed == 1, p1, 1.0 - p1)
        return np.clip(pi, self.clip_eps, 1.0 - self.clip_eps)


def fit_propensity(
    train: LongitudinalDataset,
    t: int,
    method: str = "hal",
    clip_eps: float = 0.01,
    folds_for_hal: CrossValPlan | None = None,
    max_order: int = 2,
    max_knots=(30, 8),
    grid_size: int = 40,
    min_ratio: float = 1e-3,
    lam: float | None = None,
    cv_seed: int = 0,
    known_fn=None,
) -> PropensityStageFit:
    """Model P(A_t = 1 | history) on a training sample.

    For the 'hal' method the penalty is chosen by cross-validation on
    `folds_for_hal` (drawn from cv_seed when omitted) unless `lam` pins it.
    """
    if not 1 <= t <= train.T:
        raise FitError(f"stage {t} outside 1..{train.T}")
    if method == "known":
        return PropensityStageFit(stage=t, method=method, clip_eps=clip_eps,
                                  payload={"fn": known_fn})
    A = train.treatments[:, t - 1].astype(np.float64)
    if A.min() == A.max():
        raise FitError(f"degenerate treatment at stage {t}: all values are {int(A[0])}")
    H = history_features(train, t)
    if method == "parametric_logistic":
        coef, cov = logistic_mle(H, A)
        return PropensityStageFit(stage=t, method=method, clip_eps=clip_eps,
                                  payload={"coef": coef, "cov": cov})
    if method != "hal":
        raise FitError(f"unknown propensity method {method!r}")
    basis = hal.build_basis(H, max_order=min(max_order, H.shape[1]), max_knots=max_knots)
    grid = hal.default_lambda_grid(basis, A, None, "bernoulli", size=grid_size,
                                   min_ratio=min_ratio)
    path = hal.fit_path(basis, A, None, "bernoulli", grid)
    if lam is None:
        folds = folds_for_hal or make_folds(train.n, min(5, max(2, train.n // 10)), seed=cv_seed)
        lam = hal.cv_select_lambda(basis, A, None, "bernoulli", grid, folds)
    return PropensityStageFit(
        stage=t,
        method="hal",
        clip_eps=clip_eps,
        payload={"basis": basis.without_train_design(), "path": path, "lambda": float(lam),
                 "grid": grid},
    )


def mu_pseudo_outcome_terminal(ds: LongitudinalDataset, m, thetas: ThetaMeasure) -> np.ndarray:
    """(n, k) matrix of squared working-model residuals (Y - m(theta, V))^2."""
    V = ds.baseline()
    out = np.empty((ds.n, thetas.k))
    predict = m.predict if hasattr(m, "predict") else m
    for k in range(thetas.k):
        fitted = np.asarray(predict(thetas.points[k], V), dtype=np.float64)
        out[:, k] = (ds.outcome - fitted) ** 2
    return out


def _pooled_features(H: np.ndarray, theta_pts: np.ndarray, rows_i: np.ndarray,
                     rows_k: np.ndarray) -> np.ndarray:
    th = np.asarray(theta_pts, dtype=np.float64)
    if th.ndim == 1:
        th = th[:, None]
    return np.hstack([H[rows_i], th[rows_k]])


@dataclass
class MuStageFit:
    stage: int
    kind: str  # hal | linear | zero | known
    payload: dict = field(default_factory=dict)

    def predict(self, ds: LongitudinalDataset, thetas: ThetaMeasure) -> np.ndarray:
        """(n, k) nonnegative predictions at every (subject, theta) pair."""
        n, K = ds.n, thetas.k
        if self.kind == "zero":
            return np.zeros((n, K))
        if self.kind == "known":
            H = history_features(ds, self.stage)
            out = np.asarray(self.payload["fn"](self.stage, H, thetas.points), dtype=np.float64)
            if out.shape != (n, K):
                raise FitError(f"known mu returned shape {out.shape}, expected {(n, K)}")
            return np.maximum(out, 0.0)
        H = history_features(ds, self.stage)
        rows_i = np.repeat(np.arange(n), K)
        rows_k = np.tile(np.arange(K), n)
        X = _pooled_features(H, thetas.points, rows_i, rows_k)
        if self.kind == "linear":
            beta = self.payload["coef"]
            pred = beta[0] + X @ beta[1:]
        elif self.kind == "hal":
            pred = hal.predict(self.payload["fit"], self.payload["basis"], X)
        else:
            raise FitError(f"unknown mu regressor {self.kind!r}")
        return np.maximum(pred.reshape(n, K), 0.0)


@dataclass
class MuSequence:
    """Backward-recursive conditional expectations of the residual square.

    stage_fits[t-1] predicts the stage-t function of (history features,
    theta); predictions are floored at zero because the terminal
    pseudo-outcome is a square.
    """

    stage_fits: tuple[MuStageFit, ...]
    thetas: ThetaMeasure

    def predict(self, t: int, ds: LongitudinalDataset, thetas: ThetaMeasure | None = None) -> np.ndarray:
        return self.stage_fits[t - 1].predict(ds, thetas or self.thetas)


def fit_mu_sequence(
    train: LongitudinalDataset,
    m,
    prop,
    fam: RegimeFamily,
    thetas: ThetaMeasure,
    regressor: str = "hal",
    max_order: int = 2,
    max_knots=(16, 6),
    grid_size: int = 25,
    min_ratio: float = 3e-3,
    mu_lambda=None,
    max_theta_rows: int | None = 16,
    cv_seed: int = 0,
    cv_folds: int = 3,
    known_fn=None,
) -> MuSequence:
    """Backward recursion over stages t = T..1.

    At stage t the current pseudo-outcome (terminal: the squared residual;
    otherwise the stage t+1 predictions) is regressed on (history features
    through stage t, theta), pooling theta points as rows and keeping only
    rows whose observed A_t matches the rule at that theta. Propensities are
    not used inside the regressions; `prop` is accepted for interface
    symmetry with the estimators.

    For the 'hal' regressor the penalty is either pinned by `mu_lambda`
    (scalar or per-stage sequence) or chosen by subject-grouped
    cross-validation. `max_theta_rows` caps how many theta points enter the
    pooled fitting rows (predictions still cover every theta point).
    """
    del prop
    n, K, T = train.n, thetas.k, train.T
    if regressor == "known":
        fits = tuple(MuStageFit(stage=t, kind="known", payload={"fn": known_fn})
                     for t in range(1, T + 1))
        return MuSequence(stage_fits=fits, thetas=thetas)
    if regressor == "zero":
        fits = tuple(MuStageFit(stage=t, kind="zero") for t in range(1, T + 1))
        return MuSequence(stage_fits=fits, thetas=thetas)

    fit_ks = _theta_subset(thetas, max_theta_rows)
    pseudo = mu_pseudo_outcome_terminal(train, m, thetas)
    fits: list[MuStageFit] = [None] * T
    for t in range(T, 0, -1):
        comply = np.column_stack(
            [np.asarray(train.treatments[:, t - 1] == fam.prescribe(train.covariates[t - 1], thetas.points[k]), dtype=bool)
             for k in range(K)]
        )
        empty = [k for k in range(K) if not comply[:, k].any()]
        if empty:
            raise FitError(
                f"no subjects follow the rule at stage {t} for theta index(es) {empty}"
            )
        rows_i, rows_k = np.nonzero(comply[:, fit_ks])
        rows_k = np.asarray(fit_ks)[rows_k]
        H = history_features(train, t)
        X = _pooled_features(H, thetas.points, rows_i, rows_k)
        y = pseudo[rows_i, rows_k]
        if regressor == "linear":
            D = np.column_stack([np.ones(len(y)), X])
            coef = np.linalg.lstsq(D, y, rcond=None)[0]
            fits[t - 1] = MuStageFit(stage=t, kind="linear", payload={"coef": coef})
        elif regressor == "hal":
            basis = hal.build_basis(X, max_order=min(max_order, X.shape[1]), max_knots=max_knots)
            grid = hal.default_lambda_grid(basis, y, None, "squared", size=grid_size,
                                           min_ratio=min_ratio)
            lam_t = _stage_lambda(mu_lambda, t)
            if lam_t is None:
                folds = make_folds(n, min(cv_folds, max(2, n // 4)), seed=cv_seed + t)
                lam_t = hal.cv_select_lambda(basis, y, None, "squared", grid, folds,
                                             groups=rows_i)
            fit = hal.fit_path(basis, y, None, "squared",
                               _truncate_grid(grid, lam_t)).fits[-1]
            fits[t - 1] = MuStageFit(
                stage=t, kind="hal",
                payload={"basis": basis.without_train_design(), "fit": fit,
                         "lambda": float(lam_t)},
            )
        else:
            raise FitError(f"unknown mu regressor {regressor!r}")
        pseudo = fits[t - 1].predict(train, thetas)
    return MuSequence(stage_fits=tuple(fits), thetas=thetas)


def _theta_subset(thetas: ThetaMeasure, cap: int | None) -> np.ndarray:
    if cap is None or thetas.k <= cap:
        return np.arange(thetas.k)
    order = np.argsort(thetas.points.reshape(thetas.k, -1)[:, 0], kind="stable")
    pos = np.unique(np.round(np.linspace(0, thetas.k - 1, cap)).astype(int))
    return np.sort(order[pos])


def _stage_lambda(mu_lambda, t: int):
    if mu_lambda is None:
        return None
    if np.isscalar(mu_lambda):
        return float(mu_lambda)
    return float(mu_lambda[t - 1])


def _truncate_grid(grid: np.ndarray, lam: float) -> np.ndarray:
    """Warm-start path down to lam, appending it if off-grid."""
    kept = grid[grid > lam]
    return np.append(kept, lam)
