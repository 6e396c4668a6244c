"""Cross-validated risk estimators for a working model of the
rule-parameter response: plain inverse-probability weighting, the
augmented (multiply robust) estimator built on the efficient influence
function, and undersmoothed-propensity IPW with two penalty selectors.

All estimators share one fold engine: per fold, nuisances and the working
model are fit on the training part and averaged over the validation part
only. Penalty levels for the nonparametric nuisances are selected globally
across folds (each fold's path is scored on its own validation part), which
is also how the undersmoothing selectors aggregate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import hal
from ._solve import lambda_max as _lambda_max
from .core import CrossValPlan, LongitudinalDataset, RegimeFamily, ThetaMeasure
from .msm import WorkingModel, compliance_weights, fit_msm
from .nuisance import (
    FitError,
    MuSequence,
    MuStageFit,
    PropensityStageFit,
    _pooled_features,
    _theta_subset,
    history_features,
    logistic_mle,
    mu_pseudo_outcome_terminal,
)

ESTIMATOR_KINDS = ("ipw", "mr", "uipw_dcar", "uipw_score")


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs shared by every estimator run.

    prop_method / mu_regressor accept 'known' together with known_propensity
    / known_mu callables, which lets tests plug in exact nuisances.
    """

    msm_family: str = "linear_theta"
    prop_method: str = "hal"  # hal | parametric_logistic | known
    mu_regressor: str = "hal"  # hal | linear | zero | known
    clip_eps: float = 0.01
    level: float = 0.95
    prop_max_order: int = 2
    prop_max_knots: tuple = (30, 8)
    prop_grid_size: int = 40
    prop_min_ratio: float = 1e-3
    mu_max_order: int = 2
    mu_max_knots: tuple = (16, 6)
    mu_grid_size: int = 25
    mu_min_ratio: float = 3e-3
    mu_max_theta: int = 16
    msm_hal_max_knots: int = 25
    msm_include_baseline: bool = False
    score_j_cap: int | None = None  # default floor(sqrt(n)) - 1
    known_propensity: object = None  # fn(stage, history) -> P(A=1)
    known_mu: object = None  # fn(stage, history, theta_points) -> (n, k)

    def digest_fields(self) -> dict:
        out = {}
        for name in (
            "msm_family clip_eps level prop_max_order prop_grid_size prop_min_ratio "
            "mu_max_order mu_grid_size mu_min_ratio mu_max_theta msm_hal_max_knots "
            "msm_include_baseline"
        ).split():
            out[name] = getattr(self, name)
        out["prop_method"] = self.prop_method if isinstance(self.prop_method, str) else "custom"
        out["mu_regressor"] = self.mu_regressor if isinstance(self.mu_regressor, str) else "custom"
        out["prop_max_knots"] = list(self.prop_max_knots)
        out["mu_max_knots"] = list(self.mu_max_knots)
        out["score_j_cap"] = self.score_j_cap
        return out


@dataclass
class RiskEstimate:
    """Point estimate with influence-function variance and normal CI."""

    estimator_kind: str
    point: float
    if_variance: float
    ci_lo: float
    ci_hi: float
    n: int
    B: int
    level: float
    per_fold: list[float]
    selected_lambdas: dict | None = None
    diagnostics: dict | None = None

    def to_json(self) -> str:
        doc = {
            "estimator_kind": self.estimator_kind,
            "point": self.point,
            "if_variance": self.if_variance,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n": self.n,
            "B": self.B,
            "level": self.level,
            "per_fold": self.per_fold,
            "selected_lambdas": self.selected_lambdas,
        }
        return json.dumps(doc, sort_keys=True)


@dataclass
class DcarDiagnostics:
    """Per stage: the penalty grid, the cross-fold mean of the stage
    augmentation term at each penalty, and the selected penalty."""

    grids: dict
    means: dict
    selected: dict


def confidence_interval(point: float, if_variance: float, n: int, level: float = 0.95):
    """Normal-theory interval: point +- z * sqrt(variance / n)."""
    if if_variance < 0:
        raise FitError("variance must be nonnegative")
    z = float(norm.ppf(0.5 + level / 2.0))
    half = z * np.sqrt(if_variance / n)
    return float(point - half), float(point + half)


# ---------------------------------------------------------------------------
# per-subject contributions (vectorized over the subjects of ds)
# ---------------------------------------------------------------------------


def _stagewise_arrays(ds, prop, fam, thetas, lam_by_stage=None):
    """Indicators I_t and clipped rule probabilities pi_t, both (T, n, k)."""
    n, K, T = ds.n, thetas.k, ds.T
    I = np.empty((T, n, K))
    PI = np.empty((T, n, K))
    for t in range(1, T + 1):
        lam = None if lam_by_stage is None else lam_by_stage[t - 1]
        p1 = prop[t - 1].prob_treated(ds, lam=lam)
        for k in range(K):
            d = fam.prescribe(ds.covariates[t - 1], thetas.points[k])
            I[t - 1, :, k] = ds.treatments[:, t - 1] == d
            pi = np.where(d == 1, p1, 1.0 - p1)
            PI[t - 1, :, k] = np.clip(pi, prop[t - 1].clip_eps, 1.0 - prop[t - 1].clip_eps)
    return I, PI


def ipw_loss_contribution(ds, prop, m, fam, thetas, lam_by_stage=None) -> np.ndarray:
    """Per-subject theta-weighted inverse-probability loss term:
    sum_k w_k prod_t [I(A_t = rule)/pi_t] (Y - m(theta_k, V))^2."""
    I, PI = _stagewise_arrays(ds, prop, fam, thetas, lam_by_stage)
    weights = np.prod(I / PI, axis=0)
    resid2 = mu_pseudo_outcome_terminal(ds, m, thetas)
    return (weights * resid2) @ thetas.weights


def eif_contribution(ds, prop, mu: MuSequence, m, fam, thetas, lam_by_stage=None) -> np.ndarray:
    """Uncentered efficient-influence contribution per subject: the IPW term
    minus the stage-wise augmentations
    ((I_t - pi_t)/pi_t) mu_t prod_{j<t} I_j/pi_j."""
    I, PI = _stagewise_arrays(ds, prop, fam, thetas, lam_by_stage)
    resid2 = mu_pseudo_outcome_terminal(ds, m, thetas)
    ratio = I / PI
    ipw_term = np.prod(ratio, axis=0) * resid2
    total = ipw_term.copy()
    prefix = np.ones_like(ipw_term)
    for t in range(1, ds.T + 1):
        mu_t = mu.predict(t, ds, thetas)
        aug = (I[t - 1] - PI[t - 1]) / PI[t - 1] * mu_t * prefix
        total -= aug
        prefix *= ratio[t - 1]
    return total @ thetas.weights


def dcar_term(ds, t: int, prop, mu: MuSequence, fam, thetas, lam_by_stage=None) -> np.ndarray:
    """Stage-t augmentation term averaged over the theta measure."""
    I, PI = _stagewise_arrays(ds, prop, fam, thetas, lam_by_stage)
    prefix = np.ones((ds.n, thetas.k))
    for j in range(1, t):
        prefix *= I[j - 1] / PI[j - 1]
    mu_t = mu.predict(t, ds, thetas)
    aug = (I[t - 1] - PI[t - 1]) / PI[t - 1] * mu_t * prefix
    return aug @ thetas.weights


# ---------------------------------------------------------------------------
# the fold engine
# ---------------------------------------------------------------------------


class _FoldData:
    """Everything one fold contributes to the shared selectors."""

    def __init__(self, b, train_idx, val_idx, train, val):
        self.b = b
        self.train_idx = train_idx
        self.val_idx = val_idx
        self.train = train
        self.val = val
        self.prop: list[PropensityStageFit] = []
        self.paths: list[hal.HalPath] = []
        self.bases: list[hal.HalBasis] = []
        self.m_cv: WorkingModel | None = None
        self.mu: MuSequence | None = None


def _fit_propensities(fold: _FoldData, ds, cfg: EstimatorConfig):
    """Per-stage treatment models on the training part; HAL paths kept."""
    T = ds.T
    method = cfg.prop_method
    for t in range(1, T + 1):
        A = fold.train.treatments[:, t - 1].astype(np.float64)
        if isinstance(method, str) and method != "known" and A.min() == A.max():
            raise FitError(
                f"degenerate treatment at stage {t} in fold {fold.b}: all values are {int(A[0])}"
            )
        if method == "known" or not isinstance(method, str):
            fn = cfg.known_propensity if method == "known" else method
            fold.prop.append(
                PropensityStageFit(stage=t, method="known", clip_eps=cfg.clip_eps,
                                   payload={"fn": fn})
            )
            fold.paths.append(None)
            fold.bases.append(None)
        elif method == "parametric_logistic":
            H = history_features(fold.train, t)
            coef, cov = logistic_mle(H, A)
            fold.prop.append(
                PropensityStageFit(stage=t, method="parametric_logistic",
                                   clip_eps=cfg.clip_eps,
                                   payload={"coef": coef, "cov": cov})
            )
            fold.paths.append(None)
            fold.bases.append(None)
        elif method == "hal":
            H = history_features(fold.train, t)
            basis = hal.build_basis(H, max_order=min(cfg.prop_max_order, H.shape[1]),
                                    max_knots=cfg.prop_max_knots)
            fold.bases.append(basis)
            fold.paths.append(None)  # fit later on the shared grid
            fold.prop.append(
                PropensityStageFit(stage=t, method="hal", clip_eps=cfg.clip_eps, payload={})
            )
        else:
            raise FitError(f"unknown propensity method {method!r}")


def _shared_propensity_grids(folds, ds, cfg):
    """One penalty grid per stage spanning every fold's lambda_max."""
    grids = []
    for t in range(1, ds.T + 1):
        lam_max = 0.0
        for fold in folds:
            A = fold.train.treatments[:, t - 1].astype(np.float64)
            XT = np.ascontiguousarray(fold.bases[t - 1].train_design.T)
            lam_max = max(lam_max, _lambda_max(XT, A, np.full(len(A), 1 / len(A)), "bernoulli"))
        if lam_max <= 0:
            lam_max = 1.0
        grids.append(
            np.logspace(np.log10(lam_max), np.log10(lam_max * cfg.prop_min_ratio),
                        cfg.prop_grid_size)
        )
    return grids


def _fit_propensity_paths(folds, ds, cfg, grids):
    """Fit every fold's path per stage and select the cross-validated
    penalty per stage from pooled validation log-loss."""
    T = ds.T
    cv_lambdas = []
    for t in range(1, T + 1):
        losses = np.zeros(len(grids[t - 1]))
        for fold in folds:
            A = fold.train.treatments[:, t - 1].astype(np.float64)
            path = hal.fit_path(fold.bases[t - 1], A, None, "bernoulli", grids[t - 1])
            fold.paths[t - 1] = path
            Hval = history_features(fold.val, t)
            probs = np.clip(expit(hal.path_predictions(path, fold.bases[t - 1], Hval)),
                            1e-12, 1 - 1e-12)
            aval = fold.val.treatments[:, t - 1].astype(np.float64)
            losses += -(aval @ np.log(probs) + (1 - aval) @ np.log1p(-probs))
        lam_cv = float(grids[t - 1][int(np.argmin(losses))])
        cv_lambdas.append(lam_cv)
        for fold in folds:
            fold.prop[t - 1].payload.update(
                basis=fold.bases[t - 1].without_train_design(),
                path=fold.paths[t - 1],
                grid=grids[t - 1],
            )
            fold.prop[t - 1].payload["lambda"] = lam_cv
    return cv_lambdas


def _fit_mu_engine(folds, ds, fam, thetas, cfg: EstimatorConfig):
    """Backward sequential regressions per fold with a stage-global penalty.

    Each stage's pooled regression is fit as a path on every training fold;
    the penalty minimizing the pooled validation loss (against that fold's
    current pseudo-outcome) is shared by all folds, matching the global
    cross-validation selector used for the treatment models.
    """
    T, K = ds.T, thetas.k
    reg = cfg.mu_regressor
    if reg == "known" or not isinstance(reg, str):
        fn = cfg.known_mu if reg == "known" else reg
        for fold in folds:
            fold.mu = MuSequence(
                stage_fits=tuple(
                    MuStageFit(stage=t, kind="known", payload={"fn": fn})
                    for t in range(1, T + 1)
                ),
                thetas=thetas,
            )
        return
    if reg == "zero":
        for fold in folds:
            fold.mu = MuSequence(
                stage_fits=tuple(MuStageFit(stage=t, kind="zero") for t in range(1, T + 1)),
                thetas=thetas,
            )
        return

    fit_ks = _theta_subset(thetas, cfg.mu_max_theta)
    pseudo_train = [mu_pseudo_outcome_terminal(f.train, f.m_cv, thetas) for f in folds]
    pseudo_val = [mu_pseudo_outcome_terminal(f.val, f.m_cv, thetas) for f in folds]
    stage_fits = [[None] * T for _ in folds]
    for t in range(T, 0, -1):
        rows = []
        for fi, fold in enumerate(folds):
            comply = np.column_stack(
                [
                    fold.train.treatments[:, t - 1]
                    == fam.prescribe(fold.train.covariates[t - 1], thetas.points[k])
                    for k in range(K)
                ]
            )
            empty = [k for k in range(K) if not comply[:, k].any()]
            if empty:
                raise FitError(
                    f"no subjects follow the rule at stage {t} for theta index(es) {empty}"
                    f" in fold {fold.b}"
                )
            ri, rk = np.nonzero(comply[:, fit_ks])
            rk = np.asarray(fit_ks)[rk]
            H = history_features(fold.train, t)
            X = _pooled_features(H, thetas.points, ri, rk)
            y = pseudo_train[fi][ri, rk]
            cv = np.column_stack(
                [
                    fold.val.treatments[:, t - 1]
                    == fam.prescribe(fold.val.covariates[t - 1], thetas.points[k])
                    for k in range(K)
                ]
            )
            vi, vk = np.nonzero(cv[:, fit_ks])
            vk = np.asarray(fit_ks)[vk]
            Xv = _pooled_features(history_features(fold.val, t), thetas.points, vi, vk)
            yv = pseudo_val[fi][vi, vk]
            rows.append((X, y, Xv, yv))

        if reg == "linear":
            for fi, fold in enumerate(folds):
                X, y, _, _ = rows[fi]
                D = np.column_stack([np.ones(len(y)), X])
                coef = np.linalg.lstsq(D, y, rcond=None)[0]
                stage_fits[fi][t - 1] = MuStageFit(stage=t, kind="linear",
                                                   payload={"coef": coef})
        elif reg == "hal":
            lam_max = 0.0
            bases = []
            for X, y, _, _ in rows:
                basis = hal.build_basis(X, max_order=min(cfg.mu_max_order, X.shape[1]),
                                        max_knots=cfg.mu_max_knots)
                bases.append(basis)
                XT = np.ascontiguousarray(basis.train_design.T)
                lam_max = max(lam_max, _lambda_max(XT, y, np.full(len(y), 1 / len(y)), "squared"))
            if lam_max <= 0:
                lam_max = 1.0
            grid = np.logspace(np.log10(lam_max), np.log10(lam_max * cfg.mu_min_ratio),
                               cfg.mu_grid_size)
            losses = np.zeros(len(grid))
            paths = []
            for fi, (X, y, Xv, yv) in enumerate(rows):
                path = hal.fit_path(bases[fi], y, None, "squared", grid)
                paths.append(path)
                pred = np.maximum(hal.path_predictions(path, bases[fi], Xv), 0.0)
                losses += ((yv[:, None] - pred) ** 2).sum(axis=0)
            lam_t = float(grid[int(np.argmin(losses))])
            for fi, fold in enumerate(folds):
                stage_fits[fi][t - 1] = MuStageFit(
                    stage=t,
                    kind="hal",
                    payload={"basis": bases[fi].without_train_design(),
                             "fit": paths[fi].fit_at(lam_t), "lambda": lam_t},
                )
        else:
            raise FitError(f"unknown mu regressor {reg!r}")
        for fi, fold in enumerate(folds):
            pseudo_train[fi] = stage_fits[fi][t - 1].predict(fold.train, thetas)
            pseudo_val[fi] = stage_fits[fi][t - 1].predict(fold.val, thetas)
    for fi, fold in enumerate(folds):
        fold.mu = MuSequence(stage_fits=tuple(stage_fits[fi]), thetas=thetas)


def _fit_working_model(fold: _FoldData, fam, thetas, cfg, lam_by_stage=None):
    weights = compliance_weights(fold.train, fold.prop, fam, thetas, lam_by_stage)
    return fit_msm(
        fold.train,
        cfg.msm_family,
        fold.prop,
        fam,
        thetas,
        weights=weights,
        include_baseline=cfg.msm_include_baseline,
        hal_max_knots=cfg.msm_hal_max_knots,
        fold=fold.b,
    )


def select_lambda_dcar(ds, plan, fam, thetas, folds, clip_eps=0.01):
    """Per-stage penalty minimizing |cross-fold mean validation augmentation|.

    `folds` carry fitted HAL propensity paths and sequential regressions.
    All stages are evaluated at the same candidate penalty when forming the
    stage-t criterion. Ties prefer the larger penalty.
    """
    T = ds.T
    grids = [folds[0].prop[t - 1].payload["grid"] for t in range(1, T + 1)]
    means = {}
    selected = {}
    for t in range(1, T + 1):
        grid = grids[t - 1]
        total = np.zeros(len(grid))
        for fold in folds:
            for li in range(len(grid)):
                # every stage's path is read at the same candidate position
                lam_by_stage = [g[li] for g in grids]
                contrib = dcar_term(fold.val, t, fold.prop, fold.mu, fam, thetas,
                                    lam_by_stage=lam_by_stage)
                total[li] += contrib.mean()
        mean_curve = total / len(folds)
        sel = int(np.argmin(np.abs(mean_curve)))
        means[t] = mean_curve
        selected[t] = float(grid[sel])
    return selected, DcarDiagnostics(
        grids={t: grids[t - 1] for t in range(1, T + 1)}, means=means, selected=selected
    )


def select_lambda_score(ds, plan, folds, j_cap=None, clip_eps=0.01):
    """Per-stage penalty from the basis-score criterion with the
    active-set-size guard: max(lambda_J, argmin of the score)."""
    T = ds.T
    n = ds.n
    J = j_cap if j_cap is not None else max(int(np.floor(np.sqrt(n))) - 1, 1)
    selected = {}
    curves = {}
    for t in range(1, T + 1):
        grid = folds[0].prop[t - 1].payload["grid"]
        L = len(grid)
        score = np.zeros(L)
        active_counts = np.zeros(L)
        for fold in folds:
            path = fold.prop[t - 1].payload["path"]
            basis = fold.prop[t - 1].payload["basis"]
            Hval = history_features(fold.val, t)
            aval = fold.val.treatments[:, t - 1].astype(np.float64)
            probs = np.clip(expit(hal.path_predictions(path, basis, Hval)),
                            clip_eps, 1 - clip_eps)
            union = np.flatnonzero(np.any(path.coef_matrix != 0.0, axis=0))
            design = basis.evaluate(Hval, cols=union) if union.size else None
            for li in range(L):
                fit = path.fits[li]
                act = fit.active
                active_counts[li] += act.size
                l1 = max(fit.l1_norm, 1e-10)
                if act.size == 0:
                    resid = (aval - probs[:, li]) / probs[:, li]
                    score[li] += abs(float(resid.mean())) / l1
                    continue
                colpos = np.searchsorted(union, act)
                resid = (aval - probs[:, li]) / probs[:, li]
                omega = design[:, colpos].T @ resid / len(aval)
                score[li] += float(np.abs(omega).sum()) / l1
        score /= len(folds)
        active_counts /= len(folds)
        lam_tilde = float(grid[int(np.argmin(score))])
        rich = np.flatnonzero(active_counts >= J)
        lam_j = float(grid[rich[0]]) if rich.size else float(grid[-1])
        selected[t] = max(lam_j, lam_tilde)
        curves[t] = {"grid": grid, "score": score, "active": active_counts,
                     "lambda_tilde": lam_tilde, "lambda_j": lam_j, "j": J}
    return selected, curves


def _assemble(kind, ds, plan, folds, contribs, cfg, selected=None, diagnostics=None):
    per_fold = []
    c_all = np.empty(ds.n)
    for fold in folds:
        c = contribs[fold.b]
        c_all[fold.val_idx] = c
        per_fold.append(float(np.mean(c)))
    point = float(np.mean(per_fold))
    var = float(np.mean((c_all - point) ** 2))
    lo, hi = confidence_interval(point, var, ds.n, cfg.level)
    return RiskEstimate(
        estimator_kind=kind,
        point=point,
        if_variance=var,
        ci_lo=lo,
        ci_hi=hi,
        n=ds.n,
        B=plan.B,
        level=cfg.level,
        per_fold=per_fold,
        selected_lambdas=selected,
        diagnostics=diagnostics,
    )


def estimate_risks(
    ds: LongitudinalDataset,
    plan: CrossValPlan,
    fam: RegimeFamily,
    thetas: ThetaMeasure,
    config: EstimatorConfig = EstimatorConfig(),
    estimators=("ipw", "mr"),
    return_models: bool = False,
):
    """Run the requested estimators with shared per-fold nuisance fits.

    Returns a dict estimator -> RiskEstimate, plus (when return_models is
    true) a dict estimator -> per-fold fitted working models, which is what
    the replicate-truth computation consumes.
    """
    estimators = tuple(estimators)
    for e in estimators:
        if e not in ESTIMATOR_KINDS:
            raise FitError(f"unknown estimator {e!r}")
    needs_uipw = any(e.startswith("uipw") for e in estimators)
    if needs_uipw and config.prop_method != "hal":
        raise FitError("undersmoothed estimators require the hal propensity method")
    if plan.n != ds.n:
        raise FitError("plan and dataset disagree on the sample size")

    folds = []
    for b in range(1, plan.B + 1):
        tr, va = plan.train_idx(b), plan.val_idx(b)
        folds.append(_FoldData(b, tr, va, ds.subset(tr), ds.subset(va)))

    for fold in folds:
        _fit_propensities(fold, ds, config)
    if config.prop_method == "hal":
        grids = _shared_propensity_grids(folds, ds, config)
        _fit_propensity_paths(folds, ds, config, grids)

    for fold in folds:
        fold.m_cv = _fit_working_model(fold, fam, thetas, config)

    needs_mu = "mr" in estimators or needs_uipw
    if needs_mu:
        _fit_mu_engine(folds, ds, fam, thetas, config)

    results = {}
    models = {}

    if "ipw" in estimators:
        contribs = {
            f.b: ipw_loss_contribution(f.val, f.prop, f.m_cv, fam, thetas) for f in folds
        }
        results["ipw"] = _assemble("ipw", ds, plan, folds, contribs, config)
        models["ipw"] = [f.m_cv for f in folds]

    if "mr" in estimators:
        contribs = {
            f.b: eif_contribution(f.val, f.prop, f.mu, f.m_cv, fam, thetas) for f in folds
        }
        results["mr"] = _assemble("mr", ds, plan, folds, contribs, config)
        models["mr"] = [f.m_cv for f in folds]

    for kind, selector in (("uipw_dcar", "dcar"), ("uipw_score", "score")):
        if kind not in estimators:
            continue
        if selector == "dcar":
            selected, diag = select_lambda_dcar(ds, plan, fam, thetas, folds,
                                                clip_eps=config.clip_eps)
            diagnostics = {
                "dcar": {
                    str(t): {"grid": list(map(float, diag.grids[t])),
                             "mean": list(map(float, diag.means[t])),
                             "selected": diag.selected[t]}
                    for t in diag.grids
                }
            }
        else:
            selected, curves = select_lambda_score(ds, plan, folds,
                                                   j_cap=config.score_j_cap,
                                                   clip_eps=config.clip_eps)
            diagnostics = {
                "score": {
                    str(t): {"grid": list(map(float, c["grid"])),
                             "score": list(map(float, c["score"])),
                             "active": list(map(float, c["active"])),
                             "lambda_tilde": c["lambda_tilde"],
                             "lambda_j": c["lambda_j"], "j": c["j"]}
                    for t, c in curves.items()
                }
            }
        lam_by_stage = [selected[t] for t in range(1, ds.T + 1)]
        m_under = [
            _fit_working_model(fold, fam, thetas, config, lam_by_stage=lam_by_stage)
            for fold in folds
        ]
        point_contribs = {}
        var_contribs = {}
        for fold, m_u in zip(folds, m_under):
            point_contribs[fold.b] = ipw_loss_contribution(
                fold.val, fold.prop, m_u, fam, thetas, lam_by_stage=lam_by_stage
            )
            var_contribs[fold.b] = eif_contribution(
                fold.val, fold.prop, fold.mu, m_u, fam, thetas, lam_by_stage=lam_by_stage
            )
        est = _assemble(kind, ds, plan, folds, point_contribs, config,
                        selected={str(t): selected[t] for t in selected},
                        diagnostics=diagnostics)
        # variance from the influence contributions at the undersmoothed fit
        v_all = np.empty(ds.n)
        for fold in folds:
            v_all[fold.val_idx] = var_contribs[fold.b]
        var = float(np.mean((v_all - est.point) ** 2))
        est.if_variance = var
        est.ci_lo, est.ci_hi = confidence_interval(est.point, var, ds.n, config.level)
        results[kind] = est
        models[kind] = m_under

    if return_models:
        return results, models
    return results


def ipw_risk(ds, plan, fam, thetas, config: EstimatorConfig = EstimatorConfig()) -> RiskEstimate:
    """Cross-validated inverse-probability-weighted risk of the working model."""
    return estimate_risks(ds, plan, fam, thetas, config, estimators=("ipw",))["ipw"]


def mr_risk(ds, plan, fam, thetas, config: EstimatorConfig = EstimatorConfig()) -> RiskEstimate:
    """Multiply robust risk: validation average of the uncentered
    efficient-influence contribution."""
    return estimate_risks(ds, plan, fam, thetas, config, estimators=("mr",))["mr"]


def uipw_risk(ds, plan, fam, thetas, criterion: str = "dcar",
              config: EstimatorConfig = EstimatorConfig()) -> RiskEstimate:
    """Undersmoothed-propensity IPW risk with the chosen penalty selector."""
    if criterion not in ("dcar", "score"):
        raise FitError(f"unknown undersmoothing criterion {criterion!r}")
    kind = f"uipw_{criterion}"
    return estimate_risks(ds, plan, fam, thetas, config, estimators=(kind,))[kind]
