"""Indicator-basis lasso over covariate sections ("highly adaptive" style).

The regression function is represented as an intercept plus a linear
combination of indicator columns phi_{r,i}(x) = prod_{j in r} I(x_j >= k_j),
one column per observed knot of each section r (a nonempty subset of the
coordinates, up to a configured interaction order). The L1 norm of the
coefficients plus the intercept tracks the sectional-variation-norm proxy of
the fit. Fitting minimizes a weighted empirical loss plus lam * ||beta||_1
along a decreasing lam grid with warm starts.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _solve
from .core import CrossValPlan, DatasetError

LOSS_KINDS = ("squared", "bernoulli")


class BasisError(ValueError):
    pass


def _sections(d: int, max_order: int):
    for size in range(1, max_order + 1):
        yield from itertools.combinations(range(d), size)


def _snap_to_quantiles(col: np.ndarray, cap: int) -> np.ndarray:
    """Thin a column's candidate knot values to at most `cap` quantiles."""
    vals = np.unique(col)
    if cap is None or vals.size <= cap:
        return col
    qs = np.quantile(vals, np.linspace(0.0, 1.0, cap))
    idx = np.searchsorted(qs, col, side="right") - 1
    return qs[np.clip(idx, 0, cap - 1)]


@dataclass(frozen=True)
class HalBasis:
    """Sections, their knots, and the deduplicated training design matrix."""

    design_dim: int
    max_order: int
    sections: tuple[tuple[int, ...], ...]
    knots: tuple[np.ndarray, ...]
    col_section: np.ndarray = field(repr=False)
    col_knot: np.ndarray = field(repr=False)
    train_design: np.ndarray | None = field(repr=False)

    @property
    def n_columns(self) -> int:
        return self.col_section.shape[0]

    @property
    def n_train(self) -> int:
        if self.train_design is None:
            raise BasisError("training design was stripped from this basis")
        return self.train_design.shape[0]

    def without_train_design(self) -> "HalBasis":
        """Prediction-only copy (drops the n x p training matrix)."""
        return HalBasis(
            design_dim=self.design_dim,
            max_order=self.max_order,
            sections=self.sections,
            knots=self.knots,
            col_section=self.col_section,
            col_knot=self.col_knot,
            train_design=None,
        )

    def evaluate(self, X: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
        """Design matrix of the (selected) basis columns at new points."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.design_dim:
            raise BasisError(f"expected (m, {self.design_dim}) input, got {X.shape}")
        if cols is None:
            cols = np.arange(self.n_columns)
        out = np.empty((X.shape[0], len(cols)))
        for pos, c in enumerate(cols):
            r = self.sections[self.col_section[c]]
            knot = self.knots[self.col_section[c]][self.col_knot[c]]
            ind = X[:, r[0]] >= knot[0]
            for axis, j in enumerate(r[1:], start=1):
                ind = ind & (X[:, j] >= knot[axis])
            out[:, pos] = ind
        return out


def build_basis(X: np.ndarray, max_order: int = 2, max_knots=None) -> HalBasis:
    """Enumerate sections up to `max_order`, take observed values as knots,
    and collapse columns that are identical on the training data within each
    section.

    max_knots thins knot candidates per coordinate to a quantile grid; it can
    be an int (applied to every section) or a sequence indexed by interaction
    order (entry s-1 applies to sections of size s; None = keep all).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise BasisError(f"design must be a nonempty 2-d array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise BasisError("design matrix contains non-finite values")
    d = X.shape[1]
    if not 1 <= max_order <= d:
        raise BasisError(f"max_order must lie in 1..{d}")
    if max_knots is None or np.isscalar(max_knots):
        caps = [max_knots] * max_order
    else:
        caps = list(max_knots) + [None] * (max_order - len(max_knots))

    sections, knots_per_sec = [], []
    col_sec, col_knot, design_cols = [], [], []
    for r in _sections(d, max_order):
        cap = caps[len(r) - 1]
        vals = X[:, r]
        if cap is not None:
            vals = np.column_stack([_snap_to_quantiles(vals[:, a], cap) for a in range(len(r))])
        knots = np.unique(vals, axis=0)
        cols = np.ones((X.shape[0], knots.shape[0]), dtype=bool)
        for axis, j in enumerate(r):
            cols &= X[:, j][:, None] >= knots[:, axis][None, :]
        # collapse duplicate evaluated columns, keeping the first knot
        _, first = np.unique(cols, axis=1, return_index=True)
        keep = np.sort(first)
        sec_id = len(sections)
        sections.append(r)
        knots_per_sec.append(knots[keep])
        design_cols.append(cols[:, keep])
        col_sec.extend([sec_id] * len(keep))
        col_knot.extend(range(len(keep)))
    return HalBasis(
        design_dim=d,
        max_order=max_order,
        sections=tuple(sections),
        knots=tuple(knots_per_sec),
        col_section=np.asarray(col_sec, dtype=np.int64),
        col_knot=np.asarray(col_knot, dtype=np.int64),
        train_design=np.hstack(design_cols).astype(np.float64),
    )


@dataclass(frozen=True)
class HalFit:
    """One point on the penalty path."""

    intercept: float
    coef: np.ndarray = field(repr=False)
    lam: float = 0.0
    loss_kind: str = "squared"
    saturated: bool = False

    @property
    def l1_norm(self) -> float:
        """Variation-norm proxy: |intercept| + sum of |coefficients|."""
        return abs(self.intercept) + float(np.abs(self.coef).sum())

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.coef)

    def sparse_coefficients(self, basis: HalBasis):
        """(section, knot, value) triplets for the nonzero coefficients."""
        out = []
        for c in self.active:
            sec = basis.sections[basis.col_section[c]]
            knot = basis.knots[basis.col_section[c]][basis.col_knot[c]]
            out.append((sec, tuple(float(v) for v in knot), float(self.coef[c])))
        return out


@dataclass(frozen=True)
class HalPath:
    """Fits along a strictly decreasing penalty grid (warm-started)."""

    grid: np.ndarray
    fits: tuple[HalFit, ...]
    loss_kind: str

    def __post_init__(self):
        if len(self.grid) != len(self.fits):
            raise BasisError("grid and fits must align")

    @property
    def intercepts(self) -> np.ndarray:
        return np.array([f.intercept for f in self.fits])

    @property
    def coef_matrix(self) -> np.ndarray:
        return np.stack([f.coef for f in self.fits])

    @property
    def l1_norms(self) -> np.ndarray:
        return np.array([f.l1_norm for f in self.fits])

    def fit_at(self, lam: float) -> HalFit:
        k = int(np.argmin(np.abs(self.grid - lam)))
        return self.fits[k]


def default_lambda_grid(
    basis: HalBasis,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    loss_kind: str = "squared",
    size: int = 50,
    min_ratio: float = 1e-4,
) -> np.ndarray:
    """Log-spaced grid from lambda_max (empty active set) down to
    min_ratio * lambda_max."""
    w = _norm_weights(weights, len(y))
    lam_max = _solve.lambda_max(np.ascontiguousarray(basis.train_design.T), np.asarray(y, dtype=np.float64), w, loss_kind)
    if lam_max <= 0.0:
        lam_max = 1.0
    return np.logspace(np.log10(lam_max), np.log10(lam_max * min_ratio), size)


def _norm_weights(weights, n) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise BasisError("weights must be finite, nonnegative, one per row")
    tot = float(w.sum())
    if tot <= 0:
        raise BasisError("weights sum to zero")
    return w / tot


def fit_path(
    basis: HalBasis,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    loss_kind: str = "squared",
    grid: np.ndarray | None = None,
    kkt_tol: float | None = None,
) -> HalPath:
    """Warm-started penalized fits along the grid.

    Every returned fit satisfies the stationarity conditions: the weighted
    gradient of the empirical loss matches lam on the active set and is
    dominated by lam off it, within kkt_tol (default 1e-7 * max(1, grid[0])).
    """
    if loss_kind not in LOSS_KINDS:
        raise BasisError(f"unknown loss {loss_kind!r}")
    y = np.asarray(y, dtype=np.float64)
    w = _norm_weights(weights, len(y))
    if len(y) != basis.n_train:
        raise BasisError("response length must match the training design")
    if grid is None:
        grid = default_lambda_grid(basis, y, w, loss_kind)
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(grid < 0) or np.any(np.diff(grid) >= 0):
        # a trailing 0 is allowed so the unpenalized fit is reachable
        raise BasisError("grid must be strictly decreasing and nonnegative")
    if kkt_tol is None:
        kkt_tol = 1e-7 * max(1.0, float(grid[0]))
    XT = np.ascontiguousarray(basis.train_design.T)
    if loss_kind == "squared":
        icpts, coefs, meta = _solve.solve_path_squared(XT, y, w, grid, kkt_tol)
    else:
        if not np.isin(y, (0.0, 1.0)).all():
            raise BasisError("bernoulli loss requires a 0/1 response")
        icpts, coefs, meta = _solve.solve_path_bernoulli(XT, y, w, grid, kkt_tol)
    fits = tuple(
        HalFit(
            intercept=float(icpts[k]),
            coef=coefs[k].copy(),
            lam=float(grid[k]),
            loss_kind=loss_kind,
            saturated=bool(meta["saturated"][k]),
        )
        for k in range(len(grid))
    )
    return HalPath(grid=grid, fits=fits, loss_kind=loss_kind)


def predict(fit: HalFit, basis: HalBasis, Xnew: np.ndarray) -> np.ndarray:
    """Linear predictor at new points (logit scale for bernoulli fits)."""
    Xnew = np.asarray(Xnew, dtype=np.float64)
    if Xnew.ndim != 2 or Xnew.shape[1] != basis.design_dim:
        raise BasisError(f"expected (m, {basis.design_dim}) input, got {Xnew.shape}")
    act = fit.active
    if act.size == 0:
        return np.full(Xnew.shape[0], fit.intercept)
    design = basis.evaluate(Xnew, cols=act)
    return fit.intercept + design @ fit.coef[act]


def predict_proba(fit: HalFit, basis: HalBasis, Xnew: np.ndarray) -> np.ndarray:
    if fit.loss_kind != "bernoulli":
        raise BasisError("probabilities are only defined for bernoulli fits")
    return expit(predict(fit, basis, Xnew))


def path_predictions(path: HalPath, basis: HalBasis, Xnew: np.ndarray) -> np.ndarray:
    """(m, n_lambda) linear predictors, evaluating each basis column once."""
    union = np.flatnonzero(np.any(path.coef_matrix != 0.0, axis=0))
    out = np.tile(path.intercepts, (np.asarray(Xnew).shape[0], 1))
    if union.size:
        design = basis.evaluate(Xnew, cols=union)
        out += design @ path.coef_matrix[:, union].T
    return out


def _val_loss(pred: np.ndarray, y: np.ndarray, w: np.ndarray, loss_kind: str) -> np.ndarray:
    if loss_kind == "squared":
        return w @ (y[:, None] - pred) ** 2
    p = np.clip(expit(pred), _solve.PROB_CLIP, 1 - _solve.PROB_CLIP)
    return -(w @ (y[:, None] * np.log(p) + (1 - y)[:, None] * np.log1p(-p)))


def cv_select_lambda(
    basis: HalBasis,
    y: np.ndarray,
    weights: np.ndarray | None,
    loss_kind: str,
    grid: np.ndarray,
    folds: CrossValPlan,
    groups: np.ndarray | None = None,
) -> float:
    """Penalty minimizing the cross-validated loss; ties go to the larger
    value (more regularization).

    `groups` maps design rows to the subjects partitioned by `folds`; rows of
    one subject always land in the same fold (needed when a subject
    contributes several pooled rows). Defaults to the identity.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise BasisError("empty lambda grid")
    y = np.asarray(y, dtype=np.float64)
    w = _norm_weights(weights, len(y))
    if groups is None:
        if folds.n != len(y):
            raise BasisError("folds cover a different number of rows; pass groups")
        groups = np.arange(len(y))
    row_fold = folds.assignment[np.asarray(groups)]
    losses = np.zeros(grid.size)
    for b in range(1, folds.B + 1):
        tr = row_fold != b
        va = ~tr
        if not va.any() or not tr.any():
            continue
        sub = _subset_basis(basis, tr)
        path = fit_path(sub, y[tr], w[tr], loss_kind, grid)
        union = _nonzero_union(path)
        pred = path.intercepts[None, :] + basis.train_design[va][:, union] @ path.coef_matrix[:, union].T
        losses += _val_loss(pred, y[va], w[va], loss_kind)
    return float(grid[int(np.argmin(losses))])


def _nonzero_union(path: HalPath) -> np.ndarray:
    return np.flatnonzero(np.any(path.coef_matrix != 0.0, axis=0))


def _subset_basis(basis: HalBasis, row_mask: np.ndarray) -> HalBasis:
    """Same columns/knots, training rows restricted (for CV refits)."""
    return HalBasis(
        design_dim=basis.design_dim,
        max_order=basis.max_order,
        sections=basis.sections,
        knots=basis.knots,
        col_section=basis.col_section,
        col_knot=basis.col_knot,
        train_design=basis.train_design[row_mask],
    )


def fit_to_json(fit: HalFit, basis: HalBasis) -> str:
    """Self-contained JSON document for a single fit (active columns only)."""
    doc = {
        "loss_kind": fit.loss_kind,
        "lambda": fit.lam,
        "intercept": fit.intercept,
        "design_dim": basis.design_dim,
        "saturated": fit.saturated,
        "coefficients": [
            {"section": list(sec), "knot": list(knot), "value": val}
            for sec, knot, val in fit.sparse_coefficients(basis)
        ],
    }
    return json.dumps(doc, sort_keys=True)


def predict_from_json(doc: str, Xnew: np.ndarray) -> np.ndarray:
    """Evaluate a serialized fit without the original basis object."""
    spec = json.loads(doc)
    X = np.asarray(Xnew, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec["design_dim"]:
        raise BasisError(f"expected (m, {spec['design_dim']}) input")
    out = np.full(X.shape[0], float(spec["intercept"]))
    for c in spec["coefficients"]:
        ind = np.ones(X.shape[0], dtype=bool)
        for j, k in zip(c["section"], c["knot"]):
            ind &= X[:, j] >= k
        out += c["value"] * ind
    return out
