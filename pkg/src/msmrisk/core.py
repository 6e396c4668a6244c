"""Longitudinal data model: observed trajectories, treatment rules, theta
measures for integrating over rule parameters, and cross-validation plans.

All containers are frozen dataclasses holding read-only numpy arrays, so they
can be shared freely across workers. Operations on them are pure functions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

REGIME_KINDS = ("linear_threshold", "scalar_threshold_below", "scalar_threshold_above")


class DatasetError(ValueError):
    """Malformed longitudinal data (shape, finiteness, or coding problems)."""


class InvalidPlanError(ValueError):
    """Cross-validation plan that cannot partition the sample as requested."""


def _frozen(a: np.ndarray, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LongitudinalDataset:
    """n subjects observed over T treatment stages plus a scalar outcome.

    covariates: one (n, d_t) array per stage; d_t may vary by stage.
    treatments: (n, T) array of 0/1 treatment decisions.
    outcome:    (n,) final outcome.
    baseline_cols: indices into the stage-1 covariates selecting the baseline
        summary V used by working models. Defaults to all stage-1 columns.
    """

    covariates: tuple[np.ndarray, ...]
    treatments: np.ndarray
    outcome: np.ndarray
    baseline_cols: tuple[int, ...] = ()

    def __post_init__(self):
        covs = tuple(_frozen(S, dtype=np.float64) for S in self.covariates)
        A = _frozen(self.treatments, dtype=np.int8)
        y = _frozen(self.outcome, dtype=np.float64)
        if not covs:
            raise DatasetError("at least one stage of covariates required")
        n = covs[0].shape[0]
        for t, S in enumerate(covs, start=1):
            if S.ndim != 2 or S.shape[0] != n:
                raise DatasetError(f"stage {t} covariates must be (n, d_t)")
            if not np.all(np.isfinite(S)):
                raise DatasetError(f"non-finite covariate at stage {t}")
        if A.shape != (n, len(covs)):
            raise DatasetError("treatments must have shape (n, T)")
        if not np.isin(np.asarray(self.treatments), (0, 1)).all():
            raise DatasetError("treatments must be exactly 0 or 1")
        if y.shape != (n,) or not np.all(np.isfinite(y)):
            raise DatasetError("outcome must be a finite (n,) vector")
        cols = tuple(self.baseline_cols) or tuple(range(covs[0].shape[1]))
        if any(c < 0 or c >= covs[0].shape[1] for c in cols):
            raise DatasetError("baseline_cols out of range for stage-1 covariates")
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "treatments", A)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "baseline_cols", cols)

    @property
    def n(self) -> int:
        return self.covariates[0].shape[0]

    @property
    def T(self) -> int:
        return len(self.covariates)

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(S.shape[1] for S in self.covariates)

    def baseline(self) -> np.ndarray:
        """V: the selected baseline columns of the stage-1 covariates."""
        return self.covariates[0][:, list(self.baseline_cols)]

    def history(self, t: int) -> np.ndarray:
        """Flattened history features at stage t: (S_1, ..., S_t, A_1, ..., A_{t-1})."""
        if not 1 <= t <= self.T:
            raise DatasetError(f"stage {t} outside 1..{self.T}")
        parts = [self.covariates[s] for s in range(t)]
        if t > 1:
            parts.append(self.treatments[:, : t - 1].astype(np.float64))
        return np.hstack(parts)

    def subset(self, idx: np.ndarray) -> "LongitudinalDataset":
        idx = np.asarray(idx)
        return LongitudinalDataset(
            covariates=tuple(S[idx] for S in self.covariates),
            treatments=self.treatments[idx],
            outcome=self.outcome[idx],
            baseline_cols=self.baseline_cols,
        )

    def to_csv(self, path, y_mode: str = "last") -> None:
        """Write one row per (subject, stage): id, stage, S1..Sd, A, Y.

        y_mode 'last' leaves Y blank except on each subject's final stage;
        'all' repeats Y on every stage row. Both forms round-trip.
        """
        if y_mode not in ("last", "all"):
            raise DatasetError(f"unknown y_mode {y_mode!r}")
        dmax = max(self.stage_dims)
        header = ["id", "stage"] + [f"S{j}" for j in range(1, dmax + 1)] + ["A", "Y"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(self.n):
                for t in range(self.T):
                    S = self.covariates[t][i]
                    svals = [repr(float(v)) for v in S] + [""] * (dmax - len(S))
                    yval = ""
                    if y_mode == "all" or t == self.T - 1:
                        yval = repr(float(self.outcome[i]))
                    w.writerow([i + 1, t + 1] + svals + [int(self.treatments[i, t]), yval])


def dataset_from_csv(path, baseline_cols: tuple[int, ...] = ()) -> LongitudinalDataset:
    """Read the CSV layout written by LongitudinalDataset.to_csv.

    Accepts Y either repeated on every stage row (it must then be constant
    within subject) or present only on the last stage row.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"empty dataset file {path}")
    header = rows[0]
    try:
        scols = [j for j, name in enumerate(header) if name.startswith("S")]
        acol = header.index("A")
        ycol = header.index("Y")
    except ValueError as exc:
        raise DatasetError(f"missing required column in {path}: {exc}") from exc

    by_id: dict[str, list[list[str]]] = {}
    for row in rows[1:]:
        if not row:
            continue
        by_id.setdefault(row[0], []).append(row)

    ids = list(by_id)
    T = len(by_id[ids[0]])
    covs_by_stage: list[list[list[float]]] = [[] for _ in range(T)]
    treats, outcomes = [], []
    for sid in ids:
        recs = sorted(by_id[sid], key=lambda r: int(r[1]))
        if len(recs) != T:
            raise DatasetError(f"subject {sid} has {len(recs)} stages, expected {T}")
        yvals = [r[ycol] for r in recs if r[ycol] != ""]
        if not yvals:
            raise DatasetError(f"subject {sid} has no outcome value")
        if len(set(yvals)) > 1:
            raise DatasetError(f"subject {sid} has inconsistent repeated outcomes")
        outcomes.append(float(yvals[0]))
        treats.append([int(r[acol]) for r in recs])
        for t, r in enumerate(recs):
            covs_by_stage[t].append([float(r[j]) for j in scols if r[j] != ""])

    covariates = []
    for t, stage_rows in enumerate(covs_by_stage, start=1):
        dims = {len(r) for r in stage_rows}
        if len(dims) != 1:
            raise DatasetError(f"inconsistent covariate dimension at stage {t}")
        covariates.append(np.array(stage_rows, dtype=np.float64))
    return LongitudinalDataset(
        covariates=tuple(covariates),
        treatments=np.array(treats, dtype=np.int8),
        outcome=np.array(outcomes, dtype=np.float64),
        baseline_cols=baseline_cols,
    )


@dataclass(frozen=True)
class RegimeFamily:
    """A parametric family of deterministic stage-wise treatment rules.

    linear_threshold:        treat iff theta' S_t > 0 (theta a vector)
    scalar_threshold_below:  treat iff S[index] < theta
    scalar_threshold_above:  treat iff theta > S[index] (same predicate,
                             named from the rule's perspective in threshold
                             form; kept as a distinct kind for config clarity)
    """

    kind: str
    index: int = 0

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise DatasetError(f"unknown regime kind {self.kind!r}")

    def prescribe(self, stage_cov: np.ndarray, theta) -> np.ndarray:
        """0/1 prescription of the rule for each row of stage covariates."""
        if self.kind == "linear_threshold":
            th = np.atleast_1d(np.asarray(theta, dtype=np.float64))
            if th.shape[0] != stage_cov.shape[1]:
                raise DatasetError(
                    f"theta dimension {th.shape[0]} != stage dimension {stage_cov.shape[1]}"
                )
            return (stage_cov @ th > 0).astype(np.int8)
        th = float(np.asarray(theta).reshape(()))
        if self.index >= stage_cov.shape[1]:
            raise DatasetError(f"covariate index {self.index} out of range")
        col = stage_cov[:, self.index]
        if self.kind == "scalar_threshold_below":
            return (col < th).astype(np.int8)
        return (th > col).astype(np.int8)


@dataclass(frozen=True)
class ThetaMeasure:
    """Discrete measure over rule parameters: points with weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray
    provenance: str = "grid"

    def __post_init__(self):
        pts = _frozen(self.points, dtype=np.float64)
        w = _frozen(self.weights, dtype=np.float64)
        if pts.shape[0] != w.shape[0] or pts.shape[0] == 0:
            raise DatasetError("points and weights must be nonempty and aligned")
        if not np.all(np.isfinite(pts)):
            raise DatasetError("theta points must be finite")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise DatasetError("weights must be nonnegative and sum to 1 within 1e-12")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.points.shape[0]


def theta_draws(k: int, seed: int, mean: float = 0.0, sd: float = 0.1) -> ThetaMeasure:
    """Equal-weight Monte-Carlo measure of k normal draws, reproducible by seed."""
    if k < 1:
        raise DatasetError("need at least one theta draw")
    if sd <= 0:
        raise DatasetError("sd must be positive")
    rng = np.random.default_rng(seed)
    pts = mean + sd * rng.standard_normal(k)
    return ThetaMeasure(
        points=pts,
        weights=np.full(k, 1.0 / k),
        provenance=f"monte_carlo(normal({mean},{sd}),k={k},seed={seed})",
    )


def theta_grid(points, weights=None) -> ThetaMeasure:
    """Deterministic measure on explicit points (uniform weights by default)."""
    pts = np.asarray(points, dtype=np.float64)
    if weights is None:
        weights = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return ThetaMeasure(points=pts, weights=np.asarray(weights), provenance="grid")


@dataclass(frozen=True)
class CrossValPlan:
    """Balanced random partition of subjects 1..n into folds 1..B."""

    n: int
    B: int
    assignment: np.ndarray = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        a = _frozen(self.assignment, dtype=np.int64)
        if a.shape != (self.n,):
            raise InvalidPlanError("assignment must have one entry per subject")
        counts = np.bincount(a, minlength=self.B + 1)[1 : self.B + 1]
        if counts.sum() != self.n:
            raise InvalidPlanError("fold ids must lie in 1..B")
        if counts.max() - counts.min() > 1:
            raise InvalidPlanError("fold sizes must differ by at most 1")
        object.__setattr__(self, "assignment", a)

    def train_idx(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != b)

    def val_idx(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == b)


def make_folds(n: int, B: int, seed: int) -> CrossValPlan:
    """Shuffled round-robin fold assignment, deterministic in (n, B, seed)."""
    if B < 2 or B > n:
        raise InvalidPlanError(f"fold count B={B} must satisfy 2 <= B <= n={n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % B + 1
    return CrossValPlan(n=n, B=B, assignment=assignment, seed=seed)


def regime_indicator(ds: LongitudinalDataset, fam: RegimeFamily, theta, t: int) -> np.ndarray:
    """1 where the observed stage-t treatment matches the rule's prescription."""
    if not 1 <= t <= ds.T:
        raise DatasetError(f"stage {t} outside 1..{ds.T}")
    d = fam.prescribe(ds.covariates[t - 1], theta)
    return (ds.treatments[:, t - 1] == d).astype(np.int8)


def cumulative_compliance(ds: LongitudinalDataset, fam: RegimeFamily, theta, upto: int) -> np.ndarray:
    """Product of stage-wise regime indicators for t = 1..upto."""
    if not 1 <= upto <= ds.T:
        raise DatasetError(f"stage {upto} outside 1..{ds.T}")
    out = np.ones(ds.n, dtype=np.int8)
    for t in range(1, upto + 1):
        out &= regime_indicator(ds, fam, theta, t)
    return out
