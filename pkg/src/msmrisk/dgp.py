"""Two-stage synthetic longitudinal process and its counterfactual oracle.

The observed-data generator produces (S_1, A_1, S_2, A_2, Y): two covariates
per stage, binary treatments that are either observational (logistic in the
first covariate) or randomized, and a terminal outcome. Replacing each
treatment with a rule's prescription turns the same machinery into a
counterfactual simulator, which is what the true-risk oracle averages over.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .core import LongitudinalDataset, RegimeFamily, ThetaMeasure


class DgpError(ValueError):
    pass


@dataclass(frozen=True)
class DgpConfig:
    """Constants of the synthetic process.

    Transition and baseline noise are normal with the given standard
    deviations (zero is allowed to make trajectories deterministic for
    worked examples). Post-baseline covariates are clipped to
    [clip_lo, clip_hi].
    """

    n: int
    T: int = 2
    seed: int = 0
    treatment_mode: str = "observational"
    noise_sd_baseline: float = 0.5
    noise_sd_transition: float = 0.5
    noise_sd_outcome: float = 0.1
    clip_hi: float = 8.0
    clip_lo: float = -4.0

    def __post_init__(self):
        if self.n < 1 or self.T < 1:
            raise DgpError("n and T must be positive")
        if self.treatment_mode not in ("observational", "randomized"):
            raise DgpError(f"unknown treatment_mode {self.treatment_mode!r}")
        for name in ("noise_sd_baseline", "noise_sd_transition", "noise_sd_outcome"):
            if getattr(self, name) < 0:
                raise DgpError(f"{name} must be nonnegative")
        if self.clip_lo >= self.clip_hi:
            raise DgpError("clip_lo must be below clip_hi")


def treatment_probability(cfg: DgpConfig, s1: np.ndarray) -> np.ndarray:
    """P(A_t = 1 | covariates) for the configured assignment mechanism."""
    if cfg.treatment_mode == "randomized":
        return np.full(s1.shape, 0.5)
    return expit(0.1 + 0.2 * s1)


def _transition(cfg, s1, s2, a, rng, size):
    shared = 0.05 * s1 * s2
    e1 = cfg.noise_sd_transition * rng.standard_normal(size)
    e2 = cfg.noise_sd_transition * rng.standard_normal(size)
    s1_new = np.clip(0.9 * (2.0 * a) * s1 + shared + e1, cfg.clip_lo, cfg.clip_hi)
    s2_new = np.clip(0.9 * (1.0 - 2.0 * a) * s1 + shared + e2, cfg.clip_lo, cfg.clip_hi)
    return s1_new, s2_new


def _outcome(cfg, s1, s2, a, rng, size):
    return s1 - s2 + a * s1 + cfg.noise_sd_outcome * rng.standard_normal(size)


def _simulate(cfg: DgpConfig, rng, size, policy):
    """Run the process, drawing A_t from `policy(t, stage_covariates)`."""
    s1 = cfg.noise_sd_baseline * rng.standard_normal(size)
    s2 = cfg.noise_sd_baseline * rng.standard_normal(size)
    covs, treats = [], []
    for t in range(1, cfg.T + 1):
        if t > 1:
            s1, s2 = _transition(cfg, s1, s2, treats[-1], rng, size)
        stage = np.column_stack([s1, s2])
        a = policy(t, stage, rng)
        covs.append(stage)
        treats.append(a)
    y = _outcome(cfg, s1, s2, treats[-1], rng, size)
    return covs, np.column_stack(treats), y


def simulate_observed(cfg: DgpConfig) -> LongitudinalDataset:
    """Observed data under the configured treatment mechanism."""
    rng = np.random.default_rng(cfg.seed)

    def policy(t, stage, rng_):
        p = treatment_probability(cfg, stage[:, 0])
        return (rng_.random(cfg.n) < p).astype(np.int8)

    covs, treats, y = _simulate(cfg, rng, cfg.n, policy)
    return LongitudinalDataset(covariates=tuple(covs), treatments=treats, outcome=y)


def counterfactual_draws(cfg: DgpConfig, fam: RegimeFamily, theta, n_mc: int, seed):
    """(baseline covariates, outcome) pairs with every treatment forced to
    the rule's prescription."""
    rng = np.random.default_rng(seed)

    def policy(t, stage, rng_):
        return fam.prescribe(stage, theta)

    covs, _, y = _simulate(replace(cfg, n=n_mc), rng, n_mc, policy)
    return covs[0], y


def simulate_counterfactual(cfg: DgpConfig, fam: RegimeFamily, theta, n_mc: int, seed) -> np.ndarray:
    """Counterfactual outcomes under the rule indexed by theta."""
    return counterfactual_draws(cfg, fam, theta, n_mc, seed)[1]


def true_risk_oracle(
    cfg: DgpConfig,
    fam: RegimeFamily,
    m,
    thetas: ThetaMeasure,
    n_mc: int,
    seed,
) -> float:
    """Monte-Carlo value of the average squared distance between the working
    model and fresh counterfactual outcomes, weighted by the theta measure.

    `m` is either a fitted working model (anything with predict(theta, V))
    or a plain callable m(theta, V). Each theta point uses independent
    draws so oracle errors stay independent across the measure.
    """
    predict = m.predict if hasattr(m, "predict") else m
    total = 0.0
    for k in range(thetas.k):
        theta = thetas.points[k]
        V, y = counterfactual_draws(cfg, fam, theta, n_mc, _per_theta_seed(seed, k))
        fitted = np.asarray(predict(theta, V), dtype=np.float64)
        if fitted.ndim == 0:
            fitted = np.full(n_mc, float(fitted))
        total += float(thetas.weights[k]) * float(np.mean((y - fitted) ** 2))
    return total


def _per_theta_seed(seed, k: int):
    base = seed if isinstance(seed, (tuple, list)) else (seed,)
    return tuple(base) + (k,)
