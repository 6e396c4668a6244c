import numpy as np
import pytest
from scipy.special import expit


def ista_lasso(X, y, w, lam, loss="squared", iters=200_000):
    """Slow proximal-gradient reference solver for the penalized objective
    0.5/Sw * sum w_i loss_i + lam ||beta||_1 with unpenalized intercept.

    Deliberately independent of the production solver: plain ISTA with a
    conservative step size, run to very high iteration counts.
    """
    n, p = X.shape
    w = w / w.sum()
    Xw = X * w[:, None]
    lip = float(np.linalg.eigvalsh(Xw.T @ X).max()) + 1.0
    if loss == "bernoulli":
        lip = 0.25 * lip + 1.0
    b0, b = 0.0, np.zeros(p)
    for _ in range(iters):
        f = b0 + X @ b
        if loss == "squared":
            resid = y - f
        else:
            resid = y - expit(f)
        b0 += float(w @ resid) / float(w.sum())
        if loss == "squared":
            resid = y - b0 - X @ b
        else:
            resid = y - expit(b0 + X @ b)
        g = Xw.T @ resid
        b = b + g / lip
        b = np.sign(b) * np.maximum(np.abs(b) - lam / lip, 0.0)
    return b0, b


def kkt_gap(design, y, w, fit, lam, loss="squared"):
    """Worst stationarity violation of a fit: max over active coordinates of
    | |grad| - lam | and over inactive ones of (|grad| - lam)+."""
    w = w / w.sum()
    f = fit.intercept + design @ fit.coef
    if loss == "squared":
        resid = y - f
    else:
        resid = y - np.clip(expit(f), 1e-6, 1 - 1e-6)
    g = design.T @ (w * resid)
    act = fit.coef != 0
    gap = abs(float(w @ resid))
    if act.any():
        gap = max(gap, float(np.max(np.abs(np.abs(g[act]) - lam))))
    if (~act).any():
        gap = max(gap, max(0.0, float(np.max(np.abs(g[~act]))) - lam))
    return gap


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
