"""Weighted L1-penalized solver used by the indicator-basis lasso.

Solves, over a decreasing penalty grid with warm starts,

    min_{b0, beta}  sum_i w_i * loss(y_i, b0 + x_i beta)  +  lam * ||beta||_1

for squared loss (loss = 0.5 (y - f)^2) and bernoulli log-loss (f the logit).
The intercept is unpenalized.

The workhorse is an exact primal active-set method: on the current support
the stationarity system is solved through a Cholesky factor that is updated
incrementally as columns enter (rank-one append) or leave (rank-one
downdate), sign crossings are handled by ratio-test steps, and the worst
full-gradient violators are brought in until the KKT conditions hold. The
bernoulli loss is reduced to a sequence of weighted least-squares problems
with the fixed curvature bound w/4 (majorize-minimize), so one factor serves
the entire path. Solutions are exact up to linear-algebra precision.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

PROB_CLIP = 1e-6
CURV_FLOOR = 1e-4
ENTER_BATCH = 6
POOL_SIZE = 64
MAX_IRLS = 2000



class ConvergenceError(RuntimeError):
    def __init__(self, msg, lam=None, diagnostics=None):
        super().__init__(msg)
        self.lam = lam
        self.diagnostics = diagnostics or {}


def _cholupdate(L, x):
    """Rank-one update: L L' + x x' -> L L', in place. O(m^2)."""
    m = x.shape[0]
    for k in range(m):
        lkk = L[k, k]
        r = np.hypot(lkk, x[k])
        c = r / lkk
        s = x[k] / lkk
        L[k, k] = r
        if k + 1 < m:
            L[k + 1 :, k] = (L[k + 1 :, k] + s * x[k + 1 :]) / c
            x[k + 1 :] = c * x[k + 1 :] - s * L[k + 1 :, k]


class _ActiveSet:
    """Exact solver state for one weighted design.

    The weights (and hence the Gram matrix) are fixed for the lifetime of
    the object; penalty level and working response vary per solve call.
    Index 0 of the factored system is the unpenalized intercept.
    """

    def __init__(self, XT, om):
        self.XT = XT
        self.om = om
        self.omsum = float(om.sum())
        self.Xom = XT * om
        p, n = XT.shape
        cap = min(p, n) + 2
        self.L = np.zeros((cap, cap))
        self.L[0, 0] = np.sqrt(self.omsum)
        self.m = 1
        self.cols = np.empty(cap, dtype=np.int64)  # cols[1..m-1] = design columns
        self.coef = np.zeros(p)
        self.coef0 = 0.0
        self.xom_sums = self.Xom.sum(axis=1)
        # contiguous copies of the active rows (factor position i+1 <-> row i)
        self.act_XT = np.empty((cap - 1, n))
        self.act_Xom = np.empty((cap - 1, n))

    def _append(self, j):
        """Grow the factor with design column j; False if linearly dependent."""
        m = self.m
        if m >= self.L.shape[0]:
            return False
        v = np.empty(m)
        v[0] = self.xom_sums[j]
        if m > 1:
            v[1:] = self.act_Xom[: m - 1] @ self.XT[j]
        d = float(self.Xom[j] @ self.XT[j])
        u = _forward_solve(self.L, v, m)
        rem = d - float(u @ u)
        if rem <= 1e-10 * max(d, 1.0):
            return False
        self.L[m, :m] = u
        self.L[m, m] = np.sqrt(rem)
        self.cols[m] = j
        self.act_XT[m - 1] = self.XT[j]
        self.act_Xom[m - 1] = self.Xom[j]
        self.m = m + 1
        return True

    def _drop(self, pos):
        """Remove factored position pos >= 1 (rank-one downdate of the tail)."""
        m = self.m
        tail = m - pos - 1
        if tail > 0:
            l32 = self.L[pos + 1 : m, pos].copy()
            block = self.L[pos + 1 : m, pos + 1 : m].copy()
            _cholupdate(block, l32)
            self.L[pos : m - 1, :pos] = self.L[pos + 1 : m, :pos]
            self.L[pos : m - 1, pos : m - 1] = block
            self.cols[pos : m - 1] = self.cols[pos + 1 : m]
            self.act_XT[pos - 1 : m - 2] = self.act_XT[pos : m - 1]
            self.act_Xom[pos - 1 : m - 2] = self.act_Xom[pos : m - 1]
        self.L[m - 1, :m] = 0.0
        self.m = m - 1

    def _solve_system(self, rhs):
        m = self.m
        z = _forward_solve(self.L, rhs, m)
        return _backward_solve(self.L, z, m)

    def _swap_in(self, j, gj, lam):
        """Rotate a (near-)dependent column into the support.

        Moving beta_j with the representation of x_j on the current support
        leaves predictions unchanged while shrinking the penalty whenever the
        column's gradient exceeds lam; the first active coefficient to reach
        zero leaves the support and frees the factor for column j.
        """
        m = self.m
        v = np.empty(m)
        v[0] = self.xom_sums[j]
        if m > 1:
            v[1:] = self.act_Xom[: m - 1] @ self.XT[j]
        c = self._solve_system(v)
        t = float(np.copysign(1.0, gj))
        act = self.cols[1:m]
        delta = -t * c[1:]
        cur = self.coef[act]
        with np.errstate(divide="ignore", invalid="ignore"):
            steps = -cur / delta
        steps[~np.isfinite(steps)] = np.inf
        steps[steps <= 0] = np.inf
        k = int(np.argmin(steps))
        gamma = float(steps[k])
        if not np.isfinite(gamma):
            raise ConvergenceError("swap direction is unblocked", lam=lam)
        self.coef[act] = cur + gamma * delta
        self.coef0 += gamma * (-t * c[0])
        self.coef[act[k]] = 0.0
        self.coef[j] = gamma * t
        self._drop(k + 1)
        if not self._append(j):
            raise ConvergenceError("swap target remains dependent", lam=lam)

    def solve(self, y_work, lam, kkt_tol, max_changes=None, enter_batch=ENTER_BATCH):
        """Exact penalized weighted least squares at penalty lam.

        Minimizes 0.5 sum om_i (y_work_i - f_i)^2 + lam ||beta||_1 over the
        intercept and coefficients, warm-starting from the current state.
        Columns enter one at a time (the worst current violator), which
        guarantees descent; a candidate pool from each full-gradient pass
        keeps those passes rare.
        """
        p, n = self.XT.shape
        if max_changes is None:
            max_changes = 6 * min(p, n) + 300
        blocked = np.zeros(p, dtype=bool)
        swy = float(self.om @ y_work)
        Xomy = self.Xom @ y_work
        changes = 0
        tol = 0.5 * kkt_tol
        cand = np.empty(0, dtype=np.int64)
        worst = np.inf
        while True:
            m = self.m
            act = self.cols[1:m]
            s = np.sign(self.coef[act])
            # entering columns carry their sign in coef as +-0 seeds; recover
            zero_seed = s == 0.0
            if zero_seed.any():
                s[zero_seed] = np.copysign(1.0, self.coef[act][zero_seed])
            rhs = np.empty(m)
            rhs[0] = swy
            rhs[1:] = Xomy[act] - lam * s
            sol = self._solve_system(rhs)
            cur = np.concatenate(([self.coef0], self.coef[act]))
            flips = sol[1:] * s < 0
            if flips.any():
                with np.errstate(divide="ignore", invalid="ignore"):
                    gam = cur[1:] / (cur[1:] - sol[1:])
                gam[~np.isfinite(gam)] = 0.0
                gam[~flips] = np.inf
                k = int(np.argmin(gam))
                g = max(float(gam[k]), 0.0)
                moved = cur + g * (sol - cur)
                self.coef0 = float(moved[0])
                self.coef[act] = moved[1:]
                self.coef[act[k]] = 0.0
                self._drop(k + 1)
                changes += 1
                if changes > max_changes:
                    raise ConvergenceError("active-set solver cycled", lam=lam)
                continue
            self.coef0 = float(sol[0])
            self.coef[act] = sol[1:]
            r = y_work - self.coef0
            if m > 1:
                r = r - sol[1:] @ self.act_XT[: m - 1]
            entered = 0
            if cand.size:
                cand = cand[(self.coef[cand] == 0.0) & ~blocked[cand]]
            if cand.size:
                gc = self.Xom[cand] @ r
                exc = np.abs(gc) - lam
                order = np.argsort(exc)[::-1]
                for k in order[:enter_batch]:
                    if exc[k] <= tol:
                        break
                    j = int(cand[k])
                    if self._append(j):
                        self.coef[j] = np.copysign(0.0, gc[k])
                        entered += 1
                    else:
                        blocked[j] = True
                if entered == 0:
                    cand = np.empty(0, dtype=np.int64)
            if entered == 0 and cand.size == 0:
                grad = self.Xom @ r
                excess = np.abs(grad) - lam
                excess[act] = 0.0
                blocked_idx = np.flatnonzero(blocked)
                blocked_excess = float(excess[blocked_idx].max()) if blocked_idx.size else 0.0
                excess[blocked] = 0.0
                worst = float(excess.max()) if p else 0.0
                if worst <= tol:
                    if blocked_excess > tol:
                        # a linearly dependent column beats an active
                        # combination on penalty: rotate it into the support
                        j = int(blocked_idx[int(np.argmax(np.abs(grad[blocked_idx])))])
                        self._swap_in(j, grad[j], lam)
                        blocked[j] = False
                        changes += 1
                        if changes > max_changes:
                            raise ConvergenceError(
                                "support swaps cycled", lam=lam,
                                diagnostics={"worst_violation": blocked_excess},
                            )
                        continue
                    return r, grad
                pool = np.flatnonzero(excess > tol)
                pool = pool[np.argsort(excess[pool])][::-1][:POOL_SIZE]
                for j in pool[:enter_batch]:
                    if self._append(int(j)):
                        self.coef[j] = np.copysign(0.0, grad[j])
                        entered += 1
                    else:
                        blocked[j] = True
                cand = pool[enter_batch:]
            changes += max(entered, 1)
            if changes > max_changes:
                raise ConvergenceError(
                    "active-set solver exceeded its change budget",
                    lam=lam,
                    diagnostics={"worst_violation": worst, "active": int(self.m - 1)},
                )


def _forward_solve(L, b, m):
    """Solve L[:m,:m] x = b for lower-triangular L."""
    return solve_triangular(L[:m, :m], b, lower=True, check_finite=False)


def _backward_solve(L, b, m):
    """Solve L[:m,:m]' x = b."""
    return solve_triangular(L[:m, :m], b, lower=True, trans=1, check_finite=False)


def solve_path_squared(XT, y, w, grid, kkt_tol):
    """Warm-started exact path for weighted squared loss."""
    state = _ActiveSet(XT, w)
    coefs = np.zeros((len(grid), XT.shape[0]))
    icpts = np.zeros(len(grid))
    for k, lam in enumerate(grid):
        try:
            state.solve(y, lam, kkt_tol)
        except ConvergenceError:
            # batched entry can cycle on tied columns; single entry is safe
            state.solve(y, lam, kkt_tol, enter_batch=1)
        coefs[k] = state.coef
        icpts[k] = state.coef0
    return icpts, coefs, {"saturated": np.zeros(len(grid), dtype=bool)}


def _rebuilt_state(XT, om, old):
    """Fresh factor for a new metric, re-appending the current support."""
    st = _ActiveSet(XT, om)
    st.coef0 = old.coef0
    for j in old.cols[1 : old.m]:
        if st._append(j):
            st.coef[j] = old.coef[j]
    return st


def solve_path_bernoulli(XT, y, w, grid, kkt_tol):
    """Warm-started exact path for the bernoulli log-loss.

    Iteratively reweighted least squares: each step solves the penalized
    weighted least-squares subproblem exactly against the working response
    f + w (y - p) / omega. The metric omega (logistic curvature at a
    reference point, floored for stability) is kept frozen while progress is
    good, so the incremental factor persists; it is refreshed at the current
    probabilities when the true-gradient violations stall. Any positive
    metric leaves the true stationarity conditions as the fixed point, which
    is checked explicitly each step. Probabilities are clipped to
    [PROB_CLIP, 1 - PROB_CLIP]; fits pinned at the clip bound are flagged
    saturated.
    """
    p, n = XT.shape
    wsum = float(w.sum())
    ybar = float(np.dot(w, y) / wsum)
    coefs = np.zeros((len(grid), p))
    icpts = np.zeros(len(grid))
    sat = np.zeros(len(grid), dtype=bool)
    if ybar <= PROB_CLIP or ybar >= 1.0 - PROB_CLIP:
        # fully separated intercept: cap at the probability clip bound
        pcap = float(np.clip(ybar, PROB_CLIP, 1.0 - PROB_CLIP))
        icpts[:] = float(np.log(pcap / (1.0 - pcap)))
        sat[:] = True
        return icpts, coefs, {"saturated": sat}

    def metric(prob):
        return w * np.maximum(prob * (1.0 - prob), CURV_FLOOR)

    state = _ActiveSet(XT, metric(np.full(n, ybar)))
    state.coef0 = float(np.log(ybar / (1.0 - ybar)))
    for k, lam in enumerate(grid):
        saturated = False
        best_worst = np.inf
        stalled = 0
        refreshes = 0
        worst = np.inf
        for _ in range(MAX_IRLS):
            f = state.coef0 + state.coef @ XT
            prob = np.clip(expit(f), PROB_CLIP, 1.0 - PROB_CLIP)
            grad = XT @ (w * (y - prob))
            act = state.coef != 0.0
            dev = np.abs(grad) - lam
            dev[act] = np.abs(np.abs(grad[act]) - lam)
            worst = max(float(dev.max()) if p else 0.0, abs(float(w @ (y - prob))))
            clipped = bool(np.any(prob <= PROB_CLIP) or np.any(prob >= 1.0 - PROB_CLIP))
            saturated = saturated or clipped
            if worst <= 0.5 * kkt_tol:
                break
            if worst < 0.97 * best_worst:
                best_worst = min(worst, best_worst)
                stalled = 0
            else:
                stalled += 1
                if stalled > 6:
                    if clipped and refreshes:
                        # separable direction: clipped gradient cannot shrink
                        break
                    if refreshes >= 3:
                        raise ConvergenceError(
                            "IRLS stalled",
                            lam=lam,
                            diagnostics={"worst_violation": worst,
                                         "active": int(act.sum())},
                        )
                    state = _rebuilt_state(XT, metric(prob), state)
                    refreshes += 1
                    stalled = 0
                    best_worst = np.inf
            y_work = f + w * (y - prob) / state.om
            state.solve(y_work, lam, kkt_tol, enter_batch=1)
        else:
            raise ConvergenceError(
                "IRLS did not converge",
                lam=lam,
                diagnostics={"worst_violation": worst, "active": int((state.coef != 0).sum())},
            )
        coefs[k] = state.coef
        icpts[k] = state.coef0
        sat[k] = saturated
    return icpts, coefs, {"saturated": sat}


def lambda_max(XT, y, w, loss_kind):
    """Smallest penalty with an empty active set: max |gradient| at the
    intercept-only fit."""
    wsum = float(w.sum())
    ybar = float(np.dot(w, y) / wsum)
    if loss_kind == "squared":
        grad = XT @ (w * (y - ybar))
    else:
        p0 = np.clip(ybar, PROB_CLIP, 1.0 - PROB_CLIP)
        grad = XT @ (w * (y - p0))
    return float(np.max(np.abs(grad))) if grad.size else 0.0
