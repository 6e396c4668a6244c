"""Replicate-study orchestrator: run the estimators across sample sizes and
replicates on fresh synthetic data, compute each replicate's data-adaptive
truth by counterfactual Monte Carlo, and summarize scaled bias and coverage.

Seeds are derived per (sample size, replicate, purpose), so results for one
replicate never depend on how many others run, and output files are
byte-stable across reruns and worker counts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .core import RegimeFamily, make_folds, theta_draws
from .dgp import DgpConfig, counterfactual_draws
from .msm import WorkingModel
from .risk import EstimatorConfig, ESTIMATOR_KINDS, estimate_risks

# purpose codes for per-replicate seed derivation
_SEED_DATA, _SEED_FOLDS, _SEED_THETA, _SEED_ORACLE = 1, 2, 3, 4

RESULT_COLUMNS = [
    "estimator", "n", "replicate", "status", "point", "ci_lo", "ci_hi",
    "truth", "covered", "error",
]
SUMMARY_COLUMNS = [
    "estimator", "n", "replicates_ok", "replicates_failed", "scaled_bias",
    "scaled_bias_se", "coverage", "coverage_se", "mean_point", "mean_truth",
]


class StudyError(ValueError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    sample_sizes: tuple = (250, 500, 850, 1000)
    replicates: int = 360
    estimators: tuple = ("ipw", "mr", "uipw_dcar", "uipw_score")
    msm_family: str = "linear_theta"
    B: int = 5
    theta_k: int = 50
    theta_mean: float = 0.0
    theta_sd: float = 0.1
    master_seed: int = 0
    oracle_n_mc: int = 200_000
    treatment_mode: str = "observational"
    regime_kind: str = "scalar_threshold_below"
    regime_index: int = 0
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        if self.replicates < 1:
            raise StudyError("need at least one replicate")
        for n in self.sample_sizes:
            if n < 2 * self.B:
                raise StudyError(f"sample size {n} too small for {self.B} folds")
        for e in self.estimators:
            if e not in ESTIMATOR_KINDS:
                raise StudyError(f"unknown estimator {e!r}")
        object.__setattr__(self, "estimator",
                           replace(self.estimator, msm_family=self.msm_family))

    def regime(self) -> RegimeFamily:
        return RegimeFamily(kind=self.regime_kind, index=self.regime_index)

    def to_dict(self) -> dict:
        return {
            "sample_sizes": list(self.sample_sizes),
            "replicates": self.replicates,
            "estimators": list(self.estimators),
            "msm_family": self.msm_family,
            "B": self.B,
            "theta_k": self.theta_k,
            "theta_mean": self.theta_mean,
            "theta_sd": self.theta_sd,
            "master_seed": self.master_seed,
            "oracle_n_mc": self.oracle_n_mc,
            "treatment_mode": self.treatment_mode,
            "regime_kind": self.regime_kind,
            "regime_index": self.regime_index,
            "estimator_options": self.estimator.digest_fields(),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _seed(cfg: StudyConfig, n: int, rep: int, purpose: int, *extra) -> tuple:
    return (cfg.master_seed, n, rep, purpose) + tuple(extra)


def replicate_truths(cfg: StudyConfig, n: int, rep: int, thetas, models: dict) -> dict:
    """Data-adaptive truth per estimator: the fold-average counterfactual
    risk of that estimator's fitted working models.

    One fresh counterfactual pool per theta point is shared by every fold
    and estimator; parametric-in-theta families only need the pool's first
    two moments.
    """
    fam = cfg.regime()
    dcfg = DgpConfig(n=2, treatment_mode=cfg.treatment_mode)
    out = {kind: np.zeros(len(folds)) for kind, folds in models.items()}
    parametric = {"linear_theta", "quadratic_theta"}
    for k in range(thetas.k):
        theta = thetas.points[k]
        wk = float(thetas.weights[k])
        V, y = counterfactual_draws(
            dcfg, fam, theta, cfg.oracle_n_mc, _seed(cfg, n, rep, _SEED_ORACLE, k)
        )
        my = float(y.mean())
        my2 = float(np.mean(y * y))
        for kind, folds in models.items():
            for b, m in enumerate(folds):
                if m.family in parametric:
                    c = float(m.predict(theta)[0])
                    val = my2 - 2.0 * c * my + c * c
                else:
                    fitted = m.predict(theta, V)
                    val = float(np.mean((y - fitted) ** 2))
                out[kind][b] += wk * val
    return {kind: float(v.mean()) for kind, v in out.items()}


def run_replicate(cfg: StudyConfig, n: int, rep: int) -> list[dict]:
    """One replicate: simulate, estimate, compute truths; one row per
    estimator. Estimator failures are recorded, not raised."""
    fam = cfg.regime()
    dcfg = DgpConfig(n=n, seed=_seed(cfg, n, rep, _SEED_DATA),
                     treatment_mode=cfg.treatment_mode)
    ds = simulate = None
    from .dgp import simulate_observed

    ds = simulate_observed(dcfg)
    plan = make_folds(n, cfg.B, seed=_seed(cfg, n, rep, _SEED_FOLDS))
    thetas = theta_draws(cfg.theta_k, seed=_seed(cfg, n, rep, _SEED_THETA),
                         mean=cfg.theta_mean, sd=cfg.theta_sd)
    rows = []
    try:
        results, models = estimate_risks(
            ds, plan, fam, thetas, cfg.estimator, estimators=cfg.estimators,
            return_models=True,
        )
        truths = replicate_truths(cfg, n, rep, thetas, models)
    except Exception as exc:  # noqa: BLE001 - failures become rows
        for kind in cfg.estimators:
            rows.append({
                "estimator": kind, "n": n, "replicate": rep, "status": "failed",
                "point": "", "ci_lo": "", "ci_hi": "", "truth": "", "covered": "",
                "error": f"{type(exc).__name__}: {exc}",
            })
        return rows
    for kind in cfg.estimators:
        r = results[kind]
        truth = truths[kind]
        rows.append({
            "estimator": kind, "n": n, "replicate": rep, "status": "ok",
            "point": r.point, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi,
            "truth": truth, "covered": int(r.ci_lo <= truth <= r.ci_hi),
            "error": "",
        })
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Scaled bias and coverage per (estimator, n) with Monte-Carlo SEs."""
    cells: dict[tuple, dict] = {}
    for row in rows:
        key = (row["estimator"], int(row["n"]))
        cell = cells.setdefault(key, {"err": [], "cov": [], "pts": [], "tr": [], "fail": 0})
        if row["status"] != "ok":
            cell["fail"] += 1
            continue
        err = float(row["point"]) - float(row["truth"])
        cell["err"].append(err)
        cell["cov"].append(int(row["covered"]))
        cell["pts"].append(float(row["point"]))
        cell["tr"].append(float(row["truth"]))
    out = []
    for (est, n) in sorted(cells, key=lambda k: (k[0], k[1])):
        cell = cells[(est, n)]
        R = len(cell["err"])
        rec = {"estimator": est, "n": n, "replicates_ok": R,
               "replicates_failed": cell["fail"]}
        if R == 0:
            rec.update({c: "" for c in SUMMARY_COLUMNS[4:]})
        else:
            err = np.asarray(cell["err"])
            cov = float(np.mean(cell["cov"]))
            rec["scaled_bias"] = float(np.sqrt(n) * err.mean())
            rec["scaled_bias_se"] = float(np.sqrt(n) * err.std(ddof=1) / np.sqrt(R)) if R > 1 else ""
            rec["coverage"] = cov
            rec["coverage_se"] = float(np.sqrt(cov * (1 - cov) / R))
            rec["mean_point"] = float(np.mean(cell["pts"]))
            rec["mean_truth"] = float(np.mean(cell["tr"]))
        out.append(rec)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])


def write_outputs(out_dir, cfg: StudyConfig, rows: list[dict]) -> None:
    rows = sorted(rows, key=lambda r: (str(r["estimator"]), int(r["n"]), int(r["replicate"])))
    write_csv(os.path.join(out_dir, "results.csv"), RESULT_COLUMNS, rows)
    summary = summarize(rows)
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, summary)
    panels = []
    for rec in summary:
        if rec["replicates_ok"] == 0:
            continue
        for panel, val, se in (
            ("scaled_bias", rec["scaled_bias"], rec["scaled_bias_se"]),
            ("coverage", rec["coverage"], rec["coverage_se"]),
        ):
            panels.append({"panel": panel, "estimator": rec["estimator"],
                           "n": rec["n"], "value": val, "se": se})
    write_csv(os.path.join(out_dir, "figure_panels.csv"),
              ["panel", "estimator", "n", "value", "se"], panels)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({"config": cfg.to_dict(), "digest": cfg.digest()}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")


def run_study(cfg: StudyConfig, out_dir, workers: int = 1, resume: bool = False,
              log=None) -> dict:
    """Run every (n, replicate) cell, write outputs, return a status dict.

    A partial progress file allows interrupted runs to resume: completed
    replicates (matched by config digest) are not recomputed. The final
    result files are sorted and byte-stable regardless of worker count.
    """
    os.makedirs(out_dir, exist_ok=True)
    partial_path = os.path.join(out_dir, "progress.partial.jsonl")
    done: dict[tuple, list] = {}
    if resume and os.path.exists(partial_path):
        with open(partial_path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec.get("digest") == cfg.digest():
                    done[(rec["n"], rec["replicate"])] = rec["rows"]
    tasks = [(n, rep) for n in cfg.sample_sizes for rep in range(cfg.replicates)
             if (n, rep) not in done]
    rows: list[dict] = [r for rs in done.values() for r in rs]

    def record(n, rep, reprows, fh):
        fh.write(json.dumps({"digest": cfg.digest(), "n": n, "replicate": rep,
                             "rows": reprows}, sort_keys=True) + "\n")
        fh.flush()
        rows.extend(reprows)
        if log:
            failed = sum(1 for r in reprows if r["status"] != "ok")
            log(f"replicate n={n} rep={rep} done ({'ok' if not failed else 'FAILED'})")

    with open(partial_path, "a") as fh:
        if workers > 1:
            import concurrent.futures as cf

            with cf.ProcessPoolExecutor(max_workers=workers) as pool:
                futs = {pool.submit(run_replicate, cfg, n, rep): (n, rep)
                        for n, rep in tasks}
                for fut in cf.as_completed(futs):
                    n, rep = futs[fut]
                    record(n, rep, fut.result(), fh)
        else:
            for n, rep in tasks:
                record(n, rep, run_replicate(cfg, n, rep), fh)

    write_outputs(out_dir, cfg, rows)
    os.remove(partial_path)
    total = len(cfg.sample_sizes) * cfg.replicates * len(cfg.estimators)
    failed = sum(1 for r in rows if r["status"] != "ok")
    return {"rows": len(rows), "expected": total, "failed": failed,
            "success_share": 1.0 - failed / total if total else 1.0}
