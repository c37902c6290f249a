"""Property battery run by ``qsd-lab check``.

Every check reports a value against a threshold; the battery passes when all
checks pass.  Checks assume the infinite-QSD regime at the right end.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .eigen import check_normalization, lambda0, lambda0_matrix, qsd
from .errors import QSDLabError
from .grid import Grid
from .mc import SimConfig, log_tail_slope, sample_hitting_times, tail_ratio_trend
from .measure import GridMeasure
from .model import BoundaryKind, classify_boundary, has_infinitely_many_qsds
from .renewal import iterate, kolmogorov_distance, moment, renewal_transform


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def _result(name, value, threshold, passed, detail=""):
    return CheckResult(name, bool(passed), float(value), float(threshold), detail)


def check_regime(spec) -> list:
    out = []
    b0 = classify_boundary(spec, 0.0)
    out.append(_result("boundary 0 regular or exit", 0, 0, b0.kind in (BoundaryKind.REGULAR, BoundaryKind.EXIT), b0.kind.value))
    crit = has_infinitely_many_qsds(spec)
    out.append(_result("infinitely many QSDs", crit.limsup if crit.limsup is not None else math.nan, 0, crit.verdict == "yes", crit.verdict))
    return out


def check_lambda0(grid: Grid, tol: float = 1e-4, rel: float = 1e-2):
    sb = lambda0(grid, tol)
    oracle = lambda0_matrix(grid.spec, grid.R, n=max(grid.n_cells, 2000))
    gap = abs(sb.lambda0 - oracle) / oracle
    return sb.lambda0, [_result("lambda0 bisection vs matrix oracle", gap, rel, gap < rel, f"{sb.lambda0:.6g} vs {oracle:.6g}")]


def check_fixed_points(grid: Grid, lam0: float, start: GridMeasure, tol: float = 2e-3, gap: float = 5e-2):
    out = []
    for frac in (0.2, 0.6, 1.0):
        nu = qsd(grid, frac * lam0)
        d = kolmogorov_distance(renewal_transform(nu), nu)
        out.append(_result(f"fixed point nu_({frac:g} lambda0)", d, tol, d < tol))
    d = kolmogorov_distance(renewal_transform(start), start)
    out.append(_result(f"non-fixed point {start.label}", d, gap, d > gap))
    return out


def check_ordering(grid: Grid, lam0: float, atol: float = 1e-10):
    lo, hi = qsd(grid, 0.2 * lam0), qsd(grid, lam0)
    viol = int(np.sum(hi.survival() > lo.survival() + atol))
    return [_result("stochastic ordering nu_lambda0 <= nu_(0.2 lambda0)", viol, 0, viol == 0)]


def check_recurrence(measures, alphas=(1, 2, 3, 4), rtol: float = 1e-8):
    worst = 0.0
    for mu in measures:
        phi = renewal_transform(mu)
        m1 = moment(mu, 1)
        for a in alphas:
            worst = max(worst, abs(moment(phi, a) * m1 / moment(mu, a + 1) - 1.0))
    return [_result("moment recurrence", worst, rtol, worst < rtol)]


def check_normalization_at(grid: Grid, lam0: float, tol: float = 1e-3):
    nc = check_normalization(grid, 0.5 * lam0)
    return [_result("normalization at lambda0/2", nc.residual, tol, nc.residual < tol)]


def hierarchy_estimates(spec, grid: Grid, x0: float, lam0: float, cfg: SimConfig | None, n: int = 30):
    """Limit-rate estimates from the ratio test and, when ``cfg`` is given, from Monte Carlo."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = iterate(GridMeasure.dirac(grid, x0), n, lambda0=lam0, diagnostics=False)
    est = {"ratio r_n": res.ledger.ratio(n)}
    if cfg is not None:
        sample = sample_hitting_times(spec, x0, cfg)
        est["tail ratio trend"] = tail_ratio_trend(sample, np.arange(4.0, 18.0), 2.0).limit
        est["log tail slope"] = -log_tail_slope(sample, (0.9, 0.9999), prefactor=True)
    return est


def check_hierarchy(spec, grid, x0, lam0, cfg, tol: float = 5e-2):
    est = hierarchy_estimates(spec, grid, x0, lam0, cfg)
    vals = np.array(list(est.values()))
    spread = float(vals.max() - vals.min())
    detail = ", ".join(f"{k}={v:.4g}" for k, v in est.items())
    return [_result("hierarchy estimates mutually consistent", spread, tol, spread < tol, detail)]


def run_battery(spec, grid: Grid, start: GridMeasure, x0: float = 1.0, cfg: SimConfig | None = None, tol: float = 1e-4):
    """Run all checks; errors inside a check count as failures."""
    results = []

    def guarded(name, fn):
        try:
            return fn()
        except QSDLabError as exc:
            return [_result(name, math.nan, math.nan, False, f"{type(exc).__name__}: {exc}")]

    results += guarded("regime", lambda: check_regime(spec))
    try:
        lam0, res = check_lambda0(grid, tol)
        results += res
    except QSDLabError as exc:
        results.append(_result("lambda0", math.nan, math.nan, False, str(exc)))
        return results
    results += guarded("fixed points", lambda: check_fixed_points(grid, lam0, start))
    results += guarded("ordering", lambda: check_ordering(grid, lam0))
    results += guarded(
        "recurrence",
        lambda: check_recurrence([start, GridMeasure.dirac(grid, x0), qsd(grid, 0.6 * lam0)]),
    )
    results += guarded("normalization", lambda: check_normalization_at(grid, lam0))
    results += guarded("hierarchy", lambda: check_hierarchy(spec, grid, x0, lam0, cfg))
    return results
