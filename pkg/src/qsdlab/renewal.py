"""The renewal transform, hitting-time moments and iteration toward ``nu_lambda``.

For a measure ``mu`` the function ``G_mu(x) = int_0^x mu(y, inf) ds(y)`` equals
``K`` applied to the density plus ``p * min(s(x), s(x_j))`` per atom.  The
``n``-th normalized hitting moment is ``m_n = int K^{n-1} G_mu dm`` and the
iterated transform has density ``K^{n-1} G_mu / m_n``.  The iteration is
carried in normalized form (``f_n = K f_{n-1} / rho_n``, ``m_n = m_{n-1} rho_n``)
so that large radii never overflow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CancellationWarning, InvalidMomentError, RegimeWarning
from .grid import Grid, GridFunction, apply_K, integrate_I_array, integrate_dm
from .measure import GridMeasure


# ---------------------------------------------------------------------------
# single transform


def g_mu(mu: GridMeasure) -> GridFunction:
    """``G_mu(x) = int_0^x mu(y, R] ds(y)`` at the nodes."""
    grid = mu.grid
    out = apply_K(mu.density_function()).values if np.any(mu.density) else np.zeros_like(grid.nodes)
    if mu.has_atoms:
        s_atoms = _scale_at(grid, mu.atom_x)
        out = out + np.sum(mu.atom_p[:, None] * np.minimum(grid.scale[None, :], s_atoms[:, None]), axis=0)
    return grid.function(out)


def _scale_at(grid: Grid, x) -> np.ndarray:
    """Scale function at arbitrary points; exact grid values at nodes."""
    x = np.asarray(x, dtype=float)
    idx = np.searchsorted(grid.nodes, x)
    idx = np.clip(idx, 0, grid.nodes.size - 1)
    on = np.isclose(grid.nodes[idx], x, rtol=1e-13, atol=0)
    out = np.where(on, grid.scale[idx], 0.0)
    if not np.all(on):
        out = np.where(on, out, grid.spec.scale(x))
    return out


def renewal_transform(mu: GridMeasure) -> GridMeasure:
    """``Phi mu``: density ``G_mu / m_1`` with respect to ``dm``; atoms disappear."""
    G = g_mu(mu)
    m1 = integrate_dm(G)
    if not (math.isfinite(m1) and m1 > 0):
        raise InvalidMomentError(f"first moment must be finite and positive, got {m1}")
    return GridMeasure(mu.grid, G.values / m1, label=f"Phi({mu.label})")


# ---------------------------------------------------------------------------
# moments and iteration


@dataclass
class MomentLedger:
    """Normalized moments ``m_n = E T^n / n!`` in log form with successive ratios ``r_n = m_{n-1}/m_n``."""

    log_m: np.ndarray
    limit_estimate: float = math.nan
    converged: bool = False
    regime_violation: bool = False
    saturated: bool = False

    @property
    def m(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_m)

    @property
    def ratios(self) -> np.ndarray:
        """``r_n`` for ``n >= 1`` (index 0 holds ``r_1 = 1/m_1``)."""
        return np.exp(-np.diff(self.log_m))

    def ratio(self, n: int) -> float:
        return float(math.exp(self.log_m[n - 1] - self.log_m[n]))

    @property
    def extrapolated(self) -> float:
        """First-order extrapolation ``n r_n - (n-1) r_{n-1}`` removing an ``a/n`` correction.

        Compact starts give ``r_n ~ lambda0 (1 + 3/(2n))``; geometric convergence
        (mixtures of QSDs) is left essentially unchanged.
        """
        r = self.ratios
        n = r.size
        if n < 2:
            return math.nan
        return float(n * r[-1] - (n - 1) * r[-2])


def _normalized_chain(mu: GridMeasure, n_max: int):
    """Yield ``(f_n, rho_n)`` with ``f_n = K^{n-1} G / m_n`` and ``rho_n = m_n / m_{n-1}``."""
    G = g_mu(mu)
    v = G
    for n in range(1, n_max + 1):
        if n > 1:
            v = apply_K(v)
        rho = integrate_dm(v)
        if not (math.isfinite(rho) and rho > 0):
            raise InvalidMomentError(f"moment ratio at n={n} is {rho}")
        v = GridFunction(v.grid, v.values / rho, v.notes)
        yield v, rho


def moment(mu: GridMeasure, n: int) -> float:
    """``m_n^mu = E_mu T_0^n / n!`` (``n >= 1``); may overflow to ``inf``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    log_m = 0.0
    for _, rho in _normalized_chain(mu, n):
        log_m += math.log(rho)
    with np.errstate(over="ignore"):
        return float(np.exp(log_m))


def moment_ledger(mu: GridMeasure, n_max: int) -> MomentLedger:
    log_m = [0.0]
    for _, rho in _normalized_chain(mu, n_max):
        log_m.append(log_m[-1] + math.log(rho))
    led = MomentLedger(np.array(log_m))
    led.saturated = bool(np.any(led.log_m > 709.0))
    return led


def limit_estimate(ratios: np.ndarray, tol: float = 1e-4):
    """``r_n`` at the largest ``n`` with ``|r_n - r_{n-1}| < tol r_n``; ``(value, converged)``."""
    r = np.asarray(ratios)
    for k in range(r.size - 1, 0, -1):
        if abs(r[k] - r[k - 1]) < tol * r[k]:
            return float(r[k]), True
    return float(r[-1]) if r.size else math.nan, False


@dataclass
class IterationResult:
    measures: list
    ledger: MomentLedger
    lambda_hat: float
    kdist: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sup_err: np.ndarray = field(default_factory=lambda: np.zeros(0))
    notes: list = field(default_factory=list)

    def trace_rows(self):
        """Rows ``n, m_n, r_n, kdist, sup_err``."""
        m = self.ledger.m
        r = self.ledger.ratios
        rows = []
        for n in range(1, len(self.measures) + 1):
            kd = self.kdist[n - 1] if self.kdist.size else math.nan
            se = self.sup_err[n - 1] if self.sup_err.size else math.nan
            rows.append((n, float(m[n]), float(r[n - 1]), float(kd), float(se)))
        return rows


def iterate(
    mu: GridMeasure,
    n_max: int,
    lambda0: float | None = None,
    tol: float = 1e-4,
    clamp_tol: float = 1e-3,
    diagnostics: bool = True,
    bulk_quantile: float = 0.99,
) -> IterationResult:
    """Iterate ``Phi`` ``n_max`` times.

    Parameters
    ----------
    lambda0 : float, optional
        Spectral bottom; the limit estimate is clamped to ``lambda0 + clamp_tol``
        and larger values are reported as regime violations.
    diagnostics : bool
        Compute the Kolmogorov distance of each iterate to ``nu_{lambda_hat}``
        and the sup error of ``f_n`` against ``lambda_hat psi_{-lambda_hat}`` on
        the bulk of ``nu_{lambda_hat}`` (nodes below its ``bulk_quantile``).
    """
    from .eigen import psi, qsd

    measures, log_m = [], [0.0]
    for f, rho in _normalized_chain(mu, n_max):
        measures.append(GridMeasure(mu.grid, np.clip(f.values, 0.0, None), label=f"Phi^{len(measures) + 1}"))
        log_m.append(log_m[-1] + math.log(rho))
    ledger = MomentLedger(np.array(log_m))
    ledger.saturated = bool(np.any(ledger.log_m > 709.0))
    lam_hat, converged = limit_estimate(ledger.ratios, tol)
    ledger.converged = converged
    notes = []
    if not converged:
        notes.append("ratio sequence did not settle within n_max: no limit detected")
    if lambda0 is not None and lam_hat > lambda0 + clamp_tol:
        ledger.regime_violation = True
        msg = (
            f"ratio limit {lam_hat:.6g} exceeds lambda0 + tol = {lambda0 + clamp_tol:.6g}; "
            "clamped (truncation artifact or ratios not yet converged)"
        )
        notes.append(msg)
        warnings.warn(msg, RegimeWarning, stacklevel=2)
        lam_hat = lambda0 + clamp_tol
    ledger.limit_estimate = lam_hat
    res = IterationResult(measures, ledger, lam_hat, notes=notes)
    if diagnostics and math.isfinite(lam_hat) and lam_hat > 0:
        target = qsd(mu.grid, lam_hat)
        ref = lam_hat * psi(mu.grid, -lam_hat).psi.values
        cdf = target.cdf()
        bulk = mu.grid.nodes <= mu.grid.nodes[min(np.searchsorted(cdf, bulk_quantile), cdf.size - 1)]
        scale = float(np.max(np.abs(ref[bulk])))
        res.kdist = np.array([kolmogorov_distance(m, target) for m in measures])
        res.sup_err = np.array([float(np.max(np.abs(m.density[bulk] - ref[bulk]))) / scale for m in measures])
    return res


# ---------------------------------------------------------------------------
# alternating series cross-check


def series_density(
    mu: GridMeasure, n: int, ledger: MomentLedger | None = None, warn_below: float = -1e-6, max_rel_error: float = 1e-8
) -> GridFunction:
    """``f_n`` from the alternating series in ``I``.

    ``f_n = sum_{k=1}^{n-1} (-1)^{k-1} (m_{n-k}/m_n) I^{k-1} s + (-1)^{n-1} I^{n-1} G / m_n``.
    Cancellation is flagged when the result dips below ``warn_below`` or when
    rounding in the largest term (``eps * max|term|``) exceeds ``max_rel_error``
    of the result; the sum is then redone in extended precision with
    compensated summation, and a note records any remaining error estimate.
    """
    if ledger is None or ledger.log_m.size <= n:
        ledger = moment_ledger(mu, n)
    grid = mu.grid
    G = g_mu(mu).values
    out, big = _series_sum(grid, G, ledger.log_m, n, np.float64)
    rel = _rounding_estimate(out, big, np.float64)
    notes = ()
    if np.min(out) < warn_below or rel > max_rel_error:
        warnings.warn(
            f"alternating series for n={n} cancels (min {np.min(out):.3g}, estimated relative error {rel:.3g}); "
            "retrying in extended precision",
            CancellationWarning,
            stacklevel=2,
        )
        out, big = _series_sum(grid, G, ledger.log_m, n, np.longdouble)
        rel = _rounding_estimate(out, big, np.longdouble)
        if rel > max_rel_error:
            notes = (f"cancellation: estimated relative error {rel:.3g} after extended-precision retry",)
    return grid.function(np.asarray(out, dtype=float), notes)


def _rounding_estimate(out, big, dtype) -> float:
    size = float(np.max(np.abs(out)))
    if size == 0:
        return math.inf if big > 0 else 0.0
    return float(np.finfo(dtype).eps) * float(big) / size


def _series_sum(grid: Grid, G, log_m, n, dtype):
    """Return the series sum and the largest absolute term entry."""
    s = grid.scale.astype(dtype)
    term = s.copy()  # I^{k-1} s
    terms = []
    for k in range(1, n):
        coef = np.exp(dtype(log_m[n - k] - log_m[n]))
        terms.append(((-1) ** (k - 1)) * coef * term)
        term = integrate_I_array(grid, term)
    rem = G.astype(dtype)
    for _ in range(n - 1):
        rem = integrate_I_array(grid, rem)
    terms.append(((-1) ** (n - 1)) * rem / np.exp(dtype(log_m[n])))
    big = max(float(np.max(np.abs(t))) for t in terms)
    if dtype is np.float64:
        return np.sum(terms, axis=0), big
    return _kahan(terms), big


def _kahan(terms):
    total = np.zeros_like(terms[0])
    comp = np.zeros_like(terms[0])
    for t in terms:
        y = t - comp
        tmp = total + y
        comp = (tmp - total) - y
        total = tmp
    return total


def remainder_bound(mu: GridMeasure, n: int, ledger: MomentLedger | None = None):
    """``(|I^{n-1} G|/m_n, M^n s (int_0^x s dm)^{n-1}/(n-1)!)`` at the nodes, ``M = max r_k``."""
    if ledger is None or ledger.log_m.size <= n:
        ledger = moment_ledger(mu, n)
    grid = mu.grid
    rem = g_mu(mu).values
    for _ in range(n - 1):
        rem = integrate_I_array(grid, rem)
    lhs = np.abs(rem) / math.exp(ledger.log_m[n])
    M = float(np.max(ledger.ratios[:n]))
    from .grid import cumulative_dm

    inner = cumulative_dm(grid.function(grid.scale))
    rhs = M**n * grid.scale * inner ** (n - 1) / math.factorial(n - 1)
    return lhs, rhs


# ---------------------------------------------------------------------------
# distances and continuity


def kolmogorov_distance(mu: GridMeasure, nu: GridMeasure) -> float:
    """Sup over nodes of ``|F_mu - F_nu|``, including left limits at atoms.

    Left limits are skipped when either measure is a binned empirical law.
    """
    a, b = mu.total_mass(), nu.total_mass()
    right = np.abs(mu.cdf() / a - nu.cdf() / b)
    if mu.binned or nu.binned:
        return float(right.max())
    left = np.abs(mu.cdf_left() / a - nu.cdf_left() / b)
    return float(max(right.max(), left.max()))


@dataclass(frozen=True)
class ContinuityRow:
    index: int
    weak_distance: float
    m1_delta: float
    phi_distance: float


def continuity_probe(mu_sequence, limit: GridMeasure):
    """For each ``mu_k``: distance to ``limit``, first-moment gap and distance of the transforms."""
    phi_lim = renewal_transform(limit)
    m1_lim = moment(limit, 1)
    rows = []
    for k, mu in enumerate(mu_sequence, start=1):
        rows.append(
            ContinuityRow(
                k,
                kolmogorov_distance(mu, limit),
                abs(moment(mu, 1) - m1_lim),
                kolmogorov_distance(renewal_transform(mu), phi_lim),
            )
        )
    return rows
