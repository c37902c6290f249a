"""Eigenfunctions ``psi_lambda``, the spectral bottom ``lambda0`` and the QSD family ``nu_lambda``.

``psi_lambda`` solves ``psi = s + lambda * I psi``: ``(d/dm)(d/ds) psi = lambda psi``
with ``psi(0) = 0`` and unit scale-derivative at 0.  For negative ``lambda`` the
Neumann series alternates and cancels catastrophically once
``|lambda| * int s dm`` is large, so the default path solves the same discrete
Volterra equation by forward substitution (the exact sum of the series).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import BracketFailureError, SeriesBudgetError, UnsupportedSpecError
from .grid import Grid, GridFunction, apply_I, integrate_dm
from .measure import GridMeasure

# |lambda| * int_0^R s dm above which the alternating series loses too many digits
_SERIES_CANCELLATION_LIMIT = 10.0


@dataclass(frozen=True)
class EigenResult:
    """``psi_lambda`` on a grid.

    ``terms_used`` and ``series_tail_bound`` describe the series path; the
    forward-substitution path reports zero terms and a zero tail bound.
    """

    lam: float
    psi: GridFunction
    terms_used: int
    series_tail_bound: float
    method: str


@dataclass(frozen=True)
class SpectralBottom:
    lambda0: float
    bracket: tuple
    iterations: int


@dataclass(frozen=True)
class NormalizationCheck:
    residual: float
    tail_correction: float
    flagged: bool


def _scale_moment(grid: Grid) -> float:
    return integrate_dm(grid.function(grid.scale))


def _psi_series(grid: Grid, lam: float, tol: float, max_terms: int):
    term = grid.function(grid.scale)
    total = grid.scale.copy()
    for n in range(1, max_terms + 1):
        term = apply_I(term)
        contrib = lam**n * term.values
        total = total + contrib
        size = float(np.max(np.abs(contrib)))
        if size <= tol * float(np.max(np.abs(total))):
            return total, n + 1, size
    raise SeriesBudgetError(f"psi series for lambda={lam} did not converge within {max_terms} terms")


def _psi_volterra(grid: Grid, lam: float) -> np.ndarray:
    """Forward substitution carrying the scale derivative ``D = dpsi/ds`` cell by cell.

    ``D_{i+1} = D_i + lam W_i psi_i`` and ``psi_{i+1} = psi_i + ds_{i+1} D_{i+1}``; updating
    ``D`` incrementally keeps its relative accuracy when it decays far below 1.
    """
    W = grid.node_weights
    ds = grid.ds
    n = grid.nodes.size
    psi = np.zeros(n)
    d = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        psi[1] = ds[0]
        for i in range(1, n - 1):
            d = d + lam * W[i] * psi[i]
            psi[i + 1] = psi[i] + ds[i] * d
    return psi


def psi(grid: Grid, lam: float, tol: float = 1e-14, method: str = "auto", max_terms: int = 200) -> EigenResult:
    """Compute ``psi_lambda`` (``lam < 0`` gives ``psi_{-|lam|}``).

    Parameters
    ----------
    method : {"auto", "series", "volterra"}
        ``auto`` uses the series when the alternating cancellation is harmless
        and forward substitution otherwise.
    """
    if method not in ("auto", "series", "volterra"):
        raise ValueError(f"unknown method {method!r}")
    if lam == 0:
        return EigenResult(0.0, grid.function(grid.scale.copy()), 1, 0.0, "series")
    if method == "auto":
        method = "series" if abs(lam) * _scale_moment(grid) <= _SERIES_CANCELLATION_LIMIT else "volterra"
    if method == "series":
        values, terms, last = _psi_series(grid, lam, tol, max_terms)
        return EigenResult(lam, grid.function(values), terms, last, "series")
    values = _psi_volterra(grid, lam)
    notes = () if np.all(np.isfinite(values)) else ("overflow in psi",)
    return EigenResult(lam, grid.function(values, notes), 0, 0.0, "volterra")


def is_nondecreasing(values: np.ndarray, tie_rtol: float = 1e-12) -> bool:
    """Nondecreasing up to ties: a drop within ``tie_rtol`` of the local value counts as flat.

    The tolerance is local because ``psi_{-lambda}`` for ``lambda`` just above
    ``lambda0`` can first decrease at values far below its global maximum.
    """
    v = np.asarray(values)
    local = np.maximum(np.abs(v[1:]), np.abs(v[:-1]))
    return bool(np.all(np.diff(v) >= -tie_rtol * local))


def accepts(grid: Grid, lam: float, tie_rtol: float = 1e-12) -> bool:
    """Whether ``psi_{-lam}`` is nondecreasing on the grid."""
    v = psi(grid, -lam, method="volterra").psi.values
    return bool(np.all(np.isfinite(v))) and is_nondecreasing(v, tie_rtol)


def lambda0(grid: Grid, tol: float = 1e-4, max_doublings: int = 64) -> SpectralBottom:
    """Largest ``lambda`` with ``psi_{-lambda}`` nondecreasing, by bisection.

    The criterion characterizes the spectral bottom only when ``s(ell) = inf``;
    otherwise ``UnsupportedSpecError`` is raised and ``lambda0_matrix`` applies.
    """
    from .model import scale_status_at_ell

    if scale_status_at_ell(grid.spec) == "finite":
        raise UnsupportedSpecError("s(ell) is finite: the monotonicity criterion does not apply; use the matrix oracle")
    lo, hi = 0.0, 1.0
    doublings = 0
    while accepts(grid, hi):
        lo = hi
        hi *= 2.0
        doublings += 1
        if doublings > max_doublings:
            raise BracketFailureError(
                f"psi_(-lambda) still nondecreasing at lambda={hi:g}; wrong regime or R too small"
            )
    it = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if accepts(grid, mid):
            lo = mid
        else:
            hi = mid
        it += 1
    return SpectralBottom(0.5 * (lo + hi), (lo, hi), it)


def lambda0_matrix(spec, R: float, n: int = 4000) -> float:
    """Independent oracle: smallest eigenvalue of a finite-difference Sturm-Liouville operator.

    Discretizes ``-(1/m')(u'/s')' = lambda u`` on a uniform grid of ``[0, R]``
    with ``u(0) = 0`` and zero flux at ``R``, using only point values of the
    densities, and symmetrizes in log space.
    """
    x = np.linspace(0.0, R, n + 1)
    h = x[1] - x[0]
    mid = 0.5 * (x[:-1] + x[1:])
    lsm = spec.log_scale_density(mid)
    lm = spec.log_speed_density(x[1:])
    lmass = lm + np.log(h)
    lmass = lmass.copy()
    lmass[-1] += math.log(0.5)
    # conductances 1/(h s'_{i+1/2}); node k (1..n) couples to k-1 and k+1
    lcond = -lsm - math.log(h)
    cond_left = np.exp(lcond - lmass)  # c_{k-1/2}/M_k
    diag = cond_left.copy()
    diag[:-1] += np.exp(lcond[1:] - lmass[:-1])
    off = -np.exp(lcond[1:] - 0.5 * (lmass[:-1] + lmass[1:]))
    vals = eigh_tridiagonal(diag, off, eigvals_only=True, select="i", select_range=(0, 0))
    return float(vals[0])


def check_normalization(grid: Grid, lam: float, flag_at: float = 1e-3) -> NormalizationCheck:
    """Residual ``|1 - lam int_0^R psi_{-lam} dm - lam * tail|``; flagged when large or tail-dominated."""
    p = psi(grid, -lam).psi
    bulk = lam * integrate_dm(p)
    tail = lam * grid.tail_mass * float(p.values[-1]) if np.isfinite(grid.tail_mass) else math.inf
    residual = abs(1.0 - bulk - tail)
    flagged = not (residual < flag_at) or not (tail < flag_at)
    return NormalizationCheck(residual, tail, bool(flagged))


def qsd(grid: Grid, lam: float, normalize: bool = True) -> GridMeasure:
    """``nu_lambda = lam * psi_{-lam} dm`` (renormalized to unit mass on ``(0, R]``)."""
    p = psi(grid, -lam).psi.values
    dens = lam * np.clip(p, 0.0, None)
    return GridMeasure.from_density(grid, dens, normalize=normalize, label=f"qsd lambda={lam:g}")


def ode_residual(grid: Grid, result: EigenResult) -> np.ndarray:
    """Relative residual of ``(Delta_m Delta_s psi) - lam psi`` at interior nodes."""
    v = result.psi.values
    slope = np.diff(v) / grid.ds
    W = grid.node_weights[1:-1]
    second = np.diff(slope) / W
    target = result.lam * v[1:-1]
    return np.abs(second - target) / np.maximum(np.abs(target), 1e-300)


__all__ = [
    "EigenResult",
    "SpectralBottom",
    "NormalizationCheck",
    "psi",
    "lambda0",
    "lambda0_matrix",
    "check_normalization",
    "qsd",
    "accepts",
    "ode_residual",
]
