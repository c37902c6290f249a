"""Discretization of ``(0, R]`` with speed-measure cell weights, and the operators I and K.

Integration against ``dm`` uses weights of hat functions that are linear in the
scale coordinate: for the cell ``(x_{i-1}, x_i]``

    w_left_i  = int_cell (s_i - s(y)) / ds_i  dm(y)
    w_right_i = int_cell (s(y) - s_{i-1}) / ds_i  dm(y)

so ``w_left_i + w_right_i = m(cell)`` and functions linear in ``s`` are
integrated exactly.  Lumping the hat weights onto nodes gives node weights
``W_i`` and the discrete kernels

    Ig(x_i) = sum_j W_j g_j (s_i - s_j)^+      Kg(x_i) = sum_j W_j g_j min(s_i, s_j)

so ``Kg + Ig = s * int g dm`` and the symmetry of ``K`` under ``dm`` hold
exactly, and ``(d/dm)(d/ds)`` of ``Ig`` is ``g`` at every interior node.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import _quad
from .errors import GridBuildError, TailTruncationWarning
from .model import DiffusionSpec, improper_log_integral, _precision_guard

_GL8 = leggauss(8)
_GL16 = leggauss(16)


@dataclass(frozen=True, eq=False)
class Grid:
    spec: DiffusionSpec
    nodes: np.ndarray
    scale: np.ndarray
    ds: np.ndarray
    w_left: np.ndarray
    w_right: np.ndarray
    tail_mass: float
    speed_at_nodes: np.ndarray = field(repr=False)

    @property
    def R(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_cells(self) -> int:
        return self.ds.size

    @property
    def cell_weights(self) -> np.ndarray:
        return self.w_left + self.w_right

    @property
    def node_weights(self) -> np.ndarray:
        """Lumped hat weights ``W_i = w_right_i + w_left_{i+1}`` (``W_0`` may be infinite)."""
        return np.concatenate([self.w_left, [0.0]]) + np.concatenate([[0.0], self.w_right])

    def function(self, values, notes=()) -> "GridFunction":
        return GridFunction(self, np.asarray(values, dtype=float), tuple(notes))

    def evaluate(self, f) -> "GridFunction":
        """Sample a callable at the nodes."""
        return self.function(f(self.nodes))

    def zeros(self) -> "GridFunction":
        return self.function(np.zeros_like(self.nodes))


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: Grid
    values: np.ndarray
    notes: tuple = ()

    def __post_init__(self):
        if self.values.shape != self.grid.nodes.shape:
            raise ValueError(f"expected {self.grid.nodes.size} node values, got {self.values.shape}")

    @property
    def x(self):
        return self.grid.nodes

    def lebesgue(self) -> np.ndarray:
        """Node values multiplied by the speed density (density w.r.t. Lebesgue measure)."""
        return self.values * self.grid.speed_at_nodes

    def rows(self):
        return list(zip(self.grid.nodes, self.values))


# ---------------------------------------------------------------------------
# construction


def graded_nodes(R: float, n_cells: int, grading: float = 1.0) -> np.ndarray:
    """Nodes on ``[0, R]``; cell widths grow by ``grading`` away from both ends."""
    idx = np.arange(n_cells)
    widths = grading ** np.minimum(idx, n_cells - 1 - idx).astype(float)
    x = np.concatenate([[0.0], np.cumsum(widths)])
    x *= R / x[-1]
    x[-1] = R
    return x


def _cell_rule(spec, lo, hi, gl):
    """Per-cell (ds, w_left, w_right, mass) by nested Gauss-Legendre; log-shifted per cell."""
    gx, gw = gl
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    y = mid[:, None] + half[:, None] * gx  # (n, q)
    ls_shift = spec.log_scale_density(mid)
    lm_shift = spec.log_speed_density(mid)
    sd = np.exp(spec.log_scale_density(y) - ls_shift[:, None])
    md = np.exp(spec.log_speed_density(y) - lm_shift[:, None])
    ds_scaled = np.sum(gw * sd, axis=1) * half
    # s(y_q) - s(lo) and s(hi) - s(y_q) by inner Gauss-Legendre on sub-intervals
    left_len = (y - lo[:, None]) * 0.5
    left_pts = lo[:, None, None] + left_len[..., None] * (gx + 1.0)
    right_len = (hi[:, None] - y) * 0.5
    right_pts = y[..., None] + right_len[..., None] * (gx + 1.0)
    s_below = np.sum(gw * np.exp(spec.log_scale_density(left_pts) - ls_shift[:, None, None]), axis=2) * left_len
    s_above = np.sum(gw * np.exp(spec.log_scale_density(right_pts) - ls_shift[:, None, None]), axis=2) * right_len
    mass_scaled = np.sum(gw * md, axis=1) * half
    wr = np.sum(gw * md * s_below, axis=1) * half / ds_scaled
    wl = np.sum(gw * md * s_above, axis=1) * half / ds_scaled
    with np.errstate(over="ignore"):
        fm = np.exp(lm_shift)
        fs = np.exp(ls_shift)
    return ds_scaled * fs, wl * fm, wr * fm, mass_scaled * fm


def _cell_fallback(spec, lo, hi):
    """Geometric-piece quadrature for cells with endpoint singularities or poor GL agreement."""
    lev = 30
    lds = float(_quad.log_integral(spec.log_scale_density, lo, hi, levels=lev))

    def log_right(u):
        return spec.log_speed_density(u) + _quad.log_integral(spec.log_scale_density, lo, u, levels=lev)

    def log_left(u):
        return spec.log_speed_density(u) + _quad.log_integral(spec.log_scale_density, u, hi, levels=lev)

    lwr = float(_quad.log_integral(log_right, lo, hi, levels=lev)) - lds
    lwl = float(_quad.log_integral(log_left, lo, hi, levels=lev)) - lds
    lmass = float(_quad.log_integral(spec.log_speed_density, lo, hi, levels=lev))
    with np.errstate(over="ignore"):
        return math.exp(lds), math.exp(lwl), math.exp(lwr), math.exp(lmass)


def build_grid(spec: DiffusionSpec, R: float, N: int, grading: float = 1.0, min_cells: int = 4, rtol: float = 1e-11) -> Grid:
    """Build a graded grid on ``[0, R]`` with ``N`` cells and speed-measure weights.

    Cells are integrated by nested 8-point Gauss-Legendre, checked against the
    16-point rule; disagreeing cells (and the cell touching 0) are redone by
    geometric-piece quadrature.
    """
    if not math.isfinite(R) or R <= 0:
        raise GridBuildError(f"truncation radius must be finite and positive, got {R}")
    if R >= spec.ell:
        raise GridBuildError(f"truncation radius {R} must be below ell={spec.ell}")
    if N < min_cells:
        raise GridBuildError(f"need at least {min_cells} cells, got {N}")
    nodes = graded_nodes(R, int(N), grading)
    lo, hi = nodes[:-1], nodes[1:]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ds, wl, wr, mass = _cell_rule(spec, lo, hi, _GL8)
        ds16, _, _, mass16 = _cell_rule(spec, lo, hi, _GL16)
    bad = ~(np.abs(ds - ds16) <= rtol * np.abs(ds16)) | ~(np.abs(mass - mass16) <= rtol * np.abs(mass16))
    bad[0] = True
    for i in np.flatnonzero(bad):
        ds[i], wl[i], wr[i], mass[i] = _cell_fallback(spec, lo[i], hi[i])
    checks = [("scale increment", ds), ("right weight", wr), ("left weight", wl[1:])]
    for label, arr in checks:
        off = np.flatnonzero(~(np.isfinite(arr) & (arr > 0)))
        if off.size:
            i = int(off[0]) + (1 if label == "left weight" else 0)
            raise GridBuildError(
                f"{label} of cell {i} ({nodes[i]:.6g}, {nodes[i + 1]:.6g}] is not finite and positive"
            )
    if not (wl[0] > 0):
        raise GridBuildError("left weight of cell 0 is not positive")
    scale = np.concatenate([[0.0], np.cumsum(ds)])
    if not np.all(np.isfinite(scale)):
        raise GridBuildError("scale function overflows on the grid; reduce R")
    if math.isinf(spec.ell) or R < spec.ell:
        tail = improper_log_integral(spec.log_speed_density, R, spec.ell, spec.ell, guard=_precision_guard(spec))
        tail_mass = tail.value if tail.status != "inconclusive" else math.nan
    else:
        tail_mass = 0.0
    with np.errstate(over="ignore", divide="ignore"):
        speed = spec.speed_density(nodes)
    return Grid(spec, nodes, scale, ds, wl, wr, float(tail_mass), speed)


def default_radius(spec: DiffusionSpec, start=None, max_doublings=30, log_guard=500.0) -> float:
    """Smallest doubling radius with ``tail_mass * s(R) < 1e-6 m(0, R)``.

    When ``s(x) m(x, ell)`` stays bounded away from 0 (Brownian motion with
    drift) the criterion is never met; the largest radius keeping scale and
    speed within ``exp(+-log_guard)`` is returned instead.
    """
    R = start or max(spec.ref_point, 1.0)
    if math.isfinite(spec.ell):
        R = min(R, spec.ell * (1 - 2.0**-20))
    best = R
    for _ in range(max_doublings):
        if R >= spec.ell:
            break
        x = np.array([R])
        if abs(float(spec.log_scale(x)[0])) > log_guard or abs(float(spec.log_speed_density(x)[0])) > log_guard:
            break
        best = R
        tail = improper_log_integral(spec.log_speed_density, R, spec.ell, spec.ell)
        if tail.status == "finite":
            bulk = float(spec.speed_mass(0.0, R))
            if tail.value * float(spec.scale(x)[0]) < 1e-6 * bulk:
                return R
        R *= 2
    return best


# ---------------------------------------------------------------------------
# operators


def node_contributions(g: GridFunction) -> np.ndarray:
    """``W_i g_i`` per node; the node at 0 contributes nothing when ``g(0) = 0``."""
    grid = g.grid
    with np.errstate(invalid="ignore", over="ignore"):
        c = grid.node_weights * g.values
    if g.values[0] == 0:
        c[0] = 0.0
    return c


def cumulative_dm(g: GridFunction) -> np.ndarray:
    """``int_0^{x_i} g dm`` at every node (node ``x_i`` included)."""
    return np.cumsum(node_contributions(g))


def tail_dm(g: GridFunction) -> np.ndarray:
    """``int_{x_i}^R g dm`` at every node (node ``x_i`` included)."""
    return np.cumsum(node_contributions(g)[::-1])[::-1]


def integrate_dm(g: GridFunction) -> float:
    """``int_0^R g dm``; linear in ``g``."""
    return float(np.sum(node_contributions(g)))


def _outer(grid: Grid, inner: np.ndarray) -> np.ndarray:
    """``sum_{k <= i} ds_k * inner_k`` with ``inner_0`` unused."""
    return np.concatenate([[0.0], np.cumsum(grid.ds * inner[1:])])


def integrate_I_array(grid: Grid, values: np.ndarray) -> np.ndarray:
    """``I`` on a raw node array, preserving its dtype (used for extended-precision sums)."""
    W = grid.node_weights.astype(values.dtype)
    c = W * values
    if values[0] == 0:
        c[0] = 0
    below = np.concatenate([np.zeros(1, dtype=c.dtype), np.cumsum(c)[:-1]])
    ds = grid.ds.astype(values.dtype)
    return np.concatenate([np.zeros(1, dtype=c.dtype), np.cumsum(ds * below[1:])])


def apply_I(g: GridFunction) -> GridFunction:
    """``Ig(x_i) = sum_{j<i} W_j g_j (s_i - s_j)``, accumulated over cells to avoid cancellation."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = integrate_I_array(g.grid, g.values)
    notes = () if np.all(np.isfinite(out)) else ("overflow in I",)
    return GridFunction(g.grid, out, notes)


def apply_K(g: GridFunction, tail_tol: float = 1e-8, warn: bool = False) -> GridFunction:
    """``Kg(x_i) = sum_j W_j g_j min(s_i, s_j)``; mass of ``g dm`` beyond ``R`` is neglected."""
    grid = g.grid
    with np.errstate(over="ignore", invalid="ignore"):
        out = _outer(grid, tail_dm(g))
    notes = []
    if not np.all(np.isfinite(out)):
        notes.append("overflow in K")
    gmax = float(np.max(np.abs(g.values)))
    total = float(np.sum(np.abs(node_contributions(g))))
    if grid.tail_mass * gmax > tail_tol * max(total, 1e-300):
        notes.append(f"tail truncation: tail_mass*max|g| = {grid.tail_mass * gmax:.3g}")
        if warn:
            warnings.warn(notes[-1], TailTruncationWarning, stacklevel=2)
    return GridFunction(grid, out, tuple(notes))


def dump_csv(g: GridFunction, path) -> None:
    """Write ``x,value`` rows with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        fh.write("x,value\n")
        for x, v in zip(g.grid.nodes, g.values):
            fh.write(f"{x:.17g},{v:.17g}\n")
