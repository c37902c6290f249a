"""Probability measures on ``(0, R]`` as node densities w.r.t. ``dm`` plus atoms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, GridFunction, integrate_dm


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """``mu(dx) = density(x) m(dx) + sum_j p_j delta_{x_j}``.

    Parameters
    ----------
    grid : Grid
    density : ndarray
        Node values of the density with respect to the speed measure.
    atom_x, atom_p : ndarray
        Atom positions in ``(0, R]`` and their masses.
    binned : bool
        Atoms stand for the mass of the cell ending at their node (empirical
        histograms); only node CDF values are then meaningful.
    """

    grid: Grid
    density: np.ndarray
    atom_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atom_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    label: str = ""
    binned: bool = False

    def __post_init__(self):
        object.__setattr__(self, "density", np.asarray(self.density, dtype=float))
        object.__setattr__(self, "atom_x", np.atleast_1d(np.asarray(self.atom_x, dtype=float)))
        object.__setattr__(self, "atom_p", np.atleast_1d(np.asarray(self.atom_p, dtype=float)))
        if self.density.shape != self.grid.nodes.shape:
            raise ValueError("density must have one value per node")
        if self.atom_x.shape != self.atom_p.shape:
            raise ValueError("atom positions and masses differ in length")
        if np.any(self.atom_x <= 0) or np.any(self.atom_x > self.grid.R * (1 + 1e-12)):
            raise ValueError(f"atoms must lie in (0, R], got {self.atom_x}")
        if np.any(self.density < 0) or np.any(self.atom_p < 0):
            raise ValueError("measure has negative density or atom mass")

    # constructors ------------------------------------------------------
    @classmethod
    def dirac(cls, grid: Grid, x: float) -> "GridMeasure":
        return cls(grid, np.zeros_like(grid.nodes), [x], [1.0], label=f"dirac x={x:g}")

    @classmethod
    def from_density(cls, grid: Grid, density, normalize=True, label="") -> "GridMeasure":
        density = np.clip(np.asarray(density, dtype=float), 0.0, None)
        if normalize:
            density = density / integrate_dm(grid.function(density))
        return cls(grid, density, label=label)

    @classmethod
    def uniform_in_m(cls, grid: Grid, a: float, b: float) -> "GridMeasure":
        """Normalized speed measure restricted to ``[a, b]``."""
        x = grid.nodes
        return cls.from_density(grid, ((x >= a) & (x <= b)).astype(float), label=f"uniform a={a:g} b={b:g}")

    @classmethod
    def binned_sample(cls, grid: Grid, positions, weights=None, label="empirical") -> "GridMeasure":
        """Empirical law: each point's weight goes to the first node at or above it (clipped to ``R``)."""
        pos = np.asarray(positions, dtype=float)
        w = np.ones_like(pos) if weights is None else np.asarray(weights, dtype=float)
        idx = np.clip(np.searchsorted(grid.nodes, pos, side="left"), 1, grid.nodes.size - 1)
        mass = np.bincount(idx, w, minlength=grid.nodes.size)
        total = mass.sum()
        keep = np.flatnonzero(mass)
        return cls(grid, np.zeros_like(grid.nodes), grid.nodes[keep], mass[keep] / total, label=label, binned=True)

    @staticmethod
    def mixture(parts, weights) -> "GridMeasure":
        parts = list(parts)
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
        grid = parts[0].grid
        dens = sum(wi * p.density for wi, p in zip(w, parts))
        ax = np.concatenate([p.atom_x for p in parts])
        ap = np.concatenate([wi * p.atom_p for wi, p in zip(w, parts)])
        return GridMeasure(grid, dens, ax, ap, label="mixture")

    # queries -----------------------------------------------------------
    @property
    def has_atoms(self) -> bool:
        return self.atom_p.size > 0 and bool(np.any(self.atom_p > 0))

    def density_function(self) -> GridFunction:
        return self.grid.function(self.density)

    def density_mass(self) -> float:
        return integrate_dm(self.density_function())

    def total_mass(self) -> float:
        return self.density_mass() + float(self.atom_p.sum())

    def lebesgue_density(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            out = self.density * self.grid.speed_at_nodes
        return np.where(self.density == 0, 0.0, out)

    def cdf(self) -> np.ndarray:
        """``mu((0, x_i])`` at every node (cell-exact hat integration of the density)."""
        g = self.grid
        d = self.density
        left = np.where(d[:-1] == 0, 0.0, g.w_left * d[:-1])
        cells = left + g.w_right * d[1:]
        out = np.concatenate([[0.0], np.cumsum(cells)])
        if self.has_atoms:
            idx = np.searchsorted(g.nodes, self.atom_x, side="left")
            out = out + np.cumsum(np.bincount(idx, self.atom_p, minlength=g.nodes.size))
        return out

    def cdf_left(self) -> np.ndarray:
        """``mu((0, x_i))``: the CDF minus atoms sitting exactly on nodes."""
        out = self.cdf()
        if self.has_atoms:
            idx = np.searchsorted(self.grid.nodes, self.atom_x, side="left")
            on_node = np.isclose(self.grid.nodes[idx], self.atom_x, rtol=1e-12, atol=0)
            out = out - np.bincount(idx[on_node], self.atom_p[on_node], minlength=self.grid.nodes.size)
        return out

    def survival(self) -> np.ndarray:
        """``mu((x_i, R])``."""
        return self.total_mass() - self.cdf()
