"""Monte Carlo engine: absorbed paths, hitting times, Yaglom laws, restart occupation, tail fits.

Random streams are Philox generators keyed by ``(seed, stream index)`` through
``SeedSequence.spawn_key``.  Work is split into fixed-size chunks, each with its
own stream, so results depend only on the seed and the chunk size, never on
how chunks are scheduled; hitting samples are sorted after merging.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InsufficientTailError, UndefinedRatioError, UnsupportedSimulationError
from .functions import Constant
from .grid import Grid
from .measure import GridMeasure

SCHEMES = ("euler-maruyama", "exact-bm-drift")


@dataclass(frozen=True)
class SimConfig:
    """Simulation parameters.

    Attributes
    ----------
    h : float
        Time step of the Euler-Maruyama scheme.
    horizon : float
        Paths still alive at this time are censored.
    n_paths : int
    seed : int
    scheme : str
        ``"euler-maruyama"`` or ``"exact-bm-drift"`` (constant coefficients only).
    bridge : bool
        Also absorb when a Brownian bridge between two positive positions would
        have crossed 0.
    chunk : int
        Paths per random stream.
    workers : int
        Threads used to run chunks; results do not depend on it.
    """

    h: float = 1e-3
    horizon: float = 200.0
    n_paths: int = 10_000
    seed: int = 0
    scheme: str = "euler-maruyama"
    bridge: bool = True
    chunk: int = 100_000
    workers: int = 1

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")


@dataclass(frozen=True)
class HittingSample:
    """Sorted uncensored hitting times plus the number of paths alive at ``horizon``."""

    times: np.ndarray
    n_censored: int
    horizon: float

    @property
    def n(self) -> int:
        return self.times.size + self.n_censored

    @property
    def censored_fraction(self) -> float:
        return self.n_censored / self.n if self.n else 0.0

    def survivors(self, t) -> np.ndarray:
        """Number of paths with ``T_0 > t``."""
        t = np.asarray(t, dtype=float)
        return self.times.size - np.searchsorted(self.times, t, side="right") + self.n_censored

    def survival(self, t) -> np.ndarray:
        return self.survivors(t) / self.n

    def mean(self):
        """Mean and standard error (censored paths make this a lower bound)."""
        t = self.times
        return float(t.mean()), float(t.std(ddof=1) / math.sqrt(t.size))


# ---------------------------------------------------------------------------
# streams and initial laws


def stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def _chunks(n: int, size: int):
    return [(k, min(size, n - k * size)) for k in range((n + size - 1) // size)]


def _run_chunks(fn, cfg: SimConfig, n: int):
    jobs = _chunks(n, cfg.chunk)
    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(lambda job: fn(stream(cfg.seed, job[0]), job[1]), jobs))
    return [fn(stream(cfg.seed, k), m) for k, m in jobs]


def sample_initial(init, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` starting points from a point or a ``GridMeasure``.

    Densities are sampled cell by cell from the exact cell masses, uniformly
    inside a cell; binned atoms spread uniformly over their cell.
    """
    if np.isscalar(init):
        return np.full(n, float(init))
    mu: GridMeasure = init
    g = mu.grid
    d = mu.density
    cells = np.where(d[:-1] == 0, 0.0, g.w_left * d[:-1]) + g.w_right * d[1:]
    weights = np.concatenate([cells, mu.atom_p])
    p = weights / weights.sum()
    pick = rng.choice(p.size, size=n, p=p)
    u = rng.random(n)
    out = np.empty(n)
    in_cell = pick < cells.size
    j = pick[in_cell]
    out[in_cell] = g.nodes[j] + u[in_cell] * (g.nodes[j + 1] - g.nodes[j])
    a = pick[~in_cell] - cells.size
    ax = mu.atom_x[a]
    if mu.binned:
        k = np.searchsorted(g.nodes, ax)
        lo = g.nodes[np.maximum(k - 1, 0)]
        ax = lo + u[~in_cell] * (ax - lo)
    out[~in_cell] = ax
    return out


def _coefficients(spec):
    if not spec.has_coefficients:
        raise UnsupportedSimulationError(
            "simulation needs coefficients; give the diffusion in coefficient form or in natural scale"
        )
    return spec.coefficients


def _constant_coefficients(spec):
    a, b = _coefficients(spec)
    if not (isinstance(a, Constant) and isinstance(b, Constant)):
        raise UnsupportedSimulationError("exact-bm-drift scheme needs constant coefficients")
    return a.value, b.value


# ---------------------------------------------------------------------------
# hitting times


def _hitting_exact(spec, x0, rng, cfg):
    a, b = _constant_coefficients(spec)
    if b >= 0:
        raise UnsupportedSimulationError("exact hitting law needs a strictly negative drift")
    sigma2 = 2.0 * a
    t = np.zeros_like(x0)
    pos = x0 > 0
    t[pos] = rng.wald(x0[pos] / -b, x0[pos] ** 2 / sigma2)
    return t


def _em_step(spec, x, h, rng):
    a, b = spec.coefficients
    sig = np.sqrt(2.0 * a(x))
    z = rng.standard_normal(x.size)
    return x + b(x) * h + sig * math.sqrt(h) * z, sig


def _bridge_hit(x, y, sig, h, rng):
    """Crossing of 0 by a Brownian bridge from ``x`` to ``y`` (both positive) over a step."""
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * x * y / (sig * sig * h))
    return rng.random(x.size) < p


def _hitting_em(spec, x0, rng, cfg):
    _coefficients(spec)
    h = cfg.h
    n_steps = int(math.ceil(cfg.horizon / h))
    t_hit = np.full(x0.size, np.inf)
    t_hit[x0 <= 0] = 0.0
    alive = np.flatnonzero(x0 > 0)
    x = x0[alive].copy()
    for k in range(n_steps):
        if alive.size == 0:
            break
        y, sig = _em_step(spec, x, h, rng)
        crossed = y <= 0
        t0 = k * h
        frac = np.where(crossed, x / np.where(crossed, x - y, 1.0), 1.0)
        hit_time = t0 + h * frac
        if cfg.bridge:
            br = ~crossed & _bridge_hit(x, np.maximum(y, 0.0), sig, h, rng)
            hit_time = np.where(br, t0 + 0.5 * h, hit_time)
            crossed = crossed | br
        t_hit[alive[crossed]] = hit_time[crossed]
        keep = ~crossed
        alive = alive[keep]
        x = y[keep]
    return t_hit


def sample_hitting_times(spec, init, cfg: SimConfig) -> HittingSample:
    """Simulate ``T_0`` for ``cfg.n_paths`` paths started from ``init`` (point or ``GridMeasure``)."""
    sim = _hitting_exact if cfg.scheme == "exact-bm-drift" else _hitting_em
    if cfg.scheme == "exact-bm-drift":
        _constant_coefficients(spec)
    else:
        _coefficients(spec)

    def chunk(rng, n):
        return sim(spec, sample_initial(init, rng, n), rng, cfg)

    t = np.concatenate(_run_chunks(chunk, cfg, cfg.n_paths))
    censored = ~(t <= cfg.horizon)
    return HittingSample(np.sort(t[~censored]), int(censored.sum()), cfg.horizon)


# ---------------------------------------------------------------------------
# tail statistics


@dataclass(frozen=True)
class TailRatio:
    value: float
    ci: tuple
    survivors_t: int
    survivors_ts: int
    censored_fraction: float
    wide_ci: bool
    censoring_flag: bool


def tail_ratio(sample: HittingSample, t: float, s: float, level: float = 0.95, min_survivors: int = 100) -> TailRatio:
    """``P[T > t + s] / P[T > t]`` with a binomial (delta-method) confidence interval."""
    if s < 0:
        raise ValueError("s must be >= 0")
    if t + s > sample.horizon:
        raise UndefinedRatioError(f"t + s = {t + s} lies beyond the censoring horizon {sample.horizon}")
    n_t = int(sample.survivors(t))
    if n_t == 0:
        raise UndefinedRatioError(f"no survivors at t={t}")
    if s == 0:
        return TailRatio(1.0, (1.0, 1.0), n_t, n_t, sample.censored_fraction, False, sample.censored_fraction > 0.5)
    n_ts = int(sample.survivors(t + s))
    p = n_ts / n_t
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * math.sqrt(max(p * (1 - p), 0.0) / n_t)
    return TailRatio(
        p,
        (max(p - half, 0.0), min(p + half, 1.0)),
        n_t,
        n_ts,
        sample.censored_fraction,
        n_ts < min_survivors,
        sample.censored_fraction > 0.5,
    )


@dataclass(frozen=True)
class RateTrend:
    """Implied rates ``-log(ratio)/s`` at increasing ``t`` and their extrapolation ``t -> inf``."""

    t: np.ndarray
    rates: np.ndarray
    stderr: np.ndarray
    limit: float
    limit_stderr: float
    monotone: bool


def tail_ratio_trend(sample: HittingSample, ts, s: float = 1.0, min_survivors: int = 100) -> RateTrend:
    """Weighted fit of implied rates ``-log(ratio)/s``; the intercept estimates the limit rate.

    For a tail ``C t^{-k} e^{-lambda t}`` the implied rate is exactly
    ``lambda + k log(1 + s/t)/s``, so that term is the second regressor.  Compact
    starts have ``k = 3/2``; exponential tails give ``k = 0``.
    """
    rows = []
    for t in np.asarray(ts, dtype=float):
        if t + s > sample.horizon:
            continue
        try:
            r = tail_ratio(sample, t, s, min_survivors=min_survivors)
        except UndefinedRatioError:
            continue
        if r.survivors_ts < min_survivors or r.value <= 0:
            continue
        rate = -math.log(r.value) / s
        se = math.sqrt((1 - r.value) / (r.value * r.survivors_t)) / s
        rows.append((t, rate, max(se, 1e-12)))
    if len(rows) < 3:
        raise InsufficientTailError(f"only {len(rows)} usable tail ratios")
    t, rate, se = map(np.array, zip(*rows))
    X = np.column_stack([np.ones_like(t), np.log1p(s / t) / s])
    w = 1.0 / se
    coef, *_ = np.linalg.lstsq(X * w[:, None], rate * w, rcond=None)
    cov = np.linalg.inv((X * w[:, None]).T @ (X * w[:, None]))
    monotone = bool(np.all(np.diff(rate) <= 2 * np.hypot(se[1:], se[:-1])))
    return RateTrend(t, rate, se, float(coef[0]), float(math.sqrt(cov[0, 0])), monotone)


def log_tail_slope(sample: HittingSample, window=(0.5, 0.99), prefactor: bool = False, n_points: int = 200) -> float:
    """Least-squares slope of ``log P[T > t]`` against ``t`` over a quantile window of the sample.

    With ``prefactor`` a ``log t`` regressor absorbs a power-law prefactor
    (``t^{-3/2}`` for compact starts); the returned value is the ``t`` coefficient.
    """
    times = sample.times
    if times.size == 0:
        raise InsufficientTailError("tail fully censored")
    q_lo, q_hi = window
    n = sample.n
    # window quantiles of the full (censored) law; only uncensored times are usable
    k_lo = int(q_lo * n)
    k_hi = min(int(q_hi * n), times.size - 1)
    if k_hi - k_lo < 10:
        raise InsufficientTailError(f"only {max(k_hi - k_lo, 0)} uncensored points in the tail window")
    t_lo, t_hi = times[k_lo], times[k_hi]
    grid = np.linspace(t_lo, t_hi, n_points)
    surv = sample.survival(grid)
    ok = surv > 0
    if ok.sum() < 10:
        raise InsufficientTailError("fewer than 10 tail points with positive survival")
    t = grid[ok]
    y = np.log(surv[ok])
    cols = [np.ones_like(t), t]
    if prefactor:
        cols.append(np.log(t))
    coef, *_ = np.linalg.lstsq(np.column_stack(cols), y, rcond=None)
    return float(coef[1])


def ks_exponential(sample: HittingSample, rate: float):
    """KS statistic and p-value of the uncensored sample against ``Exp(rate)``."""
    if sample.n_censored:
        raise InsufficientTailError("KS test needs an uncensored sample")
    res = stats.kstest(sample.times, stats.expon(scale=1.0 / rate).cdf)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# conditioned laws and restart occupation


@dataclass
class YaglomResult:
    measure: GridMeasure | None
    survivors: int
    n_paths: int
    low_statistics: bool
    outside_fraction: float


def _positions_at(spec, x0, t, rng, cfg):
    """Positions at time ``t`` of paths not absorbed before ``t`` (NaN when absorbed)."""
    if t == 0:
        return np.where(x0 > 0, x0, np.nan)
    if cfg.scheme == "exact-bm-drift":
        a, b = _constant_coefficients(spec)
        sig = math.sqrt(2 * a)
        y = x0 + b * t + sig * math.sqrt(t) * rng.standard_normal(x0.size)
        alive = (x0 > 0) & (y > 0)
        alive &= ~_bridge_hit(np.where(alive, x0, 1.0), np.where(alive, y, 1.0), sig, t, rng)
        return np.where(alive, y, np.nan)
    _coefficients(spec)
    n_steps = max(1, int(round(t / cfg.h)))
    h = t / n_steps
    x = np.where(x0 > 0, x0, np.nan)
    alive = np.flatnonzero(x0 > 0)
    cur = x[alive]
    for _ in range(n_steps):
        if alive.size == 0:
            break
        y, sig = _em_step(spec, cur, h, rng)
        dead = y <= 0
        if cfg.bridge:
            dead |= ~dead & _bridge_hit(cur, np.maximum(y, 0.0), sig, h, rng)
        alive, cur = alive[~dead], y[~dead]
    out = np.full(x0.size, np.nan)
    out[alive] = cur
    return out


def yaglom_estimate(spec, init, t: float, cfg: SimConfig, grid: Grid, min_survivors: int = 1000) -> YaglomResult:
    """Law of ``X_t`` given ``T_0 > t``, binned to the grid nodes."""

    def chunk(rng, n):
        return _positions_at(spec, sample_initial(init, rng, n), t, rng, cfg)

    pos = np.concatenate(_run_chunks(chunk, cfg, cfg.n_paths))
    pos = pos[np.isfinite(pos)]
    if pos.size == 0:
        return YaglomResult(None, 0, cfg.n_paths, True, 0.0)
    outside = float(np.mean(pos > grid.R))
    mu = GridMeasure.binned_sample(grid, pos, label=f"yaglom t={t:g}")
    return YaglomResult(mu, int(pos.size), cfg.n_paths, pos.size < min_survivors, outside)


@dataclass
class OccupationResult:
    measure: GridMeasure
    cycles: int
    total_time: float
    mean_cycle: float
    insufficient_cycles: bool
    outside_fraction: float
    notes: list = field(default_factory=list)


def _cycle_batch(spec, mu, rng, n, cfg, grid, mask=None):
    """Run ``n`` independent cycles; return durations and (masked) trapezoid occupation per node."""
    _coefficients(spec)
    h = cfg.h
    x = sample_initial(mu, rng, n)
    dur = np.zeros(n)
    weights = np.ones(n) if mask is None else mask.astype(float)
    occ = np.zeros(grid.nodes.size)
    outside = 0.0
    idx_all = np.arange(n)
    alive = idx_all[x > 0]
    cur = x[alive]
    # weight already owed to the current point by the interval before it
    pending = np.zeros(alive.size)
    max_steps = int(math.ceil(cfg.horizon / h))
    for k in range(max_steps):
        if alive.size == 0:
            break
        y, sig = _em_step(spec, cur, h, rng)
        crossed = y <= 0
        frac = np.where(crossed, cur / np.where(crossed, cur - y, 1.0), 1.0)
        if cfg.bridge:
            br = ~crossed & _bridge_hit(cur, np.maximum(y, 0.0), sig, h, rng)
            frac = np.where(br, 0.5, frac)
            crossed = crossed | br
        # weight of the current point: pending half-step plus the half of the next interval
        w_here = pending + np.where(crossed, 0.5 * h * frac, 0.5 * h)
        ww = w_here * weights[alive]
        bins = np.clip(np.searchsorted(grid.nodes, cur, side="left"), 1, grid.nodes.size - 1)
        occ += np.bincount(bins, ww, minlength=grid.nodes.size)
        outside += float(ww[cur > grid.R].sum())
        dur[alive] += np.where(crossed, h * frac, h)
        keep = ~crossed
        alive = alive[keep]
        cur = y[keep]
        pending = 0.5 * h * np.ones(alive.size)
    if alive.size:
        raise UnsupportedSimulationError(f"{alive.size} cycles outlived the per-cycle horizon {cfg.horizon}")
    return dur, occ, outside


def jump_boundary_occupation(
    spec, mu, horizon: float, cfg: SimConfig, grid: Grid, burn_in: float = 0.0, batch: int = 20_000
) -> OccupationResult:
    """Occupation law on ``[burn_in, horizon]`` of the process restarted from ``mu`` at each absorption.

    Cycles are iid, simulated in batches with one stream per batch and laid out
    in batch order.  A cycle is counted when it starts inside the window, so the
    window edges are resolved to whole cycles.  Batches that straddle an edge are
    re-run from the same stream with a mask.
    """
    occ = np.zeros(grid.nodes.size)
    outside = 0.0
    clock = 0.0
    cycles = 0
    b = 0
    while clock < horizon:
        dur, o, out = _cycle_batch(spec, mu, stream(cfg.seed, b), batch, cfg, grid)
        starts = clock + np.concatenate([[0.0], np.cumsum(dur)[:-1]])
        inside = (starts >= burn_in) & (starts < horizon)
        if inside.all():
            occ += o
            outside += out
        elif inside.any():
            _, o, out = _cycle_batch(spec, mu, stream(cfg.seed, b), batch, cfg, grid, mask=inside)
            occ += o
            outside += out
        cycles += int(np.sum(starts < horizon))
        clock += float(dur.sum())
        b += 1
    total = occ.sum()
    keep = np.flatnonzero(occ)
    measure = GridMeasure(
        grid, np.zeros_like(grid.nodes), grid.nodes[keep], occ[keep] / total, label="occupation", binned=True
    )
    mean_cycle = horizon / max(cycles, 1)
    notes = []
    insufficient = cycles < 10
    if insufficient:
        notes.append("horizon covers fewer than 10 expected cycles")
    return OccupationResult(measure, cycles, total, mean_cycle, insufficient, outside / total if total else 0.0, notes)
