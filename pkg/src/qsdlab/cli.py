"""``qsd-lab`` command line.

Exit codes: 0 ok, 1 usage or configuration error, 2 numerical error or a
regime warning escalated by ``--strict``, 3 check-suite failure.  Output goes to
``--out``, else ``[output] dir``, else ``$QSD_LAB_OUTPUT_DIR``, else ``qsd-lab-out``.
"""

from __future__ import annotations

import math
import os
import sys
import warnings
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import Config, load_config, parse_init
from .errors import ConfigError, QSDLabError, RegimeWarning, TailTruncationWarning, UnsupportedSpecError
from .report import RunReport

OUTPUT_ENV = "QSD_LAB_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_REGIME, EXIT_CHECK = 0, 1, 2, 3


class RegimeEscalation(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _outdir(cfg: Config, out, command: str) -> Path:
    base = out or cfg.section("output").get("dir") or os.environ.get(OUTPUT_ENV) or "qsd-lab-out"
    return Path(base) / command


def _grid(cfg: Config):
    from .grid import build_grid, default_radius

    g = cfg.section("grid")
    R = g.get("R", "auto")
    R = default_radius(cfg.spec) if R == "auto" else float(R)
    return build_grid(cfg.spec, R, int(g.get("N", 4000)), float(g.get("grading", 1.0)))


def _sim_config(cfg: Config):
    from .mc import SimConfig

    keys = ("h", "horizon", "n_paths", "seed", "scheme", "bridge", "chunk", "workers")
    return SimConfig(**{k: v for k, v in cfg.section("mc").items() if k in keys})


def _finish(ctx, report: RunReport, cfg: Config, out, caught) -> None:
    for w in caught:
        if issubclass(w.category, (RegimeWarning, TailTruncationWarning)) or w.category.__module__.startswith("qsdlab"):
            report.warnings.append(f"{w.category.__name__}: {w.message}")
    report.finish()
    outdir = _outdir(cfg, out, report.command)
    report.write(outdir)
    for line in report.summary:
        click.echo(line)
    for w in report.warnings:
        click.echo(f"warning: {w}", err=True)
    click.echo(f"wrote {outdir}", err=True)
    if ctx.obj.get("strict") and any(w.startswith("RegimeWarning") for w in report.warnings):
        raise RegimeEscalation("regime warning escalated by --strict")


def _prepare(config, **overrides) -> Config:
    cfg = load_config(config)
    for section, values in overrides.items():
        cfg.override(section, **values)
    return cfg


def _report(command: str, cfg: Config, seed=None) -> RunReport:
    return RunReport(command=command, config_hash=cfg.hash, seed=seed)


config_option = click.option("--config", "config", required=True, type=click.Path(dir_okay=False), help="TOML config file.")
out_option = click.option("--out", default=None, type=click.Path(file_okay=False), help="Output directory.")


def grid_options(f):
    f = click.option("--R", "R", type=float, default=None, help="Truncation radius (overrides grid.R).")(f)
    f = click.option("--N", "N", type=int, default=None, help="Number of cells (overrides grid.N).")(f)
    return f


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.version_option(__version__, prog_name="qsd-lab")
@click.option("--strict", is_flag=True, help="Exit with code 2 on numeric-regime warnings.")
@click.pass_context
def cli(ctx, strict):
    """Quasi-stationary distributions of one-dimensional diffusions absorbed at 0."""
    ctx.ensure_object(dict)
    ctx.obj["strict"] = strict


@cli.command()
@config_option
@out_option
@click.pass_context
def classify(ctx, config, out):
    """Classify both boundaries and decide whether infinitely many QSDs exist."""
    from .model import classify_boundary, has_infinitely_many_qsds

    cfg = _prepare(config)
    spec = cfg.spec
    report = _report("classify", cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        crit = has_infinitely_many_qsds(spec)
        rows = []
        for end, label in ((0.0, "0"), (spec.ell, "inf" if math.isinf(spec.ell) else f"{spec.ell:g}")):
            bc = crit.boundary if end == spec.ell else classify_boundary(spec, 0.0)
            rows.append((label, bc.i_value, bc.j_value, bc.kind.value, crit.verdict if end == spec.ell else ""))
    report.add("classify", ("end", "I", "J", "kind", "infinite_qsd"), rows)
    report.line(f"{'end':>6} {'I':>14} {'J':>14} {'kind':>10}")
    for label, i, j, kind, _ in rows:
        report.line(f"{label:>6} {i:>14.6g} {j:>14.6g} {kind:>10}")
    report.line(f"infinite-QSD: {crit.verdict}" + (f" (limsup s*m_tail ~ {crit.limsup:.6g})" if crit.verdict == "yes" else ""))
    _finish(ctx, report, cfg, out, caught)


@cli.command("lambda0")
@config_option
@out_option
@grid_options
@click.option("--tol", type=float, default=None, help="Bisection tolerance (overrides eigen.tol).")
@click.option("--oracle/--no-oracle", default=False, help="Also run the finite-difference matrix oracle.")
@click.pass_context
def lambda0_cmd(ctx, config, out, R, N, tol, oracle):
    """Locate the spectral bottom by bisection on monotonicity of psi_(-lambda)."""
    from .eigen import lambda0, lambda0_matrix

    cfg = _prepare(config, grid={"R": R, "N": N}, eigen={"tol": tol})
    report = _report("lambda0", cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grid = _grid(cfg)
        try:
            sb = lambda0(grid, float(cfg.section("eigen")["tol"]))
        except UnsupportedSpecError as exc:
            # finite scale at ell: only the matrix path is available
            value = lambda0_matrix(cfg.spec, cfg.spec.ell if math.isfinite(cfg.spec.ell) else grid.R, max(grid.n_cells, 2000))
            report.add("lambda0", ["lambda0", "method", "R", "N"], [[value, "matrix", grid.R, grid.n_cells]])
            report.line(f"lambda0 = {value:.10g} (matrix oracle; bisection unavailable: {exc})")
            sb = None
        if sb is not None:
            row = [sb.lambda0, sb.bracket[0], sb.bracket[1], sb.iterations, grid.R, grid.n_cells]
            cols = ["lambda0", "lo", "hi", "iterations", "R", "N"]
            if oracle:
                row.append(lambda0_matrix(cfg.spec, grid.R, max(grid.n_cells, 2000)))
                cols.append("matrix_oracle")
    if sb is not None:
        report.add("lambda0", cols, [row])
        report.line(f"lambda0 = {sb.lambda0:.10g}  bracket [{sb.bracket[0]:.10g}, {sb.bracket[1]:.10g}]")
        if oracle:
            report.line(f"matrix oracle = {row[-1]:.10g}")
    _finish(ctx, report, cfg, out, caught)


@cli.command()
@config_option
@out_option
@grid_options
@click.option("--lambda", "lam", type=float, required=True, help="Signed lambda; -0.5 gives psi_(-0.5).")
@click.option("--method", type=click.Choice(["auto", "series", "volterra"]), default="auto")
@click.pass_context
def eigen(ctx, config, out, R, N, lam, method):
    """Write psi_lambda at the grid nodes (columns x,value)."""
    from .eigen import psi

    cfg = _prepare(config, grid={"R": R, "N": N})
    report = _report("eigen", cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grid = _grid(cfg)
        res = psi(grid, lam, method=method)
    report.add("psi", ("x", "value"), res.psi.rows())
    report.line(f"psi_({lam:g}) on {grid.n_cells} cells, method {res.method}, terms {res.terms_used}")
    _finish(ctx, report, cfg, out, caught)


@cli.command("qsd")
@config_option
@out_option
@grid_options
@click.option("--lambda", "lam", type=float, required=True, help="Decay rate in (0, lambda0].")
@click.pass_context
def qsd_cmd(ctx, config, out, R, N, lam):
    """Write the QSD nu_lambda (density w.r.t. dm and Lebesgue, CDF) and its normalization residual."""
    from .eigen import check_normalization, qsd

    cfg = _prepare(config, grid={"R": R, "N": N})
    report = _report("qsd", cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grid = _grid(cfg)
        nu = qsd(grid, lam)
        nc = check_normalization(grid, lam)
    rows = list(zip(grid.nodes, nu.density, nu.lebesgue_density(), nu.cdf()))
    report.add("qsd", ("x", "density_m", "density_lebesgue", "cdf"), rows)
    report.line(f"nu_{lam:g}: normalization residual {nc.residual:.3g}" + (" (flagged)" if nc.flagged else ""))
    if nc.flagged:
        warnings.warn(f"normalization residual {nc.residual:.3g} at lambda={lam}", RegimeWarning)
        report.warnings.append(f"RegimeWarning: normalization residual {nc.residual:.3g}")
    _finish(ctx, report, cfg, out, caught)


@cli.command("iterate")
@config_option
@out_option
@grid_options
@click.option("--init", "init", default=None, help='Initial measure, e.g. "dirac x=1".')
@click.option("--n", "n", type=int, default=None, help="Number of renewal steps.")
@click.pass_context
def iterate_cmd(ctx, config, out, R, N, init, n):
    """Iterate the renewal transform; trace columns n,m_n,r_n,kdist,sup_err."""
    from .eigen import lambda0
    from .renewal import iterate

    cfg = _prepare(config, grid={"R": R, "N": N}, iterate={"init": init, "n": n})
    report = _report("iterate", cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grid = _grid(cfg)
        mu = parse_init(cfg.section("iterate")["init"], grid)
        lam0 = lambda0(grid, float(cfg.section("eigen")["tol"])).lambda0
        res = iterate(mu, int(cfg.section("iterate")["n"]), lambda0=lam0)
    report.add("trace", ("n", "m_n", "r_n", "kdist", "sup_err"), res.trace_rows())
    report.line(f"lambda0 = {lam0:.6g}; final r_n = {res.ledger.ratios[-1]:.6g}; lambda_hat = {res.lambda_hat:.6g}")
    report.line(f"1/n-extrapolated r_n = {res.ledger.extrapolated:.6g}")
    for note in res.notes:
        report.line(f"note: {note}")
    _finish(ctx, report, cfg, out, caught)


@cli.command()
@config_option
@out_option
@grid_options
@click.option("--init", "init", default=None, help='Initial point or measure ("dirac x=1", "qsd lambda=0.5", ...).')
@click.option("--what", type=click.Choice(["hitting", "yaglom", "jumpboundary", "tail"]), required=True)
@click.option("--t", "t", type=float, multiple=True, help="Yaglom times, tail-ratio times, or the occupation horizon (default 1e4).")
@click.option("--s", "s", type=float, default=None, help="Tail-ratio lag.")
@click.option("--seed", type=int, default=None)
@click.option("--n-paths", type=int, default=None)
@click.option("--h", type=float, default=None, help="Euler-Maruyama step.")
@click.option("--horizon", type=float, default=None, help="Censoring horizon for hitting times.")
@click.option("--scheme", type=click.Choice(["euler-maruyama", "exact-bm-drift"]), default=None)
@click.pass_context
def simulate(ctx, config, out, R, N, init, what, t, s, seed, n_paths, h, horizon, scheme):
    """Monte Carlo: hitting-time quantiles, Yaglom histograms, restart occupation, tail ratios."""
    from . import mc

    cfg = _prepare(
        config,
        grid={"R": R, "N": N},
        iterate={"init": init},
        mc={"seed": seed, "n_paths": n_paths, "h": h, "horizon": horizon, "scheme": scheme, "s": s},
    )
    sim = _sim_config(cfg)
    report = _report("simulate", cfg, seed=sim.seed)
    mcs = cfg.section("mc")
    times = list(t) or list(np.atleast_1d(mcs.get("t", [1.0])))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grid = _grid(cfg)
        mu = parse_init(cfg.section("iterate")["init"], grid)
        start = float(mu.atom_x[0]) if (mu.has_atoms and mu.atom_x.size == 1 and not np.any(mu.density)) else mu
        if what in ("hitting", "tail"):
            sample = mc.sample_hitting_times(cfg.spec, start, sim)
            if what == "hitting":
                qs = np.array([0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99])
                k = np.floor(qs * sample.n).astype(int)
                rows = [(q, float(sample.times[i]) if i < sample.times.size else math.inf) for q, i in zip(qs, k)]
                report.add("hitting_quantiles", ("q", "t"), rows)
                mean, se = sample.mean()
                report.add("hitting_summary", ("n", "censored", "mean", "stderr"), [(sample.n, sample.n_censored, mean, se)])
                report.line(f"mean T0 = {mean:.6g} +- {se:.2g} (censored {sample.censored_fraction:.3%})")
            else:
                lag = float(mcs.get("s", 1.0))
                rows = []
                for tt in times:
                    r = mc.tail_ratio(sample, tt, lag)
                    rows.append((tt, lag, r.value, r.ci[0], r.ci[1], r.survivors_t, r.survivors_ts, r.censored_fraction, r.wide_ci))
                    if r.censoring_flag:
                        warnings.warn(f"censoring above 50% at t={tt}", RegimeWarning)
                report.add("tail_ratio", ("t", "s", "ratio", "ci_lo", "ci_hi", "n_t", "n_ts", "censored_fraction", "wide_ci"), rows)
                try:
                    slope = mc.log_tail_slope(sample)
                    slope_pf = mc.log_tail_slope(sample, prefactor=True)
                    report.line(f"log-tail slope = {slope:.6g} (with log-t prefactor term: {slope_pf:.6g})")
                except QSDLabError as exc:
                    report.line(f"log-tail slope unavailable: {exc}")
        elif what == "yaglom":
            rows = []
            for tt in times:
                y = mc.yaglom_estimate(cfg.spec, start, tt, sim, grid)
                if y.low_statistics:
                    warnings.warn(f"only {y.survivors} survivors at t={tt}", RegimeWarning)
                if y.measure is not None:
                    rows += _histogram_rows(y.measure, tt)
            report.add("yaglom", ("t", "x_lo", "x_hi", "mass", "cdf"), rows)
            report.line(f"Yaglom histograms at t = {', '.join(f'{x:g}' for x in times)}")
        else:
            occ_horizon = times[0] if t else 1e4
            occ = mc.jump_boundary_occupation(cfg.spec, start, occ_horizon, sim, grid, burn_in=float(mcs.get("burn_in", 0.0)))
            if occ.insufficient_cycles:
                warnings.warn("horizon shorter than 10 expected cycles", RegimeWarning)
            report.add("occupation", ("t", "x_lo", "x_hi", "mass", "cdf"), _histogram_rows(occ.measure, occ_horizon))
            report.line(f"occupation over horizon {occ_horizon:g}: {occ.cycles} cycles")
    _finish(ctx, report, cfg, out, caught)


def _histogram_rows(measure, t):
    nodes = measure.grid.nodes
    mass = np.zeros_like(nodes)
    idx = np.searchsorted(nodes, measure.atom_x)
    np.add.at(mass, idx, measure.atom_p)
    cdf = np.cumsum(mass)
    return [(t, nodes[i - 1], nodes[i], mass[i], cdf[i]) for i in range(1, nodes.size)]


@cli.command()
@config_option
@out_option
@grid_options
@click.option("--mc/--no-mc", "use_mc", default=None, help="Include Monte Carlo hierarchy estimates (default: when the exact scheme applies).")
@click.pass_context
def check(ctx, config, out, R, N, use_mc):
    """Run the property battery; exit 3 when any check fails."""
    from .checks import run_battery

    cfg = _prepare(config, grid={"R": R, "N": N})
    report = _report("check", cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grid = _grid(cfg)
        start = parse_init(cfg.section("iterate")["init"], grid)
        x0 = float(start.atom_x[0]) if start.has_atoms else 1.0
        sim = _sim_config(cfg)
        if use_mc is None:
            use_mc = sim.scheme == "exact-bm-drift"
        results = run_battery(cfg.spec, grid, start, x0, sim if use_mc else None, float(cfg.section("eigen")["tol"]))
    report.add("checks", ("name", "passed", "value", "threshold"), [(r.name, r.passed, r.value, r.threshold) for r in results])
    for r in results:
        report.line(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.value:.4g} (threshold {r.threshold:.4g}) {r.detail}")
    _finish(ctx, report, cfg, out, caught)
    if not all(r.passed for r in results):
        ctx.exit(EXIT_CHECK)


def main(argv=None) -> int:
    """Entry point mapping errors to exit codes."""
    try:
        rv = cli.main(args=argv, prog_name="qsd-lab", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except (click.UsageError, ConfigError) as exc:
        click.echo(f"error: {exc.format_message() if isinstance(exc, click.UsageError) else exc}", err=True)
        return EXIT_USAGE
    except RegimeEscalation as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_REGIME
    except QSDLabError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_REGIME
    # without standalone mode, click returns ctx.exit codes instead of raising
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
