import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import bm_drift, lebesgue_speed
from qsdlab.eigen import qsd
from qsdlab.errors import CancellationWarning, InvalidMomentError, RegimeWarning
from qsdlab.grid import build_grid, node_contributions
from qsdlab.measure import GridMeasure
from qsdlab.renewal import (
    continuity_probe,
    g_mu,
    iterate,
    kolmogorov_distance,
    limit_estimate,
    moment,
    moment_ledger,
    remainder_bound,
    renewal_transform,
    series_density,
)

# Kolmogorov distance between nu_0.2 and nu_0.5 for drift -1 on R = 100, N = 4000 (regression constant).
KD_NU02_NU05 = 0.38544326064331047


@pytest.fixture(scope="module")
def unit_grid():
    return build_grid(lebesgue_speed(), 1.0, 200)


@pytest.fixture(scope="module")
def short_grid():
    """Radius where the alternating series is still numerically usable."""
    return build_grid(bm_drift(1.0), 6.0, 600)


def random_measure(grid, seed):
    """Mixture of atoms, a bump density and a QSD drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    x = grid.nodes
    parts = [GridMeasure.dirac(grid, float(rng.uniform(0.1, 5.0)))]
    c, w = rng.uniform(0.5, 6.0), rng.uniform(0.2, 2.0)
    parts.append(GridMeasure.from_density(grid, np.exp(-(((x - c) / w) ** 2)) * (x > 0)))
    parts.append(qsd(grid, float(rng.uniform(0.1, 0.5))))
    return GridMeasure.mixture(parts, rng.dirichlet(np.ones(3)))


class TestGMu:
    def test_dirac(self, unit_grid):
        G = g_mu(GridMeasure.dirac(unit_grid, 0.4))
        np.testing.assert_allclose(G.values, np.minimum(unit_grid.nodes, 0.4), atol=1e-15)

    def test_uniform(self, unit_grid):
        G = g_mu(GridMeasure.uniform_in_m(unit_grid, 0.0, 1.0))
        x = unit_grid.nodes
        np.testing.assert_allclose(G.values, x - x**2 / 2, atol=1e-14)

    def test_shape(self, bm1_grid):
        G = g_mu(random_measure(bm1_grid, 3)).values
        assert G[0] == 0 and np.all(np.diff(G) >= 0)

    def test_mass_identity(self, bm1_grid):
        # G(R) = int mu(y, R] ds(y) with the same node-lumped survival function
        mu = GridMeasure.from_density(bm1_grid, np.exp(-bm1_grid.nodes) * bm1_grid.nodes)
        surv = np.cumsum(node_contributions(mu.density_function())[::-1])[::-1]
        expected = float(np.sum(bm1_grid.ds * surv[1:]))
        assert g_mu(mu).values[-1] == pytest.approx(expected, rel=1e-10)


class TestMoments:
    @pytest.mark.parametrize("lam", [0.2, 0.35, 0.5])
    def test_qsd_exponential_moments(self, bm1_grid, lam):
        nu = qsd(bm1_grid, lam)
        for n in (1, 2, 3, 5):
            assert moment(nu, n) * lam**n == pytest.approx(1.0, rel=1e-4)

    @pytest.mark.parametrize("x", [0.5, 1.0, 3.0])
    def test_dirac_mean_hitting_time(self, bm1_grid, x):
        assert moment(GridMeasure.dirac(bm1_grid, x), 1) == pytest.approx(x, rel=1e-4)

    def test_mixture(self, bm1_grid):
        mix = GridMeasure.mixture([qsd(bm1_grid, 0.2), qsd(bm1_grid, 0.5)], [0.5, 0.5])
        for n, expected in ((1, 3.5), (2, 14.5), (3, 66.5)):
            assert moment(mix, n) == pytest.approx(expected, rel=1e-4)
            assert expected == pytest.approx(0.5 * (0.2**-n + 0.5**-n), rel=1e-15)

    @settings(max_examples=5, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_recurrence(self, bm1_grid, seed):
        mu = random_measure(bm1_grid, seed)
        phi = renewal_transform(mu)
        led = moment_ledger(mu, 5)
        m1 = led.m[1]
        for alpha in range(1, 5):
            assert moment(phi, alpha) * m1 / led.m[alpha + 1] == pytest.approx(1.0, abs=1e-8)

    def test_telescoping(self, bm1_grid):
        mu = random_measure(bm1_grid, 11)
        led = moment_ledger(mu, 8)
        nu = mu
        for k in range(1, 4):
            nu = renewal_transform(nu)
            for alpha in (1, 2, 3):
                direct = moment(nu, alpha)
                assert direct == pytest.approx(math.exp(led.log_m[alpha + k] - led.log_m[k]), rel=1e-8)

    def test_ledger_invariants(self, bm1_grid):
        led = moment_ledger(GridMeasure.dirac(bm1_grid, 1.0), 20)
        assert led.log_m[0] == 0 and np.all(led.m > 0)
        assert np.all(led.ratios > 0) and not led.saturated

    def test_limit_estimate(self):
        assert limit_estimate(np.array([0.9, 0.6, 0.50001, 0.5])) == (0.5, True)
        value, ok = limit_estimate(np.array([0.9, 0.7, 0.6]))
        assert value == 0.6 and not ok


class TestTransform:
    @pytest.mark.parametrize("lam", [0.2, 0.35, 0.5])
    def test_fixed_point(self, bm1_grid, lam):
        nu = qsd(bm1_grid, lam)
        assert kolmogorov_distance(renewal_transform(nu), nu) < 2e-3

    def test_dirac_unit_speed(self, unit_grid):
        phi = renewal_transform(GridMeasure.dirac(unit_grid, 0.4))
        shape = np.minimum(unit_grid.nodes, 0.4)
        np.testing.assert_allclose(phi.density, shape / (0.4 - 0.4**2 / 2), rtol=1e-12)
        assert not phi.has_atoms

    def test_unit_mass(self, bm1_grid):
        phi = renewal_transform(random_measure(bm1_grid, 5))
        assert phi.total_mass() == pytest.approx(1.0, abs=1e-8)

    def test_zero_measure(self, bm1_grid):
        with pytest.raises(InvalidMomentError):
            renewal_transform(GridMeasure(bm1_grid, np.zeros_like(bm1_grid.nodes)))

    def test_non_fixed_points(self, bm1_grid):
        for mu in (GridMeasure.dirac(bm1_grid, 1.0), GridMeasure.uniform_in_m(bm1_grid, 0.0, 5.0)):
            assert kolmogorov_distance(renewal_transform(mu), mu) > 5e-2


class TestIterate:
    def test_qsd_is_invariant(self, bm1_grid):
        nu = qsd(bm1_grid, 0.35)
        res = iterate(nu, 6)
        np.testing.assert_allclose(res.ledger.ratios, 0.35, rtol=1e-6)
        for m in res.measures:
            assert kolmogorov_distance(m, nu) < 1e-6

    def test_dirac_to_minimal_qsd(self, bm1_grid):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RegimeWarning)
            res = iterate(GridMeasure.dirac(bm1_grid, 1.0), 30, lambda0=0.5)
        r = res.ledger.ratios
        assert np.all(np.diff(r[5:]) < 0)  # decreasing toward the limit from above
        assert r[-1] == pytest.approx(0.5, abs=3e-2)
        assert res.ledger.extrapolated == pytest.approx(0.5, abs=3e-3)
        assert res.kdist[-1] < res.kdist[4]

    def test_clamp_reports_regime(self, bm1_grid):
        with pytest.warns(RegimeWarning):
            res = iterate(GridMeasure.dirac(bm1_grid, 1.0), 10, lambda0=0.5, diagnostics=False)
        assert res.ledger.regime_violation and res.lambda_hat == pytest.approx(0.501)

    def test_mixture_ratios_approach_smaller_rate(self, bm1_grid):
        mix = GridMeasure.mixture([qsd(bm1_grid, 0.2), qsd(bm1_grid, 0.5)], [0.5, 0.5])
        # at R = 100 the truncated nu_0.2 drifts after n ~ 8; the full check runs at R = 200
        res = iterate(mix, 7, diagnostics=False)
        n = np.arange(1, 8)
        exact = (0.2 ** -(n - 1) + 0.5 ** -(n - 1)) / (0.2**-n + 0.5**-n)
        np.testing.assert_allclose(res.ledger.ratios, exact, rtol=1e-4)

    def test_trace_schema(self, bm1_grid):
        res = iterate(qsd(bm1_grid, 0.5), 3)
        rows = res.trace_rows()
        assert [r[0] for r in rows] == [1, 2, 3] and all(len(r) == 5 for r in rows)
        assert rows[0][1] == pytest.approx(2.0, rel=1e-6) and rows[0][2] == pytest.approx(0.5, rel=1e-6)


class TestSeries:
    def test_n1_is_first_density(self, bm1_grid):
        mu = random_measure(bm1_grid, 2)
        np.testing.assert_allclose(series_density(mu, 1).values, renewal_transform(mu).density, rtol=1e-13)

    @pytest.mark.parametrize("n", [2, 5, 8, 12])
    def test_two_routes_dirac(self, short_grid, n):
        mu = GridMeasure.dirac(short_grid, 1.0)
        res = iterate(mu, n, diagnostics=False)
        assert np.max(np.abs(series_density(mu, n, res.ledger).values - res.measures[-1].density)) < 1e-8

    def test_remainder_bound(self, short_grid):
        mu = GridMeasure.dirac(short_grid, 1.0)
        for n in (2, 4, 6):
            lhs, rhs = remainder_bound(mu, n)
            assert np.all(lhs <= rhs * (1 + 1e-12) + 1e-300)

    @pytest.mark.parametrize("n", [5, 10])
    def test_cancellation_detected(self, n):
        g = build_grid(bm_drift(1.0), 20.0, 1000)
        with pytest.warns(CancellationWarning):
            out = series_density(GridMeasure.dirac(g, 1.0), n)
        assert any("cancellation" in note for note in out.notes)

    def test_no_false_alarm(self, short_grid):
        with warnings.catch_warnings():
            warnings.simplefilter("error", CancellationWarning)
            out = series_density(GridMeasure.dirac(short_grid, 1.0), 12)
        assert out.notes == ()


class TestDistances:
    def test_identical(self, bm1_grid):
        nu = qsd(bm1_grid, 0.3)
        assert kolmogorov_distance(nu, nu) == 0.0

    def test_disjoint_diracs(self, bm1_grid):
        assert kolmogorov_distance(GridMeasure.dirac(bm1_grid, 1.0), GridMeasure.dirac(bm1_grid, 2.0)) == 1.0

    def test_regression_constant(self, bm1_grid):
        value = kolmogorov_distance(qsd(bm1_grid, 0.2), qsd(bm1_grid, 0.5))
        assert value == pytest.approx(KD_NU02_NU05, rel=1e-12)

    def test_closed_form_distance(self, bm1_grid):
        # sup |F_0.2 - F_0.5| from the closed-form Lebesgue densities
        x = np.linspace(0, 100, 200001)
        beta = math.sqrt(0.6)
        f02 = 0.4 * np.exp(-x) * np.sinh(beta * x) / beta
        f05 = x * np.exp(-x)
        F = lambda f: np.concatenate([[0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])  # noqa: E731
        assert KD_NU02_NU05 == pytest.approx(float(np.max(np.abs(F(f02) - F(f05)))), abs=2e-3)

    def test_ordering(self, bm1_grid):
        lo, hi = qsd(bm1_grid, 0.2), qsd(bm1_grid, 0.5)
        assert int(np.sum(hi.survival() > lo.survival() + 1e-10)) == 0


class TestContinuity:
    def test_continuity_point(self, bm1_grid):
        seq = [GridMeasure.dirac(bm1_grid, 1 + 1 / n) for n in (2, 4, 8, 16, 32)]
        rows = continuity_probe(seq, GridMeasure.dirac(bm1_grid, 1.0))
        assert all(a.m1_delta > b.m1_delta for a, b in zip(rows, rows[1:]))
        assert all(a.phi_distance > b.phi_distance for a, b in zip(rows, rows[1:]))
        assert rows[-1].phi_distance < 0.05

    def test_heavy_far_mass(self, bm1_grid):
        far = 0.9 * bm1_grid.R
        lim = GridMeasure.dirac(bm1_grid, 1.0)
        seq = [
            GridMeasure(bm1_grid, np.zeros_like(bm1_grid.nodes), [1.0, far], [1 - 1 / n, 1 / n])
            for n in (10, 100, 1000)
        ]
        rows = continuity_probe(seq, lim)
        # weak convergence to delta_1 while m_1 = (1 - 1/n) + far/n does not converge when far ~ n
        assert rows[-1].weak_distance == pytest.approx(1e-3)
        for row, n in zip(rows, (10, 100, 1000)):
            assert row.m1_delta == pytest.approx((far - 1) / n, rel=1e-3)
        assert rows[0].phi_distance > 0.5

    def test_constant_sequence(self, bm1_grid):
        mu = random_measure(bm1_grid, 1)
        rows = continuity_probe([mu, mu], mu)
        assert all(r.weak_distance == 0 and r.m1_delta == 0 and r.phi_distance == 0 for r in rows)
