import math

import numpy as np
import pytest

from conftest import bm_drift, ou, standard_bm
from qsdlab.eigen import (
    accepts,
    check_normalization,
    is_nondecreasing,
    lambda0,
    lambda0_matrix,
    ode_residual,
    psi,
    qsd,
)
from qsdlab.errors import BracketFailureError, SeriesBudgetError, UnsupportedSpecError
from qsdlab.functions import Constant
from qsdlab.model import DiffusionSpec
from qsdlab.grid import build_grid, default_radius

# Matrix-oracle values (finite differences in x, R = 100, n = 4000), frozen on first computation.
MATRIX_ORACLE = {0.5: 0.125476, 1.0: 0.500510, 2.0: 2.000905}


@pytest.fixture(scope="module")
def drift_grid_ref0():
    """Drift -1 with s(x) = (e^{2x} - 1)/2, matching the closed forms below."""
    return build_grid(bm_drift(1.0, ref_point=0.0), 30.0, 3000)


def psi_drift_closed(lam, x):
    beta = math.sqrt(1 - 2 * lam)
    return np.exp(x) * np.sinh(beta * x) / beta


class TestPsi:
    def test_zero_lambda_is_scale(self, bm1_grid):
        res = psi(bm1_grid, 0.0)
        assert np.array_equal(res.psi.values, bm1_grid.scale) and res.terms_used == 1

    def test_standard_bm_sinh(self):
        g = build_grid(standard_bm(), 2.0, 2000)
        res = psi(g, 0.5)
        i = int(np.argmin(np.abs(g.nodes - 1.0)))
        assert g.nodes[i] == pytest.approx(1.0)
        assert res.psi.values[i] == pytest.approx(math.sinh(1.0), rel=1e-6)
        assert res.method == "series" and res.psi.values[0] == 0.0

    @pytest.mark.parametrize("method", ["series", "volterra"])
    def test_drift_closed_form(self, drift_grid_ref0, method):
        g = drift_grid_ref0
        res = psi(g, -0.375, method=method)
        i = int(np.argmin(np.abs(g.nodes - 1.0)))
        assert res.psi.values[i] == pytest.approx(2.8329, abs=5e-4)
        mask = g.nodes <= 5
        np.testing.assert_allclose(res.psi.values[mask], psi_drift_closed(0.375, g.nodes[mask]), rtol=1e-4, atol=1e-12)

    def test_series_matches_forward_substitution(self):
        g = build_grid(bm_drift(1.0, ref_point=0.0), 4.0, 800)
        a = psi(g, -0.3, method="series").psi.values
        b = psi(g, -0.3, method="volterra").psi.values
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        c = psi(g, 0.7, method="series").psi.values
        d = psi(g, 0.7, method="volterra").psi.values
        np.testing.assert_allclose(c, d, rtol=1e-10)

    def test_series_budget(self, drift_grid_ref0):
        with pytest.raises(SeriesBudgetError):
            psi(drift_grid_ref0, 0.4, method="series", max_terms=3)

    def test_refinement_order(self):
        spec = bm_drift(1.0, ref_point=0.0)
        errs = []
        for N in (250, 500, 1000):
            g = build_grid(spec, 5.0, N)
            v = psi(g, -0.375).psi.values
            errs.append(float(np.max(np.abs(v - psi_drift_closed(0.375, g.nodes)))))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders >= 1.0)

    def test_discrete_ode_residual(self, drift_grid_ref0):
        res = psi(drift_grid_ref0, -0.2)
        assert float(np.max(ode_residual(drift_grid_ref0, res)[:2000])) < 1e-8

    def test_psi_decreasing_in_lambda(self, bm1_grid):
        vals = [psi(bm1_grid, -lam).psi.values for lam in (0.1, 0.3, 0.5)]
        assert np.all(vals[0] >= vals[1]) and np.all(vals[1] >= vals[2])


class TestLambda0:
    @pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
    def test_drift_closed_form(self, c):
        g = build_grid(bm_drift(c), 100.0, 4000)
        sb = lambda0(g, 1e-4)
        assert sb.lambda0 == pytest.approx(c * c / 2, abs=1e-3)
        lo, hi = sb.bracket
        assert lo <= sb.lambda0 <= hi and hi - lo <= 1e-4

    @pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
    def test_matrix_oracle(self, c):
        value = lambda0_matrix(bm_drift(c), 100.0, 4000)
        assert value == pytest.approx(MATRIX_ORACLE[c], abs=2e-6)
        assert value == pytest.approx(c * c / 2, abs=1e-3)

    def test_ou(self):
        spec = ou()
        R = default_radius(spec)
        g = build_grid(spec, R, 4000)
        oracle = lambda0_matrix(spec, R, 8000)
        assert oracle == pytest.approx(1.0, abs=1e-4)
        assert lambda0(g, 1e-5).lambda0 == pytest.approx(1.0, abs=1e-3)

    def test_reference_point_invariance(self):
        values = [lambda0(build_grid(ou(ref_point=c), 16.0, 3000), 1e-5).lambda0 for c in (0.5, 2.0)]
        assert values[0] == pytest.approx(values[1], abs=2e-5)

    def test_truncation_monotone_in_radius(self):
        # the truncated problem over-estimates lambda0; the bias shrinks as R grows
        values = [lambda0(build_grid(bm_drift(1.0), R, int(40 * R)), 1e-5).lambda0 for R in (25.0, 50.0, 100.0)]
        assert values[0] >= values[1] >= values[2] >= 0.5 - 1e-5

    def test_bracket_failure(self):
        g = build_grid(bm_drift(2.0), 50.0, 2000)
        with pytest.raises(BracketFailureError):
            lambda0(g, 1e-4, max_doublings=0)

    def test_ties_count_as_nondecreasing(self):
        assert is_nondecreasing(np.array([0.0, 1.0, 1.0 - 1e-14, 2.0]))
        assert not is_nondecreasing(np.array([0.0, 1.0, 1.0 - 1e-9, 2.0]))

    def test_nonnegative_iff_nondecreasing(self):
        # monotone implies nonnegative (psi(0) = 0); the converse holds up to a window that shrinks with R
        gaps = []
        for R in (30.0, 100.0):
            g = build_grid(bm_drift(1.0), R, 4000)
            thresholds = []
            for pred in (is_nondecreasing, lambda v: bool(np.all(v >= 0))):
                lo, hi = 0.0, 1.0
                while hi - lo > 1e-9:
                    mid = 0.5 * (lo + hi)
                    lo, hi = (mid, hi) if pred(psi(g, -mid).psi.values) else (lo, mid)
                thresholds.append(lo)
            assert thresholds[0] <= thresholds[1] + 1e-9
            gaps.append(thresholds[1] - thresholds[0])
        assert gaps[1] < gaps[0] and gaps[1] < 1e-4

    def test_accepts_brackets_truth(self, bm1_grid):
        assert accepts(bm1_grid, 0.49) and not accepts(bm1_grid, 0.51)


class TestNormalization:
    def test_bottom(self):
        g = build_grid(bm_drift(1.0), 30.0, 3000)
        assert check_normalization(g, 0.5).residual < 1e-3

    def test_interior(self):
        g = build_grid(bm_drift(1.0), 40.0, 4000)
        nc = check_normalization(g, 0.2)
        assert nc.residual < 1e-3 and not nc.flagged

    def test_tiny_radius_flagged(self):
        g = build_grid(bm_drift(1.0), 2.0, 400)
        nc = check_normalization(g, 0.5)
        assert nc.flagged and nc.residual > 1e-2


class TestQSD:
    @pytest.mark.parametrize("lam", [0.2, 0.35, 0.5])
    def test_lebesgue_density_l1(self, bm1_grid, lam):
        nu = qsd(bm1_grid, lam)
        x = bm1_grid.nodes
        if lam == 0.5:
            exact = 2 * lam * x * np.exp(-x)
        else:
            beta = math.sqrt(1 - 2 * lam)
            exact = 2 * lam * np.exp(-x) * np.sinh(beta * x) / beta
        diff = np.abs(nu.lebesgue_density() - exact)
        l1 = float(np.sum(0.5 * (diff[1:] + diff[:-1]) * np.diff(x)))
        assert l1 < 1e-2

    def test_unit_mass_and_cdf(self, bm1_grid):
        nu = qsd(bm1_grid, 0.35)
        assert nu.total_mass() == pytest.approx(1.0, abs=1e-12)
        cdf = nu.cdf()
        assert cdf[0] == 0 and cdf[-1] == pytest.approx(1.0) and np.all(np.diff(cdf) >= -1e-15)


class TestFiniteScale:
    def test_bisection_unavailable(self):
        # upward drift: s(inf) < inf, the process escapes and the criterion does not apply
        g = build_grid(bm_drift(-1.0), 20.0, 400)
        with pytest.raises(UnsupportedSpecError):
            lambda0(g)

    def test_reflecting_interval_matrix(self):
        # Brownian motion on [0, 1] reflected at 1: lambda0 = pi^2/8 for generator u''/2
        spec = DiffusionSpec.from_measures(Constant(2.0), Constant(1.0), ell=1.0, ref_point=0.5)
        with pytest.raises(UnsupportedSpecError):
            lambda0(build_grid(spec, 0.99, 200))
        assert lambda0_matrix(spec, 1.0, 4000) == pytest.approx(math.pi**2 / 8, rel=1e-4)
