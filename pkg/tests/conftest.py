import math

import pytest

from qsdlab.functions import Affine, Constant
from qsdlab.grid import build_grid
from qsdlab.model import DiffusionSpec


def bm_drift(c: float = 1.0, ref_point: float = 1.0) -> DiffusionSpec:
    """Brownian motion with drift -c: generator (1/2) u'' - c u'."""
    return DiffusionSpec.from_coefficients(Constant(0.5), Constant(-c), ref_point=ref_point, name=f"bm-drift-{c:g}")


def standard_bm() -> DiffusionSpec:
    return DiffusionSpec.from_coefficients(Constant(0.5), Constant(0.0), ref_point=1.0, name="bm")


def ou(rate: float = 1.0, ref_point: float = 1.0) -> DiffusionSpec:
    return DiffusionSpec.from_coefficients(Constant(0.5), Affine(-rate, 0.0), ref_point=ref_point, name="ou")


def lebesgue_speed(ell=math.inf) -> DiffusionSpec:
    """Unit speed and scale densities (generator u'')."""
    return DiffusionSpec.from_measures(Constant(1.0), Constant(1.0), ell=ell, ref_point=min(1.0, ell / 2))


@pytest.fixture(scope="session")
def bm1():
    return bm_drift(1.0)


@pytest.fixture(scope="session")
def bm1_grid(bm1):
    """Default working grid for drift -1 (truncation bias of lambda0 below 1e-3)."""
    return build_grid(bm1, 100.0, 4000)


@pytest.fixture(scope="session")
def bm1_grid_small(bm1):
    return build_grid(bm1, 30.0, 1500)
