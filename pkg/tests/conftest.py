"""Shared fixtures: the expensive converged solutions and Hessian spectra
are computed once per session and reused across modules."""

import numpy as np
import pytest

from pekar.hessian import assemble_K
from pekar.lattice import Field, MomentumLattice, from_real_space, l2_inner
from pekar.scf import Regime, minimize_pekar

THREADS = 2

# localized-regime parameters used across the suite: comfortably above the
# empirical constant/localized transition (L_c ~ 310 at these tolerances)
# while keeping the minimizer broad, so the Hessian band stays small
LOC_L = 360.0
LOC_N = 20
LOC_WIDTH = 45.0
LOC_TOL = 1e-9
LAMBDA_ZERO_MODES = 0.15   # captures the gradient modes to ~1e-3 in norm
LAMBDA_MODULE = 0.10       # cheaper band for module-level tests

SMALL_L = 1.0
SMALL_N = 32


def rng_real_field(lat, seed, normalized=True, zero_mean=False):
    rng = np.random.default_rng(seed)
    f = from_real_space(lat, rng.standard_normal((lat.n,) * 3))
    if zero_mean:
        c = np.array(f.coeffs)
        c[0, 0, 0] = 0.0
        f = Field(lat, c, real_valued=True)
    return f.normalized() if normalized else f


def rng_complex_field(lat, seed, normalized=True):
    """Random complex state on the Nyquist-free band (where products and
    densities are defined)."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((lat.n,) * 3) + 1j * rng.standard_normal((lat.n,) * 3)
    c[lat.nyquist_mask] = 0.0
    f = Field(lat, c)
    return f.normalized() if normalized else f


def project_off(f, g):
    """f minus its component along normalized g."""
    g = g.normalized()
    return f - l2_inner(g, f) * g


@pytest.fixture(scope="session")
def small_solution():
    lat = MomentumLattice(SMALL_L, SMALL_N)
    sol = minimize_pekar(lat, init="constant", tol=1e-10)
    assert sol.regime is Regime.CONSTANT
    return sol


@pytest.fixture(scope="session")
def loc_solution():
    lat = MomentumLattice(LOC_L, LOC_N)
    sol = minimize_pekar(lat, init="gaussian", width=LOC_WIDTH, tol=LOC_TOL,
                         max_outer=400)
    assert sol.regime is Regime.LOCALIZED
    return sol


@pytest.fixture(scope="session")
def loc_spec(loc_solution):
    """Module-grade K spectrum on a moderate band."""
    return assemble_K(loc_solution, LAMBDA_MODULE, tol=1e-11, threads=THREADS)


@pytest.fixture(scope="session")
def loc_spec_wide(loc_solution):
    """Acceptance-grade K spectrum: band wide enough for the zero modes."""
    return assemble_K(loc_solution, LAMBDA_ZERO_MODES, tol=1e-11,
                      threads=THREADS)
