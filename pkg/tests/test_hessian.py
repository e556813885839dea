"""Hessian assembly, spectra, traces, and the finite-difference probe."""

import numpy as np
import pytest

from pekar.hessian import (RealModeBasis, assemble_J, assemble_K,
                           e_hessian_gaps, export_spectrum_csv,
                           hessian_fd_check, k_quadratic_form, read_matrix,
                           smalll_direct, tail_extrapolation, trace_value,
                           trace_correction, write_matrix)
from pekar.lattice import (MomentumLattice, apply_partial, dealiased_product,
                           apply_multiplier, laplacian_power, l2_inner)
from pekar.scf import minimize_pekar
from pekar.schroedinger import HOperator

from conftest import LAMBDA_MODULE, rng_real_field


@pytest.fixture(scope="module")
def tiny_small_spec():
    """Assembled K at the constant minimizer, first shell only."""
    lat = MomentumLattice(1.0, 16)
    sol = minimize_pekar(lat, init="constant", tol=1e-10)
    spec = assemble_K(sol, 2 * np.pi * 1.2, tol=1e-12)
    return sol, spec


class TestRealModeBasis:
    def test_orthonormal_and_real(self):
        lat = MomentumLattice(2.0, 8)
        basis = RealModeBasis(lat, 0.9 * lat.nyquist_radius)
        for j in range(0, basis.size, 7):
            bj = basis.vector(j)
            assert bj.real_valued
            assert bj.norm() == pytest.approx(1.0, rel=1e-14)
            for l in range(0, j, 9):
                assert abs(l2_inner(basis.vector(l), bj)) < 1e-14

    def test_coords_roundtrip(self):
        lat = MomentumLattice(2.0, 8)
        basis = RealModeBasis(lat, 0.9 * lat.nyquist_radius)
        rng = np.random.default_rng(0)
        x = rng.standard_normal(basis.size)
        f = basis.field(x)
        assert np.max(np.abs(basis.coords(f) - x)) < 1e-14

    def test_cutoff_guard(self):
        lat = MomentumLattice(2.0, 8)
        with pytest.raises(ValueError, match="Nyquist"):
            RealModeBasis(lat, 2 * lat.nyquist_radius)


class TestSmallBoxOracle:
    def test_first_shell_diagonal(self, tiny_small_spec):
        _, spec = tiny_small_spec
        assert spec.size == 6  # first shell: 3 pairs -> 6 real vectors
        expect = 4.0 / (2 * np.pi) ** 4
        assert np.allclose(spec.eigenvalues, expect, rtol=1e-10)
        # hand value from the closed form: 4/(L^3 |k|^4) ~ 2.5665e-3
        assert spec.eigenvalues[0] == pytest.approx(2.5665e-3, rel=1e-4)

    def test_matrix_is_diagonal(self, tiny_small_spec):
        _, spec = tiny_small_spec
        off = spec.matrix - np.diag(np.diag(spec.matrix))
        assert np.max(np.abs(off)) < 1e-13

    def test_positive_semidefinite(self, tiny_small_spec):
        _, spec = tiny_small_spec
        rng = np.random.default_rng(1)
        for _ in range(5):
            v = rng.standard_normal(spec.size)
            assert v @ (spec.matrix @ v) >= -1e-8 * (v @ v)

    def test_trace_matches_direct_sum(self, tiny_small_spec):
        sol, spec = tiny_small_spec
        direct, tail_bound = smalll_direct(sol.lattice, spec.lambda_cut)
        assert spec.trace_correction == pytest.approx(direct, abs=1e-10)
        assert tail_bound > 0

    def test_first_shell_hand_value(self, tiny_small_spec):
        sol, spec = tiny_small_spec
        direct, _ = smalll_direct(sol.lattice, spec.lambda_cut)
        x = 4.0 / (2 * np.pi) ** 4
        assert direct == pytest.approx(6 * 0.5 * (1 - np.sqrt(1 - x)), rel=1e-12)


class TestSmallLDirect:
    def test_below_first_shell(self):
        lat = MomentumLattice(1.0, 16)
        value, _ = smalll_direct(lat, 0.9 * 2 * np.pi)
        assert value == 0.0

    def test_tail_bound_scales_inversely(self):
        lat = MomentumLattice(1.0, 32)
        _, b1 = smalll_direct(lat, 2 * np.pi * 4)
        _, b2 = smalll_direct(lat, 2 * np.pi * 8)
        assert b2 < b1
        assert b2 == pytest.approx(b1 / 2, rel=0.35)

    def test_regime_guard(self):
        # 4/(L^3 kmin^4) = 4 L/(2 pi)^4 > 1 for L above ~390
        lat = MomentumLattice(500.0, 16)
        with pytest.raises(ValueError, match="regime"):
            smalll_direct(lat, 0.1)

    def test_monotone_in_cutoff(self):
        lat = MomentumLattice(1.0, 32)
        vals = [smalll_direct(lat, 2 * np.pi * m)[0] for m in (1.5, 2.5, 3.5)]
        assert vals[0] < vals[1] < vals[2]


class TestTraceHelpers:
    def test_zero_spectrum(self):
        assert trace_value(np.zeros(10)) == 0.0

    def test_clamps_grazing(self):
        with pytest.warns(UserWarning, match="clamped"):
            v = trace_value(np.array([1.0 + 5e-8, 0.5]))
        assert v == pytest.approx(0.5 * (1 + 1 - np.sqrt(0.5)), rel=1e-12)

    def test_tail_needs_enough_eigenvalues(self):
        with pytest.raises(ValueError, match="at least"):
            tail_extrapolation(np.linspace(0.9, 0.1, 20))

    def test_tail_matches_exact_power_law(self):
        # synthetic spectrum exactly c j^{-4/3}: the tail model must
        # reproduce the analytically summed remainder
        c = 1e-3
        N = 400
        j = np.arange(1, N + 1)
        ev = c * j ** (-4.0 / 3.0)
        tail = tail_extrapolation(ev)
        jj = np.arange(N + 1, 400 * N)
        exact = 0.5 * np.sum(1 - np.sqrt(1 - c * jj ** (-4.0 / 3.0)))
        exact += 0.25 * c * 3.0 * (400.0 * N) ** (-1.0 / 3.0)
        assert tail == pytest.approx(exact, rel=2e-3)


class TestLocalizedSpectrum:
    def test_gradient_reproduction(self, loc_solution):
        # the operator K reproduces the translation modes; limited only by
        # the solver tolerances, not by any band truncation
        from pekar.hessian import apply_K_operator
        from pekar.schroedinger import ground_state

        gs = ground_state(loc_solution.phi, tol=1e-11, init=loc_solution.psi)
        for ax in range(3):
            dphi = apply_partial(loc_solution.phi, ax)
            out = apply_K_operator(loc_solution, dphi, tol=1e-11, gs=gs)
            assert (out - dphi).norm() / dphi.norm() <= 1e-6

    def test_exactly_three_near_unity(self, loc_spec_wide):
        ev = loc_spec_wide.eigenvalues
        assert np.sum(ev > 1.0 - 1e-5) == 3
        assert 1.0 - ev[3] > 1e-3

    def test_angle_and_asymmetry(self, loc_spec_wide):
        assert loc_spec_wide.zero_mode_angle <= 1e-3
        assert loc_spec_wide.asymmetry <= 1e-9

    def test_quadratic_form_nonnegative(self, loc_spec, loc_solution):
        rng = np.random.default_rng(2)
        for _ in range(5):
            v = rng.standard_normal(loc_spec.size)
            assert v @ (loc_spec.matrix @ v) >= -1e-8 * (v @ v)

    def test_out_of_band_direction_rejected(self, loc_solution, loc_spec):
        lat = loc_solution.lattice
        # a direction essentially above the module band
        hi = rng_real_field(lat, seed=77, zero_mean=True)
        c = np.where(lat.kabs > loc_spec.lambda_cut, hi.coeffs, 0.0)
        from pekar.lattice import Field

        v = Field(lat, c, real_valued=True).normalized()
        with pytest.raises(ValueError, match="band"):
            k_quadratic_form(loc_spec, v)


class TestJ:
    def test_symmetric_and_psd(self, loc_solution, loc_spec):
        J = assemble_J(loc_solution, LAMBDA_MODULE, basis=loc_spec.basis)
        assert np.max(np.abs(J - J.T)) <= 1e-12 * np.max(np.abs(J))
        ev = np.linalg.eigvalsh(J)
        assert ev.min() >= -1e-12 * ev.max()

    def test_laplacian_envelope_smallbox(self):
        # J eigenvalues against the ordered Laplacian eigenvalues: envelope
        # (l+1)^-2, fitted exponent at most -2 + 0.2
        lat = MomentumLattice(1.0, 16)
        sol = minimize_pekar(lat, init="constant", tol=1e-10)
        basis = RealModeBasis(lat, 2 * np.pi * 3.2)
        J = assemble_J(sol, basis.lambda_cut, basis=basis)
        diag = np.diag(J)  # diagonal at the constant minimizer
        lshift = basis.laplacian_eigs + 1.0
        fit = np.polyfit(np.log(lshift), np.log(diag), 1)
        assert fit[0] <= -2.0 + 0.2

    def test_trace_stable_under_doubling(self):
        lat = MomentumLattice(1.0, 16)
        sol = minimize_pekar(lat, init="constant", tol=1e-10)
        tr = {}
        for lam_m in (2.2, 4.4):
            basis = RealModeBasis(lat, 2 * np.pi * lam_m)
            J = assemble_J(sol, basis.lambda_cut, basis=basis)
            # (l+1)^-2 envelope constant fitted on the outermost shells,
            # integrated over the mode density beyond the cutoff
            diag = np.diag(J)
            lshift = basis.laplacian_eigs + 1.0
            top = basis.laplacian_eigs >= 0.25 * basis.laplacian_eigs.max()
            c_env = np.mean(diag[top] * lshift[top] ** 2)
            lmax = basis.laplacian_eigs.max()
            tail = c_env * 4 * np.pi * (lat.L / (2 * np.pi)) ** 3 / np.sqrt(lmax)
            tr[lam_m] = np.trace(J) + tail
        drift = abs(tr[4.4] - tr[2.2]) / abs(tr[4.4])
        assert drift <= 0.01


class TestFdCheck:
    def test_gradient_direction_is_flat(self, loc_solution, loc_spec_wide):
        # the banded gradient mode: both the quadratic form and the
        # finite-difference quotient vanish to the zero-mode defect scale.
        # eps must stay well below ||d phi||, else the probe walks a finite
        # distance around the orbit
        basis = loc_spec_wide.basis
        dphi = apply_partial(loc_solution.phi, 0)
        v = basis.field(basis.coords(dphi))
        v = v.with_coeffs(v.coeffs / v.norm())
        quad = k_quadratic_form(loc_spec_wide, v)
        assert abs(quad) <= 1e-5
        eps = 3e-5
        d = hessian_fd_check(loc_solution, v, eps, loc_spec_wide, tol=1e-11)
        assert d <= 1e-5 + 0.1 * eps

    def test_richardson_ratio(self, loc_solution, loc_spec):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(loc_spec.size)
        v = loc_spec.basis.field(x)
        v = v.with_coeffs(v.coeffs / v.norm())
        d1 = hessian_fd_check(loc_solution, v, 1e-2, loc_spec, tol=1e-11)
        d2 = hessian_fd_check(loc_solution, v, 5e-3, loc_spec, tol=1e-11)
        assert 1.5 <= d1 / d2 <= 3.0

    def test_validation(self, loc_solution, loc_spec):
        from pekar.lattice import constant_field

        with pytest.raises(ValueError, match="zero mean"):
            hessian_fd_check(loc_solution, constant_field(loc_solution.lattice),
                             1e-2, loc_spec)


class TestEHessianGaps:
    def test_gaps_positive(self, loc_solution):
        probe = e_hessian_gaps(loc_solution, tol=1e-8)
        assert probe.h_prime > 0
        assert probe.h_doubleprime > 0
        assert np.isfinite(probe.h_prime) and np.isfinite(probe.h_doubleprime)

    def test_euler_lagrange_kernel(self, loc_solution):
        # L_psi psi = 0 is the Euler-Lagrange equation
        sol = loc_solution
        op = HOperator(sol.phi)
        r = op.apply_coeffs(np.asarray(sol.psi.coeffs)) - sol.mu * np.asarray(sol.psi.coeffs)
        assert np.linalg.norm(r) <= 1e-8

    def test_gradient_zero_modes(self, loc_solution):
        # (L - 4X) has the translation modes in its kernel
        sol = loc_solution
        lat = sol.lattice
        op = HOperator(sol.phi)
        inv_lap = laplacian_power(lat, -1.0)
        for ax in range(3):
            d = apply_partial(sol.psi, ax)
            f = d.with_coeffs(d.coeffs / d.norm())
            Lf = op.apply_coeffs(np.asarray(f.coeffs)) - sol.mu * np.asarray(f.coeffs)
            xf = dealiased_product(
                sol.psi, apply_multiplier(dealiased_product(sol.psi, f), inv_lap))
            rayleigh = float(np.vdot(f.coeffs, Lf - 4.0 * xf.coeffs).real)
            assert abs(rayleigh) <= 1e-6


class TestExports:
    def test_spectrum_csv(self, tmp_path, tiny_small_spec):
        _, spec = tiny_small_spec
        path = tmp_path / "spec.csv"
        export_spectrum_csv(spec, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "j,k_j,one_minus_sqrt,cumulative_trace"
        assert len(lines) == spec.size + 1
        last = float(lines[-1].split(",")[-1])
        assert last == pytest.approx(spec.trace_correction, rel=1e-9)

    def test_matrix_roundtrip(self, tmp_path, tiny_small_spec):
        _, spec = tiny_small_spec
        path = tmp_path / "K.pekm"
        write_matrix(path, spec.matrix)
        back = read_matrix(path)
        assert np.array_equal(back, spec.matrix)

    def test_trace_correction_api(self, loc_spec_wide):
        value, tail = trace_correction(loc_spec_wide)
        assert value == pytest.approx(loc_spec_wide.trace_correction, rel=1e-14)
        assert np.isfinite(tail)
