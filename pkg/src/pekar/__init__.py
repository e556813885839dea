"""Fourier-spectral toolkit for the classical polaron ground problem on the
3-torus: Pekar minimizers, Hessian spectra, the semiclassical correction
coefficient, and the orbit geometry around the minimizer manifold."""

from .functionals import (EnergyBreakdown, energy_E, energy_F, energy_G,
                          potential, sigma_field)
from .greens import (green_kernel, green_kernel_grid, green_self_limit,
                     green_truncated_sum)
from .hessian import (EHessianProbe, HessianSpectrum, RealModeBasis,
                      apply_K_operator, assemble_J, assemble_K,
                      e_hessian_gaps, export_spectrum_csv, hessian_fd_check,
                      smalll_direct, trace_correction)
from .lattice import (Field, MomentumLattice, Multiplier, apply_multiplier,
                      apply_partial, constant_field, coupling_field,
                      coupling_remainder, dealiased_product, density,
                      from_real_space, l2_inner, laplacian_power, read_field,
                      regrid, to_real_space, translate, write_field, wt_inner,
                      wt_norm, wt_multiplier, zero_field)
from .orbit import (AdaptedBasis, OrbitDecomposition, adapted_basis,
                    gross_decompose, jacobian_A0, orbit_distance)
from .scf import (PekarSolution, Regime, coercivity_probe,
                  euler_lagrange_residual, gaussian_bump, load_solution,
                  locate_transition, minimize_pekar, refine_solution,
                  save_solution, symmetry_fix)
from .schroedinger import (GroundState, SolverFailure, apply_h, ground_state,
                           projected_resolvent)
from .sums import (ScalingFit, fit_power_law, gross_sums, ly_norm, mode_count,
                   outer_trace_sum)

__version__ = "0.1.0"
