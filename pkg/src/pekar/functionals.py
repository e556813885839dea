"""The classical (Pekar) energy functionals on the torus.

Evaluates, for normalized electron states psi and real field configurations
phi,

    G_L(psi, phi) = <psi| -Delta + V_phi |psi> + ||phi||^2,
    E_L(psi)      = T_L(psi) - W_L(psi)        (phi minimized out),
    F_L(phi)      = ||phi||^2 + e(phi)         (psi minimized out),

with the derived fields sigma_psi = (-Delta)^(-1/2) |psi|^2 and
V_phi = -2 (-Delta)^(-1/2) phi.  The interaction W_L is always evaluated in
Fourier space from the density coefficients, never through the real-space
kernel, so the diagonal multiplier is exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .lattice import (Field, apply_multiplier, density, dealiased_product,
                      laplacian_power, l2_inner)

NORMALIZATION_SILENT_DRIFT = 1e-6


@dataclass(frozen=True)
class EnergyBreakdown:
    """T/W split of E_L with the chemical potential mu = T - 2W."""

    kinetic: float
    interaction: float
    total: float
    chemical_potential: float
    normalization_drift: float = 0.0


def sigma_field(psi: Field) -> Field:
    """sigma_psi = (-Delta)^(-1/2) |psi|^2, zero mode dropped."""
    rho = density(psi)
    return apply_multiplier(rho, laplacian_power(psi.lattice, -0.5))


def potential(phi: Field) -> Field:
    """V_phi = -2 (-Delta)^(-1/2) phi, zero mode dropped."""
    if not phi.real_valued:
        raise ValueError("V_phi is defined for real-valued phi")
    return -2.0 * apply_multiplier(phi, laplacian_power(phi.lattice, -0.5))


def _normalized_with_drift(psi: Field):
    nrm = psi.norm()
    if nrm == 0.0:
        raise ValueError("energy of the zero field is undefined")
    drift = abs(nrm - 1.0)
    if drift > NORMALIZATION_SILENT_DRIFT:
        warnings.warn(f"input state renormalized; ||psi|| was off by {drift:.3e}",
                      stacklevel=3)
    if drift > 0:
        psi = psi.with_coeffs(psi.coeffs / nrm)
    return psi, drift


def energy_E(psi: Field) -> EnergyBreakdown:
    """E_L(psi) = T_L - W_L with W_L = sum_{k!=0} |(rho_psi)_k|^2 / |k|^2."""
    psi, drift = _normalized_with_drift(psi)
    lat = psi.lattice
    T = float(np.sum(lat.k2 * np.abs(psi.coeffs) ** 2))
    rho = density(psi)
    inv_k2 = laplacian_power(lat, -1.0).weights
    W = float(np.sum(inv_k2 * np.abs(rho.coeffs) ** 2))
    return EnergyBreakdown(kinetic=T, interaction=W, total=T - W,
                           chemical_potential=T - 2.0 * W,
                           normalization_drift=drift)


def energy_G(psi: Field, phi: Field) -> float:
    """G_L(psi, phi) = <psi| h_phi |psi> + ||phi||^2."""
    psi, _ = _normalized_with_drift(psi)
    lat = psi.lattice
    T = float(np.sum(lat.k2 * np.abs(psi.coeffs) ** 2))
    V = potential(phi)
    Vpsi = dealiased_product(V, psi)
    inter = float(np.real(l2_inner(psi, Vpsi)))
    return T + inter + phi.norm() ** 2


def energy_F(phi: Field, tol: float = 1e-10, ground_state_hint: Field = None) -> float:
    """F_L(phi) = ||phi||^2 + inf spec h_phi (ground state solved to tol)."""
    from .schroedinger import ground_state  # deferred: avoids import cycle

    gs = ground_state(phi, tol=tol, init=ground_state_hint)
    return phi.norm() ** 2 + gs.energy
