"""Geometry of the minimizer manifold: orbit distances and Gross coordinates.

The translate orbit of the minimizing field is a three-dimensional manifold;
near it, a field splits uniquely into a translate of the minimizer plus a
transverse component orthogonal (in the weighted metric) to the gradient
directions.  The optimal translate maximizes the weighted correlation

    C(y) = sum_k W_T(k) conj(phi_k) (phi_L)_k exp(-i k.y),

evaluated on the full grid by one FFT and then polished by Newton iteration
on the trigonometric interpolant.  A grid scan precedes the local step
because the correlation can have near-degenerate maxima at moderate L.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla

from .hessian import RealModeBasis
from .lattice import (Field, apply_partial, translate, wt_inner, wt_norm,
                      _check_same_lattice)
from .scf import PekarSolution

NEWTON_TOL = 1e-10
NEWTON_MAX_STEPS = 60
DEGENERATE_MAXIMA_WINDOW = 1e-6


@dataclass(frozen=True)
class OrbitDistance:
    """Optimal translate and distance to the orbit of the minimizer."""

    y: np.ndarray
    dist: float
    correlation: float
    candidates: tuple = ()


@dataclass(frozen=True)
class OrbitDecomposition:
    """phi = phi_L^y + v^y with v stored in the y = 0 frame."""

    y: np.ndarray
    v: Field
    dist: float
    T: float
    ortho_residual: float


class _ModeSum:
    """C(y) = sum_k d_k exp(-i k.y) and its y-derivatives, on demand."""

    def __init__(self, lat, d):
        self.lat = lat
        mask = np.abs(d) > 1e-300
        self.d = d[mask]
        self.K = np.stack([lat.kx[mask], lat.ky[mask], lat.kz[mask]], axis=-1)

    def value(self, y):
        ph = np.exp(-1j * (self.K @ y))
        return float(np.real(np.sum(self.d * ph)))

    def value_grad_hess(self, y):
        ph = np.exp(-1j * (self.K @ y))
        w = self.d * ph
        val = float(np.real(np.sum(w)))
        grad = np.real(np.sum(w[:, None] * (-1j) * self.K, axis=0))
        hess = -np.real(np.einsum("n,ni,nj->ij", w, self.K, self.K))
        return val, grad, hess

    def complex_value(self, y):
        ph = np.exp(-1j * (self.K @ y))
        return complex(np.sum(self.d * ph))


def _grid_correlation(lat, d):
    """C evaluated at every grid translate y_j (one transform)."""
    return np.real(sfft.fftn(d * lat.center_phase))


def _wrap(y, L):
    return (np.asarray(y, dtype=float) + L / 2.0) % L - L / 2.0


def _newton_maximize(ms: _ModeSum, y0, L):
    """Polish a correlation maximum to NEWTON_TOL in y."""
    y = np.array(y0, dtype=float)
    for _ in range(NEWTON_MAX_STEPS):
        val, grad, hess = ms.value_grad_hess(y)
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = grad * (L / (2 * np.pi)) ** 2
        if not np.all(np.isfinite(step)):
            break
        # keep the step inside one grid cell; scans start near the optimum
        lim = L / max(ms.lat.n, 1)
        norm = np.linalg.norm(step)
        if norm > lim:
            step *= lim / norm
        ynew = y + step
        if ms.value(ynew) < val - 1e-15 * max(abs(val), 1.0):
            step *= 0.5
            ynew = y + step
        y = ynew
        if np.linalg.norm(step) <= NEWTON_TOL:
            break
    return _wrap(y, L)


def orbit_distance(phi: Field, sol: PekarSolution, T: float) -> OrbitDistance:
    """W_T distance of phi to the translate orbit of phi_L.

    Scans the correlation on the full grid, refines with Newton, and reports
    near-degenerate maxima (values within 1e-6 of the best, in distinct
    basins); the lexicographically smaller translate wins in that case.
    """
    _check_same_lattice(phi, sol.phi)
    lat = phi.lattice
    w = np.where(lat.kabs <= T, 1.0, 1.0 / (lat.k2 + 1.0))
    d = w * np.conj(phi.coeffs) * sol.phi.coeffs
    grid = _grid_correlation(lat, d)
    ms = _ModeSum(lat, d)
    ax = lat.grid_axis()

    best_flat = int(np.argmax(grid))
    scale = max(wt_norm(phi, T) * wt_norm(sol.phi, T), 1e-300)
    near = np.argwhere(grid >= grid.ravel()[best_flat] - DEGENERATE_MAXIMA_WINDOW * scale)
    best_idx = np.array(np.unravel_index(best_flat, grid.shape))
    candidates = []
    for idx in near:
        sep = np.abs(idx - best_idx)
        sep = np.minimum(sep, lat.n - sep)
        if np.all(sep <= 1) and candidates:
            continue  # same basin as an existing candidate
        y0 = ax[idx]
        y = _newton_maximize(ms, y0, lat.L)
        candidates.append((y, ms.value(y)))
        if len(candidates) >= 4:
            break

    cbest = max(c[1] for c in candidates)
    winners = [c for c in candidates if c[1] >= cbest - DEGENERATE_MAXIMA_WINDOW * scale]
    if len(winners) > 1:
        warnings.warn(f"near-degenerate correlation maxima at "
                      f"{[tuple(np.round(w0[0], 6)) for w0 in winners]}; picking the "
                      f"lexicographically smaller translate", stacklevel=2)
        winners.sort(key=lambda c: tuple(c[0]))
    y_star, corr = winners[0]
    dist2 = wt_norm(phi, T) ** 2 + wt_norm(sol.phi, T) ** 2 - 2.0 * corr
    dist = float(np.sqrt(max(dist2, 0.0)))
    return OrbitDistance(y=y_star, dist=dist, correlation=float(corr),
                         candidates=tuple(tuple(c[0]) for c in candidates))


def gross_decompose(phi: Field, sol: PekarSolution, T: float,
                    eps_threshold: float = None) -> OrbitDecomposition:
    """Unique near-orbit splitting phi = phi_L^y + v^y.

    Valid inside the tubular neighborhood; the default validity threshold is
    0.1 ||phi_L||_{W_T}.  v is translated back to the y = 0 frame so that
    decompositions of different fields are comparable, and satisfies the
    first-order orthogonality <v, W_T d_j phi_L> = 0 up to the translation
    solver's tolerance.
    """
    od = orbit_distance(phi, sol, T)
    if eps_threshold is None:
        eps_threshold = 0.1 * wt_norm(sol.phi, T)
    if od.dist > eps_threshold:
        raise ValueError(f"W_T distance {od.dist:.3e} exceeds the tubular "
                         f"neighborhood threshold {eps_threshold:.3e}")
    v = translate(phi, -od.y) - sol.phi
    resid = max(abs(wt_inner(v, apply_partial(sol.phi, axis), T))
                for axis in range(3))
    return OrbitDecomposition(y=od.y, v=v, dist=od.dist, T=float(T),
                              ortho_residual=float(resid))


def h1_orbit_distance(f: Field, psi_ref: Field) -> float:
    """H^1 distance of f to the phase/translate orbit of psi_ref.

    The phase is optimized analytically (modulus of the inner product), the
    translate by grid scan plus Newton on |C(y)|^2.
    """
    _check_same_lattice(f, psi_ref)
    lat = f.lattice
    w = 1.0 + lat.k2
    d = w * np.conj(f.coeffs) * psi_ref.coeffs
    # |C|^2 on the grid via its real and imaginary transforms
    Cg = sfft.fftn(d * lat.center_phase)
    mod2 = np.abs(Cg) ** 2
    idx = np.array(np.unravel_index(int(np.argmax(mod2)), mod2.shape))
    ax = lat.grid_axis()
    y = ax[idx]
    ms = _ModeSum(lat, d)
    for _ in range(NEWTON_MAX_STEPS):
        # Newton on g(y) = |C(y)|^2 assembled from C and its derivatives
        ph = np.exp(-1j * (ms.K @ y))
        wv = ms.d * ph
        C = np.sum(wv)
        dC = np.sum(wv[:, None] * (-1j) * ms.K, axis=0)
        d2C = -np.einsum("n,ni,nj->ij", wv, ms.K, ms.K)
        grad = 2.0 * np.real(np.conj(C) * dC)
        hess = 2.0 * np.real(np.conj(C) * d2C + np.outer(np.conj(dC), dC))
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        lim = lat.L / lat.n
        if np.linalg.norm(step) > lim:
            step *= lim / np.linalg.norm(step)
        y = y + step
        if np.linalg.norm(step) <= NEWTON_TOL:
            break
    corr = abs(ms.complex_value(y))
    na = float(np.sum(w * np.abs(f.coeffs) ** 2))
    nb = float(np.sum(w * np.abs(psi_ref.coeffs) ** 2))
    return float(np.sqrt(max(na + nb - 2.0 * corr, 0.0)))


# ---------------------------------------------------------------------------
# adapted basis and the Jacobian block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptedBasis:
    """Orthonormal basis of the cutoff band adapted to the orbit geometry.

    Columns of ``coords`` (in the real mode basis): f_1..f_3 span the
    W_T-weighted gradient directions, f_4 is the normalized projected
    minimizer, the rest complete the band.
    """

    mode_basis: RealModeBasis
    coords: np.ndarray
    T: float

    @property
    def size(self) -> int:
        return self.coords.shape[1]

    def field(self, column: int) -> Field:
        return self.mode_basis.field(self.coords[:, column])

    def synthesize(self, eta: np.ndarray) -> Field:
        """Field of sum_l eta_l f_{l+4} (eta indexes columns 4..N-1...);
        eta[0] multiplies f_4."""
        x = self.coords[:, 3:3 + len(eta)] @ np.asarray(eta, dtype=float)
        return self.mode_basis.field(x)


def adapted_basis(sol: PekarSolution, lambda_cut: float, T: float,
                  rank_tol: float = 1e-8) -> AdaptedBasis:
    """Build the adapted orthonormal basis on the band 0 < |k| < Lambda."""
    from .scf import Regime

    if sol.regime is not Regime.LOCALIZED:
        raise ValueError("adapted basis needs a localized minimizer; the "
                         "gradient span is rank deficient at the constant")
    basis = RealModeBasis(sol.lattice, lambda_cut)
    w = np.where(basis.lattice.kabs <= T, 1.0, 1.0 / (basis.lattice.k2 + 1.0))
    grads = []
    for axis in range(3):
        g = apply_partial(sol.phi, axis)
        grads.append(basis.coords(Field(basis.lattice, w * g.coeffs,
                                        real_valued=True)))
    G = np.column_stack(grads)
    gnorm = np.linalg.norm(G, axis=0)
    if np.any(gnorm < 1e-300):
        raise ValueError("gradient span is rank deficient (constant regime?)")
    sv = np.linalg.svd(G / gnorm, compute_uv=False)
    if sv[-1] <= rank_tol:
        raise ValueError(f"gradient span nearly rank deficient "
                         f"(smallest singular value {sv[-1]:.2e})")
    # Gram-Schmidt with one reorthogonalization pass
    F = np.zeros((basis.size, 4))
    for j in range(3):
        v = G[:, j]
        for _ in range(2):
            v = v - F[:, :j] @ (F[:, :j].T @ v)
        F[:, j] = v / np.linalg.norm(v)
    f4 = basis.coords(sol.phi)
    for _ in range(2):
        f4 = f4 - F[:, :3] @ (F[:, :3].T @ f4)
    nrm = np.linalg.norm(f4)
    if nrm < 1e-14:
        raise ValueError("projected minimizer vanishes on the band")
    F[:, 3] = f4 / nrm
    # complete with band vectors orthogonalized against f_1..f_4
    P = np.eye(basis.size) - F @ F.T
    Q, R, _ = sla.qr(P, mode="economic", pivoting=True)
    comp = Q[:, : basis.size - 4]
    comp = comp - F @ (F.T @ comp)
    comp, _ = np.linalg.qr(comp)
    coords = np.column_stack([F, comp])
    return AdaptedBasis(mode_basis=basis, coords=coords, T=float(T))


def jacobian_A0(sol: PekarSolution, basis: AdaptedBasis, eta: np.ndarray):
    """The 3x3 translation Jacobian block and |det|.

    (A0)_{jk} = <f_j, -d_k(Pi phi_L + sum_l eta_l f_l)> where eta runs over
    the columns f_4.. of the adapted basis.  Affine in eta.
    """
    mb = basis.mode_basis
    phi_band = mb.field(mb.coords(sol.phi))
    pt = phi_band + basis.synthesize(np.asarray(eta, dtype=float))
    A = np.empty((3, 3))
    for k in range(3):
        dpt = apply_partial(pt, k)
        col = -mb.coords(dpt)
        A[:, k] = basis.coords[:, :3].T @ col
    return A, float(abs(np.linalg.det(A)))
