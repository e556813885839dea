"""Spectral application of h_phi = -Delta + V_phi and its ground problem.

The ground state is found by a locally-optimal block preconditioned
iteration (block size 4, preconditioner (-Delta + 1)^(-1)) operating
directly on Fourier coefficients; the potential term is applied through the
dealiased real-space product, so the iterated operator is the exact
Galerkin restriction of h_phi to the grid's plane-wave band.  Convergence
is judged on the lowest Ritz pair only; the remaining block vectors exist
to expose the spectral gap.

The projected resolvent solves (h_phi - e) u = Q_psi rhs with u
perpendicular to psi by preconditioned conjugate gradients on the
psi-orthogonal complement, where h - e is positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .functionals import potential
from .lattice import (Field, MomentumLattice, dealiased_product,
                      _check_same_lattice)

EIGEN_MAX_ITER = 10_000
RESOLVENT_MAX_ITER = 50_000
DEFAULT_TOL = 1e-10


class SolverFailure(RuntimeError):
    """Raised when an iterative solve exhausts its iteration cap."""

    def __init__(self, message, residual=None, gap=None):
        super().__init__(message)
        self.residual = residual
        self.gap = gap


@dataclass(frozen=True)
class GroundState:
    """Converged lowest eigenpair of h_phi."""

    energy: float
    psi: Field
    residual: float
    iterations: int
    gap: float
    energy_history: tuple = dc_field(default=(), repr=False)


class HOperator:
    """Matrix-free h_phi acting on coefficient arrays of one lattice."""

    def __init__(self, phi: Field):
        if not phi.real_valued:
            raise ValueError("h_phi requires a real-valued phi")
        self.lattice = phi.lattice
        self.V = potential(phi)
        self._v_zero = self.V.norm() == 0.0
        self.shift = 0.0

    def apply_coeffs(self, c: np.ndarray) -> np.ndarray:
        lat = self.lattice
        out = lat.k2 * c
        if not self._v_zero:
            Vpsi = dealiased_product(self.V, Field(lat, c))
            out = out + Vpsi.coeffs
        if self.shift != 0.0:
            out = out + self.shift * c
        return out


def apply_h(phi: Field, psi: Field) -> Field:
    """h_phi psi = -Delta psi + V_phi * psi (dealiased product)."""
    _check_same_lattice(phi, psi)
    op = HOperator(phi)
    return Field(psi.lattice, op.apply_coeffs(np.asarray(psi.coeffs)),
                 psi.real_valued and op.V.real_valued)


# ---------------------------------------------------------------------------
# block eigensolver
# ---------------------------------------------------------------------------

def _orthonormalize(X, drop_tol=1e-12):
    """Eigh-based whitening; drops near-dependent columns. Returns (Q, T)
    with Q = X @ T orthonormal."""
    G = X.conj().T @ X
    vals, vecs = np.linalg.eigh(G)
    keep = vals > drop_tol * max(vals[-1], 1e-300)
    T = vecs[:, keep] / np.sqrt(vals[keep])
    return X @ T, T


def _project_out(Y, Z):
    if Y is not None and Y.shape[1] > 0:
        Z = Z - Y @ (Y.conj().T @ Z)
    return Z


def lowest_eigenpairs(apply_A, prec, X0, tol, maxiter=EIGEN_MAX_ITER,
                      constraints=None, nconv=1):
    """Locally-optimal block iteration for the lowest eigenpairs of a
    Hermitian operator.

    Parameters
    ----------
    apply_A : callable on (N,) complex arrays
    prec : callable, approximate inverse used on residuals
    X0 : (N, m) initial block
    tol : absolute residual tolerance for the lowest ``nconv`` pairs;
        a scalar or one threshold per converging pair
    constraints : optional (N, q) orthonormal block to deflate against

    Returns (theta, X, residuals, iterations, history).
    """
    Y = constraints
    X = _project_out(Y, X0.astype(complex))
    X, _ = _orthonormalize(X)
    m = X.shape[1]
    tols = np.broadcast_to(np.atleast_1d(tol), (nconv,))
    AX = np.column_stack([apply_A(X[:, j]) for j in range(m)])
    P = AP = None
    history = []
    theta = None
    for it in range(1, maxiter + 1):
        H = X.conj().T @ AX
        theta = np.real(np.diag(H))
        order = np.argsort(theta)
        theta = theta[order]
        X, AX = X[:, order], AX[:, order]
        # the deflated problem's residual lives in the constraint complement
        R = _project_out(Y, AX - X * theta)
        resid = np.linalg.norm(R, axis=0)
        history.append(theta[0])
        if np.all(resid[:nconv] <= tols):
            return theta, X, resid, it, history
        W = np.column_stack([prec(R[:, j]) for j in range(R.shape[1])])
        W = _project_out(Y, W)
        W = W - X @ (X.conj().T @ W)
        if P is not None:
            W = W - P @ (P.conj().T @ W)
        W, _ = _orthonormalize(W, drop_tol=1e-10)
        if W.shape[1] == 0:
            return theta, X, resid, it, history
        AW = np.column_stack([apply_A(W[:, j]) for j in range(W.shape[1])])
        blocks = [X, W] if P is None else [X, W, P]
        Ablocks = [AX, AW] if P is None else [AX, AW, AP]
        S = np.column_stack(blocks)
        AS = np.column_stack(Ablocks)
        G = S.conj().T @ S
        M = S.conj().T @ AS
        M = 0.5 * (M + M.conj().T)
        # whiten the subspace basis; G is close to identity unless P drifted
        gv, gU = np.linalg.eigh(G)
        keep = gv > 1e-10 * gv[-1]
        T = gU[:, keep] / np.sqrt(gv[keep])
        Mw = T.conj().T @ M @ T
        Mw = 0.5 * (Mw + Mw.conj().T)
        evals, evecs = np.linalg.eigh(Mw)
        C = T @ evecs[:, :m]
        Xn = S @ C
        AXn = AS @ C
        # P: the component of the new X coming from [W, P]
        Cp = C.copy()
        Cp[:m, :] = 0.0
        Pn = S @ Cp
        APn = AS @ Cp
        Pn_on, Tp = _orthonormalize(Pn, drop_tol=1e-10)
        X, AX = Xn, AXn
        P, AP = Pn_on, APn @ Tp
    raise SolverFailure(
        f"eigensolver did not converge in {maxiter} iterations "
        f"(last residuals {resid})", residual=float(resid[0]),
        gap=float(theta[1] - theta[0]) if len(theta) > 1 else None)


def _phase_fix_coeffs(c):
    """Global phase so that the zero mode (spatial mean) is real positive."""
    c0 = c.flat[0]
    if abs(c0) < 1e-13 * np.linalg.norm(c):
        ref = c.flat[np.argmax(np.abs(c))]
    else:
        ref = c0
    return c * np.exp(-1j * np.angle(ref))


def ground_state(phi: Field, tol: float = DEFAULT_TOL, init: Field = None,
                 seed: int = 0, block: int = 4,
                 maxiter: int = EIGEN_MAX_ITER) -> GroundState:
    """Lowest eigenpair of h_phi, phase-fixed through the spatial mean.

    Deterministic for fixed inputs and seed; raises SolverFailure with the
    last residual on non-convergence.
    """
    lat = phi.lattice
    op = HOperator(phi)
    n3 = lat.n**3
    prec_w = 1.0 / (lat.k2.ravel() + 1.0)

    def apply_A(v):
        return op.apply_coeffs(v.reshape(lat.k2.shape)).ravel()

    def prec(v):
        return prec_w * v

    rng = np.random.default_rng(seed)
    X0 = np.empty((n3, block), dtype=complex)
    if init is not None:
        _check_same_lattice(init, phi)
        X0[:, 0] = init.coeffs.ravel()
    else:
        X0[:, 0] = 0.0
        X0[0, 0] = 1.0
    for j in range(1, block):
        re = rng.standard_normal(lat.k2.shape)
        X0[:, j] = Field(lat, np.fft.fftn(re) / n3, real_valued=True).coeffs.ravel()

    # converge the second pair loosely as well so the gap report means something
    tols = [tol, max(np.sqrt(tol), 10.0 * tol)] if block > 1 else [tol]
    theta, X, resid, iters, history = lowest_eigenpairs(
        apply_A, prec, X0, tol=tols, maxiter=maxiter, nconv=min(2, block))
    c = _phase_fix_coeffs(X[:, 0].reshape(lat.k2.shape))
    c = c / np.linalg.norm(c)
    psi = Field(lat, c, real_valued=True)
    # re-impose exact Hermitian symmetry lost to rounding, renormalize
    psi = psi.with_coeffs(_hermitize(psi.coeffs, lat)).normalized()
    gap = float(theta[1] - theta[0]) if len(theta) > 1 else np.inf
    return GroundState(energy=float(theta[0]), psi=psi, residual=float(resid[0]),
                       iterations=iters, gap=gap, energy_history=tuple(history))


def _hermitize(c, lat: MomentumLattice):
    """Average c with its reflected conjugate so c_{-k} = conj(c_k) exactly."""
    flipped = c[_reflect_index(lat.n)]
    return 0.5 * (c + np.conj(flipped))


_REFLECT_CACHE: dict[int, tuple] = {}


def _reflect_index(n):
    ix = _REFLECT_CACHE.get(n)
    if ix is None:
        r = (-np.arange(n)) % n
        ix = np.ix_(r, r, r)
        _REFLECT_CACHE[n] = ix
    return ix


# ---------------------------------------------------------------------------
# projected resolvent
# ---------------------------------------------------------------------------

def projected_resolvent(phi: Field, gs: GroundState, rhs: Field,
                        tol: float = DEFAULT_TOL,
                        maxiter: int = RESOLVENT_MAX_ITER,
                        _op: "HOperator" = None) -> Field:
    """Solve (h_phi - e) u = Q_psi rhs with u orthogonal to psi.

    Conjugate gradients on the psi-orthogonal complement, where h - e is
    positive definite by the spectral gap; preconditioned by
    (-Delta + 1)^(-1).
    """
    _check_same_lattice(phi, rhs)
    lat = phi.lattice
    op = _op if _op is not None else HOperator(phi)
    e = gs.energy
    p0 = gs.psi.coeffs.ravel()

    def proj(v):
        return v - p0 * np.vdot(p0, v)

    def apply_A(v):
        return proj(op.apply_coeffs(v.reshape(lat.k2.shape)).ravel() - e * v)

    prec_w = 1.0 / (lat.k2.ravel() + 1.0)
    b = proj(rhs.coeffs.ravel().astype(complex))
    u = np.zeros_like(b)
    r = b.copy()
    rn0 = np.linalg.norm(r)
    if rn0 <= tol:
        return Field(lat, u.reshape(lat.k2.shape), rhs.real_valued)
    z = proj(prec_w * r)
    p = z.copy()
    rz = np.vdot(r, z)
    for it in range(1, maxiter + 1):
        Ap = apply_A(p)
        pAp = np.vdot(p, Ap)
        if np.real(pAp) <= 0:
            raise SolverFailure(
                "resolvent lost positive definiteness; gap estimate "
                f"{np.real(pAp) / max(np.vdot(p, p).real, 1e-300):.3e}",
                gap=gs.gap)
        alpha = rz / pAp
        u = u + alpha * p
        r = r - alpha * Ap
        r = proj(r)
        if np.linalg.norm(r) <= tol:
            u = proj(u)
            return Field(lat, u.reshape(lat.k2.shape),
                         rhs.real_valued and gs.psi.real_valued)
        z = proj(prec_w * r)
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverFailure(
        f"projected resolvent did not reach tol={tol:g} in {maxiter} "
        f"iterations (residual {np.linalg.norm(r):.3e}); spectral gap "
        f"estimate {gs.gap:.3e}", residual=float(np.linalg.norm(r)),
        gap=gs.gap)
