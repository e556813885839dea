"""Hessian operators of the Pekar functionals and the quantum correction.

The field-functional Hessian at the minimizer is 1 - K with

    K = 4 (-Delta)^(-1/2) psi [Q_psi / (h_phi - e)] psi (-Delta)^(-1/2),

assembled as a dense symmetric matrix on the real cosine/sine basis of the
momentum ball 0 < |k| < Lambda (one projected-resolvent solve per column).
J replaces the reduced resolvent by the explicit (-Delta + 1)^(-1) and needs
no solves.  The electron-functional Hessian blocks L_psi and L_psi - 4 X_psi
are probed iteratively with deflation.

The semiclassical correction coefficient is (1/2) Tr(1 - sqrt(1 - K)),
reported together with a power-law tail extrapolation: eigenvalues decay
like j^(-4/3) (K is dominated by (-Delta+1)^(-2) and Laplacian eigenvalues
grow like j^(2/3)), so the truncation error scales like N^(-1/3).
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .functionals import energy_F
from .lattice import (Field, MomentumLattice, apply_multiplier, apply_partial,
                      dealiased_product, laplacian_power)
from .scf import PekarSolution, Regime
from .schroedinger import (GroundState, HOperator, ground_state,
                           lowest_eigenpairs, projected_resolvent)

NEGATIVE_RADICAND_SLACK = 1e-8
TAIL_MIN_EIGENVALUES = 50
ZERO_MODE_WINDOW = 1e-5


class RealModeBasis:
    """Real orthonormal basis of the cutoff band 0 < |k| < Lambda.

    Each +-k pair contributes the cosine combination (e_k + e_-k)/sqrt(2)
    and the sine combination (e_k - e_-k)/(i sqrt(2)); Nyquist rows and the
    zero mode are excluded.  Vectors are ordered by (|k|^2, index) with the
    cosine before the sine of each pair.
    """

    def __init__(self, lat: MomentumLattice, lambda_cut: float):
        if lambda_cut > lat.nyquist_radius:
            raise ValueError(f"cutoff {lambda_cut} exceeds the Nyquist radius "
                             f"{lat.nyquist_radius}")
        self.lattice = lat
        self.lambda_cut = float(lambda_cut)
        mx, my, mz = lat.mode_index
        rep = (mx > 0) | ((mx == 0) & (my > 0)) | ((mx == 0) & (my == 0) & (mz > 0))
        sel = rep & (lat.kabs < lambda_cut) & ~lat.nyquist_mask
        flat = np.flatnonzero(sel.ravel())
        order = np.lexsort((mz.ravel()[flat], my.ravel()[flat], mx.ravel()[flat],
                            lat.k2.ravel()[flat]))
        self.rep_flat = flat[order]
        n = lat.n
        rx, ry, rz = np.unravel_index(self.rep_flat, (n, n, n))
        self.neg_flat = np.ravel_multi_index(((-rx) % n, (-ry) % n, (-rz) % n),
                                             (n, n, n))
        self.pair_count = self.rep_flat.size
        self.size = 2 * self.pair_count
        self.kabs = lat.kabs.ravel()[self.rep_flat]
        # |k|^2 of each basis vector, cos/sin interleaved
        self.laplacian_eigs = np.repeat(lat.k2.ravel()[self.rep_flat], 2)

    def vector(self, j: int) -> Field:
        """The j-th basis vector as a Field (even j cosine, odd j sine)."""
        lat = self.lattice
        c = np.zeros(lat.n**3, dtype=complex)
        pair, kind = divmod(j, 2)
        if kind == 0:
            c[self.rep_flat[pair]] = 1.0 / np.sqrt(2.0)
            c[self.neg_flat[pair]] = 1.0 / np.sqrt(2.0)
        else:
            c[self.rep_flat[pair]] = -1j / np.sqrt(2.0)
            c[self.neg_flat[pair]] = 1j / np.sqrt(2.0)
        return Field(lat, c.reshape((lat.n,) * 3), real_valued=True)

    def coords(self, f: Field) -> np.ndarray:
        """Coordinates <b_j, f> of a (real) field; exact for in-band fields."""
        c = f.coeffs.ravel()
        ck = c[self.rep_flat]
        cneg = c[self.neg_flat]
        x = np.empty(self.size)
        x[0::2] = np.real(ck + cneg) / np.sqrt(2.0)
        x[1::2] = np.real(1j * (ck - cneg)) / np.sqrt(2.0)
        return x

    def field(self, x: np.ndarray) -> Field:
        """Synthesize sum_j x_j b_j."""
        lat = self.lattice
        c = np.zeros(lat.n**3, dtype=complex)
        ck = (x[0::2] - 1j * x[1::2]) / np.sqrt(2.0)
        c[self.rep_flat] = ck
        c[self.neg_flat] = np.conj(ck)
        return Field(lat, c.reshape((lat.n,) * 3), real_valued=True)

    def out_of_band_norm(self, f: Field) -> float:
        """Norm of the part of f outside span(basis) (incl. the zero mode)."""
        x = self.coords(f)
        return float(np.sqrt(max(f.norm() ** 2 - float(x @ x), 0.0)))


@dataclass(frozen=True)
class HessianSpectrum:
    """Diagonalized K on the cutoff band, with trace metadata."""

    lambda_cut: float
    basis: RealModeBasis
    matrix: np.ndarray
    eigenvalues: np.ndarray       # descending
    eigenvectors: np.ndarray      # columns, matching order
    asymmetry: float
    zero_mode_angle: float
    trace_correction: float
    tail_estimate: float

    @property
    def size(self) -> int:
        return self.basis.size


@dataclass(frozen=True)
class EHessianProbe:
    """Constrained spectral gaps of the electron-functional Hessian blocks."""

    h_prime: float
    h_doubleprime: float


def _solution_ground_state(sol: PekarSolution, tol: float) -> GroundState:
    """Ground problem of h_{phi_L}; by Euler-Lagrange its eigenpair is
    (mu_L, psi_L), so the converged SCF state is the natural warm start."""
    return ground_state(sol.phi, tol=tol, init=sol.psi)


def _apply_K_factory(sol: PekarSolution, gs: GroundState, tol: float):
    op = HOperator(sol.phi)
    inv_sqrt = laplacian_power(sol.lattice, -0.5)
    psi = gs.psi

    def apply_K(b: Field) -> Field:
        g = dealiased_product(psi, apply_multiplier(b, inv_sqrt))
        u = projected_resolvent(sol.phi, gs, g, tol=tol, _op=op)
        return 4.0 * apply_multiplier(dealiased_product(psi, u), inv_sqrt)

    return apply_K


def apply_K_operator(sol: PekarSolution, f: Field, tol: float = 1e-10,
                     gs: GroundState = None) -> Field:
    """One matrix-free application of K (no band truncation)."""
    if gs is None:
        gs = _solution_ground_state(sol, tol)
    return _apply_K_factory(sol, gs, tol)(f)


def assemble_K(sol: PekarSolution, lambda_cut: float, tol: float = 1e-10,
               threads: int = 1, gs: GroundState = None) -> HessianSpectrum:
    """Assemble and diagonalize K on the band 0 < |k| < lambda_cut.

    One projected-resolvent solve per basis column, parallel over columns;
    the matrix is symmetrized as (K + K^T)/2 with the relative asymmetry
    recorded.
    """
    lat = sol.lattice
    basis = RealModeBasis(lat, lambda_cut)
    if gs is None:
        gs = _solution_ground_state(sol, tol)
    apply_K = _apply_K_factory(sol, gs, tol)
    N = basis.size

    def column(j):
        try:
            return apply_K(basis.vector(j))
        except Exception as exc:
            raise RuntimeError(f"resolvent failed on basis column {j}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(column, range(N)))
    else:
        cols = [column(j) for j in range(N)]
    K = np.column_stack([basis.coords(w) for w in cols])

    asym = float(np.linalg.norm(K - K.T) / max(np.linalg.norm(K), 1e-300))
    K = 0.5 * (K + K.T)
    evals, evecs = np.linalg.eigh(K)
    evals, evecs = evals[::-1], evecs[:, ::-1]

    angle = _zero_mode_angle(sol, basis, evecs)
    value, tail = _trace_from_eigenvalues(evals)
    return HessianSpectrum(lambda_cut=float(lambda_cut), basis=basis, matrix=K,
                           eigenvalues=evals, eigenvectors=evecs, asymmetry=asym,
                           zero_mode_angle=angle, trace_correction=value,
                           tail_estimate=tail)


def _zero_mode_angle(sol: PekarSolution, basis: RealModeBasis, evecs) -> float:
    """Largest principal angle between the top-3 eigenvector span and the
    span of the minimizer's gradient modes; NaN in the constant regime."""
    if sol.regime is Regime.CONSTANT or basis.size < 3:
        return float("nan")
    grads = np.column_stack([basis.coords(apply_partial(sol.phi, ax))
                             for ax in range(3)])
    norms = np.linalg.norm(grads, axis=0)
    if np.any(norms < 1e-14):
        return float("nan")
    angles = sla.subspace_angles(evecs[:, :3], grads / norms)
    return float(np.max(angles))


def assemble_J(sol: PekarSolution, lambda_cut: float,
               basis: RealModeBasis = None) -> np.ndarray:
    """The comparison operator J = 4 A^T (-Delta+1)^(-1) A with
    A = psi (-Delta)^(-1/2), on the same band basis; explicit, no solves."""
    lat = sol.lattice
    if basis is None:
        basis = RealModeBasis(lat, lambda_cut)
    inv_sqrt = laplacian_power(lat, -0.5)
    res = 1.0 / (lat.k2 + 1.0)
    psi = sol.psi
    cols = []
    for j in range(basis.size):
        b = basis.vector(j)
        g = dealiased_product(psi, apply_multiplier(b, inv_sqrt))
        u = Field(lat, res * g.coeffs, g.real_valued)
        w = 4.0 * apply_multiplier(dealiased_product(psi, u), inv_sqrt)
        cols.append(basis.coords(w))
    J = np.column_stack(cols)
    return 0.5 * (J + J.T)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

def _trace_from_eigenvalues(evals: np.ndarray):
    value = trace_value(evals)
    try:
        tail = tail_extrapolation(evals)
    except ValueError:
        tail = float("nan")
    return value, tail


def trace_value(evals: np.ndarray) -> float:
    """(1/2) sum_j (1 - sqrt(max(0, 1 - k_j))), clamping grazing radicands."""
    rad = 1.0 - np.asarray(evals)
    n_neg = int(np.sum(rad < -NEGATIVE_RADICAND_SLACK))
    if n_neg:
        warnings.warn(f"{n_neg} eigenvalues exceed 1 by more than "
                      f"{NEGATIVE_RADICAND_SLACK}; radicands clamped to 0",
                      stacklevel=2)
    return float(0.5 * np.sum(1.0 - np.sqrt(np.clip(rad, 0.0, None))))


def tail_extrapolation(evals: np.ndarray, exponent: float = -4.0 / 3.0):
    """Tail of the trace beyond the resolved spectrum.

    Fits k_j ~ c j^(-4/3) on the last decade of non-zero-mode eigenvalues
    and sums the fitted model beyond N (numerically to 100 N, then the
    integral remainder); the result scales like N^(-1/3).
    """
    evals = np.asarray(evals, dtype=float)
    body = evals[evals < 1.0 - ZERO_MODE_WINDOW]
    N_total = evals.size
    if body.size < TAIL_MIN_EIGENVALUES:
        raise ValueError(f"need at least {TAIL_MIN_EIGENVALUES} eigenvalues "
                         f"below the zero-mode window for the tail fit, "
                         f"got {body.size}")
    j = np.arange(1, body.size + 1, dtype=float)
    lo = max(int(np.ceil(body.size / 10.0)), 1)
    window = slice(lo - 1, body.size)
    kj = np.clip(body[window], 1e-300, None)
    c = float(np.exp(np.mean(np.log(kj) - exponent * np.log(j[window]))))
    jj = np.arange(N_total + 1, 100 * N_total + 1, dtype=float)
    model = np.clip(c * jj**exponent, 0.0, 1.0)
    tail = float(0.5 * np.sum(1.0 - np.sqrt(1.0 - model)))
    # beyond 100 N the terms are deep in the linear regime: 1-sqrt(1-x) ~ x/2
    j0 = 100.0 * N_total
    tail += 0.25 * c * 3.0 * j0 ** (-1.0 / 3.0)
    return tail


def trace_correction(spec: HessianSpectrum):
    """(value, tail) of the quantum-correction coefficient for a spectrum."""
    value = trace_value(spec.eigenvalues)
    tail = tail_extrapolation(spec.eigenvalues)
    return value, tail


def smalll_direct(lat: MomentumLattice, lambda_cut: float):
    """Constant-minimizer closed form (1/2) sum_{0<|k|<Lambda} (1 - sqrt(1 -
    4/(L^3 |k|^4))) over the grid mode set, plus an analytic tail bound.

    Valid while the radicand stays nonnegative at the smallest mode, i.e.
    4/(L^3 k_min^4) <= 1; raises otherwise (the constant state no longer
    minimizes at such L).
    """
    L = lat.L
    kmin = 2.0 * np.pi / L
    if 4.0 / (L**3 * kmin**4) > 1.0:
        raise ValueError("4/(L^3 k_min^4) > 1: outside the constant-minimizer "
                         "regime, the closed form does not apply")
    sel = (lat.k2 > 0) & (lat.kabs < lambda_cut) & ~lat.nyquist_mask
    x = 4.0 / (L**3 * lat.k2[sel] ** 2)
    value = float(0.5 * np.sum(1.0 - np.sqrt(1.0 - x)))
    # 1 - sqrt(1-x) <= x, so the tail is below sum_{|k|>=Lambda} 2/(L^3|k|^4);
    # integral comparison with the radius backed off by one cell diagonal
    r0 = max(lambda_cut - np.sqrt(3.0) * lat.dk, kmin)
    tail_bound = (L / (2.0 * np.pi)) ** 3 * (2.0 / L**3) * 4.0 * np.pi / r0
    return value, tail_bound


# ---------------------------------------------------------------------------
# finite-difference probe of the F-Hessian
# ---------------------------------------------------------------------------

def k_quadratic_form(spec: HessianSpectrum, v: Field) -> float:
    """<v, (1 - K) v> for an in-band field v."""
    oob = spec.basis.out_of_band_norm(v)
    # the norm-difference computation floors near sqrt(eps); gate above it
    if oob > 1e-6 * max(v.norm(), 1e-300):
        raise ValueError(f"direction has {oob:.2e} of its norm outside the "
                         f"cutoff band; enlarge lambda_cut")
    x = spec.basis.coords(v)
    return float(v.norm() ** 2 - x @ (spec.matrix @ x))


def hessian_fd_check(sol: PekarSolution, v: Field, eps: float,
                     spec: HessianSpectrum, tol: float = 1e-10) -> float:
    """|(F_L(phi_L + eps v) - e_L)/eps^2 - <v, (1-K) v>|.

    The discrepancy carries the cubic remainder and decays like O(eps);
    directions must be real, zero-mean, normalized and inside the band.
    """
    if not v.real_valued:
        raise ValueError("perturbation direction must be real-valued")
    if abs(v.zero_mode()) > 1e-12:
        raise ValueError("perturbation direction must have zero mean")
    if abs(v.norm() - 1.0) > 1e-10:
        raise ValueError("perturbation direction must be normalized")
    quad = k_quadratic_form(spec, v)
    F = energy_F(sol.phi + eps * v, tol=tol, ground_state_hint=sol.psi)
    return abs((F - sol.energy) / eps**2 - quad)


# ---------------------------------------------------------------------------
# electron-functional Hessian gaps
# ---------------------------------------------------------------------------

def e_hessian_gaps(sol: PekarSolution, tol: float = 1e-8, seed: int = 0,
                   block: int = 6) -> EHessianProbe:
    """Deflated minimal Rayleigh quotients of L_psi on {psi}^perp and of
    L_psi - 4 X_psi on {psi, grad psi}^perp."""
    lat = sol.lattice
    op = HOperator(sol.phi)
    mu = sol.mu
    psi = sol.psi
    inv_lap = laplacian_power(lat, -1.0)
    n3 = lat.n**3
    prec_w = 1.0 / (lat.k2.ravel() + 1.0)

    def apply_L(v):
        return op.apply_coeffs(v.reshape(lat.k2.shape)).ravel() - mu * v

    def apply_LX(v):
        f = Field(lat, v.reshape(lat.k2.shape))
        xf = dealiased_product(psi, apply_multiplier(dealiased_product(psi, f),
                                                     inv_lap))
        return apply_L(v) - 4.0 * xf.coeffs.ravel()

    def prec(v):
        return prec_w * v

    rng = np.random.default_rng(seed)

    def run(apply_A, constraints):
        Y = np.column_stack(constraints)
        Y, _ = _orthonormalize_columns(Y)
        X0 = np.empty((n3, block), dtype=complex)
        for j in range(block):
            re = rng.standard_normal(lat.k2.shape)
            X0[:, j] = Field(lat, np.fft.fftn(re) / n3,
                             real_valued=True).coeffs.ravel()
        theta, _, _, _, _ = lowest_eigenpairs(apply_A, prec, X0, tol=tol,
                                              constraints=Y, nconv=1)
        return float(theta[0])

    h1 = run(apply_L, [psi.coeffs.ravel()])
    grads = [apply_partial(psi, ax).coeffs.ravel() for ax in range(3)]
    h2 = run(apply_LX, [psi.coeffs.ravel(), *grads])
    return EHessianProbe(h_prime=h1, h_doubleprime=h2)


def _orthonormalize_columns(Y):
    G = Y.conj().T @ Y
    vals, vecs = np.linalg.eigh(G)
    keep = vals > 1e-12 * vals[-1]
    T = vecs[:, keep] / np.sqrt(vals[keep])
    return Y @ T, T


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def export_spectrum_csv(spec: HessianSpectrum, path) -> None:
    """CSV of (j, k_j, one_minus_sqrt, cumulative_trace), descending k_j."""
    rad = np.clip(1.0 - spec.eigenvalues, 0.0, None)
    oms = 1.0 - np.sqrt(rad)
    cum = 0.5 * np.cumsum(oms)
    with open(path, "w") as fh:
        fh.write("j,k_j,one_minus_sqrt,cumulative_trace\n")
        for j, (k, o, c) in enumerate(zip(spec.eigenvalues, oms, cum), start=1):
            fh.write(f"{j},{k:.10e},{o:.10e},{c:.10e}\n")


_MATRIX_MAGIC = b"PEKM"


def write_matrix(path, K: np.ndarray) -> None:
    """Dense symmetric matrix dump: magic, version u32, N u32, f64 entries."""
    N = K.shape[0]
    with open(path, "wb") as fh:
        fh.write(_MATRIX_MAGIC)
        fh.write(struct.pack("<II", 1, N))
        fh.write(np.ascontiguousarray(K, dtype="<f8").tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _MATRIX_MAGIC:
            raise ValueError("not a PEKM matrix file")
        version, N = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValueError(f"unsupported matrix file version {version}")
        data = np.frombuffer(fh.read(8 * N * N), dtype="<f8")
    return data.reshape(N, N).copy()
