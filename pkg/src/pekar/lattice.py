"""Momentum-lattice bookkeeping and Fourier field algebra on the 3-torus.

Conventions used throughout the package:

* The torus is identified with the box [-L/2, L/2)^3; real-space samples
  live on the n^3 grid x_j = L*j/n - L/2.
* A field is represented by complex coefficients c_k, one per lattice mode
  k in (2*pi/L) Z^3 with integer indices in [-n/2, n/2), stored in FFT
  (wrap-around) order, with the normalization

      f(x) = sum_k c_k exp(i k.x) / L^(3/2)

  so that Parseval's identity ||f||_{L^2}^2 = sum_k |c_k|^2 is weight-free.
* Real-valued fields satisfy c_{-k} = conj(c_k); the unpaired Nyquist rows
  (index -n/2 on any axis) are zeroed so that the symmetry is exact, and
  they are likewise excluded from all inverse/fractional Laplacian weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

_FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    """Set the scipy.fft worker count used by all transforms."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


def _fftn(a):
    return sfft.fftn(a, workers=_FFT_WORKERS)


def _ifftn(a):
    return sfft.ifftn(a, workers=_FFT_WORKERS)


class MomentumLattice:
    """The discrete momentum set (2*pi/L) Z^3 restricted to a cubic FFT grid.

    Parameters
    ----------
    L : float
        Torus side length, > 0.
    n : int
        Grid points per axis; must be even and positive.
    """

    def __init__(self, L: float, n: int):
        if L <= 0:
            raise ValueError(f"torus side length must be positive, got {L}")
        if n <= 0 or n % 2 != 0:
            raise ValueError(f"grid size must be a positive even integer, got {n}")
        self.L = float(L)
        self.n = int(n)
        m = sfft.fftfreq(n, d=1.0 / n).astype(int)  # signed indices, FFT order
        mx, my, mz = np.meshgrid(m, m, m, indexing="ij")
        self.mode_index = (mx, my, mz)
        dk = 2.0 * np.pi / self.L
        self.dk = dk
        self.kx = dk * mx
        self.ky = dk * my
        self.kz = dk * mz
        self.k2 = self.kx**2 + self.ky**2 + self.kz**2
        self.kabs = np.sqrt(self.k2)
        # phase factor exp(-i k.(L/2,L/2,L/2)) relating corner- and
        # centered-grid transforms; real because n is even
        self.center_phase = np.where((mx + my + mz) % 2 == 0, 1.0, -1.0)
        self.nyquist_mask = (mx == -n // 2) | (my == -n // 2) | (mz == -n // 2)
        for arr in (self.kx, self.ky, self.kz, self.k2, self.kabs,
                    self.center_phase, self.nyquist_mask):
            arr.setflags(write=False)
        self._pad_cache: dict[int, np.ndarray] = {}

    @property
    def nyquist_radius(self) -> float:
        """Largest per-axis momentum pi*n/L."""
        return np.pi * self.n / self.L

    def same_as(self, other: "MomentumLattice") -> bool:
        return self.n == other.n and self.L == other.L

    def grid_axis(self) -> np.ndarray:
        """Real-space sample positions along one axis."""
        return np.arange(self.n) * (self.L / self.n) - self.L / 2.0

    def _pad_indices(self, M: int) -> np.ndarray:
        idx = self._pad_cache.get(M)
        if idx is None:
            signed = sfft.fftfreq(self.n, d=1.0 / self.n).astype(int)
            idx = signed % M
            idx.setflags(write=False)
            self._pad_cache[M] = idx
        return idx

    def __repr__(self):
        return f"MomentumLattice(L={self.L}, n={self.n})"


@dataclass(frozen=True)
class Field:
    """A function on the torus, held as Fourier coefficients on a lattice."""

    lattice: MomentumLattice
    coeffs: np.ndarray
    real_valued: bool = False

    def __post_init__(self):
        c = np.ascontiguousarray(self.coeffs, dtype=complex)
        if c.shape != (self.lattice.n,) * 3:
            raise ValueError(f"coefficient shape {c.shape} does not match lattice n={self.lattice.n}")
        if self.real_valued:
            c = c.copy()
            c[self.lattice.nyquist_mask] = 0.0
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def zero_mode(self) -> complex:
        return complex(self.coeffs[0, 0, 0])

    def with_coeffs(self, coeffs, real_valued=None) -> "Field":
        return Field(self.lattice, coeffs,
                     self.real_valued if real_valued is None else real_valued)

    def normalized(self) -> "Field":
        nrm = self.norm()
        if nrm == 0.0:
            raise ValueError("cannot normalize the zero field")
        return self.with_coeffs(self.coeffs / nrm)

    def __add__(self, other: "Field") -> "Field":
        _check_same_lattice(self, other)
        return Field(self.lattice, self.coeffs + other.coeffs,
                     self.real_valued and other.real_valued)

    def __sub__(self, other: "Field") -> "Field":
        _check_same_lattice(self, other)
        return Field(self.lattice, self.coeffs - other.coeffs,
                     self.real_valued and other.real_valued)

    def __mul__(self, scalar) -> "Field":
        s = complex(scalar)
        return Field(self.lattice, self.coeffs * s,
                     self.real_valued and s.imag == 0.0)

    __rmul__ = __mul__


@dataclass(frozen=True)
class Multiplier:
    """A diagonal Fourier operator: mode k gets the real weight weights[k].

    ``zero_excluded`` records that the k = 0 mode is outside the operator's
    domain (inverse powers of the Laplacian); the weight there is stored as 0
    and the output zero mode is forced to 0.
    """

    lattice: MomentumLattice
    weights: np.ndarray
    zero_excluded: bool = False
    even: bool = True

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=float)
        if w.shape != (self.lattice.n,) * 3:
            raise ValueError("multiplier weight shape does not match lattice")
        check = w if not self.zero_excluded else w.ravel()[1:]
        if not np.all(np.isfinite(check)):
            raise ValueError("multiplier weight is not finite on an included mode")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


def _check_same_lattice(a, b):
    la = a.lattice if hasattr(a, "lattice") else a
    lb = b.lattice if hasattr(b, "lattice") else b
    if not la.same_as(lb):
        raise ValueError(f"lattice mismatch: {la} vs {lb}")


def zero_field(lat: MomentumLattice, real_valued: bool = True) -> Field:
    return Field(lat, np.zeros((lat.n,) * 3, dtype=complex), real_valued)


def constant_field(lat: MomentumLattice, mean: float = None) -> Field:
    """Constant field; by default the L^2-normalized constant L^(-3/2)."""
    c = np.zeros((lat.n,) * 3, dtype=complex)
    c[0, 0, 0] = 1.0 if mean is None else mean * lat.L**1.5
    return Field(lat, c, real_valued=True)


# ---------------------------------------------------------------------------
# multiplier factories
# ---------------------------------------------------------------------------

def laplacian_power(lat: MomentumLattice, s: float) -> Multiplier:
    """(-Delta)^s as a multiplier: weight |k|^(2s).

    For s < 0 the zero mode is excluded (the paper's zero-mean convention for
    the inverse Laplacian) and the unpaired Nyquist rows are zeroed.
    """
    w = np.zeros_like(lat.k2)
    nz = lat.k2 > 0
    w[nz] = lat.k2[nz] ** s
    if s < 0:
        w[lat.nyquist_mask] = 0.0
        return Multiplier(lat, w, zero_excluded=True)
    if s == 0:
        w[~nz] = 1.0
    return Multiplier(lat, w)


def shifted_inverse_laplacian(lat: MomentumLattice, shift: float = 1.0) -> Multiplier:
    """(-Delta + shift)^(-1); defined on every mode for shift > 0."""
    if shift <= 0:
        raise ValueError("shift must be positive")
    return Multiplier(lat, 1.0 / (lat.k2 + shift))


def wt_multiplier(lat: MomentumLattice, T: float) -> Multiplier:
    """The weight W_T: 1 on |k| <= T, (|k|^2+1)^(-1) above."""
    if T < 0:
        raise ValueError("T must be >= 0")
    w = np.where(lat.kabs <= T, 1.0, 1.0 / (lat.k2 + 1.0))
    return Multiplier(lat, w)


def apply_multiplier(f: Field, m: Multiplier) -> Field:
    """Apply a diagonal Fourier multiplier to a field."""
    _check_same_lattice(f, m)
    c = m.weights * f.coeffs
    if m.zero_excluded:
        c[0, 0, 0] = 0.0
    return Field(f.lattice, c, f.real_valued and m.even)


def apply_partial(f: Field, axis: int) -> Field:
    """Partial derivative d/dx_axis (multiplier i*k_axis; odd, breaks parity
    bookkeeping but maps real fields to real fields)."""
    lat = f.lattice
    k = (lat.kx, lat.ky, lat.kz)[axis]
    c = 1j * k * f.coeffs
    if f.real_valued:
        c[lat.nyquist_mask] = 0.0
    return Field(lat, c, f.real_valued)


# ---------------------------------------------------------------------------
# transforms, translations, inner products
# ---------------------------------------------------------------------------

def to_real_space(f: Field) -> np.ndarray:
    """Real-space samples on the centered n^3 grid (x_j = L*j/n - L/2)."""
    lat = f.lattice
    s = _ifftn(f.coeffs * lat.center_phase) * (lat.n**3 / lat.L**1.5)
    return s.real if f.real_valued else s


def from_real_space(lat: MomentumLattice, samples: np.ndarray,
                    real_valued: bool = None) -> Field:
    """Inverse of to_real_space."""
    samples = np.asarray(samples)
    if samples.shape != (lat.n,) * 3:
        raise ValueError("sample grid does not match lattice")
    if real_valued is None:
        real_valued = not np.iscomplexobj(samples)
    c = _fftn(samples.astype(complex)) * lat.center_phase * (lat.L**1.5 / lat.n**3)
    return Field(lat, c, real_valued)


def translate(f: Field, y) -> Field:
    """The translate f(. - y): coefficients pick up exp(-i k.y)."""
    lat = f.lattice
    y = np.asarray(y, dtype=float)
    ph = np.exp(-1j * (lat.kx * y[0] + lat.ky * y[1] + lat.kz * y[2]))
    return Field(lat, ph * f.coeffs, f.real_valued)


def l2_inner(f: Field, g: Field) -> complex:
    """Plain L^2 inner product <f, g> (antilinear in f)."""
    _check_same_lattice(f, g)
    return complex(np.vdot(f.coeffs, g.coeffs))


def wt_inner(f: Field, g: Field, T: float) -> float:
    """Weighted inner product sum_k W_T(k) conj(f_k) g_k.

    Intended for real-valued fields, for which the value is real; the real
    part is returned.
    """
    _check_same_lattice(f, g)
    lat = f.lattice
    w = np.where(lat.kabs <= T, 1.0, 1.0 / (lat.k2 + 1.0))
    return float(np.real(np.sum(w * np.conj(f.coeffs) * g.coeffs)))


def wt_norm(f: Field, T: float) -> float:
    lat = f.lattice
    w = np.where(lat.kabs <= T, 1.0, 1.0 / (lat.k2 + 1.0))
    return float(np.sqrt(np.sum(w * np.abs(f.coeffs) ** 2)))


# ---------------------------------------------------------------------------
# coupling fields
# ---------------------------------------------------------------------------

def coupling_field(lat: MomentumLattice, cutoff: float = np.inf) -> Field:
    """The (cutoff) electron-phonon coupling v_{L,Lambda}.

    Coefficients are 1/(L^(3/2) |k|) on 0 < |k| < cutoff and zero elsewhere;
    cutoff = inf yields the grid-truncated v_L.
    """
    if np.isfinite(cutoff) and cutoff > lat.nyquist_radius:
        raise ValueError(f"cutoff {cutoff} exceeds the Nyquist radius {lat.nyquist_radius}")
    c = np.zeros((lat.n,) * 3, dtype=complex)
    sel = (lat.k2 > 0) & (lat.kabs < cutoff) & ~lat.nyquist_mask
    c[sel] = 1.0 / (lat.L**1.5 * lat.kabs[sel])
    return Field(lat, c, real_valued=True)


def coupling_remainder(lat: MomentumLattice, cutoff: float) -> Field:
    """w_{L,Lambda} = v_L - v_{L,Lambda} on the grid (modes |k| >= cutoff)."""
    full = coupling_field(lat)
    low = coupling_field(lat, cutoff)
    return full - low


# ---------------------------------------------------------------------------
# dealiased products
# ---------------------------------------------------------------------------

def dealiased_product(f: Field, g: Field, conjugate_first: bool = False) -> Field:
    """Pointwise product f*g computed on a 3/2-padded grid.

    Quadratic products of band-limited fields alias on the bare grid; with
    3/2-rule padding the retained band of the result is exact, so this is
    the Galerkin product. With conjugate_first=True computes conj(f)*g
    (used for densities |psi|^2).

    The output's Nyquist rows are always zeroed: products are defined on the
    Nyquist-free band, where c_{-k} = conj(c_k) can hold exactly.
    """
    _check_same_lattice(f, g)
    lat = f.lattice
    n = lat.n
    M = 3 * n // 2
    M += M % 2
    idx = lat._pad_indices(M)
    ix = np.ix_(idx, idx, idx)
    A = np.zeros((M, M, M), dtype=complex)
    B = np.zeros((M, M, M), dtype=complex)
    A[ix] = f.coeffs
    B[ix] = g.coeffs
    fa = _ifftn(A)
    fb = _ifftn(B)
    if conjugate_first:
        fa = np.conj(fa)
    prod = _fftn(fa * fb) * (M**3 / lat.L**1.5)
    c = prod[ix]
    c[lat.nyquist_mask] = 0.0
    real = (f.real_valued and g.real_valued) or (conjugate_first and f is g)
    return Field(lat, c, real)


def density(psi: Field) -> Field:
    """The density rho_psi = |psi|^2 (dealiased)."""
    return dealiased_product(psi, psi, conjugate_first=True)


# ---------------------------------------------------------------------------
# grid embedding (resolution ladders)
# ---------------------------------------------------------------------------

def regrid(f: Field, n_new: int) -> Field:
    """Re-express a field on a finer or coarser grid of the same torus.

    Modes shared by both grids are copied; refining is exact, coarsening
    truncates. Nyquist rows of the target are zeroed for real fields.
    """
    lat_new = MomentumLattice(f.lattice.L, n_new)
    n_old = f.lattice.n
    c = np.zeros((n_new,) * 3, dtype=complex)
    half = min(n_old, n_new) // 2
    keep = np.concatenate([np.arange(0, half), np.arange(-half, 0)])
    src = np.ix_(keep % n_old, keep % n_old, keep % n_old)
    dst = np.ix_(keep % n_new, keep % n_new, keep % n_new)
    c[dst] = f.coeffs[src]
    return Field(lat_new, c, f.real_valued)


# ---------------------------------------------------------------------------
# binary field files
# ---------------------------------------------------------------------------

_MAGIC = b"PEKR"
_FORMAT_VERSION = 1


def write_field(path, f: Field) -> None:
    """Write a field in the PEKR binary layout (see module docs)."""
    flags = 1 if f.real_valued else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IdII", _FORMAT_VERSION, f.lattice.L, f.lattice.n, flags))
        inter = np.empty(f.coeffs.size * 2, dtype="<f8")
        inter[0::2] = f.coeffs.real.ravel()
        inter[1::2] = f.coeffs.imag.ravel()
        fh.write(inter.tobytes())


def read_field(path, lattice: MomentumLattice = None) -> Field:
    """Read a PEKR field file; reuses ``lattice`` when it matches."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a PEKR field file: bad magic {magic!r}")
        version, L, n, flags = struct.unpack("<IdII", fh.read(20))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported field file version {version}")
        raw = np.frombuffer(fh.read(16 * n**3), dtype="<f8")
    if raw.size != 2 * n**3:
        raise ValueError("truncated field file")
    c = (raw[0::2] + 1j * raw[1::2]).reshape(n, n, n)
    if lattice is not None and (lattice.n != n or lattice.L != L):
        raise ValueError("field file does not match the provided lattice")
    lat = lattice if lattice is not None else MomentumLattice(L, n)
    return Field(lat, c, real_valued=bool(flags & 1))
