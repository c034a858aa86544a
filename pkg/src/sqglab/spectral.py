"""Band-limited periodic fields on the 2-torus and Fourier multipliers.

Arrays are indexed ``f[i, j]`` with ``x1 = i*h`` and ``x2 = j*h``,
``h = 2*pi/N``.  Real fields use the ``rfft2`` layout (last axis halved),
complex fields the full ``fft2`` layout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.fft as sfft

MEAN_TOL = 1e-12


class MeanError(ValueError):
    """Operator undefined on the zero mode and the input has nonzero mean."""


@dataclass(frozen=True)
class GridSpec:
    N: int
    dealias_fraction: Fraction = Fraction(2, 3)

    def __post_init__(self):
        if self.N < 32 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 32, got {self.N}")
        fr = Fraction(self.dealias_fraction)
        if not 0 < fr <= 1:
            raise ValueError("dealias_fraction must lie in (0, 1]")
        object.__setattr__(self, "dealias_fraction", fr)

    @property
    def kmax(self) -> int:
        return self.N // 2 - 1

    @property
    def dealias_cutoff(self) -> int:
        return int(self.dealias_fraction * self.N // 2)

    def check_band(self, lam_final: float) -> None:
        if not self.kmax > 2 * lam_final:
            raise ValueError(f"grid N={self.N} cannot represent 2*lambda={2 * lam_final}")


_GRIDS: dict = {}


class Grid:
    """Cached wavenumber arrays and transforms for a GridSpec."""

    def __init__(self, spec: GridSpec | int):
        if isinstance(spec, int):
            spec = GridSpec(spec)
        self.spec = spec
        N = spec.N
        self.N = N
        self.h = 2 * np.pi / N
        x = np.arange(N) * self.h
        self.x1 = x[:, None] * np.ones((1, N))
        self.x2 = np.ones((N, 1)) * x[None, :]
        k = sfft.fftfreq(N, 1.0 / N)
        kr = sfft.rfftfreq(N, 1.0 / N)
        self.k1 = k[:, None] * np.ones((1, kr.size))
        self.k2 = np.ones((N, 1)) * kr[None, :]
        self.k1c = k[:, None] * np.ones((1, N))
        self.k2c = np.ones((N, 1)) * k[None, :]
        # Nyquist modes are zeroed by derivative multipliers
        self.nyq = (np.abs(self.k1) == N // 2) | (np.abs(self.k2) == N // 2)
        self.nyqc = (np.abs(self.k1c) == N // 2) | (np.abs(self.k2c) == N // 2)
        self._mult: dict = {}

    @classmethod
    def get(cls, spec: GridSpec | int) -> "Grid":
        if isinstance(spec, int):
            spec = GridSpec(spec)
        g = _GRIDS.get(spec)
        if g is None:
            g = _GRIDS[spec] = cls(spec)
        return g

    # transforms ------------------------------------------------------------
    def rfft(self, f):
        return sfft.rfft2(f, axes=(-2, -1))

    def irfft(self, fh):
        return sfft.irfft2(fh, s=(self.N, self.N), axes=(-2, -1))

    def fft(self, f):
        return sfft.fft2(f, axes=(-2, -1))

    def ifft(self, fh):
        return sfft.ifft2(fh, axes=(-2, -1))

    # multipliers -------------------------------------------------------------
    def wavenumbers(self, complex_layout: bool = False):
        return (self.k1c, self.k2c) if complex_layout else (self.k1, self.k2)

    def kabs(self, complex_layout: bool = False):
        key = ("kabs", complex_layout)
        if key not in self._mult:
            k1, k2 = self.wavenumbers(complex_layout)
            self._mult[key] = np.sqrt(k1 ** 2 + k2 ** 2)
        return self._mult[key]

    def lam_power(self, s: float, complex_layout: bool = False):
        """Multiplier |k|^s with the zero mode set to 0 (s != 0)."""
        key = ("lam", float(s), complex_layout)
        if key not in self._mult:
            ka = self.kabs(complex_layout)
            m = np.zeros_like(ka)
            nz = ka > 0
            m[nz] = ka[nz] ** s
            self._mult[key] = m
        return self._mult[key]

    def deriv(self, j: int, complex_layout: bool = False):
        """Multiplier of d/dx_j (index j in {0, 1}), Nyquist zeroed."""
        key = ("d", j, complex_layout)
        if key not in self._mult:
            k = self.wavenumbers(complex_layout)[j]
            nyq = self.nyqc if complex_layout else self.nyq
            m = 1j * k
            m = np.where(nyq, 0, m)
            self._mult[key] = m
        return self._mult[key]

    def anti_div_symbols(self, complex_layout: bool = False):
        key = ("R", complex_layout)
        if key not in self._mult:
            k1, k2 = self.wavenumbers(complex_layout)
            k4 = (k1 ** 2 + k2 ** 2) ** 2
            k4 = np.where(k4 == 0, 1, k4)
            s11 = (k2 ** 2 - k1 ** 2) / k4
            s12 = -2 * k1 * k2 / k4
            s11[0, 0] = 0
            s12[0, 0] = 0
            self._mult[key] = (s11, s12)
        return self._mult[key]

    def dealias_mask(self, complex_layout: bool = False):
        key = ("dealias", complex_layout)
        if key not in self._mult:
            k1, k2 = self.wavenumbers(complex_layout)
            kc = self.spec.dealias_cutoff
            self._mult[key] = (np.abs(k1) <= kc) & (np.abs(k2) <= kc)
        return self._mult[key]

    def radial_weights(self):
        """Multiplicity of rfft columns in Parseval sums (1 or 2)."""
        if "w" not in self._mult:
            w = np.full(self.k1.shape, 2.0)
            w[:, 0] = 1.0
            if self.N % 2 == 0:
                w[:, -1] = 1.0
            self._mult["w"] = w
        return self._mult["w"]


# ----------------------------------------------------------------------------
# field containers


class ScalarField:
    """Periodic scalar samples with a lazily synchronized spectrum."""

    __slots__ = ("grid", "_phys", "_hat", "time", "is_real", "flags")

    def __init__(self, grid: Grid, phys=None, hat=None, time: float = 0.0,
                 is_real: bool | None = None):
        if phys is None and hat is None:
            raise ValueError("need samples or coefficients")
        self.grid = grid if isinstance(grid, Grid) else Grid.get(grid)
        if is_real is None:
            if phys is not None:
                is_real = not np.iscomplexobj(phys)
            else:
                is_real = hat.shape[-1] != self.grid.N or self.grid.N == 2
        self.is_real = is_real
        if phys is not None:
            phys = np.asarray(phys, dtype=float if is_real else complex)
        self._phys = phys
        self._hat = hat
        self.time = float(time)
        self.flags: dict = {}

    @classmethod
    def from_function(cls, grid, fn, time: float = 0.0):
        g = grid if isinstance(grid, Grid) else Grid.get(grid)
        return cls(g, phys=fn(g.x1, g.x2), time=time)

    @property
    def values(self):
        if self._phys is None:
            g = self.grid
            self._phys = g.irfft(self._hat) if self.is_real else g.ifft(self._hat)
        return self._phys

    @property
    def coeffs(self):
        if self._hat is None:
            g = self.grid
            self._hat = g.rfft(self._phys) if self.is_real else g.fft(self._phys)
        return self._hat

    @property
    def complex_layout(self) -> bool:
        return not self.is_real

    def with_coeffs(self, hat) -> "ScalarField":
        return ScalarField(self.grid, hat=hat, time=self.time, is_real=self.is_real)

    def mean(self) -> complex:
        return self.coeffs[0, 0] / self.grid.N ** 2

    def is_mean_zero(self, tol: float = MEAN_TOL) -> bool:
        c = self.coeffs
        scale = max(np.abs(c).max(), 1e-300)
        return abs(c[0, 0]) <= tol * scale or abs(c[0, 0]) < 1e-300

    def conj(self) -> "ScalarField":
        if self.is_real:
            return self
        return ScalarField(self.grid, phys=np.conj(self.values), time=self.time, is_real=False)

    def __add__(self, other):
        return ScalarField(self.grid, phys=self.values + other.values, time=self.time)

    def __sub__(self, other):
        return ScalarField(self.grid, phys=self.values - other.values, time=self.time)

    def __mul__(self, c):
        return ScalarField(self.grid, phys=self.values * c, time=self.time)

    __rmul__ = __mul__


class VectorField:
    __slots__ = ("components",)

    def __init__(self, c1: ScalarField, c2: ScalarField):
        self.components = (c1, c2)

    def __getitem__(self, i):
        return self.components[i]

    @property
    def grid(self):
        return self.components[0].grid


class SymTensorField:
    """Symmetric 2x2 field stored as (t11, t12, t22)."""

    __slots__ = ("t11", "t12", "t22")

    def __init__(self, t11: ScalarField, t12: ScalarField, t22: ScalarField):
        self.t11, self.t12, self.t22 = t11, t12, t22

    @property
    def components(self):
        return (self.t11, self.t12, self.t22)

    @property
    def grid(self):
        return self.t11.grid

    def trace(self) -> ScalarField:
        return self.t11 + self.t22

    def matrix(self):
        """Pointwise (N, N, 2, 2) array."""
        a, b, c = (t.values for t in self.components)
        return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)


# ----------------------------------------------------------------------------
# operators


def _require_mean_zero(f: ScalarField, what: str):
    if not f.is_mean_zero():
        raise MeanError(f"{what} needs a mean-zero input (mean={f.mean():.3e})")


def apply_multiplier(f: ScalarField, m_real, m_complex=None) -> ScalarField:
    m = m_complex if (f.complex_layout and m_complex is not None) else m_real
    return f.with_coeffs(f.coeffs * m)


def fractional_laplacian(f: ScalarField, s: float) -> ScalarField:
    """Lambda^s = (-Laplacian)^(s/2); s = 0 returns the field unchanged."""
    if s == 0:
        return f
    if s < 0:
        _require_mean_zero(f, "Lambda^s with s<0")
    g = f.grid
    return f.with_coeffs(f.coeffs * g.lam_power(s, f.complex_layout))


def partial(f: ScalarField, j: int) -> ScalarField:
    return f.with_coeffs(f.coeffs * f.grid.deriv(j, f.complex_layout))


def gradient(f: ScalarField) -> VectorField:
    return VectorField(partial(f, 0), partial(f, 1))


def perp_gradient(f: ScalarField) -> VectorField:
    """(-d2 f, d1 f)."""
    g, cl = f.grid, f.complex_layout
    c = f.coeffs
    return VectorField(f.with_coeffs(-c * g.deriv(1, cl)), f.with_coeffs(c * g.deriv(0, cl)))


def divergence(v: VectorField) -> ScalarField:
    a, b = v.components
    g, cl = a.grid, a.complex_layout
    return a.with_coeffs(a.coeffs * g.deriv(0, cl) + b.coeffs * g.deriv(1, cl))


def riesz_perp(f: ScalarField, sign: int = 1) -> VectorField:
    """Multiplier sign * i k_perp / |k| with k_perp = (-k2, k1); equals perp-grad Lambda^-1."""
    _require_mean_zero(f, "riesz_perp")
    g, cl = f.grid, f.complex_layout
    inv = g.lam_power(-1, cl)
    c = f.coeffs * inv * sign
    return VectorField(f.with_coeffs(-c * g.deriv(1, cl)), f.with_coeffs(c * g.deriv(0, cl)))


def smooth_step(s):
    """C^2 polynomial ramp: 0 for s<=0, 1 for s>=1."""
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s * s)


def annulus_multiplier(kabs, lam: float, taper: float | None = None):
    lo, hi = 0.5 * lam, 2.0 * lam
    if taper is None:
        return ((kabs >= lo) & (kabs <= hi)).astype(float)
    w = taper * lam
    return smooth_step((kabs - (lo - w)) / w) * smooth_step(((hi + w) - kabs) / w)


def project_annulus(f: ScalarField, lam: float, taper: float | None = None) -> ScalarField:
    """Band-pass to lam/2 <= |k| <= 2 lam; sharp unless ``taper`` (fraction of lam) given."""
    m = annulus_multiplier(f.grid.kabs(f.complex_layout), lam, taper)
    return f.with_coeffs(f.coeffs * m)


def wave_bump(k1, k2, direction, lam: float):
    """phi(k/lam): 1 within |d|/4 of ``direction``, 0 beyond |d|/2, polynomial taper between."""
    d = np.asarray(direction, dtype=float)
    r = np.hypot(k1 / lam - d[0], k2 / lam - d[1])
    nd = np.hypot(*d)
    return 1.0 - smooth_step((r - 0.25 * nd) / (0.25 * nd))


def project_wave(f: ScalarField, direction, lam: float) -> ScalarField:
    k1, k2 = f.grid.wavenumbers(f.complex_layout)
    return f.with_coeffs(f.coeffs * wave_bump(k1, k2, direction, lam))


def anti_divergence(f: ScalarField) -> SymTensorField:
    """Symmetric traceless R[f] with d_j d_l R^{jl}[f] = f on mean-zero f."""
    _require_mean_zero(f, "anti_divergence")
    s11, s12 = f.grid.anti_div_symbols(f.complex_layout)
    c = f.coeffs
    return SymTensorField(f.with_coeffs(s11 * c), f.with_coeffs(s12 * c), f.with_coeffs(-s11 * c))


def double_divergence(T: SymTensorField) -> ScalarField:
    g, cl = T.grid, T.t11.complex_layout
    k1, k2 = g.wavenumbers(cl)
    c = -(k1 * k1 * T.t11.coeffs + 2 * k1 * k2 * T.t12.coeffs + k2 * k2 * T.t22.coeffs)
    return T.t11.with_coeffs(c)


def _derivative_fields(f: ScalarField, order: int):
    g, cl = f.grid, f.complex_layout
    d0, d1 = g.deriv(0, cl), g.deriv(1, cl)
    out = []
    for a in range(order + 1):
        m = d0 ** (order - a) * d1 ** a
        out.append(f.with_coeffs(f.coeffs * m).values)
    return out


def sup_norm(f, derivative_order: int = 0) -> float:
    """Max over grid and over all derivatives of total order ``derivative_order``."""
    if isinstance(f, (VectorField, SymTensorField)):
        return max(sup_norm(c, derivative_order) for c in f.components)
    if derivative_order == 0:
        return float(np.abs(f.values).max())
    return float(max(np.abs(v).max() for v in _derivative_fields(f, derivative_order)))


def derivative_stack(grid, order: int):
    """Multipliers of every derivative of total order 1..order, stacked (m, N, N//2+1)."""
    key = ("dstack", order)
    if key not in grid._mult:
        d0, d1 = grid.deriv(0), grid.deriv(1)
        ms = [d0 ** (n - a) * d1 ** a for n in range(1, order + 1) for a in range(n + 1)]
        grid._mult[key] = np.stack(ms) if ms else np.zeros((0,) + d0.shape, complex)
    return grid._mult[key]


def derivative_sups(grid, values, order: int) -> np.ndarray:
    """Sup norm of all derivatives of each total order 0..order (max over components)."""
    values = np.asarray(values, dtype=float)
    out = np.zeros(order + 1)
    out[0] = float(np.abs(values).max()) if values.size else 0.0
    if order == 0:
        return out
    ms = derivative_stack(grid, order)
    fh = grid.rfft(values).reshape((-1,) + ms.shape[-2:])
    # stack rows are grouped by order: order n occupies n + 1 rows
    start = np.cumsum([0] + [n + 1 for n in range(1, order + 1)])
    for c in range(fh.shape[0]):
        d = np.abs(grid.irfft(fh[c] * ms)).max(axis=(-2, -1))
        for n in range(1, order + 1):
            out[n] = max(out[n], float(d[start[n - 1]:start[n]].max()))
    return out


def holder_norm(grid, values, order: int) -> float:
    """C^order norm: max over derivative orders 0..order of the sup norm."""
    return float(derivative_sups(grid, values, order).max())


def bandwidth(f: ScalarField, rel_tol: float = 1e-13) -> int:
    """Largest |k|_inf carrying a coefficient above rel_tol of the peak."""
    c = np.abs(f.coeffs)
    peak = c.max()
    if peak == 0:
        return 0
    k1, k2 = f.grid.wavenumbers(f.complex_layout)
    sig = c > rel_tol * peak
    return int(max(np.abs(k1[sig]).max(), np.abs(k2[sig]).max()))


def multiply_dealiased(f: ScalarField, g: ScalarField) -> ScalarField:
    """Pointwise product truncated to the dealiased box |k_i| <= cutoff.

    The result carries ``flags['bandwidth_overflow']`` when the combined
    bandwidth of the factors exceeds the retained box.
    """
    grid = f.grid
    both_real = f.is_real and g.is_real
    p = ScalarField(grid, phys=f.values * g.values, time=f.time,
                    is_real=both_real)
    mask = grid.dealias_mask(not both_real)
    out = p.with_coeffs(p.coeffs * mask)
    out.flags["bandwidth_overflow"] = bandwidth(f) + bandwidth(g) > grid.spec.dealias_cutoff
    return out


# ----------------------------------------------------------------------------
# binary dump format

_MAGIC = b"SQGF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIddd")


def write_fields(path, arrays, time: float = 0.0, band_low: float = 0.0,
                 band_high: float = 0.0) -> None:
    """Write real component arrays (each N x N) in the SQGF format."""
    arrays = [np.asarray(a, dtype="<f8") for a in arrays]
    N = arrays[0].shape[0]
    for a in arrays:
        if a.shape != (N, N):
            raise ValueError("all components must be N x N")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, N, len(arrays), time, band_low, band_high))
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes(order="C"))


def read_fields(path):
    """Return (arrays, header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, ver, N, ncomp, time, lo, hi = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError("not an SQGF file")
    if ver != _VERSION:
        raise ValueError(f"unsupported SQGF version {ver}")
    off = _HEADER.size
    n = N * N * 8
    if len(raw) != off + ncomp * n:
        raise ValueError("truncated SQGF file")
    arrays = [np.frombuffer(raw, dtype="<f8", count=N * N, offset=off + i * n).reshape(N, N).copy()
              for i in range(ncomp)]
    return arrays, {"version": ver, "N": N, "components": ncomp, "time": time,
                    "band_low": lo, "band_high": hi}
