"""Multiplier operators acting on modulated waves and the bilinear kernel.

A modulated wave is ``W = P(a exp(i lam xi))`` with a linear carrier
``xi = g.x + psi`` (``lam*g`` an integer wavevector, ``psi`` periodic).
The quadratic interaction ``Q = perp-grad W_I Lambda W_Ibar + c.c.`` is written
as ``Q^l = d_j B^{jl}`` with B computed from its Fourier-side kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import Grid, ScalarField, SymTensorField, VectorField, wave_bump


class KernelQuadratureError(RuntimeError):
    pass


class ConjugatePairError(ValueError):
    pass


# ----------------------------------------------------------------------------
# symbols


def symbol_lambda(k1, k2):
    return np.hypot(k1, k2)


def symbol_riesz_perp(k1, k2, sign: int = 1):
    """sign * i k_perp / |k|, k_perp = (-k2, k1); zero at k = 0."""
    ka = np.hypot(k1, k2)
    inv = np.divide(1.0, ka, out=np.zeros_like(ka, dtype=float), where=ka > 0)
    return (sign * 1j * (-k2) * inv, sign * 1j * k1 * inv)


# ----------------------------------------------------------------------------
# modulated waves


class ModulatedWave:
    """W = P_{g,lam}(a exp(i lam (g.x + psi))) on a grid.

    Parameters
    ----------
    grid : Grid
    amplitude : array (N, N), real or complex
    carrier : integer-valued 2-vector g with lam*g integer
    lam : frequency parameter
    psi : periodic phase deviation (default 0)
    project : apply the wave bump projection centered at g
    prune : drop Fourier coefficients below ``prune * max`` (0 keeps all)
    """

    def __init__(self, grid: Grid, amplitude, carrier, lam: float, psi=None,
                 project: bool = True, prune: float = 0.0):
        self.grid = grid if isinstance(grid, Grid) else Grid.get(grid)
        self.a = np.asarray(amplitude)
        self.g = np.asarray(carrier, dtype=float)
        self.lam = float(lam)
        kw = self.lam * self.g
        if not np.allclose(kw, np.round(kw), atol=1e-12):
            raise ValueError("lam * carrier must be an integer wavevector")
        self.kw = np.round(kw).astype(int)
        n = self.grid.N
        self.psi = np.zeros((n, n)) if psi is None else np.asarray(psi, dtype=float)
        self.project = project
        self.prune = prune
        self._hat = None

    @classmethod
    def from_hat(cls, grid, hat, carrier, lam, amplitude=None, psi=None):
        w = cls(grid, np.zeros((grid.N, grid.N)) if amplitude is None else amplitude,
                carrier, lam, psi=psi)
        w._hat = hat
        return w

    def phase(self):
        g = self.grid
        return self.g[0] * g.x1 + self.g[1] * g.x2 + self.psi

    def grad_xi(self):
        g = self.grid
        ph = g.rfft(self.psi)
        return np.stack([self.g[0] + g.irfft(ph * g.deriv(0)),
                         self.g[1] + g.irfft(ph * g.deriv(1))])

    def unprojected(self):
        g = self.grid
        carrier = np.exp(1j * (self.kw[0] * g.x1 + self.kw[1] * g.x2))
        return self.a * np.exp(1j * self.lam * self.psi) * carrier

    @property
    def hat(self):
        """Fourier coefficients (fft layout) of the realized wave."""
        if self._hat is None:
            g = self.grid
            h = g.fft(self.unprojected())
            if self.project:
                h = h * _bump_table(g, tuple(self.g), self.lam)
            if self.prune > 0:
                m = np.abs(h)
                h = np.where(m > self.prune * m.max(), h, 0)
            self._hat = h
        return self._hat

    @property
    def field(self):
        return self.grid.ifft(self.hat)

    def conj(self) -> "ModulatedWave":
        w = ModulatedWave(self.grid, np.conj(self.a), -self.g, self.lam, psi=-self.psi,
                          project=self.project, prune=self.prune)
        if self._hat is not None:
            w._hat = reflect_conj(self._hat)
        return w


_BUMPS: dict = {}


def _bump_table(grid: Grid, carrier: tuple, lam: float):
    key = (grid.N, carrier, lam)
    if key not in _BUMPS:
        if len(_BUMPS) > 32:
            _BUMPS.clear()
        _BUMPS[key] = wave_bump(grid.k1c, grid.k2c, carrier, lam)
    return _BUMPS[key]


def reflect_conj(hat):
    """Coefficients of conj(f) from those of f (fft layout): conj(hat(-k))."""
    return np.conj(np.roll(hat[::-1, ::-1], 1, axis=(0, 1)))


# ----------------------------------------------------------------------------
# linear expansion


def _apply_symbol(grid: Grid, hat, symbol):
    m = symbol(grid.k1c, grid.k2c)
    if isinstance(m, tuple):
        return tuple(grid.ifft(hat * mi) for mi in m)
    return grid.ifft(hat * m)


def microlocal_expand(op_symbol, w: ModulatedWave) -> dict:
    """T[W] = exp(i lam xi)(a K(lam grad xi) + delta): principal and delta by difference."""
    g = w.grid
    full = _apply_symbol(g, w.hat, op_symbol)
    gx = w.grad_xi()
    m = op_symbol(w.lam * gx[0], w.lam * gx[1])
    osc = np.exp(1j * w.lam * w.phase())
    if isinstance(m, tuple):
        principal = tuple(osc * w.a * mi for mi in m)
        delta = tuple(f - p for f, p in zip(full, principal))
    else:
        principal = osc * w.a * m
        delta = full - principal
    return {"full": full, "principal": principal, "delta": delta}


# ----------------------------------------------------------------------------
# kernels


def bilinear_kernel_sym(grad_xi, lam: float = 1.0):
    """Closed-form symmetric kernel at (lam grad xi, -lam grad xi).

    Returns (k11, k12, k22) for array inputs of shape (2, ...), or a 2x2
    matrix for a plain 2-vector.
    """
    gx = np.asarray(grad_xi, dtype=float)
    p1, p2 = gx[0], gx[1]
    nrm = np.hypot(p1, p2)
    if np.any(nrm == 0):
        raise ValueError("kernel undefined at zero phase gradient")
    c = 0.5 * lam / nrm
    k11 = -2 * c * p1 * p2
    k12 = c * (p1 * p1 - p2 * p2)
    if gx.ndim == 1:
        return np.array([[k11, k12], [k12, -k11]])
    return k11, k12, -k11


def _dm(u1, u2):
    """d_j of (u_perp^l / |u|), as (m11, m12, m21, m22) with index order [j][l]."""
    r = np.hypot(u1, u2)
    r3 = r ** 3
    return (u1 * u2 / r3, u2 * u2 / r3, -u1 * u1 / r3, -u1 * u2 / r3)


_GL_CACHE: dict = {}


def _gauss(n):
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1), 0.5 * w)
    return _GL_CACHE[n]


def kernel_theta(zeta, eta, sign: int = 1, nodes: int = 16, check: bool = True):
    """Segment kernel K^{jl}(zeta, eta) = sign * int_0^1 d_j(u_perp^l/|u|)(u_s) ds.

    ``u_s = s*zeta - (1-s)*eta`` runs from -eta to zeta; then
    ``(m(zeta) + m(eta))^l = i (zeta+eta)_j K^{jl}`` for m = i k_perp/|k|.
    Inputs are arrays (2, P); returns (4, P) in the order 11, 12, 21, 22.
    """
    z = np.asarray(zeta, dtype=float)
    e = np.asarray(eta, dtype=float)
    d = z + e
    # closest approach of the segment to the origin
    dd = d[0] ** 2 + d[1] ** 2
    s_star = np.clip(np.divide(e[0] * d[0] + e[1] * d[1], dd, out=np.zeros_like(dd),
                               where=dd > 0), 0.0, 1.0)
    umin = np.hypot(s_star * z[0] - (1 - s_star) * e[0], s_star * z[1] - (1 - s_star) * e[1])
    scale = np.maximum(np.hypot(z[0], z[1]), np.hypot(e[0], e[1]))
    near = umin < 0.01 * scale
    if np.any(umin == 0):
        i = int(np.argmax(umin == 0))
        raise KernelQuadratureError(
            f"segment through the origin for pair zeta={z[:, i]}, eta={e[:, i]}")

    def integrate(n, lo, hi):
        x, w = _gauss(n)
        out = np.zeros((4,) + z.shape[1:])
        for xs, ws in zip(x, w):
            s = lo + (hi - lo) * xs
            u1 = s * z[0] - (1 - s) * e[0]
            u2 = s * z[1] - (1 - s) * e[1]
            for a, m in enumerate(_dm(u1, u2)):
                out[a] += ws * (hi - lo) * m
        return out

    def split(n):
        if not np.any(near):
            return integrate(n, 0.0, 1.0)
        # split at the closest point where the integrand peaks
        cut = np.where(near, s_star, 0.5)
        return integrate(n, 0.0, cut) + integrate(n, cut, 1.0)

    K = split(nodes)
    if check:
        K2 = split(2 * nodes)
        err = np.abs(K2 - K).max(axis=0)
        ref = np.abs(K2).max(axis=0) + 1e-300
        bad = err > 1e-10 * ref
        if np.any(bad):
            i = int(np.argmax(bad))
            raise KernelQuadratureError(
                f"kernel quadrature not converged for pair zeta={z[:, i]}, eta={e[:, i]}")
        K = K2
    return sign * K


def kernel_wave(zeta, eta, sign: int = 1, nodes: int = 16, check: bool = True):
    """Kernel acting on W-coefficients: kernel_theta * |zeta| * |eta|.

    The kernel is already symmetric under exchanging the two frequencies
    (the segment integrand is even in u), so no extra symmetrization is needed.
    """
    K = kernel_theta(zeta, eta, sign, nodes, check)
    return K * (np.hypot(zeta[0], zeta[1]) * np.hypot(eta[0], eta[1]))


# ----------------------------------------------------------------------------
# quadratic term and bilinear tensor


def _check_pair(wI: ModulatedWave, wIbar: ModulatedWave, tol: float = 1e-10):
    h, hb = wI.hat, wIbar.hat
    ref = np.abs(h).max()
    if ref == 0 and np.abs(hb).max() == 0:
        return
    if np.abs(hb - reflect_conj(h)).max() > tol * max(ref, 1e-300):
        raise ConjugatePairError("waves are not a conjugate pair")


def quadratic_Q(wI: ModulatedWave, wIbar: ModulatedWave) -> VectorField:
    """perp-grad W_I Lambda W_Ibar + perp-grad W_Ibar Lambda W_I (real)."""
    _check_pair(wI, wIbar)
    g = wI.grid
    h = wI.hat
    hb = reflect_conj(h)
    lam = g.lam_power(1, True)
    d0, d1 = g.deriv(0, True), g.deriv(1, True)
    W_l, Wb_l = g.ifft(h * lam), g.ifft(hb * lam)
    p1, p2 = g.ifft(-h * d1), g.ifft(h * d0)
    pb1, pb2 = g.ifft(-hb * d1), g.ifft(hb * d0)
    q1 = (p1 * Wb_l + pb1 * W_l).real
    q2 = (p2 * Wb_l + pb2 * W_l).real
    return VectorField(ScalarField(g, phys=q1), ScalarField(g, phys=q2))


@dataclass
class BilinearTensor:
    """Full kernel tensor B^{jl} (j = derivative index) and its symmetric part."""

    grid: Grid
    full: np.ndarray  # (2, 2, N, N) real
    hat: np.ndarray   # (2, 2, N, N) fft layout
    imag_ratio: float
    npairs: int

    @property
    def sym(self) -> SymTensorField:
        g = self.grid
        b = self.full
        return SymTensorField(ScalarField(g, phys=b[0, 0]),
                              ScalarField(g, phys=0.5 * (b[0, 1] + b[1, 0])),
                              ScalarField(g, phys=b[1, 1]))

    def divergence(self) -> VectorField:
        """(d_j B^{j1}, d_j B^{j2})."""
        g = self.grid
        d0, d1 = g.deriv(0, True), g.deriv(1, True)
        out = [g.ifft(self.hat[0, l] * d0 + self.hat[1, l] * d1).real for l in range(2)]
        return VectorField(ScalarField(g, phys=out[0]), ScalarField(g, phys=out[1]))

    def sym_divergence(self) -> VectorField:
        g = self.grid
        s = self.sym
        c11, c12, c22 = (g.fft(t.values) for t in s.components)
        d0, d1 = g.deriv(0, True), g.deriv(1, True)
        v1 = g.ifft(c11 * d0 + c12 * d1).real
        v2 = g.ifft(c12 * d0 + c22 * d1).real
        return VectorField(ScalarField(g, phys=v1), ScalarField(g, phys=v2))


def bilinear_hat(grid: Grid, hat, sign: int = 1, nodes: int = 16, prune: float = 1e-15,
                 chunk: int = 200_000):
    """Fourier coefficients (fft layout, (2, 2, N, N)) of B[W, conj W] from hat(W)."""
    N = grid.N
    mag = np.abs(hat)
    peak = mag.max()
    out = np.zeros((2, 2, N, N), dtype=complex)
    if peak == 0:
        return out, 0
    idx = np.nonzero(mag > prune * peak)
    z1 = grid.k1c[idx]
    z2 = grid.k2c[idx]
    amp = hat[idx]
    S = z1.size
    step = max(1, chunk // S)
    npairs = 0
    for p0 in range(0, S, step):
        sl = slice(p0, min(S, p0 + step))
        # pairs (zeta_p, eta = -zeta_p'), coefficient hat(zeta_p) * conj(hat(zeta_p'))
        Z1 = np.repeat(z1[sl], S)
        Z2 = np.repeat(z2[sl], S)
        E1 = -np.tile(z1, sl.stop - sl.start)
        E2 = -np.tile(z2, sl.stop - sl.start)
        A = (np.repeat(amp[sl], S) * np.tile(np.conj(amp), sl.stop - sl.start)) / (N * N)
        K = kernel_wave(np.stack([Z1, Z2]), np.stack([E1, E2]), sign, nodes)
        i1 = np.mod(Z1 + E1, N).astype(int)
        i2 = np.mod(Z2 + E2, N).astype(int)
        for a, (j, l) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            np.add.at(out[j, l], (i1, i2), K[a] * A)
        npairs += Z1.size
    return out, npairs


def bilinear_B(wI: ModulatedWave, wIbar: ModulatedWave, sign: int = 1, nodes: int = 16,
               prune: float = 1e-15) -> BilinearTensor:
    """B with Q^l = d_j B^{jl} for a conjugate pair, via the segment kernel."""
    _check_pair(wI, wIbar)
    g = wI.grid
    bh, npairs = bilinear_hat(g, wI.hat, sign, nodes, prune)
    phys = g.ifft(bh)
    scale = max(np.abs(phys).max(), 1e-300)
    imag_ratio = float(np.abs(phys.imag).max() / scale)
    return BilinearTensor(g, phys.real.copy(), bh, imag_ratio, npairs)


def measure_kernel_factor(lam: int = 4, N: int = 64, carrier=(1, 2)) -> dict:
    """Realized B_sym / closed form for a plane-wave pair, and its lambda power.

    Returns ``{'factor': kappa, 'power': p}`` where B_sym = kappa * closed form
    and B scales like lam**p.
    """
    g = Grid.get(N)
    vals = []
    for L in (lam, 2 * lam):
        w = ModulatedWave(g, np.ones((N, N)), carrier, L)
        B = bilinear_B(w, w.conj())
        Bs = B.sym
        Kc = bilinear_kernel_sym(np.asarray(carrier, float), L)
        num = np.array([Bs.t11.values.mean(), Bs.t12.values.mean()])
        den = np.array([Kc[0, 0], Kc[0, 1]])
        j = int(np.argmax(np.abs(den)))
        vals.append((num[j] / den[j], abs(num[j])))
    factor = vals[0][0]
    power = float(np.log2(vals[1][1] / vals[0][1]))
    return {"factor": float(factor), "power": power}


_KAPPA: dict = {}


def kernel_factor() -> float:
    if "k" not in _KAPPA:
        _KAPPA["k"] = float(np.round(measure_kernel_factor()["factor"], 12))
    return _KAPPA["k"]


def delta_B(wI: ModulatedWave, wIbar: ModulatedWave, B: BilinearTensor | None = None,
            factor: float | None = None) -> SymTensorField:
    """B_sym minus its leading term factor * |a|^2 * closed-form kernel at (lam grad xi)."""
    if B is None:
        B = bilinear_B(wI, wIbar)
    if factor is None:
        factor = kernel_factor()
    g = wI.grid
    k11, k12, k22 = bilinear_kernel_sym(wI.grad_xi(), wI.lam)
    a2 = np.abs(wI.a) ** 2
    s = B.sym
    return SymTensorField(ScalarField(g, phys=s.t11.values - factor * a2 * k11),
                          ScalarField(g, phys=s.t12.values - factor * a2 * k12),
                          ScalarField(g, phys=s.t22.values - factor * a2 * k22))
