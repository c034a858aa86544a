"""Lifting function, flow mollification, base matrices and the amplitude solve."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .microlocal import bilinear_kernel_sym
from .spectral import Grid, ScalarField, SymTensorField, perp_gradient
from .transport import TrigEvaluator, rk4_displacement

SQRT5 = math.sqrt(5.0)


class AmplitudeSolveError(RuntimeError):
    def __init__(self, msg: str, location=None):
        super().__init__(msg if location is None else f"{msg} at index {location}")
        self.location = location


# ----------------------------------------------------------------------------
# time mollifier: rho(s) ~ exp(-1/(1-s^2)) on (-1, 1)


def _bump_raw(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


_CDF_NODES = np.polynomial.legendre.leggauss(80)
# normalization with the same rule as the CDF, so the CDF reaches 1 continuously
_BUMP_Z = 2.0 * float((0.5 * _bump_raw(0.5 * (_CDF_NODES[0] - 1)) * _CDF_NODES[1]).sum())


def bump(s):
    """Normalized C-infinity bump on [-1, 1] (unit mass)."""
    return _bump_raw(s) / _BUMP_Z


def bump_deriv(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    out[inside] = np.exp(-1.0 / (1.0 - si ** 2)) * (-2 * si / (1 - si ** 2) ** 2)
    return out / _BUMP_Z


def bump_cdf(x):
    """int_{-1}^{x} bump; exactly 0 below -1 and exactly 1 above 1."""
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 1, 1.0, 0.0)
    inside = (x > -1) & (x < 1)
    if np.any(inside):
        xi = x[inside]
        nodes, w = _CDF_NODES
        # split at the origin so each piece sees a smooth integrand
        lo = np.minimum(xi, 0.0)
        val = _gl(-1.0, lo, nodes, w)
        hi = xi > 0
        val = val + np.where(hi, _gl(0.0, np.maximum(xi, 0.0), nodes, w), 0.0)
        out[inside] = val
    return out


def _gl(a, b, nodes, w):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    s = mid[..., None] + half[..., None] * nodes
    return half * (bump(s) * w).sum(axis=-1)


def bump_norms() -> dict:
    """sup of the bump and L1 norm of its derivative (twice the sup)."""
    return {"sup": float(bump(0.0)), "deriv_l1": 2.0 * float(bump(0.0))}


# ----------------------------------------------------------------------------
# lifting function


@dataclass(frozen=True)
class LiftingFunction:
    """e^{1/2}(t) = (C delta)^{1/2} (bump_w * 1_{[J0 - 2w, J1 + 2w]})(t)."""

    J: tuple
    width: float
    level: float  # C_lift * delta_q

    @property
    def edges(self):
        return self.J[0] - 2 * self.width, self.J[1] + 2 * self.width

    @property
    def support(self):
        a, b = self.edges
        return a - self.width, b + self.width

    @property
    def plateau(self):
        a, b = self.edges
        return a + self.width, b - self.width

    def profile(self, t):
        """Unit-height mollified indicator; exactly 1 on the plateau."""
        a, b = self.edges
        t = np.asarray(t, dtype=float)
        return bump_cdf((t - a) / self.width) - bump_cdf((t - b) / self.width)

    def sqrt_e(self, t):
        return math.sqrt(self.level) * self.profile(t)

    def __call__(self, t):
        return self.level * self.profile(t) ** 2

    def d_sqrt_e(self, t):
        a, b = self.edges
        t = np.asarray(t, dtype=float)
        w = self.width
        return math.sqrt(self.level) * (bump((t - a) / w) - bump((t - b) / w)) / w


def lifting(J, q: int, schedule) -> LiftingFunction:
    J = (float(J[0]), float(J[1]))
    if not J[1] >= J[0]:
        raise ValueError("J must be a non-empty interval")
    w = schedule.transport_scale(q)
    level = float(schedule.config.C_lift) * schedule.delta(q)
    return LiftingFunction(J, w, level)


# ----------------------------------------------------------------------------
# mollification


def spatial_mollifier_multiplier(kabs, l: float, L: int):
    """rho_hat(l k)^2 with rho_hat(k) = exp(-|k|^{2m}), m = floor(L/2) + 1.

    1 - rho_hat vanishes to order 2m > L at the origin, so the kernel has
    vanishing moments of all orders 1..L.
    """
    m = L // 2 + 1
    return np.exp(-(l * kabs) ** (2 * m)) ** 2


def time_mollifier_nodes(half_width: float, n: int = 8):
    """Gauss nodes on [-h, h] with bump weights normalized to unit sum."""
    x, w = np.polynomial.legendre.leggauss(n)
    wt = w * bump(x)
    wt = wt / wt.sum()
    return x * half_width, wt


@dataclass
class MollifiedStress:
    times: np.ndarray
    values: np.ndarray  # (nt, 3, n, n)
    distance: np.ndarray  # ||R - Rbar||_0 per time
    bound: float
    info: dict = field(default_factory=dict)


class StressMollifier:
    """Space-mollify then average along trajectories of ``velocity``, one time at a time.

    ``stress(t)`` and ``velocity(t)`` return physical samples (3, n, n) and
    (2, n, n) on ``grid``.  Times whose averaging window misses ``support``
    (an interval outside of which the stress vanishes) give zero.
    """

    def __init__(self, stress, velocity, grid: Grid, q: int, schedule, nodes: int = 8,
                 support=None, l: float | None = None, tau_m: float | None = None,
                 rk_steps: int = 2):
        self.grid = grid if isinstance(grid, Grid) else Grid.get(grid)
        cfg = schedule.config
        self.stress, self.velocity = stress, velocity
        self.l = schedule.l_moll(q) if l is None else l
        self.tau_m = schedule.tau_moll(q) if tau_m is None else tau_m
        self.mult = spatial_mollifier_multiplier(self.grid.kabs(), self.l, cfg.L)
        self.s_nodes, self.s_w = time_mollifier_nodes(self.tau_m, nodes)
        self.support = support
        self.rk_steps = rk_steps
        self.bound = (self.tau_m / schedule.transport_scale(q)
                      + (self.l * schedule.lam(q)) ** cfg.L) * schedule.delta(q)

    def __call__(self, t: float):
        """Mollified stress at time t and its sup distance from the stress."""
        g = self.grid
        n = g.N
        if self.support is not None and (t + self.tau_m < self.support[0]
                                         or t - self.tau_m > self.support[1]):
            return np.zeros((3, n, n)), 0.0
        acc = np.zeros((3, n, n))
        for s, ws in zip(self.s_nodes, self.s_w):
            d1, d2 = rk4_displacement(self.velocity, g, t, t + s, self.rk_steps)
            Rl = g.irfft(g.rfft(self.stress(t + s)) * self.mult)
            acc += ws * TrigEvaluator(g, Rl)(g.x1 + d1, g.x2 + d2)
        return acc, float(np.abs(self.stress(t) - acc).max())


def mollify_stress(stress, velocity, grid: Grid, times, q: int, schedule, nodes: int = 8,
                   support=None, l: float | None = None, tau_m: float | None = None,
                   rk_steps: int = 2) -> MollifiedStress:
    """StressMollifier evaluated at every time of ``times``."""
    m = StressMollifier(stress, velocity, grid, q, schedule, nodes, support, l, tau_m, rk_steps)
    times = np.asarray(times, dtype=float)
    n = m.grid.N
    out = np.zeros((times.size, 3, n, n))
    dist = np.zeros(times.size)
    for it, t in enumerate(times):
        out[it], dist[it] = m(t)
    return MollifiedStress(times, out, dist, m.bound, {"l": m.l, "tau_m": m.tau_m})


# ----------------------------------------------------------------------------
# amplitude equation


def base_matrices(parity: int) -> np.ndarray:
    m = np.array([[-8.0, 0.0], [0.0, 8.0]]) / (2 * SQRT5)
    if parity % 2 == 0:
        return m
    return -m


@dataclass
class AmplitudeSolution:
    b: dict  # v -> array
    iterations: int
    residual: float


def _as_components(x):
    if isinstance(x, SymTensorField):
        return np.stack([c.values.real for c in x.components])
    return np.asarray(x, dtype=float)


def solve_amplitudes(rbar_over_e, grads: dict, parity: int, max_iter: int = 50,
                     tol: float = 1e-13) -> AmplitudeSolution:
    """Solve sum_v b_v^2 K(grad xi_v) = M_[parity] - rbar_over_e pointwise.

    ``rbar_over_e`` is (3, ...) with components (11, 12, 22) or a SymTensorField;
    ``grads`` maps each of the two directions to a phase gradient array (2, ...).
    Newton in b from b = 1 with step halving on residual increase.
    """
    X = _as_components(rbar_over_e)
    keys = list(grads)
    if len(keys) != 2:
        raise ValueError("exactly two directions are required")
    M = base_matrices(parity)
    r11 = M[0, 0] - X[0]
    r12 = M[0, 1] - X[1]
    r22 = M[1, 1] - X[2]
    ks = [bilinear_kernel_sym(np.asarray(grads[v], dtype=float), 1.0) for v in keys]
    a11, a12 = ks[0][0], ks[1][0]
    c11, c12 = ks[0][1], ks[1][1]
    det = a11 * c12 - a12 * c11
    if np.any(np.abs(det) < 1e-12):
        raise AmplitudeSolveError("degenerate kernel system",
                                  np.unravel_index(int(np.argmin(np.abs(det))), det.shape))
    # linear solution in b^2, used only to detect an infeasible right side
    y1 = (r11 * c12 - a12 * r12) / det
    y2 = (a11 * r12 - r11 * c11) / det
    bad = (y1 <= 0) | (y2 <= 0)
    if np.any(bad):
        raise AmplitudeSolveError("no positive solution (b^2 <= 0)",
                                  tuple(int(i) for i in np.argwhere(bad)[0]))

    def resid(b1, b2):
        return (b1 * b1 * a11 + b2 * b2 * a12 - r11, b1 * b1 * c11 + b2 * b2 * c12 - r12)

    b1 = np.ones_like(r11)
    b2 = np.ones_like(r11)
    f1, f2 = resid(b1, b2)
    fn = np.hypot(f1, f2)
    it = 0
    while fn.max() > tol and it < max_iter:
        it += 1
        j11, j12 = 2 * b1 * a11, 2 * b2 * a12
        j21, j22 = 2 * b1 * c11, 2 * b2 * c12
        dj = j11 * j22 - j12 * j21
        s1 = (f1 * j22 - j12 * f2) / dj
        s2 = (j11 * f2 - f1 * j21) / dj
        step = np.ones_like(b1)
        for _ in range(30):
            n1, n2 = b1 - step * s1, b2 - step * s2
            g1, g2 = resid(n1, n2)
            gn = np.hypot(g1, g2)
            worse = gn > fn
            if not np.any(worse):
                break
            step = np.where(worse, 0.5 * step, step)
        b1, b2, f1, f2, fn = n1, n2, g1, g2, gn
    if fn.max() > tol:
        loc = tuple(int(i) for i in np.unravel_index(int(np.argmax(fn)), fn.shape))
        raise AmplitudeSolveError(f"Newton did not converge in {max_iter} iterations", loc)
    if np.any(b1 <= 0) or np.any(b2 <= 0):
        raise AmplitudeSolveError("Newton reached a non-positive root")
    # full-matrix residual, including the 22 entry
    r_22 = b1 * b1 * ks[0][2] + b2 * b2 * ks[1][2] - r22
    res = float(max(np.abs(f1).max(), np.abs(f2).max(), np.abs(r_22).max()))
    return AmplitudeSolution({keys[0]: b1, keys[1]: b2}, it, res)


# ----------------------------------------------------------------------------
# assembly


def amplitude_value(b, lam_next: float, chi_t: float, sqrt_e_t: float):
    """a = lam_{q+1}^{-1/2} b chi_k(t) e^{1/2}(t)."""
    return b * (chi_t * sqrt_e_t / math.sqrt(lam_next))


@dataclass
class AmplitudeFamily:
    """Amplitudes of the indices of one slot at one time."""

    grid: Grid
    lam_next: float
    a: dict  # WaveIndex -> complex array
    grads: dict  # WaveIndex -> (2, n, n)

    def theta(self, I):
        g = self.grads[I]
        return self.lam_next * np.hypot(g[0], g[1]) * self.a[I]

    def velocity(self, I):
        a = self.a[I]
        re = perp_gradient(ScalarField(self.grid, phys=a.real))
        im = perp_gradient(ScalarField(self.grid, phys=a.imag))
        return np.stack([re[j].values + 1j * im[j].values for j in range(2)])

    def magnitude(self) -> float:
        return max(float(np.abs(v).max()) for v in self.a.values()) if self.a else 0.0


def assemble_amplitude(b: dict, k: int, t: float, lifting_fn: LiftingFunction, schedule,
                       q: int, grads: dict, grid: Grid, tau: float | None = None
                       ) -> AmplitudeFamily:
    """Amplitudes of slot k at time t from the coefficients b (keyed by half directions)."""
    from .transport import WaveIndex, time_cutoff

    lam_next = schedule.lam(q + 1)
    chi = time_cutoff(k, schedule, q, tau)
    c = float(chi(t))
    se = float(lifting_fn.sqrt_e(t))
    a, gr = {}, {}
    for v, bv in b.items():
        I = WaveIndex(k, v)
        val = amplitude_value(np.asarray(bv, dtype=float), lam_next, c, se).astype(complex)
        a[I] = val
        a[I.conjugate] = np.conj(val)
        gr[I] = np.asarray(grads[v])
        gr[I.conjugate] = -gr[I]
    return AmplitudeFamily(grid, lam_next, a, gr)
