"""Characteristics, flow maps, advected phases and the time-cutoff partition.

Velocity fields are passed as callables ``velocity(t) -> array (2, n, n)``
of physical samples on an ``n x n`` transport grid.  Off-grid values are
obtained by exact evaluation of the truncated Fourier series.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import Grid

# index set: directions and the half used for amplitudes
F_DIRECTIONS = ((1, 2), (-1, -2), (2, 1), (-2, -1))
F_HALF = ((1, 2), (2, 1))


class PhaseConditionError(RuntimeError):
    def __init__(self, deformation: float, min_grad: float, time: float, msg: str = ""):
        super().__init__(msg or f"phase condition violated at t={time:.6g}: "
                                f"deformation={deformation:.3e}, min|grad xi|={min_grad:.4f}")
        self.deformation = deformation
        self.min_grad = min_grad
        self.time = time


class FlowBoundError(RuntimeError):
    pass


def rotate(v, k: int):
    """J^k v with J the rotation by 90 degrees, J(x, y) = (-y, x)."""
    x, y = v
    for _ in range(k % 4):
        x, y = -y, x
    return (x, y)


@dataclass(frozen=True)
class WaveIndex:
    k: int
    v: tuple

    def __post_init__(self):
        v = tuple(int(c) for c in self.v)
        if v not in F_DIRECTIONS:
            raise ValueError(f"direction {self.v} not in the index set")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "k", int(self.k))

    @property
    def parity(self) -> int:
        return self.k % 2

    @property
    def conjugate(self) -> "WaveIndex":
        return WaveIndex(self.k, (-self.v[0], -self.v[1]))

    @property
    def grad_in(self) -> tuple:
        return rotate(self.v, self.k)

    @property
    def is_half(self) -> bool:
        return self.v in F_HALF


# ----------------------------------------------------------------------------
# time cutoffs


def _f(y):
    out = np.zeros_like(y)
    pos = y > 0
    out[pos] = np.exp(-1.0 / y[pos])
    return out


def _fp(y):
    out = np.zeros_like(y)
    pos = y > 0
    out[pos] = np.exp(-1.0 / y[pos]) / y[pos] ** 2
    return out


def smooth_heaviside(y):
    """g(y) = f(y)/(f(y)+f(1-y)), C-infinity, g + g(1-.) = 1."""
    y = np.asarray(y, dtype=float)
    a, b = _f(y), _f(1.0 - y)
    return a / (a + b)


def smooth_heaviside_deriv(y):
    y = np.asarray(y, dtype=float)
    a, b = _f(y), _f(1.0 - y)
    ap, bp = _fp(y), _fp(1.0 - y)
    return (ap * b + a * bp) / (a + b) ** 2


def chi_base(s):
    """Centered cutoff: 1 on |s| <= 1/3, 0 on |s| >= 2/3, squares of shifts sum to 1."""
    s = np.asarray(s, dtype=float)
    y = 3.0 * (np.abs(s) - 1.0 / 3.0)
    # cos(pi/2) is 6e-17 in floating point; force exact zeros off the support
    return np.where(y >= 1.0, 0.0, np.cos(0.5 * np.pi * smooth_heaviside(y)))


def chi_base_deriv(s):
    s = np.asarray(s, dtype=float)
    y = 3.0 * (np.abs(s) - 1.0 / 3.0)
    return -np.sin(0.5 * np.pi * smooth_heaviside(y)) * 0.5 * np.pi * 3.0 * np.sign(s) \
        * smooth_heaviside_deriv(y)


@dataclass(frozen=True)
class TimeCutoff:
    k: int
    tau: float

    def __call__(self, t):
        return chi_base(np.asarray(t, dtype=float) / self.tau - self.k)

    def deriv(self, t):
        return chi_base_deriv(np.asarray(t, dtype=float) / self.tau - self.k) / self.tau

    @property
    def support(self) -> tuple:
        return ((self.k - 2.0 / 3.0) * self.tau, (self.k + 2.0 / 3.0) * self.tau)


def time_cutoff(k: int, schedule=None, q: int = 0, tau: float | None = None) -> TimeCutoff:
    if tau is None:
        tau = schedule.tau(q)
    return TimeCutoff(int(k), float(tau))


def active_slots(t: float, tau: float) -> list[int]:
    """Slots k with chi_k(t) != 0."""
    c = t / tau
    return [k for k in range(math.floor(c - 2.0 / 3.0), math.ceil(c + 2.0 / 3.0) + 1)
            if abs(c - k) < 2.0 / 3.0]


# ----------------------------------------------------------------------------
# off-grid evaluation


class TrigEvaluator:
    """Exact evaluation of a real trigonometric polynomial at arbitrary points.

    ``values`` is (N, N) or (m, N, N); components share the exponential tables.
    The spectrum is cut to the smallest box |k_i| <= K holding all coefficients
    above ``rel_tol`` of the peak, which drops FFT roundoff.
    """

    def __init__(self, grid: Grid, values, rel_tol: float = 1e-14):
        n = grid.N
        values = np.asarray(values, dtype=float)
        self.multi = values.ndim == 3
        hat = grid.rfft(values.reshape((-1, n, n))) / (n * n)
        mag = np.abs(hat)
        peak = mag.max() if mag.size else 0.0
        if peak == 0:
            K = 0
        else:
            sig = (mag > rel_tol * peak).any(axis=0)
            K = int(max(np.abs(grid.k1[sig]).max(), np.abs(grid.k2[sig]).max()))
        K = min(K, n // 2 - 1)
        self.K = K
        rows = np.r_[np.arange(0, K + 1), np.arange(n - K, n)] if K > 0 else np.array([0])
        self.box = hat[:, rows, : K + 1].copy()
        c = self.box.copy()
        c[:, :, 1:] *= 2.0
        self.k1 = grid.k1[rows, 0]
        self.k2 = np.arange(K + 1, dtype=float)
        self.c = c
        self.mean = hat[:, 0, 0].real.copy()

    # direct sums cost points * K^2; above this the NUFFT route is used
    DIRECT_LIMIT = 2e8

    def _nufft(self, y1, y2):
        import finufft
        K = self.K
        m = self.box.shape[0]
        full = np.zeros((m, 2 * K + 1, 2 * K + 1), dtype=complex)
        k1 = self.k1.astype(int)
        full[:, k1 + K, K:] = self.box
        # negative k2 from conjugate symmetry: F(k1, -k2) = conj F(-k1, k2)
        full[:, (-k1) + K, K::-1] = np.conj(self.box)
        v = finufft.nufft2d2(np.mod(y1, 2 * np.pi), np.mod(y2, 2 * np.pi), full,
                             isign=1, eps=1e-14)
        return np.asarray(v).reshape(m, -1).real

    def __call__(self, y1, y2, route: str = "auto"):
        shape = np.shape(y1)
        y1 = np.ravel(y1)
        y2 = np.ravel(y2)
        m = self.c.shape[0]
        if route not in ("auto", "direct", "nufft"):
            raise ValueError(f"unknown route {route!r}")
        if self.K > 0 and (route == "nufft" or (route == "auto" and
                                                 y1.size * self.K ** 2 > self.DIRECT_LIMIT)):
            v = self._nufft(y1, y2)
        elif self.K == 0:
            v = np.repeat(self.mean[:, None], y1.size, axis=1)
        else:
            v = np.empty((m, y1.size))
            # chunk so the exponential tables stay small
            step = max(1024, 4_000_000 // ((2 + m) * self.K + 2))
            for p0 in range(0, y1.size, step):
                sl = slice(p0, p0 + step)
                E1 = np.exp(1j * np.outer(y1[sl], self.k1))
                E2 = np.exp(1j * np.outer(y2[sl], self.k2))
                for j in range(m):
                    v[j, sl] = np.einsum("pk,pk->p", E1 @ self.c[j], E2).real
        v = v.reshape((m,) + shape)
        return v if self.multi else v[0]


def spectral_resample(values, n_out: int):
    """Band-limited resampling of a real periodic array to n_out x n_out."""
    n = values.shape[-1]
    if n == n_out:
        return np.array(values, dtype=float)
    gi, go = Grid.get(n), Grid.get(n_out)
    hat = gi.rfft(values)
    out = np.zeros(values.shape[:-2] + (n_out, n_out // 2 + 1), dtype=complex)
    m = min(n, n_out) // 2
    # drop the Nyquist row/column to keep the result real and symmetric
    out[..., :m, :m] = hat[..., :m, :m]
    out[..., n_out - m + 1:, :m] = hat[..., n - m + 1:, :m]
    return go.irfft(out * (n_out / n) ** 2)


# ----------------------------------------------------------------------------
# characteristic integration


class CachedVelocity:
    """Velocity callable that memoizes its off-grid evaluators by time.

    Characteristic chains launched from different slots share substep times,
    so the cache removes most repeated transforms.
    """

    def __init__(self, velocity, grid: Grid, maxsize: int = 4096):
        self.velocity = velocity
        self.grid = grid
        self.maxsize = maxsize
        self._cache: dict = {}

    def __call__(self, t):
        return self.velocity(t)

    def evaluator(self, t) -> TrigEvaluator:
        key = float(t)
        ev = self._cache.get(key)
        if ev is None:
            if len(self._cache) >= self.maxsize:
                self._cache.pop(next(iter(self._cache)))
            ev = TrigEvaluator(self.grid, self.velocity(key))
            self._cache[key] = ev
        return ev


def _velocity_at(velocity, t, grid, d1, d2):
    ev = velocity.evaluator(t) if isinstance(velocity, CachedVelocity) \
        else TrigEvaluator(grid, velocity(t))
    v = ev(grid.x1 + d1, grid.x2 + d2)
    return v[0], v[1]


def rk4_displacement(velocity, grid: Grid, t_from: float, t_to: float, nsteps: int,
                     d1=None, d2=None):
    """Integrate dX/ds = u(X, s) from s=t_from to t_to starting at grid points + d.

    Returns the displacement X(t_to) - x of every grid point.
    """
    d1 = np.zeros((grid.N, grid.N)) if d1 is None else d1.copy()
    d2 = np.zeros((grid.N, grid.N)) if d2 is None else d2.copy()
    h = (t_to - t_from) / nsteps
    t = t_from
    for _ in range(nsteps):
        a1, a2 = _velocity_at(velocity, t, grid, d1, d2)
        b1, b2 = _velocity_at(velocity, t + h / 2, grid, d1 + h / 2 * a1, d2 + h / 2 * a2)
        c1, c2 = _velocity_at(velocity, t + h / 2, grid, d1 + h / 2 * b1, d2 + h / 2 * b2)
        e1, e2 = _velocity_at(velocity, t + h, grid, d1 + h * c1, d2 + h * c2)
        d1 = d1 + h / 6 * (a1 + 2 * b1 + 2 * c1 + e1)
        d2 = d2 + h / 6 * (a2 + 2 * b2 + 2 * c2 + e2)
        t = t + h
    return d1, d2


def _jacobian_minus_identity(grid: Grid, d1, d2):
    """Pointwise D(x + d) - I for a periodic displacement d."""
    h1, h2 = grid.rfft(d1), grid.rfft(d2)
    D = np.empty((grid.N, grid.N, 2, 2))
    D[..., 0, 0] = grid.irfft(h1 * grid.deriv(0))
    D[..., 0, 1] = grid.irfft(h1 * grid.deriv(1))
    D[..., 1, 0] = grid.irfft(h2 * grid.deriv(0))
    D[..., 1, 1] = grid.irfft(h2 * grid.deriv(1))
    return D


def velocity_gradient_norm(velocity, grid: Grid, t: float) -> float:
    """sup_x of the operator 2-norm of Du(x, t)."""
    u = velocity(t)
    D = _jacobian_minus_identity(grid, u[0], u[1])
    return float(np.linalg.norm(D, ord=2, axis=(-2, -1)).max())


@dataclass
class FlowMap:
    """Forward trajectories x -> Phi_s(x) from base time t0, stored as displacements."""

    grid: Grid
    t0: float
    s_values: np.ndarray
    disp: np.ndarray  # (ns, 2, n, n)
    bound_checks: list = field(default_factory=list)

    def positions(self, i: int):
        g = self.grid
        return g.x1 + self.disp[i, 0], g.x2 + self.disp[i, 1]

    def jacobian_deviation(self, i: int) -> float:
        D = _jacobian_minus_identity(self.grid, self.disp[i, 0], self.disp[i, 1])
        return float(np.linalg.norm(D, ord=2, axis=(-2, -1)).max())


def flow_map(velocity, grid: Grid, t0: float, window: float, nslices: int = 8,
             steps_per_window: int = 64, tol: float = 1e-8, check: bool = True) -> FlowMap:
    """Trajectories from (x, t0) for s in [-window, window] (nslices on each side).

    Each output is checked against the Gronwall bound
    ``||D Phi_s - I|| <= exp(|s| sup||Du||) - 1``.
    """
    grid = grid if isinstance(grid, Grid) else Grid.get(grid)
    s_side = np.linspace(0.0, window, nslices + 1)[1:]
    s_values = np.r_[-s_side[::-1], 0.0, s_side]
    disp = np.zeros((s_values.size, 2, grid.N, grid.N))
    i0 = nslices
    h_target = 2 * window / steps_per_window if window > 0 else 1.0
    for sign in (1, -1):
        d1 = d2 = None
        s_prev = 0.0
        for j, s in enumerate(s_side):
            n = max(1, int(math.ceil((s - s_prev) / h_target - 1e-12)))
            d1, d2 = rk4_displacement(velocity, grid, t0 + sign * s_prev, t0 + sign * s, n, d1, d2)
            disp[i0 + sign * (j + 1)] = (d1, d2)
            s_prev = s
    fm = FlowMap(grid, t0, s_values, disp)
    if check:
        # Du sampled along the window; the sup is taken over sampled times
        ts = t0 + np.linspace(-window, window, 2 * steps_per_window + 1)
        gn = max(velocity_gradient_norm(velocity, grid, t) for t in ts)
        for i, s in enumerate(s_values):
            dev = fm.jacobian_deviation(i)
            bound = math.expm1(abs(s) * gn)
            ok = dev <= bound * (1 + 1e-6) + tol
            fm.bound_checks.append((float(s), dev, bound, ok))
            if not ok:
                raise FlowBoundError(f"flow gradient bound violated at s={s}: {dev} > {bound}")
    return fm


# ----------------------------------------------------------------------------
# advected phases


@dataclass
class FootMap:
    """Back-to-foot displacement D(x, t) = X(x, t) - x with X(x, t0) = x.

    X(x, t) is the position at time t0 of the characteristic through (x, t),
    so that any xi_in(X) is transported.  Stored at the requested times.
    """

    grid: Grid
    t0: float
    times: np.ndarray
    disp: np.ndarray  # (nt, 2, n, n)
    bound_checks: list = field(default_factory=list)

    @property
    def bound_excess(self) -> float:
        """max over stored times of ||DX - I|| minus its Gronwall bound (<= 0 when it holds)."""
        return max((dev - bound for _, dev, bound, _ in self.bound_checks), default=-np.inf)

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not stored")
        return i

    def grad(self, i: int):
        """(D_j D_i) as array (n, n, 2, 2) with [..., i, j] = d_j D_i."""
        return _jacobian_minus_identity(self.grid, self.disp[i, 0], self.disp[i, 1])


def foot_map(velocity, grid: Grid, t0: float, times, max_step: float, tol: float = 1e-8,
             check: bool = True) -> FootMap:
    """Backward semi-Lagrangian transport of the foot map.

    Successive stored times are linked by D(x, t_b) = (Y - x) + D(Y, t_a) where
    Y is the RK4 foot at t_a of the characteristic through (x, t_b).  Every
    stored map is checked against ``||DX - I|| <= exp(|t - t0| sup||Du||) - 1``.
    """
    grid = grid if isinstance(grid, Grid) else Grid.get(grid)
    times = np.asarray(times, dtype=float)
    n = grid.N
    disp = np.zeros((times.size, 2, n, n))
    order = np.argsort(np.abs(times - t0), kind="stable")
    fwd = [i for i in order if times[i] >= t0]
    bwd = [i for i in order if times[i] < t0]
    for chain in (fwd, bwd):
        t_prev = t0
        D_prev = None
        for i in chain:
            t = times[i]
            if t == t_prev and D_prev is None:
                disp[i] = 0.0
                D_prev = (np.zeros((n, n)), np.zeros((n, n)))
                continue
            nsteps = max(1, int(math.ceil(abs(t - t_prev) / max_step - 1e-9)))
            y1, y2 = rk4_displacement(velocity, grid, t, t_prev, nsteps)
            if D_prev is None:
                D1, D2 = y1, y2
            else:
                prev = TrigEvaluator(grid, np.stack(D_prev))(grid.x1 + y1, grid.x2 + y2)
                D1, D2 = y1 + prev[0], y2 + prev[1]
            disp[i] = (D1, D2)
            D_prev = (D1, D2)
            t_prev = t
    fm = FootMap(grid, t0, times, disp)
    if check and times.size:
        lo, hi = min(times.min(), t0), max(times.max(), t0)
        ts = np.linspace(lo, hi, max(2, int(math.ceil((hi - lo) / max_step)) + 1))
        gn = max(velocity_gradient_norm(velocity, grid, t) for t in ts)
        for i, t in enumerate(times):
            dev = float(np.linalg.norm(fm.grad(i), ord=2, axis=(-2, -1)).max())
            bound = math.expm1(abs(t - t0) * gn)
            ok = dev <= bound * (1 + 1e-6) + tol
            fm.bound_checks.append((float(t), dev, bound, ok))
            if not ok:
                raise FlowBoundError(f"flow gradient bound violated at t={t}: {dev} > {bound}")
    return fm


@dataclass
class PhaseFamily:
    """Phase xi_I = J^k v . (x + D(x, t)) on a time window, from a shared FootMap."""

    index: WaveIndex
    foot: FootMap
    window: tuple
    deformation: float = 0.0
    min_grad: float = 0.0

    @property
    def times(self):
        return self.foot.times

    @property
    def grad_in(self):
        return np.array(self.index.grad_in, dtype=float)

    def deviation(self, i: int, grid: Grid | None = None):
        """Periodic part J^k v . D at stored time i (optionally resampled)."""
        g = self.grad_in
        d = g[0] * self.foot.disp[i, 0] + g[1] * self.foot.disp[i, 1]
        if grid is not None and grid.N != self.foot.grid.N:
            d = spectral_resample(d, grid.N)
        return d

    def xi(self, i: int, grid: Grid | None = None):
        g0 = self.foot.grid if grid is None else grid
        g = self.grad_in
        return g[0] * g0.x1 + g[1] * g0.x2 + self.deviation(i, grid)

    def grad(self, i: int, grid: Grid | None = None):
        """grad xi_I at stored time i, array (2, n, n)."""
        g = self.grad_in
        Dg = self.foot.grad(i)
        out = np.empty((2,) + Dg.shape[:2])
        for j in range(2):
            out[j] = g[j] + g[0] * Dg[..., 0, j] + g[1] * Dg[..., 1, j]
        if grid is not None and grid.N != self.foot.grid.N:
            out = g[:, None, None] + spectral_resample(out - g[:, None, None], grid.N)
        return out


def advect_phase(velocity, I: WaveIndex, grid: Grid, tau: float, times=None,
                 c1: float = 0.01, nslices: int = 33, foot: FootMap | None = None,
                 raise_on_violation: bool = True) -> PhaseFamily:
    """Phase of index I transported by ``velocity`` from xi_in at t = k tau.

    ``times`` defaults to ``nslices`` uniform times on [k tau - tau, k tau + tau].
    A shared ``foot`` map may be passed so all directions of a slot reuse it.
    """
    grid = grid if isinstance(grid, Grid) else Grid.get(grid)
    t0 = I.k * tau
    window = (t0 - tau, t0 + tau)
    if foot is None:
        if times is None:
            times = np.linspace(window[0], window[1], nslices)
        foot = foot_map(velocity, grid, t0, times, max_step=2 * tau / 64)
    ph = PhaseFamily(I, foot, window)
    res = check_phase_condition(ph, c1=c1)
    if raise_on_violation and not res["ok"]:
        raise PhaseConditionError(res["deformation"], res["min_grad"], res["time"])
    return ph


def check_phase_condition(phase: PhaseFamily, c1: float = 0.01, schedule=None) -> dict:
    """sup |grad xi - grad xi_in| <= c1 and min |grad xi| >= 1 over the stored window."""
    if schedule is not None:
        c1 = float(schedule.config.c1)
    g = phase.grad_in
    worst, worst_t, mn = 0.0, phase.times[0] if phase.times.size else 0.0, np.inf
    for i, t in enumerate(phase.times):
        if not (phase.window[0] - 1e-12 <= t <= phase.window[1] + 1e-12):
            continue
        gr = phase.grad(i)
        dev = np.sqrt((gr[0] - g[0]) ** 2 + (gr[1] - g[1]) ** 2).max()
        m = np.sqrt(gr[0] ** 2 + gr[1] ** 2).min()
        if dev > worst:
            worst, worst_t = float(dev), float(t)
        mn = min(mn, float(m))
    phase.deformation = worst
    phase.min_grad = mn
    return {"deformation": worst, "min_grad": mn, "time": worst_t,
            "ok": bool(worst <= c1 and mn >= 1.0)}
