"""Identity suite behind ``sqglab verify-lemmas``.

Each check returns an :class:`IdentityResult`; ``run_suite`` runs all of them
at one grid size.  ``fault='mis-sign'`` flips the sign of the bilinear kernel
so that the divergence identity must fail (fault injection for the CLI).
"""
from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass

import numpy as np

from .amplitude import base_matrices
from .microlocal import (ModulatedWave, bilinear_B, bilinear_kernel_sym, measure_kernel_factor,
                         microlocal_expand, quadratic_Q, symbol_lambda, symbol_riesz_perp)
from .spectral import Grid, ScalarField, anti_divergence, double_divergence
from .transport import (F_HALF, WaveIndex, advect_phase, flow_map, time_cutoff,
                        velocity_gradient_norm)

SQRT5 = math.sqrt(5.0)


@dataclass
class IdentityResult:
    name: str
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.measured) and self.measured < self.tolerance)


def random_band_limited(grid: Grid, band: int, rng) -> np.ndarray:
    """Real mean-zero field with random coefficients on 0 < |k|_inf <= band."""
    h = np.zeros((grid.N, grid.N // 2 + 1), dtype=complex)
    sel = (np.maximum(np.abs(grid.k1), np.abs(grid.k2)) <= band)
    h[sel] = rng.standard_normal(sel.sum()) + 1j * rng.standard_normal(sel.sum())
    h[0, 0] = 0.0
    f = grid.irfft(h)
    return f - f.mean()


def check_anti_divergence(N: int = 128, count: int = 100, seed: int = 0) -> list:
    """ddiv(R f) = f for random band-limited fields; outputs symmetric traceless."""
    g = Grid.get(N)
    rng = np.random.default_rng(seed)
    worst, worst_tr = 0.0, 0.0
    for _ in range(count):
        band = int(rng.integers(1, N // 3))
        f = random_band_limited(g, band, rng)
        sf = ScalarField(g, phys=f)
        T = anti_divergence(sf)
        back = double_divergence(T).values
        worst = max(worst, float(np.abs(back - f).max() / np.abs(f).max()))
        tr = T.trace().values
        worst_tr = max(worst_tr, float(np.abs(tr).max() / max(np.abs(T.t11.values).max(), 1e-300)))
    return [IdentityResult("anti_divergence", worst, 1e-9),
            IdentityResult("anti_divergence_trace", worst_tr, 1e-13)]


def _test_wave(g: Grid, lam: int, modulated: bool) -> ModulatedWave:
    if not modulated:
        return ModulatedWave(g, np.ones((g.N, g.N)), (1, 2), lam, project=False)
    a = 1 + 0.3 * np.cos(g.x1) + 0.2j * np.sin(g.x1 + g.x2)
    return ModulatedWave(g, a, (1, 2), lam, psi=0.1 * np.sin(g.x2) / lam)


def check_microlocal_linear(N: int = 256) -> list:
    """Linear phase and constant amplitude: the remainder vanishes identically."""
    g = Grid.get(N)
    lam = max(1, N // 16)
    w = _test_wave(g, lam, modulated=False)
    out = []
    for name, sym in (("lambda", symbol_lambda), ("riesz_perp", symbol_riesz_perp)):
        ex = microlocal_expand(sym, w)
        full = ex["full"] if not isinstance(ex["full"], tuple) else np.stack(ex["full"])
        d = ex["delta"] if not isinstance(ex["delta"], tuple) else np.stack(ex["delta"])
        out.append(IdentityResult(f"microlocal_linear_{name}",
                                  float(np.abs(d).max() / np.abs(full).max()), 1e-12))
    return out


def microlocal_ratio(N: int, lam: int, symbol=symbol_lambda) -> float:
    """||delta||_0 / ||principal||_0 for a fixed band-1 modulation at frequency lam."""
    g = Grid.get(N)
    a = 1 + 0.3 * np.cos(g.x1) + 0.2 * np.sin(g.x2)
    w = ModulatedWave(g, a, (1, 0), lam, project=False)
    ex = microlocal_expand(symbol, w)
    return float(np.abs(ex["delta"]).max() / np.abs(ex["principal"]).max())


def bilinear_identity_error(N: int, lam: int, sign: int = 1) -> float:
    """Relative L2 error of Q = div B for a modulated conjugate pair."""
    g = Grid.get(N)
    w = _test_wave(g, lam, modulated=True)
    wb = w.conj()
    Q = quadratic_Q(w, wb)
    B = bilinear_B(w, wb, sign=sign)
    D = B.divergence()
    num = sum(float(np.sum((Q[i].values - D[i].values) ** 2)) for i in range(2))
    den = sum(float(np.sum(Q[i].values ** 2)) for i in range(2))
    return math.sqrt(num / den)


def check_bilinear(N: int = 256, fault: str | None = None) -> list:
    lam = max(2, N // 16)
    sign = -1 if fault == "mis-sign" else 1
    return [IdentityResult("bilinear_divergence", bilinear_identity_error(N, lam, sign), 1e-6,
                           detail=f"lam={lam}")]


def kernel_table() -> dict:
    """Closed-form kernel at the two carrier directions and the base matrix."""
    tab = {v: bilinear_kernel_sym(np.array(v, float), 1.0) for v in F_HALF}
    tab["sum"] = sum(tab[v] for v in F_HALF)
    return tab


def check_kernel_values() -> list:
    ref = {(1, 2): np.array([[-4.0, -3.0], [-3.0, 4.0]]) / (2 * SQRT5),
           (2, 1): np.array([[-4.0, 3.0], [3.0, 4.0]]) / (2 * SQRT5)}
    tab = kernel_table()
    out = [IdentityResult(f"kernel_{v[0]}{v[1]}", float(np.abs(tab[v] - ref[v]).max()), 1e-12)
           for v in F_HALF]
    out.append(IdentityResult("kernel_sum_base", float(np.abs(tab["sum"] - base_matrices(0)).max()),
                              1e-12))
    m = measure_kernel_factor()
    out.append(IdentityResult("kernel_realized_factor", abs(abs(m["factor"]) - 1.0), 1e-10,
                              detail=f"factor={m['factor']:+.15f}"))
    out.append(IdentityResult("kernel_realized_power", abs(m["power"] - 1.0), 1e-10))
    return out


def check_partition(n: int = 20001) -> list:
    tau = 1.0
    t = np.linspace(-5.0, 5.0, n)
    s = sum(time_cutoff(k, tau=tau)(t) ** 2 for k in range(-7, 8))
    return [IdentityResult("partition_of_unity", float(np.abs(s - 1).max()), 1e-12)]


def shear_velocity(grid: Grid):
    u = np.stack([np.sin(grid.x2), np.zeros_like(grid.x2)])
    return lambda t: u


def check_shear_phase(N: int = 64, tau: float = 0.05) -> list:
    """Advected phase gradient versus the closed form for u = (sin x2, 0).

    The foot of the characteristic through (x, t) at t0 is
    (x1 - (t - t0) sin x2, x2), so grad xi = (v1, v2 - v1 (t - t0) cos x2).
    """
    g = Grid.get(N)
    worst = 0.0
    for v in F_HALF:
        I = WaveIndex(0, v)
        ph = advect_phase(shear_velocity(g), I, g, tau, raise_on_violation=False)
        for i, t in enumerate(ph.times):
            gr = ph.grad(i)
            ex1 = np.full_like(g.x1, v[0])
            ex2 = v[1] - v[0] * (t - I.k * tau) * np.cos(g.x2)
            worst = max(worst, float(max(np.abs(gr[0] - ex1).max(), np.abs(gr[1] - ex2).max())))
    return [IdentityResult("shear_phase_gradient", worst, 1e-8)]


def check_flow_bound(N: int = 64) -> list:
    """Gronwall bound on the flow gradient for a time-dependent band-limited flow."""
    g = Grid.get(N)

    def vel(t):
        return np.stack([np.sin(g.x2 + t) + 0.3 * np.cos(2 * g.x1),
                         0.5 * np.cos(g.x1 - t) + 0.2 * np.sin(g.x1 + g.x2)])

    fm = flow_map(vel, g, 0.0, 0.2, nslices=6, check=False)
    worst = 0.0
    gn = max(velocity_gradient_norm(vel, g, t) for t in np.linspace(-0.2, 0.2, 129))
    for i, s in enumerate(fm.s_values):
        bound = math.expm1(abs(s) * gn)
        worst = max(worst, fm.jacobian_deviation(i) - bound)
    # margin: positive means the bound is violated
    return [IdentityResult("flow_gradient_bound", worst, 1e-12)]


def run_suite(N: int = 256, fault: str | None = None, anti_div_count: int = 100) -> list:
    checks = (
        lambda: check_anti_divergence(N, anti_div_count),
        lambda: check_microlocal_linear(N),
        lambda: check_bilinear(N, fault),
        check_kernel_values,
        check_partition,
        check_shear_phase,
        check_flow_bound,
    )
    out = []
    for fn in checks:
        t0 = _time.perf_counter()
        res = fn()
        dt = (_time.perf_counter() - t0) / len(res)
        for r in res:
            r.seconds = dt
        out.extend(res)
    return out
