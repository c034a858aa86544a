import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sqglab.identities import check_flow_bound, check_partition, check_shear_phase, shear_velocity
from sqglab.params import ParamConfig, build_schedule, time_scale
from sqglab.spectral import Grid
from sqglab.transport import (F_DIRECTIONS, FlowBoundError, PhaseConditionError, TrigEvaluator,
                              WaveIndex, active_slots, advect_phase, check_phase_condition,
                              chi_base_deriv, flow_map, rotate, time_cutoff)


def zero_velocity(g):
    z = np.zeros((2, g.N, g.N))
    return lambda t: z


def unsteady_velocity(g):
    # divergence-free: built from a stream function
    def vel(t):
        return np.stack([np.cos(g.x2 + t) + 0.2 * np.cos(g.x1 + g.x2),
                         0.5 * np.sin(g.x1 - t) - 0.2 * np.cos(g.x1 + g.x2)])
    return vel


# ---------------------------------------------------------------- wave index

@pytest.mark.parametrize("v", F_DIRECTIONS)
@pytest.mark.parametrize("k", [-3, 0, 1, 4])
def test_wave_index_conjugation(k, v):
    I = WaveIndex(k, v)
    assert I.conjugate.conjugate == I
    assert I.conjugate.parity == I.parity == k % 2
    assert I.conjugate.v == (-v[0], -v[1])


def test_wave_index_rejects_other_directions():
    with pytest.raises(ValueError):
        WaveIndex(0, (1, 1))


def test_rotation():
    assert rotate((1, 2), 1) == (-2, 1)
    assert rotate((1, 2), 4) == (1, 2)
    assert rotate((1, 2), -1) == (2, -1)


# ---------------------------------------------------------------- time cutoffs

def test_partition_random_times():
    rng = np.random.default_rng(0)
    tau = 0.037
    t = rng.uniform(-10 * tau, 10 * tau, 1000)
    s = sum(time_cutoff(k, tau=tau)(t) ** 2 for k in range(-12, 13))
    assert np.abs(s - 1).max() < 1e-12
    assert check_partition()[0].ok


@pytest.mark.parametrize("k", [-2, 0, 3])
def test_cutoff_plateau_and_disjoint(k):
    tau = 0.1
    t = k * tau
    assert time_cutoff(k, tau=tau)(t) == 1.0
    assert time_cutoff(k + 2, tau=tau)(t) == 0.0
    assert time_cutoff(k - 2, tau=tau)(t) == 0.0
    assert active_slots(t, tau) == [k]


def test_cutoff_support():
    c = time_cutoff(1, tau=0.2)
    lo, hi = c.support
    assert lo == pytest.approx(0.2 / 3) and hi == pytest.approx(0.2 * 5 / 3)
    t = np.linspace(-1, 1, 4001)
    outside = (t <= lo) | (t >= hi)
    assert np.all(c(t[outside]) == 0.0)


def test_cutoff_derivative_scale():
    # tau * sup|chi_k'| does not depend on tau; the analytic derivative matches differences
    s = np.linspace(-1, 1, 200001)
    base = np.abs(chi_base_deriv(s)).max()
    for tau in (1.0, 0.1, 0.003):
        c = time_cutoff(2, tau=tau)
        t = (2 + s) * tau
        d = c.deriv(t)
        assert np.abs(d).max() * tau == pytest.approx(base, rel=1e-12)
        fd = np.gradient(c(t), t)
        assert np.abs(fd - d).max() < 1e-4 / tau
    assert base < 10


# ---------------------------------------------------------------- flow maps

def test_flow_map_zero_velocity():
    g = Grid.get(32)
    fm = flow_map(zero_velocity(g), g, 0.3, 0.1, nslices=3)
    assert np.all(fm.disp == 0)


def test_flow_map_base_slice_is_identity():
    g = Grid.get(32)
    fm = flow_map(unsteady_velocity(g), g, 0.0, 0.1, nslices=3)
    i0 = int(np.flatnonzero(fm.s_values == 0)[0])
    assert np.all(fm.disp[i0] == 0)


def test_flow_map_constant_velocity():
    g = Grid.get(32)
    c = np.array([0.7, -1.3])
    u = np.broadcast_to(c[:, None, None], (2, 32, 32)).copy()
    fm = flow_map(lambda t: u, g, 0.0, 0.25, nslices=4)
    for i, s in enumerate(fm.s_values):
        assert np.abs(fm.disp[i, 0] - s * c[0]).max() < 1e-13
        assert np.abs(fm.disp[i, 1] - s * c[1]).max() < 1e-13


def test_flow_map_shear_exact():
    g = Grid.get(64)
    fm = flow_map(shear_velocity(g), g, 0.0, 0.3, nslices=4)
    for i, s in enumerate(fm.s_values):
        assert np.abs(fm.disp[i, 0] - s * np.sin(g.x2)).max() < 1e-12
        assert np.abs(fm.disp[i, 1]).max() < 1e-14
    # shear: ||DPhi_s - I|| = |s|, against exp(|s|) - 1, same order for small s
    for s, dev, bound, ok in fm.bound_checks:
        assert ok
        if s != 0:
            assert dev == pytest.approx(abs(s), rel=1e-10)
            assert bound / dev < 1.2


def test_flow_map_group_property():
    g = Grid.get(64)
    a = 0.5 * np.cos(g.x1 + 2 * g.x2)
    u = np.stack([2 * a, -a])  # steady and divergence-free
    fm = flow_map(lambda t: u, g, 0.0, 0.2, nslices=2)
    half, full = fm.disp[3], fm.disp[4]
    x1, x2 = g.x1 + half[0], g.x2 + half[1]
    again = TrigEvaluator(g, half)(x1, x2)
    assert np.abs(half[0] + again[0] - full[0]).max() < 1e-8
    assert np.abs(half[1] + again[1] - full[1]).max() < 1e-8


def test_flow_bound_unsteady():
    assert check_flow_bound()[0].ok


def test_flow_bound_violation_raises(monkeypatch):
    import sqglab.transport as tr
    g = Grid.get(32)
    monkeypatch.setattr(tr, "velocity_gradient_norm", lambda *a: 0.0)
    with pytest.raises(FlowBoundError):
        flow_map(shear_velocity(g), g, 0.0, 0.2, nslices=2)


# ---------------------------------------------------------------- phases

@pytest.mark.parametrize("v", [(1, 2), (2, 1)])
def test_advect_zero_velocity(v):
    g = Grid.get(32)
    I = WaveIndex(1, v)
    ph = advect_phase(zero_velocity(g), I, g, 0.05, nslices=9)
    for i in range(ph.times.size):
        assert np.all(ph.deviation(i) == 0)
        xi = ph.xi(i)
        jv = rotate(v, 1)
        assert np.abs(xi - (jv[0] * g.x1 + jv[1] * g.x2)).max() < 1e-13
    res = check_phase_condition(ph)
    assert res["deformation"] == 0 and res["ok"]
    assert res["min_grad"] == pytest.approx(math.sqrt(5), rel=1e-15)


def test_advect_shear_exact():
    assert check_shear_phase()[0].ok


def test_gradient_at_base_time_exact():
    g = Grid.get(32)
    I = WaveIndex(2, (2, 1))
    ph = advect_phase(unsteady_velocity(g), I, g, 0.02, nslices=9, raise_on_violation=False)
    i0 = ph.foot.index_of(2 * 0.02)
    gr = ph.grad(i0)
    assert np.all(gr[0] == I.grad_in[0]) and np.all(gr[1] == I.grad_in[1])


def test_conjugate_phase_is_negative():
    g = Grid.get(32)
    vel = unsteady_velocity(g)
    I = WaveIndex(0, (1, 2))
    p = advect_phase(vel, I, g, 0.03, nslices=9, raise_on_violation=False)
    pc = advect_phase(vel, I.conjugate, g, 0.03, nslices=9, raise_on_violation=False)
    for i in range(p.times.size):
        assert np.abs(p.xi(i) + pc.xi(i)).max() < 1e-12


def test_gradient_duality_with_flow_map():
    g = Grid.get(64)
    vel = unsteady_velocity(g)
    tau = 0.04
    I = WaveIndex(0, (1, 2))
    ph = advect_phase(vel, I, g, tau, nslices=9, raise_on_violation=False)
    v = np.array(I.grad_in, float)
    for i in (0, 2, 7):
        t = ph.times[i]
        fm = flow_map(vel, g, t, abs(t), nslices=1, steps_per_window=128)
        j = 2 if t < 0 else 0  # slice with s = t0 - t
        D = fm.disp[j]
        jac1 = g.irfft(g.rfft(D[0]) * g.deriv(0)), g.irfft(g.rfft(D[0]) * g.deriv(1))
        jac2 = g.irfft(g.rfft(D[1]) * g.deriv(0)), g.irfft(g.rfft(D[1]) * g.deriv(1))
        ex = (v[0] * (1 + jac1[0]) + v[1] * jac2[0], v[0] * jac1[1] + v[1] * (1 + jac2[1]))
        gr = ph.grad(i)
        err = max(np.abs(gr[0] - ex[0]).max(), np.abs(gr[1] - ex[1]).max())
        assert err / math.sqrt(5) < 1e-8


def test_material_derivative_vanishes():
    g = Grid.get(64)
    vel = unsteady_velocity(g)
    tau = 0.05
    I = WaveIndex(0, (2, 1))
    ph = advect_phase(vel, I, g, tau, nslices=33, raise_on_violation=False)
    h = ph.times[1] - ph.times[0]
    worst = 0.0
    for i in range(2, ph.times.size - 2):
        xi = [ph.xi(j) for j in range(i - 2, i + 3)]
        dt = (xi[0] - 8 * xi[1] + 8 * xi[3] - xi[4]) / (12 * h)
        u = vel(ph.times[i])
        gr = ph.grad(i)
        worst = max(worst, np.abs(dt + u[0] * gr[0] + u[1] * gr[1]).max())
    assert worst < 1e-8


def test_strong_shear_violates_phase_condition():
    g = Grid.get(32)
    u = np.stack([10 * np.sin(g.x2), np.zeros_like(g.x2)])
    I = WaveIndex(0, (1, 2))
    with pytest.raises(PhaseConditionError) as exc:
        advect_phase(lambda t: u, I, g, 0.05, nslices=9)
    assert exc.value.deformation > 0.01
    ph = advect_phase(lambda t: u, I, g, 0.05, nslices=9, raise_on_violation=False)
    assert not check_phase_condition(ph)["ok"]


def test_deformation_scaling():
    # shear with sup|Du| = lam_q^{3/2} delta_{q-1}^{1/2}; deformation against tau lam^{3/2} delta^{1/2}
    s = build_schedule(ParamConfig(lambda0=16, b="5/4", beta="4/5"))
    q = 1
    lam, d = s.lam(q), s.delta(q - 1)
    tau = time_scale(q, s)
    amp = math.sqrt(lam * d)
    g = Grid.get(128)
    u = np.stack([amp * np.sin(lam * g.x2), np.zeros_like(g.x2)])
    target = tau * lam ** 1.5 * math.sqrt(d)
    for v in ((1, 2), (2, 1)):
        ph = advect_phase(lambda t: u, WaveIndex(0, v), g, tau, nslices=9,
                          raise_on_violation=False)
        ratio = ph.deformation / target
        assert 0.1 <= ratio <= 10


@settings(max_examples=10, deadline=None)
@given(st.floats(min_value=0.001, max_value=0.05), st.sampled_from(F_DIRECTIONS))
def test_shear_deformation_closed_form(tau, v):
    # exact deformation for u = (sin x2, 0) over the window is |v1| tau
    g = Grid.get(32)
    ph = advect_phase(shear_velocity(g), WaveIndex(0, v), g, tau, nslices=5,
                      raise_on_violation=False)
    assert ph.deformation == pytest.approx(abs(v[0]) * tau, rel=1e-8)


@pytest.mark.parametrize("N,K", [(64, 20), (128, 60)])
def test_trig_evaluator_routes_agree(N, K):
    # NUFFT route against the direct exponential sums
    g = Grid.get(N)
    rng = np.random.default_rng(N)
    h = np.zeros((2, N, N // 2 + 1), complex)
    sel = np.maximum(np.abs(g.k1), np.abs(g.k2)) <= K
    h[:, sel] = rng.standard_normal((2, sel.sum())) + 1j * rng.standard_normal((2, sel.sum()))
    f = np.stack([g.irfft(x) for x in h])
    ev = TrigEvaluator(g, f)
    y1, y2 = g.x1 + 0.3 * np.sin(g.x2), g.x2 - 0.2 * np.cos(g.x1) + 7.0
    a, b = ev(y1, y2, route="direct"), ev(y1, y2, route="nufft")
    assert np.abs(a - b).max() < 1e-12 * np.abs(f).max()
    # on-grid points reproduce the samples
    assert np.abs(ev(g.x1, g.x2, route="nufft") - f).max() < 1e-12 * np.abs(f).max()
