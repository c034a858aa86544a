import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sqglab.identities import bilinear_identity_error, check_kernel_values, microlocal_ratio
from sqglab.microlocal import (ConjugatePairError, KernelQuadratureError, ModulatedWave,
                               bilinear_B, bilinear_kernel_sym, delta_B, kernel_factor,
                               kernel_theta, kernel_wave, microlocal_expand, quadratic_Q,
                               reflect_conj, symbol_lambda, symbol_riesz_perp)
from sqglab.spectral import Grid

SQRT5 = math.sqrt(5)


def one_mode_complex(g, m=1):
    return 1 + 0.3 * np.cos(m * g.x1) + 0.2j * np.sin(m * (g.x1 + g.x2))


def sup(tensor):
    return max(np.abs(c.values).max() for c in tensor.components)


# ---------------------------------------------------------------- linear expansion

def test_lambda_on_plane_wave():
    g = Grid.get(128)
    lam = 8
    w = ModulatedWave(g, np.ones((128, 128)), (1, 0), lam, project=False)
    ex = microlocal_expand(symbol_lambda, w)
    assert np.abs(ex["full"] - lam * w.field).max() < 1e-12 * lam
    assert np.abs(ex["principal"] - lam * w.field).max() < 1e-12 * lam
    assert np.abs(ex["delta"]).max() < 1e-12 * lam


def test_riesz_perp_on_plane_wave():
    g = Grid.get(128)
    lam = 8
    w = ModulatedWave(g, np.ones((128, 128)), (1, 2), lam, project=False)
    m = symbol_riesz_perp(lam * 1.0, lam * 2.0)
    assert m[0] == pytest.approx(-2j / SQRT5) and m[1] == pytest.approx(1j / SQRT5)
    ex = microlocal_expand(symbol_riesz_perp, w)
    for i in range(2):
        assert np.abs(ex["principal"][i] - m[i] * w.field).max() < 1e-12
        assert np.abs(ex["delta"][i]).max() < 1e-12


def test_modulated_sheared_wave_ratio():
    g = Grid.get(512)
    lam = 64
    a = 1 + 0.1 * np.cos(g.x1)
    # phase of (1, 2) after a short time under the shear u = (sin x2, 0)
    psi = -0.02 * np.sin(g.x2)
    w = ModulatedWave(g, a, (1, 2), lam, psi=psi, project=False)
    ex = microlocal_expand(symbol_lambda, w)
    assert np.abs(ex["delta"]).max() / np.abs(ex["principal"]).max() < 0.05


def test_microlocal_ratio_halves():
    r = [microlocal_ratio(512, lam) for lam in (32, 64)]
    assert r[1] < 0.05
    assert r[0] / r[1] == pytest.approx(2.0, rel=0.3)


# ---------------------------------------------------------------- closed-form kernel

@pytest.mark.parametrize("grad,lam,expected", [
    ((1, 2), 1, np.array([[-4, -3], [-3, 4]]) / (2 * SQRT5)),
    ((2, 1), 1, np.array([[-4, 3], [3, 4]]) / (2 * SQRT5)),
    ((1, 0), 2, np.array([[0, 1], [1, 0]])),
])
def test_kernel_closed_form(grad, lam, expected):
    assert np.abs(bilinear_kernel_sym(grad, lam) - expected).max() < 1e-15


def test_kernel_zero_gradient():
    with pytest.raises(ValueError):
        bilinear_kernel_sym((0, 0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 100))
def test_kernel_symmetric_traceless(p1, p2, lam):
    if math.hypot(p1, p2) < 1e-3:
        return
    K = bilinear_kernel_sym((p1, p2), lam)
    assert K[0, 1] == K[1, 0]
    assert K[0, 0] + K[1, 1] == 0


def test_kernel_table_checks():
    for r in check_kernel_values():
        assert r.ok, (r.name, r.measured)


@pytest.mark.parametrize("carrier", [(1, 2), (2, 1), (1, 0), (3, -1)])
def test_quadrature_kernel_at_collinear_pair(carrier):
    # segment kernel at (zeta, -zeta) against the closed form times the realized factor
    lam = 7.0
    z = lam * np.asarray(carrier, float)[:, None]
    K = kernel_wave(z, -z)[:, 0]
    sym = np.array([[K[0], 0.5 * (K[1] + K[2])], [0.5 * (K[1] + K[2]), K[3]]])
    ref = kernel_factor() * bilinear_kernel_sym(np.asarray(carrier, float), lam)
    assert np.abs(sym - ref).max() < 1e-10 * np.abs(ref).max()


def test_realized_factor_is_unit():
    assert abs(kernel_factor()) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(-20, 20), st.integers(-20, 20))
def test_symbol_odd(k1, k2):
    m = symbol_riesz_perp(np.array([float(k1)]), np.array([float(k2)]))
    mm = symbol_riesz_perp(np.array([-float(k1)]), np.array([-float(k2)]))
    assert m[0][0] == -mm[0][0] and m[1][0] == -mm[1][0]


def test_segment_kernel_difference_quotient():
    # (m(zeta) + m(eta)) = i (zeta + eta)_j K^{j.} for m = i k_perp / |k|
    rng = np.random.default_rng(0)
    z = rng.uniform(5, 9, (2, 50))
    e = -z + rng.uniform(-1, 1, (2, 50))
    K = kernel_theta(z, e)
    mz, me = symbol_riesz_perp(z[0], z[1]), symbol_riesz_perp(e[0], e[1])
    d = z + e
    for l in range(2):
        lhs = mz[l] + me[l]
        rhs = 1j * (d[0] * K[l] + d[1] * K[2 + l])
        assert np.abs(lhs - rhs).max() < 1e-12


def test_quadrature_error_through_origin():
    z = np.array([[1.0], [0.0]])
    with pytest.raises(KernelQuadratureError):
        kernel_theta(z, z)


# ---------------------------------------------------------------- quadratic term

def test_Q_zero_wave():
    g = Grid.get(64)
    w = ModulatedWave(g, np.zeros((64, 64)), (1, 2), 4)
    Q = quadratic_Q(w, w.conj())
    assert np.all(Q[0].values == 0) and np.all(Q[1].values == 0)


def test_Q_plane_wave_vanishes():
    g = Grid.get(64)
    w = ModulatedWave(g, np.ones((64, 64)), (1, 2), 4)
    Q = quadratic_Q(w, w.conj())
    assert max(np.abs(Q[i].values).max() for i in range(2)) < 1e-12


def test_Q_modulated_is_low_frequency():
    g = Grid.get(256)
    a = 1 + 0.3 * np.cos(g.x1) + 0.2 * np.sin(g.x2)
    w = ModulatedWave(g, a, (1, 2), 16)
    Q = quadratic_Q(w, w.conj())
    for i in range(2):
        h = g.fft(Q[i].values)
        high = np.maximum(np.abs(g.k1c), np.abs(g.k2c)) > 2
        assert np.sqrt(np.sum(np.abs(h[high]) ** 2) / np.sum(np.abs(h) ** 2)) < 1e-10


def test_Q_rejects_non_conjugate():
    g = Grid.get(64)
    w = ModulatedWave(g, np.ones((64, 64)), (1, 2), 4)
    other = ModulatedWave(g, 2 * np.ones((64, 64)), (-1, -2), 4)
    with pytest.raises(ConjugatePairError):
        quadratic_Q(w, other)


def test_conjugate_wave_is_complex_conjugate():
    g = Grid.get(128)
    w = ModulatedWave(g, one_mode_complex(g), (2, 1), 8, psi=0.1 * np.sin(g.x1))
    assert np.abs(w.conj().field - np.conj(w.field)).max() < 1e-13
    assert np.abs(reflect_conj(reflect_conj(w.hat)) - w.hat).max() == 0


# ---------------------------------------------------------------- bilinear tensor

def test_B_zero_wave():
    g = Grid.get(64)
    w = ModulatedWave(g, np.zeros((64, 64)), (1, 2), 4)
    B = bilinear_B(w, w.conj())
    assert np.all(B.full == 0)


@pytest.mark.parametrize("N,lam", [(256, 16), (256, 32)])
def test_divergence_identity(N, lam):
    assert bilinear_identity_error(N, lam) < 1e-6


def test_divergence_identity_fails_with_wrong_sign():
    assert bilinear_identity_error(128, 8, sign=-1) > 0.5


def test_B_is_real():
    g = Grid.get(128)
    w = ModulatedWave(g, one_mode_complex(g), (1, 2), 8, psi=0.1 * np.sin(g.x2) / 8)
    B = bilinear_B(w, w.conj())
    assert B.imag_ratio < 1e-12
    Q = quadratic_Q(w, w.conj())
    D = B.divergence()
    for i in range(2):
        assert np.abs(D[i].values - Q[i].values).max() < 1e-8 * np.abs(Q[i].values).max()


def test_delta_B_constant_amplitude():
    g = Grid.get(64)
    w = ModulatedWave(g, np.ones((64, 64)), (1, 2), 4)
    dB = delta_B(w, w.conj())
    assert sup(dB) < 1e-12


def _delta_B_ratio(lam, N, m=1):
    g = Grid.get(N)
    a = one_mode_complex(g, m)
    w = ModulatedWave(g, a, (1, 2), lam)
    dB = delta_B(w, w.conj())
    k = bilinear_kernel_sym(w.grad_xi(), lam)
    lead = max(np.abs(np.abs(a) ** 2 * kk).max() for kk in k)
    return sup(dB) / lead


def test_delta_B_small_at_ratio_64():
    assert _delta_B_ratio(64, 512) < 0.1


def test_delta_B_first_order_in_inverse_lambda():
    r32, r64 = _delta_B_ratio(32, 256), _delta_B_ratio(64, 512)
    assert r32 / r64 == pytest.approx(2.0, rel=0.3)


def _manufactured_delta_B(lam_q, lam_next, delta_q, N):
    # amplitude normalized as in the increment: a = lam_next^{-1/2} delta_q^{1/2} b, b of frequency lam_q
    g = Grid.get(N)
    a = math.sqrt(delta_q / lam_next) * one_mode_complex(g, lam_q)
    w = ModulatedWave(g, a, (1, 2), lam_next)
    return sup(delta_B(w, w.conj()))


def test_delta_B_order_with_increment_normalization():
    lam_q, lam_next, delta_q = 2, 64, 0.1
    meas = _manufactured_delta_B(lam_q, lam_next, delta_q, 512)
    ref = delta_q * lam_q / lam_next
    assert 0.1 <= meas / ref <= 10


@pytest.mark.xfail(strict=True, reason="literal lam^-2 prefactor is inconsistent with the "
                   "increment normalization; see decisions ledger")
def test_delta_B_literal_bound():
    lam_q, lam_next, delta_q = 2, 64, 0.1
    meas = _manufactured_delta_B(lam_q, lam_next, delta_q, 512)
    bound = lam_next ** -2 * (lam_next / lam_q) ** -1 * delta_q
    assert meas <= 10 * bound
