import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad, solve_ivp

from levyq.models import (
    BS, CGMY, VG, VGSA, DomainError, MarketEnv, NumericalError, UnsupportedModelError,
    characteristic_function, cir_clock_log_mgf, cumulants, cumulants_fd, default_levy_grid,
    discretize_levy_measure, levy_density, log_characteristic_function, log_price_cf,
    log_return_log_cf, make_model, martingale_correction, model_from_vector, model_to_dict,
    model_vector,
)

ENV = MarketEnv(100.0, 0.08, 0.02)


# --- parameter types -------------------------------------------------------

def test_make_model_round_trip():
    m = make_model("vgsa", sigma=0.2, nu=0.1, theta=-0.1, kappa=1.0, eta=1.0, **{"lambda": 0.5})
    assert m.lam == 0.5
    assert model_from_vector("vgsa", model_vector(m)) == m
    assert model_to_dict(VG(0.2, 0.1, 0.15)) == {"model": "vg", "sigma": 0.2, "nu": 0.1, "theta": 0.15}


@pytest.mark.parametrize("kind,kw", [
    ("bs", {"sigma": -0.1}),
    ("vg", {"sigma": 0.2, "nu": 0.0, "theta": 0.1}),
    ("cgmy", {"C": 1.0, "G": 5.0, "M": 5.0, "Y": 1.0}),
    ("cgmy", {"C": 1.0, "G": 5.0, "M": 5.0, "Y": 2.0}),
    ("vgsa", {"sigma": 0.2, "nu": 0.1, "theta": 0.1, "kappa": -1.0, "eta": 1.0, "lam": 0.1}),
])
def test_invalid_parameters_rejected(kind, kw):
    with pytest.raises(DomainError):
        make_model(kind, **kw)


def test_unknown_model_kind():
    with pytest.raises((DomainError, UnsupportedModelError)):
        make_model("heston", v0=0.1)


def test_market_env_forward():
    assert ENV.forward(2.0) == pytest.approx(100.0 * math.exp(0.12))
    with pytest.raises(DomainError):
        MarketEnv(0.0)


# --- characteristic functions ----------------------------------------------

def test_cf_at_zero_is_one():
    for m in (BS(0.2), VG(0.2, 0.1, -0.1), CGMY(1.0, 5.0, 10.0, 0.7),
              VGSA(0.2, 0.2, -0.1, 1.5, 1.0, 0.6)):
        assert characteristic_function(m, 0.0, 1.3) == pytest.approx(1.0, abs=1e-14)


def test_bs_cf():
    got = characteristic_function(BS(0.3), 1.7, 0.5)
    assert got == pytest.approx(math.exp(-0.5 * 0.09 * 1.7**2 * 0.5), rel=1e-15)


def test_vg_cf_against_mpmath():
    s, n, th, u, t = 0.2, 0.1, 0.15, 1.3, 0.7
    want = (1 - 1j * mp.mpf(u) * th * n + mp.mpf(s) ** 2 * n * u**2 / 2) ** (-mp.mpf(t) / n)
    got = characteristic_function(VG(s, n, th), u, t)
    assert abs(got - complex(want)) < 1e-14


def test_cgmy_cf_independent_complex_power():
    C = G = M = 10.0
    Y, u, t = 1.5, 1.0, 1.0
    mp.mp.dps = 30
    expo = C * t * mp.gamma(-Y) * ((M - 1j * u) ** Y - mp.mpf(M) ** Y + (G + 1j * u) ** Y - mp.mpf(G) ** Y)
    want = complex(mp.exp(expo))
    got = characteristic_function(CGMY(C, G, M, Y), u, t)
    assert abs(got - want) < 1e-13 * max(1.0, abs(want))


def test_cf_overflow_raises():
    with pytest.raises(NumericalError):
        characteristic_function(CGMY(50.0, 2.0, 2.5, 1.8), -2.4j, 50.0)


def test_cf_needs_positive_time():
    with pytest.raises(DomainError):
        characteristic_function(VG(0.2, 0.1, 0.1), 1.0, 0.0)


def _riccati_log_mgf(s: complex, t, y0, kappa, eta, lam):
    # B' = s - kappa B + lam^2 B^2 / 2, A' = kappa eta B, from zero
    def rhs(_, v):
        B = v[0] + 1j * v[1]
        dB = s - kappa * B + 0.5 * lam**2 * B * B
        dA = kappa * eta * B
        return [dB.real, dB.imag, dA.real, dA.imag]

    sol = solve_ivp(rhs, (0, t), [0, 0, 0, 0], rtol=1e-12, atol=1e-14, method="DOP853")
    B = sol.y[0, -1] + 1j * sol.y[1, -1]
    A = sol.y[2, -1] + 1j * sol.y[3, -1]
    return A + B * y0


@pytest.mark.parametrize("s", [-0.3 + 0.2j, -2.0 - 1.0j, 0.05 + 0.0j, -0.01 + 0.4j])
@pytest.mark.parametrize("kappa,eta,lam", [(1.5, 1.0, 0.6), (0.2, 2.0, 1.1), (4.0, 0.5, 0.3)])
def test_cir_clock_against_riccati_ode(s, kappa, eta, lam):
    got = complex(cir_clock_log_mgf(s, 0.9, 1.0, kappa, eta, lam))
    want = _riccati_log_mgf(s, 0.9, 1.0, kappa, eta, lam)
    assert abs(got - want) < 1e-9


def test_cir_clock_deterministic_limit():
    got = cir_clock_log_mgf(0.7, 2.0, 1.3, 0.5, 2.0, 0.0)
    e = (1 - math.exp(-1.0)) / 0.5
    assert complex(got) == pytest.approx(0.7 * (1.3 * e + 2.0 * (2.0 - e)), rel=1e-14)
    assert complex(cir_clock_log_mgf(0.7, 2.0, 1.3, 0.5, 2.0, 1e-6)) == pytest.approx(
        complex(got), rel=1e-4)


def test_vgsa_reduces_to_vg_with_frozen_clock():
    vg = VG(0.25, 0.3, -0.2)
    frozen = VGSA(0.25, 0.3, -0.2, 0.0, 1.0, 0.0)
    u = np.array([0.3, 1.0, 4.0])
    np.testing.assert_allclose(characteristic_function(frozen, u, 0.8),
                               characteristic_function(vg, u, 0.8), rtol=1e-13)


def test_vgsa_cf_large_time_stable():
    lv = log_characteristic_function(VGSA(0.2, 0.1, -0.1, 2.0, 1.0, 1.5), np.array([5.0, 50.0]), 40.0)
    assert np.all(np.isfinite(lv)) and np.all(lv.real <= 0)


# --- martingale correction ---------------------------------------------------

def test_bs_correction_gives_martingale():
    w = martingale_correction(BS(0.3))
    assert w == pytest.approx(-0.045)
    assert math.exp(w) * characteristic_function(BS(0.3), -1j, 1.0).real == pytest.approx(1.0)


def test_cgmy_correction_matches_cf():
    m = CGMY(10.0, 10.0, 10.0, 0.75)
    want = -math.log(characteristic_function(m, -1j, 1.0).real)
    assert martingale_correction(m) == pytest.approx(want, rel=1e-10)


def test_vg_correction_closed_form():
    m = VG(0.41, 0.1, -0.1)
    assert martingale_correction(m) == pytest.approx(math.log(1 + 0.01 - 0.5 * 0.41**2 * 0.1) / 0.1)


def test_correction_domain_errors():
    with pytest.raises(DomainError):
        martingale_correction(VG(1.0, 2.0, 0.5))
    with pytest.raises(DomainError):
        martingale_correction(CGMY(1.0, 5.0, 0.8, 0.5))


models_st = st.one_of(
    st.builds(BS, st.floats(0.05, 0.8)),
    st.builds(VG, st.floats(0.05, 0.5), st.floats(0.02, 0.6), st.floats(-0.4, 0.4)),
    st.builds(CGMY, st.floats(0.1, 5.0), st.floats(2.0, 15.0), st.floats(2.0, 15.0),
              st.floats(0.1, 1.9).filter(lambda y: abs(y - 1.0) > 1e-3)),
    st.builds(VGSA, st.floats(0.05, 0.5), st.floats(0.02, 0.6), st.floats(-0.4, 0.4),
              st.floats(0.0, 4.0), st.floats(0.2, 3.0), st.floats(0.0, 1.5)),
)


@settings(max_examples=120, deadline=None)
@given(models_st, st.floats(0.05, 3.0), st.floats(0.0, 0.1), st.floats(0.0, 0.05))
def test_log_price_cf_forward_identity(model, T, r, q):
    env = MarketEnv(100.0, r, q)
    got = log_price_cf(model, env, -1j, T)
    assert abs(got - 100.0 * math.exp((r - q) * T)) < 1e-10 * 100.0 * math.exp((r - q) * T)


@settings(max_examples=80, deadline=None)
@given(models_st, st.floats(0.05, 3.0), st.floats(-30, 30))
def test_cf_is_bounded_and_hermitian(model, t, u):
    a = characteristic_function(model, u, t)
    b = characteristic_function(model, -u, t)
    assert abs(a) <= 1 + 1e-12
    assert abs(a - np.conj(b)) < 1e-12


# --- cumulants -------------------------------------------------------------

def test_bs_cumulants_table():
    c = cumulants(BS(0.2), MarketEnv(100, 0.05, 0.01), 2.0)
    assert (c.c1, c.c2, c.c4, c.w) == (pytest.approx(0.08), pytest.approx(0.08), 0.0, 0.0)


def _mp_G(model, env, T, w):
    # log E[(S_T/S0)^w] written out independently in mpmath
    r, q = mp.mpf(env.r), mp.mpf(env.q)
    if isinstance(model, VG):
        s, n, th = (mp.mpf(x) for x in (model.sigma, model.nu, model.theta))
        om = mp.log(1 - th * n - s * s * n / 2) / n
        return w * (r - q + om) * T - T / n * mp.log(1 - th * n * w - s * s * n * w * w / 2)
    C, G, M, Y = (mp.mpf(x) for x in (model.C, model.G, model.M, model.Y))
    psi = lambda v: C * mp.gamma(-Y) * ((M - v) ** Y - M**Y + (G + v) ** Y - G**Y)
    return w * (r - q - psi(1)) * T + T * psi(w)


@pytest.mark.parametrize("model", [VG(0.2, 0.1, 0.15), VG(0.41, 0.3, -0.25),
                                   CGMY(10.0, 10.0, 10.0, 0.75), CGMY(1.0, 5.0, 10.0, 1.5)])
def test_closed_cumulants_against_mpmath_derivatives(model):
    env = MarketEnv(100, 0.05, 0.01)
    c = cumulants(model, env, 0.7)
    want = [mp.diff(lambda w: _mp_G(model, env, 0.7, w), 0, n) for n in (1, 2, 4)]
    np.testing.assert_allclose([c.c1, c.c2, c.c4], [float(x) for x in want], rtol=1e-12)


def test_cumulants_fd_matches_closed_form_vg_scan():
    rng = np.random.default_rng(7)
    env = MarketEnv(100, 0.05, 0.0)
    for _ in range(100):
        m = VG(rng.uniform(0.1, 0.5), rng.uniform(0.05, 0.5), rng.uniform(-0.3, 0.3))
        T = rng.uniform(0.1, 2.0)
        a, b = cumulants(m, env, T), cumulants_fd(m, env, T)
        np.testing.assert_allclose([b.c1, b.c2, b.c4], [a.c1, a.c2, a.c4], rtol=1e-5)


def test_cumulants_fd_vgsa_frozen_clock_equals_vg():
    env = MarketEnv(100, 0.05, 0.0)
    a = cumulants(VG(0.3, 0.2, -0.1), env, 1.0)
    b = cumulants_fd(VGSA(0.3, 0.2, -0.1, 0.0, 1.0, 0.0), env, 1.0)
    np.testing.assert_allclose([b.c1, b.c2, b.c4], [a.c1, a.c2, a.c4], rtol=1e-5)


def test_cumulants_vgsa_needs_fd():
    with pytest.raises(UnsupportedModelError):
        cumulants(VGSA(0.2, 0.1, 0.1, 1.0, 1.0, 0.5), ENV, 1.0)


# --- Levy measures -----------------------------------------------------------

def test_vg_levy_density_reproduces_exponent():
    # psi(u) = int (e^{iux} - 1) k(x) dx for the finite-variation VG jump part
    m = VG(0.25, 0.2, -0.15)
    for u in (0.5, 2.0):
        re = sum(quad(lambda x: (math.cos(u * x) - 1) * levy_density(m, x), a, b, limit=400)[0]
                 for a, b in ((-np.inf, 0), (0, np.inf)))
        im = sum(quad(lambda x: math.sin(u * x) * levy_density(m, x), a, b, limit=400)[0]
                 for a, b in ((-np.inf, 0), (0, np.inf)))
        want = log_characteristic_function(m, u, 1.0)
        assert abs(complex(re, im) - want) < 1e-7


def test_cgmy_density_tails():
    m = CGMY(2.0, 3.0, 9.0, 0.5)
    assert levy_density(m, 0.5) == pytest.approx(2.0 * math.exp(-4.5) / 0.5**1.5)
    assert levy_density(m, -0.5) == pytest.approx(2.0 * math.exp(-1.5) / 0.5**1.5)
    with pytest.raises(DomainError):
        levy_density(m, 0.0)


def test_symmetric_cgmy_masses_symmetric():
    d = discretize_levy_measure(CGMY(10.0, 10.0, 10.0, 0.75))
    np.testing.assert_allclose(d.masses, d.masses[::-1], rtol=1e-13)
    np.testing.assert_allclose(d.grid, -d.grid[::-1])


def test_cgmy_mass_sum_against_quadrature():
    m = CGMY(10.0, 10.0, 10.0, 0.75)
    grid = default_levy_grid(200)
    d = discretize_levy_measure(m, grid)
    lo = 1e-3
    f = lambda x: float(levy_density(m, x))
    want = quad(f, lo, 1.0, points=[1e-2, 1e-1], limit=200)[0] + quad(f, -1.0, -lo, points=[-1e-1, -1e-2], limit=200)[0]
    assert d.masses.sum() == pytest.approx(want, rel=1e-4)


def test_discretization_rejects_zero_and_bs():
    with pytest.raises(DomainError):
        discretize_levy_measure(VG(0.2, 0.1, 0.1), np.array([-0.1, 0.0, 0.1]))
    with pytest.raises(UnsupportedModelError):
        discretize_levy_measure(BS(0.2))
    with pytest.raises(DomainError):
        default_levy_grid(201)
