import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as sp_integrate

from entroscope.entropy import (
    DomainError,
    PreconditionError,
    Schedules,
    entropy_response,
    entropy_smooth_check,
    joint_response,
    kl_divergence,
    psi,
    quadratic_response,
    small_scale_coefficient,
    sym_psi,
    xlogx_shift,
)
from entroscope.numerics import QuadratureRule
from entroscope.probes import make_gaussian_probe
from entroscope.spaces import TestFunction, constant, coordinate, directional_coordinates, euclidean

LINE, PLANE = euclidean(1), euclidean(2)
G1, G2 = make_gaussian_probe(1), make_gaussian_probe(2)


def normal_quad(fn):
    """Brute-force oracle: integral of fn against the standard normal."""
    val, _ = sp_integrate.quad(lambda y: fn(y) * math.exp(-y * y / 2) / math.sqrt(2 * math.pi),
                               -40, 40, epsabs=1e-14, epsrel=1e-13, limit=400)
    return val


def test_schedule_defaults():
    s = Schedules()
    assert s.t_values(1.0) == pytest.approx([0.25 / 2**k for k in range(6)])
    assert s.t_values(4.0) == pytest.approx([0.125 / 2**k for k in range(6)])
    assert s.eps_values() == pytest.approx([0.25 / 4**k for k in range(6)])


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.999, 10.0))
def test_psi_matches_direct_formula(u):
    if abs(u) >= 1e-3:
        ref = (1 + u) * math.log1p(u) - u
    else:
        # the direct formula cancels here; four Taylor terms are exact to rounding
        ref = u * u / 2 - u**3 / 6 + u**4 / 12 - u**5 / 20
    assert float(psi(np.array([u]))[0]) == pytest.approx(ref, rel=1e-9, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.999, 0.999))
def test_sym_psi_is_even_sum(u):
    a = np.array([u])
    assert float(sym_psi(a)[0]) == pytest.approx(float(psi(a)[0] + psi(-a)[0]), rel=1e-12, abs=1e-300)


def test_xlogx_convention():
    assert xlogx_shift(np.array([-1.0]))[0] == 0.0


def test_kl_of_identity_ratio_is_zero():
    est = kl_divergence(constant(LINE, 1.0), G1, [0.0], 1.0)
    assert est.value == pytest.approx(0.0, abs=1e-15)


def test_kl_against_brute_force():
    # the ratio 1 + y/2 is only nonnegative on y >= -2; clip to keep it a density ratio
    r = TestFunction(lambda y: np.maximum(1 + 0.5 * y[:, 0], 0.0), LINE, 30.0)
    oracle = normal_quad(lambda y: (1 + y / 2) * math.log(1 + y / 2) if y > -2 else 0.0)
    assert abs(oracle - 0.125) <= 0.05
    # the clip leaves a kink at y = -2, so integrate adaptively
    assert kl_divergence(r, G1, [0.0], 1.0, QuadratureRule.adaptive()).value == pytest.approx(oracle, abs=1e-8)


def test_kl_rejects_negative_ratio():
    r = TestFunction(lambda y: 1 + 0.5 * y[:, 0], LINE, 30.0)
    with pytest.raises(DomainError, match="node"):
        kl_divergence(r, G1, [0.0], 1.0)


def test_entropy_response_zero_t():
    assert entropy_response(G1, [0.0], 1.0, coordinate(LINE, 0, 4.0), 0.0).value == 0.0


@pytest.mark.parametrize("c, t", [(0.5, 0.9), (-1.0, 0.5), (2.0, -0.4)])
def test_entropy_response_constant(c, t):
    est = entropy_response(G1, [0.3], 0.2, constant(LINE, c), t)
    assert est.value == pytest.approx((1 + t * c) * math.log1p(t * c), abs=1e-14)


def test_entropy_response_against_brute_force():
    t = 0.25
    f = coordinate(LINE, 0, 3.0)
    oracle = normal_quad(lambda y: (1 + t * max(-3, min(3, y))) * math.log1p(t * max(-3, min(3, y))))
    assert abs(oracle - t * t / 2) <= t**3
    est = entropy_response(G1, [0.0], 1.0, f, t, QuadratureRule.adaptive())
    assert est.value == pytest.approx(oracle, abs=1e-10)


def test_entropy_response_reports_perturbed_mass():
    est = entropy_response(G1, [0.0], 0.1, constant(LINE, 0.5), 0.5)
    assert est.perturbed_mass == pytest.approx(1.25)


def test_entropy_response_precondition():
    with pytest.raises(PreconditionError):
        entropy_response(G1, [0.0], 1.0, coordinate(LINE, 0, 4.0), 0.3)


def test_entropy_response_domain_error():
    # the declared bound is a lie: values reach 10 while the bound says 1
    f = TestFunction(lambda y: 10 * np.ones(y.shape[0]), LINE, 1.0)
    with pytest.raises(DomainError):
        entropy_response(G1, [0.0], 1.0, f, -0.5)


@pytest.mark.parametrize("c", [0.0, 0.7, -3.0])
@pytest.mark.parametrize("eps", [1.0, 0.01])
def test_quadratic_response_constant(c, eps):
    r = quadratic_response(G1, [0.0], eps, constant(LINE, c) if c else constant(LINE, 1e-300))
    assert r.value == pytest.approx(c * c, abs=1e-12)


@pytest.mark.parametrize("eps", [1.0, 0.25, 0.01])
def test_quadratic_response_identity_is_eps(eps):
    r = quadratic_response(G1, [0.0], eps, coordinate(LINE, 0, 30.0))
    assert r.converged
    assert r.value == pytest.approx(eps, abs=1e-8)
    assert r.agreement <= 1e-8


def test_joint_response_collapses_on_diagonal():
    f = coordinate(LINE, 0, 30.0) + 1.0
    assert joint_response(G1, [0.0], 0.1, f, f).value == pytest.approx(
        quadratic_response(G1, [0.0], 0.1, f).value, abs=1e-8)


def test_joint_response_independent_coordinates():
    r = joint_response(G2, [0.0, 0.0], 0.1, coordinate(PLANE, 0, 30.0), coordinate(PLANE, 1, 30.0))
    assert abs(r.value) <= 1e-8
    assert r.uniformity is not None


def test_joint_response_odd_moment():
    f = coordinate(LINE, 0, 30.0)
    g = TestFunction(lambda y: np.clip(y[:, 0], -30, 30) ** 2 - 1, LINE, 900.0)
    oracle = normal_quad(lambda y: y * (y * y - 1))
    r = joint_response(G1, [0.0], 1.0, f, g)
    assert oracle == pytest.approx(0.0, abs=1e-12)
    assert r.value == pytest.approx(oracle, abs=1e-8)


def test_joint_response_precondition():
    f = coordinate(LINE, 0, 1.0)
    with pytest.raises(PreconditionError):
        joint_response(G1, [0.0], 0.1, f, f, Schedules(t0=0.6))


def test_small_scale_limit_is_value_squared():
    f = coordinate(LINE, 0, 30.0) + 1.0
    est = small_scale_coefficient(G1, [0.0], f)
    assert est.converged
    assert est.limit == pytest.approx(1.0, abs=1e-6)
    assert est.agreement <= 1e-8
    assert [lvl.eps for lvl in est.per_eps] == Schedules().eps_values()


def test_small_scale_directional_is_eps_independent():
    fs = directional_coordinates(PLANE, [0.0, 0.0])
    est = small_scale_coefficient(G2, [0.0, 0.0], fs[0], None, Schedules(), QuadratureRule.gauss_polar(48))
    values = [lvl.value for lvl in est.per_eps]
    assert max(values) - min(values) <= 1e-12
    assert est.limit == pytest.approx(0.5, abs=1e-10)


def test_small_scale_oscillating_function_withholds_limit():
    f = TestFunction(lambda y: np.sin(1.0 / np.where(y[:, 0] == 0, 1.0, y[:, 0])), LINE, 1.0)
    est = small_scale_coefficient(G1, [0.0], f)
    assert not est.converged
    assert est.limit is None
    assert est.notes


def test_entropy_smooth_polynomial_points():
    f = TestFunction(lambda y: np.clip(y[:, 0], -30, 30) ** 2 - y[:, 0], LINE, 930.0)
    rep = entropy_smooth_check(G1, f, [[-1.0], [-0.5], [0.0], [0.5], [1.0]])
    assert rep.verdict
    for x, lim in zip([-1.0, -0.5, 0.0, 0.5, 1.0], rep.limits):
        assert lim == pytest.approx((x * x - x) ** 2, abs=1e-6)


def test_entropy_smooth_directional_off_center():
    f = directional_coordinates(PLANE, [0.0, 0.0])[0]
    x = [1.0, 1.0]
    rep = entropy_smooth_check(G2, f, [x], Schedules(eps0=0.01))
    assert rep.verdict
    assert rep.limits[0] == pytest.approx(0.5, abs=1e-6)


def test_entropy_smooth_empty_is_vacuous():
    rep = entropy_smooth_check(G1, constant(LINE, 1.0), [])
    assert rep.verdict and rep.warnings


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 0.5))
def test_polarization_symmetry_scaling(a, b, eps):
    f = TestFunction(lambda y: np.sin(y[:, 0]) + a, LINE, 1 + abs(a))
    g = TestFunction(lambda y: np.cos(2 * y[:, 0]) * b, LINE, max(abs(b), 1e-3))
    x = [0.2]
    fg = joint_response(G1, x, eps, f, g).value
    gf = joint_response(G1, x, eps, g, f).value
    If, Ig, Ifg = (quadratic_response(G1, x, eps, h).value for h in (f, g, f + g))
    assert fg == pytest.approx(0.5 * (Ifg - If - Ig), abs=1e-9)
    assert fg == pytest.approx(gf, abs=1e-12)
    assert If >= -1e-12
    for alpha in (-2.0, -1.0, 0.5, 3.0):
        assert quadratic_response(G1, x, eps, alpha * f).value == pytest.approx(alpha**2 * If, abs=1e-9)
