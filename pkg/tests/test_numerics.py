import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entroscope import numerics
from entroscope.numerics import (
    IntegrationError,
    QuadratureRule,
    integrate,
    is_positive_definite,
    jacobian_fd,
    min_eigenvalue,
    numerical_rank,
    pd_threshold,
    quadrature_nodes,
    richardson_limit,
)
from entroscope.probes import make_circle_probe, make_gaussian_probe, make_mollifier_probe

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("order", [2, 8, 64, 256])
def test_gauss_hermite_integrates_constant(order):
    est = integrate(make_gaussian_probe(1), [0.4], 0.3, lambda y: np.ones(len(y)),
                    QuadratureRule.gauss_hermite(order))
    assert est.value == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("order", [2, 4, 64])
def test_gauss_hermite_second_moment(order):
    est = integrate(make_gaussian_probe(1), [0.0], 1.0, lambda y: y[:, 0] ** 2,
                    QuadratureRule.gauss_hermite(order))
    assert est.value == pytest.approx(1.0, abs=1e-12)


def test_circle_odd_integrand_vanishes():
    est = integrate(make_circle_probe(), [0.0], 0.1, lambda y: np.sin(y[:, 0]))
    assert abs(est.value) <= 1e-10


def test_periodic_trapezoid_converges_spectrally():
    p = make_circle_probe()
    eps = 0.01
    z = p.normalisation(eps)
    errors = []
    for n in (32, 64, 128, 256):
        # unnormalized wrapped-Gaussian mass with n equispaced nodes
        theta = np.arange(n) * 2 * math.pi / n
        d = np.angle(np.exp(1j * theta))
        errors.append(abs(np.sum(np.exp(-d * d / (2 * eps))) * 2 * math.pi / n - z))
    assert errors[0] > 1e-6
    for a, b in zip(errors, errors[1:]):
        assert b <= a / 10 or b <= 1e-14


def test_adaptive_matches_fixed_rule():
    p = make_gaussian_probe(1)
    f = lambda y: np.cos(y[:, 0]) ** 2  # noqa: E731
    a = integrate(p, [0.2], 0.05, f, QuadratureRule.adaptive())
    b = integrate(p, [0.2], 0.05, f)
    assert a.value == pytest.approx(b.value, abs=1e-10)
    assert a.method == "adaptive"


def test_adaptive_has_no_node_set():
    with pytest.raises(IntegrationError):
        quadrature_nodes(make_gaussian_probe(1), [0.0], 0.1, QuadratureRule.adaptive())


def test_rule_mismatch_is_rejected():
    with pytest.raises(IntegrationError):
        quadrature_nodes(make_mollifier_probe(1), [0.0], 0.1, QuadratureRule.gauss_hermite(8))


def test_nonpositive_eps_rejected():
    with pytest.raises(ValueError):
        quadrature_nodes(make_gaussian_probe(1), [0.0], 0.0)


def test_monte_carlo_reports_standard_error():
    rule = QuadratureRule.monte_carlo(20000, 5)
    est = integrate(make_gaussian_probe(1), [0.0], 1.0, lambda y: y[:, 0] ** 2, rule)
    assert est.error > 0
    assert abs(est.value - 1.0) <= 4 * est.error


@pytest.mark.parametrize("n", [1, 3, 8])
def test_monte_carlo_independent_of_worker_count(n):
    rule = QuadratureRule.monte_carlo(3 * numerics.MC_CHUNK + 17, 99)
    p = make_gaussian_probe(2)
    ref = numerics._monte_carlo_nodes(p, np.zeros(2), 0.5, rule).points
    with numerics.workers(n):
        pts = numerics._monte_carlo_nodes(p, np.zeros(2), 0.5, rule).points
    assert np.array_equal(ref, pts)


def test_monte_carlo_seed_changes_sample():
    p = make_gaussian_probe(1)
    a = quadrature_nodes(p, [0.0], 0.5, QuadratureRule.monte_carlo(100, 1)).points
    b = quadrature_nodes(p, [0.0], 0.5, QuadratureRule.monte_carlo(100, 2)).points
    assert not np.array_equal(a, b)


def test_rule_round_trips_through_dict():
    rule = QuadratureRule.monte_carlo(1000, 3)
    assert QuadratureRule.from_dict(rule.describe()) == rule


def test_richardson_exact_linear_model():
    rep = richardson_limit([(0.4, 3.4), (0.2, 3.2), (0.1, 3.1)], 1.0)
    assert rep.converged
    assert rep.limit == pytest.approx(3.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=4), finite)
def test_richardson_exact_on_polynomials(coeffs, c0):
    # v(h) = c0 + sum c_k h^k is reproduced exactly once there are enough samples
    hs = [0.5 / 2**k for k in range(len(coeffs) + 2)]
    samples = [(h, c0 + sum(c * h ** (k + 1) for k, c in enumerate(coeffs))) for h in hs]
    rep = richardson_limit(samples, 1.0)
    assert rep.limit == pytest.approx(c0, abs=1e-8 * (1 + sum(abs(c) for c in coeffs)))


def test_richardson_flags_oscillation():
    rep = richardson_limit([(0.4, 1.0), (0.2, -1.0), (0.1, 1.0), (0.05, -1.0)], 1.0)
    assert not rep.converged
    assert rep.diagnostic


def test_richardson_rejects_bad_steps():
    with pytest.raises(ValueError):
        richardson_limit([(0.1, 1.0), (0.2, 1.0), (0.3, 1.0)])
    with pytest.raises(ValueError):
        richardson_limit([(0.1, 1.0), (0.05, 1.0)])


def test_richardson_non_finite_samples():
    rep = richardson_limit([(0.4, 1.0), (0.2, float("nan")), (0.1, 1.0)])
    assert not rep.converged


def _sym(entries, n):
    m = np.zeros((n, n))
    m[np.triu_indices(n)] = entries
    return m + np.triu(m, 1).T


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3))
def test_min_eigenvalue_2x2_closed_form(e):
    a, b, c = e
    m = np.array([[a, b], [b, c]])
    lam = (a + c) / 2 - math.hypot((a - c) / 2, b)
    assert min_eigenvalue(m) == pytest.approx(lam, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=6, max_size=6))
def test_min_eigenvalue_3x3_characteristic_polynomial(e):
    m = _sym(e, 3)
    lam = min_eigenvalue(m)
    # det(M - lam I) vanishes at an eigenvalue (scaled residual)
    scale = 1 + np.max(np.abs(m)) ** 3
    assert abs(np.linalg.det(m - lam * np.eye(3))) <= 1e-8 * scale
    # and no eigenvalue is below it: M - lam I is positive semidefinite
    shifted = m - lam * np.eye(3)
    v = np.random.default_rng(0).standard_normal((50, 3))
    assert np.all(np.einsum("ij,jk,ik->i", v, shifted, v) >= -1e-8 * scale)


def _brute_rank(m):
    """Largest k with a nonzero k x k minor (exact for integer matrices)."""
    n = m.shape[0]
    for k in range(n, 0, -1):
        for rows in itertools.combinations(range(n), k):
            for cols in itertools.combinations(range(n), k):
                if round(np.linalg.det(m[np.ix_(rows, cols)])) != 0:
                    return k
    return 0


small_int = st.integers(-3, 3)


@settings(max_examples=80, deadline=None)
@given(st.sampled_from([2, 3]), st.integers(0, 3), st.data())
def test_rank_matches_brute_force_minors(n, r, data):
    b = np.array(data.draw(st.lists(st.lists(small_int, min_size=r, max_size=r), min_size=n, max_size=n)),
                 dtype=float).reshape(n, r)
    m = b @ b.T
    assert numerical_rank(m) == _brute_rank(m)


def test_rank_small_cases():
    assert numerical_rank(np.zeros((2, 2))) == 0
    assert numerical_rank(np.array([[1.0, 2.0], [2.0, 4.0]])) == 1
    assert numerical_rank(np.eye(3)) == 3


def test_pd_threshold_scale():
    m = np.diag([1e3, 1e3])
    assert pd_threshold(m, 1e-8) == pytest.approx(1e-5)
    assert pd_threshold(np.diag([0.1, 0.1]), 1e-8) == pytest.approx(1e-8)
    assert is_positive_definite(np.eye(2))
    assert not is_positive_definite(np.diag([1.0, 1e-12]))


def test_jacobian_fd_linear_map():
    A = np.array([[2.0, 1.0], [0.5, 1.5], [0.0, -1.0]])
    pts = np.array([[0.1, 0.2], [-1.0, 3.0]])
    jac = jacobian_fd(lambda y: y @ A.T, pts)
    assert jac.shape == (2, 3, 2)
    assert np.allclose(jac, A, atol=1e-8)
