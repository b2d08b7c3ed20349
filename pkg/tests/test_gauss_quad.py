import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from deqlab import activations as A
from deqlab import gauss_quad as Q
from deqlab.errors import InvalidNodes, InvalidOrder, NotPSD

SQ2PI = math.sqrt(2 * math.pi)


def gauss_oracle(f, tau):
    """Adaptive scipy integral of f(tau x) against the standard normal density."""
    val, _ = integrate.quad(lambda x: f(tau * x) * math.exp(-x * x / 2) / SQ2PI,
                            -40, 40, points=[-1, 0, 1], limit=400, epsabs=1e-14, epsrel=1e-13)
    return val


def test_polynomial_exactness():
    for k, ref in [(0, 1), (2, 1), (4, 3), (6, 15), (8, 105)]:
        assert Q.gh_expectation(lambda x: x ** k, 1.0, 16) == pytest.approx(ref, rel=1e-13)
    assert Q.gh_expectation(lambda x: x ** 4, 2.0) == pytest.approx(48.0, rel=1e-13)


def test_node_count_checked():
    with pytest.raises(InvalidNodes):
        Q.gh_expectation(np.cos, 1.0, 4)
    with pytest.raises(InvalidNodes):
        Q.gh_expectation(np.cos, 1.0, 1024)
    with pytest.raises(InvalidOrder):
        Q.hermite_moment(A.tanh(), 5, 1.0)


def test_cosine_against_characteristic_function():
    # E[cos(tau xi)] = exp(-tau^2 / 2)
    for tau in (0.3, 1.0, 2.5):
        assert Q.gh_expectation(np.cos, tau) == pytest.approx(math.exp(-tau * tau / 2), abs=1e-14)


@pytest.mark.parametrize("act", [A.tanh(), A.swish(), A.relu(), A.hard_tanh(1.3, 0.6)], ids=str)
@pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
def test_second_moment_against_adaptive_integration(act, tau):
    ref = gauss_oracle(lambda x: float(act(x)) ** 2, tau)
    assert Q.gh_expectation(Q.Squared(act), tau) == pytest.approx(ref, abs=1e-11)


def test_relu_moments_closed_form():
    tau = 1.7
    mb = Q.moment_bundle(A.relu(), tau)
    assert mb.s2 == pytest.approx(tau * tau / 2, abs=1e-12)
    assert mb.m1 == pytest.approx(0.5, abs=1e-12)
    assert mb.m2 == pytest.approx(1 / (tau * SQ2PI), abs=1e-12)   # density of tau xi at 0
    assert mb.m0 == pytest.approx(tau / SQ2PI, abs=1e-12)


@pytest.mark.parametrize("ab", [(1.0, 0.01), (1.5, 0.4), (0.7, 0.0), (2.0, 2.0)])
@pytest.mark.parametrize("tau", [0.4, 1.1, 3.0])
def test_leaky_relu_closed_forms_match_hermite(ab, tau):
    act = A.leaky_relu(*ab)
    a, b = ab
    for k, ref in [(0, (a - b) * tau / SQ2PI), (1, (a + b) / 2), (2, (a - b) / (tau * SQ2PI))]:
        assert Q.hermite_moment(act, k, tau) == pytest.approx(ref, abs=1e-8)
    cf, mb = Q.closed_form_moments(act, tau), Q.moment_bundle(act, tau)
    for key in ("m0", "m1", "m2", "s2", "d1sq", "f2"):
        assert getattr(cf, key) == pytest.approx(getattr(mb, key), abs=1e-8)


@pytest.mark.parametrize("ac", [(1.0, 1.0), (1.2, 0.8), (0.5, 3.0)])
def test_hard_tanh_closed_forms_match_quadrature(ac):
    act = A.hard_tanh(*ac)
    for tau in (0.3, 1.0, 2.2):
        cf, mb = Q.closed_form_moments(act, tau), Q.moment_bundle(act, tau)
        for key in ("m1", "m3", "s2", "d1sq", "f2", "f4"):
            assert getattr(cf, key) == pytest.approx(getattr(mb, key), abs=1e-9), key


def test_alternative_hard_tanh_expressions_are_not_the_moments():
    # the exponential shortcuts do not reproduce E[sigma^2]; quadrature is authoritative
    a, c, tau = 1.2, 0.8, 1.0
    alt = Q.alt_htanh_moments(a, c, tau)
    true = Q.moment_bundle(A.hard_tanh(a, c), tau)
    assert abs(alt["s2"] - true.s2) > 1e-3
    assert true.m2 == 0.0 and abs(alt["m2"]) > 0.1


@pytest.mark.parametrize("act", [A.linear(), A.tanh(), A.relu(), A.swish(),
                                 A.leaky_relu(1.0, 0.1), A.hard_tanh(1.0, 0.9)], ids=str)
@pytest.mark.parametrize("tau", [0.5, 1.0, 2.0, 4.0])
def test_node_doubling_stability(act, tau):
    lo, hi = Q.moment_bundle(act, tau, 128), Q.moment_bundle(act, tau, 256)
    for key in ("m0", "m1", "m2", "m3", "s2", "d1sq", "f2", "f4"):
        assert abs(getattr(lo, key) - getattr(hi, key)) < 1e-10, key


def test_odd_activation_even_moments_vanish():
    mb = Q.moment_bundle(A.tanh(), 1.3)
    assert mb.m0 == 0.0 and mb.m2 == 0.0


def arccos1(lii, ljj, lij):
    """First-order arc-cosine kernel E[relu(u) relu(v)]."""
    r = math.sqrt(lii * ljj)
    c = max(-1.0, min(1.0, lij / r))
    th = math.acos(c)
    return r / (2 * math.pi) * (math.sin(th) + (math.pi - th) * c)


@pytest.mark.parametrize("lam,tol", [((1.0, 1.0, 0.3), 1e-10), ((2.0, 0.5, -0.7), 1e-10),
                                     ((0.3, 1.7, 0.0), 1e-10),
                                     # nearly collinear: the smoothed kink is narrow
                                     ((1.0, 1.0, 0.999), 1e-8)])
def test_bivariate_relu_against_arccos_kernel(lam, tol):
    got = Q.bivariate_expectation(A.relu(), A.relu(), *lam)
    assert got == pytest.approx(arccos1(*lam), abs=tol)


def test_bivariate_degenerate_and_errors():
    # perfectly correlated: E[relu(u)^2] = lam/2
    assert Q.bivariate_expectation(A.relu(), A.relu(), 2.0, 2.0, 2.0) == pytest.approx(1.0, abs=1e-12)
    # anti-correlated: relu(u) relu(-u) = 0
    assert abs(Q.bivariate_expectation(A.relu(), A.relu(), 1.0, 1.0, -1.0)) < 1e-12
    with pytest.raises(NotPSD):
        Q.bivariate_expectation(A.tanh(), A.tanh(), 1.0, 1.0, 1.5)
    with pytest.raises(NotPSD):
        Q.bivariate_expectation(A.tanh(), A.tanh(), -1.0, 1.0, 0.0)


def test_bivariate_tanh_against_double_integral():
    lii, ljj, lij = 1.3, 0.8, 0.4
    L = np.linalg.cholesky(np.array([[lii, lij], [lij, ljj]]))

    def integrand(y, x):
        u = L[0, 0] * x
        v = L[1, 0] * x + L[1, 1] * y
        return math.tanh(u) * math.tanh(v) * math.exp(-(x * x + y * y) / 2) / (2 * math.pi)

    ref, _ = integrate.dblquad(integrand, -12, 12, -12, 12, epsabs=1e-13, epsrel=1e-12)
    assert Q.bivariate_expectation(A.tanh(), A.tanh(), lii, ljj, lij) == pytest.approx(ref, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.1, 3.0), st.floats(-0.99, 0.99))
def test_bivariate_symmetry_and_cauchy_schwarz(lii, ljj, rho):
    lij = rho * math.sqrt(lii * ljj)
    f = A.center_at(A.swish(), 1.0)
    a = Q.bivariate_expectation(f, f, lii, ljj, lij)
    b = Q.bivariate_expectation(f, f, ljj, lii, lij)
    assert a == pytest.approx(b, abs=1e-11)
    bound = math.sqrt(Q.gh_expectation(Q.Squared(f), math.sqrt(lii))
                      * Q.gh_expectation(Q.Squared(f), math.sqrt(ljj)))
    assert abs(a) <= bound + 1e-10
