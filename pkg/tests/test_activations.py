import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deqlab import activations as A
from deqlab.errors import ConfigError

ALL = [A.linear(), A.tanh(), A.relu(), A.swish(), A.leaky_relu(1.0, 0.2), A.hard_tanh(1.5, 0.7)]


def test_pointwise_values():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    assert np.allclose(A.relu()(x), [0, 0, 0, 0.5, 2])
    assert np.allclose(A.leaky_relu(2.0, 0.5)(x), [-1, -0.25, 0, 1, 4])
    assert np.allclose(A.hard_tanh(2.0, 1.0)(x), [-2, -1, 0, 1, 2])
    assert np.allclose(A.swish(1.0)(x), x / (1 + np.exp(-x)))
    assert A.eval(A.tanh(), 0.3) == pytest.approx(math.tanh(0.3), abs=1e-15)


@pytest.mark.parametrize("act", ALL, ids=str)
def test_derivative_matches_finite_difference(act):
    x = np.linspace(-3, 3, 61) + 0.013          # stays off the kinks
    h = 1e-6
    fd = (act(x + h) - act(x - h)) / (2 * h)
    assert np.allclose(act.derivative(x), fd, atol=1e-6)


def test_parameter_bounds():
    with pytest.raises(ConfigError):
        A.hard_tanh(-1.0, 1.0)
    with pytest.raises(ConfigError):
        A.hard_tanh(1.0, -0.1)
    with pytest.raises(ConfigError):
        A.leaky_relu(0.5, 1.0)
    with pytest.raises(ConfigError):
        A.swish(0.0)
    with pytest.raises(ConfigError):
        A.Activation(A.Family.LEAKY_RELU, (1.0,))


def test_spec_round_trip_and_shift_not_configurable():
    act = A.Activation.from_spec({"family": "LeakyReLU", "params": [1.0, 0.3]})
    assert act == A.leaky_relu(1.0, 0.3)
    with pytest.raises(ConfigError):
        A.Activation.from_spec({"family": "ReLU", "shift": 0.1})
    with pytest.raises(ConfigError):
        A.Activation.from_spec({"family": "Sigmoid"})


def test_lipschitz_constants():
    assert A.relu().lipschitz == 1.0
    assert A.leaky_relu(2.0, 0.1).lipschitz == 2.0
    assert A.hard_tanh(1.7, 3.0).lipschitz == 1.7
    # sup of swish'(x) = 1.0998 (attained near x = 2.4)
    assert A.swish().lipschitz == pytest.approx(1.0998, abs=1e-4)


def test_center_at_zeroes_mean():
    from deqlab import gauss_quad
    for act in ALL:
        c = A.center_at(act, 1.3)
        assert abs(gauss_quad.gh_expectation(c, 1.3)) < 1e-12


def test_relu_joint_center_closed_form():
    # for ReLU the shift equals tau*/sqrt(2 pi) at the joint fixed point
    act, tau = A.joint_center(A.relu(), math.sqrt(0.2), 1.0, 1.0)
    assert act.shift == pytest.approx(tau / math.sqrt(2 * math.pi), abs=1e-11)
    # and tau*^2 = sigma_a^2 Var(relu(tau xi)) + 1
    var = tau ** 2 * (0.5 - 1 / (2 * math.pi))
    assert tau ** 2 == pytest.approx(0.2 * var + 1.0, abs=1e-11)


def test_odd_activations_need_no_shift():
    act, _ = A.joint_center(A.tanh(), math.sqrt(0.2), 1.0, 1.1)
    assert act.shift == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.0, 4.0), st.floats(-10, 10))
def test_hard_tanh_is_odd_and_bounded(a, c, x):
    act = A.hard_tanh(a, c)
    assert act(-x) == pytest.approx(-act(x), abs=1e-12)
    assert abs(act(x)) <= a * c + 1e-12
