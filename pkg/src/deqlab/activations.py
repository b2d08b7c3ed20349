"""Activation registry: the six scalar nonlinearities a DEQ or explicit layer may use.

An :class:`Activation` is ``raw(x) - shift``.  The shift is never user supplied;
it comes from :func:`center_activation` (DEQ, joint fixed point with tau*) or
:func:`center_at` (explicit layer, centered at the incoming scale).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit

from . import gauss_quad
from .errors import AssumptionViolated, ConfigError, NoConvergence


class Family(str, enum.Enum):
    LINEAR = "Linear"
    TANH = "Tanh"
    RELU = "ReLU"
    SWISH = "Swish"
    LEAKY_RELU = "LeakyReLU"
    HARD_TANH = "HardTanh"


_DEFAULT_PARAMS = {
    Family.LINEAR: (),
    Family.TANH: (),
    Family.RELU: (),
    Family.SWISH: (1.0,),
    Family.LEAKY_RELU: (1.0, 0.01),
    Family.HARD_TANH: (1.0, 1.0),
}

_ODD = (Family.LINEAR, Family.TANH, Family.HARD_TANH)


@lru_cache(maxsize=None)
def _swish_slope_bound() -> float:
    # sup_y d/dy [y * sigmoid(y)]; independent of beta after substitution y = beta*x
    def neg_slope(y):
        s = expit(y)
        return -(s + y * s * (1.0 - s))

    res = minimize_scalar(neg_slope, bounds=(0.0, 6.0), method="bounded",
                          options={"xatol": 1e-12})
    return float(-res.fun)


@dataclass(frozen=True)
class Activation:
    family: Family
    params: tuple = ()
    shift: float = 0.0
    _breaks: tuple = field(init=False, repr=False, compare=False)
    _splits: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        params = tuple(float(p) for p in self.params) or _DEFAULT_PARAMS[fam]
        expected = len(_DEFAULT_PARAMS[fam])
        if len(params) != expected:
            raise ConfigError(f"{fam.value} takes {expected} parameter(s), got {len(params)}")
        if fam is Family.HARD_TANH:
            a, c = params
            if not (a > 0 and c >= 0):
                raise ConfigError(f"HardTanh needs a > 0, c >= 0 (got a={a}, c={c})")
        elif fam is Family.LEAKY_RELU:
            a, b = params
            if not (a >= b >= 0):
                raise ConfigError(f"LeakyReLU needs a >= b >= 0 (got a={a}, b={b})")
        elif fam is Family.SWISH and not params[0] > 0:
            raise ConfigError("Swish beta must be positive")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "shift", float(self.shift))

        if fam in (Family.RELU, Family.LEAKY_RELU):
            breaks = (0.0,)
        elif fam is Family.HARD_TANH:
            c = params[1]
            breaks = (-c, c) if c > 0 else (0.0,)
        else:
            breaks = ()
        object.__setattr__(self, "_breaks", breaks)
        # panel edges near the complex poles of tanh / sigmoid (1D quadrature only)
        if fam is Family.TANH:
            splits = (-2.0, 0.0, 2.0)
        elif fam is Family.SWISH:
            splits = (-4.0 / params[0], 0.0, 4.0 / params[0])
        else:
            splits = ()
        object.__setattr__(self, "_splits", splits)

    @classmethod
    def from_spec(cls, spec: dict) -> "Activation":
        """Build from the config form ``{"family": ..., "params": [...]}``."""
        if "shift" in spec:
            raise ConfigError("activation shift is computed, not configurable")
        try:
            family = Family(spec["family"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"unknown activation spec {spec!r}") from exc
        return cls(family, tuple(spec.get("params", ())))

    def to_spec(self) -> dict:
        return {"family": self.family.value, "params": list(self.params), "shift": self.shift}

    @property
    def breakpoints(self) -> tuple:
        """Points where raw() or its derivative is not smooth."""
        return self._breaks

    @property
    def panel_splits(self) -> tuple:
        return self._splits

    @property
    def is_odd(self) -> bool:
        return self.family in _ODD

    @property
    def lipschitz(self) -> float:
        fam, p = self.family, self.params
        if fam is Family.SWISH:
            return _swish_slope_bound()
        if fam is Family.LEAKY_RELU:
            return max(abs(p[0]), abs(p[1]))
        if fam is Family.HARD_TANH:
            return p[0]
        return 1.0

    def raw(self, x):
        x = np.asarray(x, dtype=float)
        fam, p = self.family, self.params
        if fam is Family.LINEAR:
            return x.copy()
        if fam is Family.TANH:
            return np.tanh(x)
        if fam is Family.RELU:
            return np.maximum(x, 0.0)
        if fam is Family.SWISH:
            return x * expit(p[0] * x)
        if fam is Family.LEAKY_RELU:
            return np.maximum(p[0] * x, p[1] * x)
        a, c = p
        return a * np.clip(x, -c, c)

    def __call__(self, x):
        return self.raw(x) - self.shift

    def derivative(self, x):
        """Pointwise (almost-everywhere) first derivative."""
        x = np.asarray(x, dtype=float)
        fam, p = self.family, self.params
        if fam is Family.LINEAR:
            return np.ones_like(x)
        if fam is Family.TANH:
            return 1.0 - np.tanh(x) ** 2
        if fam is Family.RELU:
            return (x > 0).astype(float)
        if fam is Family.SWISH:
            s = expit(p[0] * x)
            return s + p[0] * x * s * (1.0 - s)
        if fam is Family.LEAKY_RELU:
            return np.where(x > 0, p[0], p[1])
        a, c = p
        return np.where(np.abs(x) <= c, a, 0.0)

    @property
    def d1(self) -> "Derivative":
        return Derivative(self)

    def with_shift(self, shift: float) -> "Activation":
        return replace(self, shift=float(shift))

    def __str__(self):
        ps = ",".join(f"{v:g}" for v in self.params)
        return f"{self.family.value}({ps})" + (f"-{self.shift:.6g}" if self.shift else "")


@dataclass(frozen=True)
class Derivative:
    """First derivative of an activation as a quadrature-ready callable."""

    act: Activation

    @property
    def breakpoints(self):
        return self.act.breakpoints

    @property
    def panel_splits(self):
        return self.act.panel_splits

    def __call__(self, x):
        return self.act.derivative(x)


def linear() -> Activation:
    return Activation(Family.LINEAR)


def tanh() -> Activation:
    return Activation(Family.TANH)


def relu() -> Activation:
    return Activation(Family.RELU)


def swish(beta: float = 1.0) -> Activation:
    return Activation(Family.SWISH, (beta,))


def leaky_relu(a: float = 1.0, b: float = 0.01) -> Activation:
    return Activation(Family.LEAKY_RELU, (a, b))


def hard_tanh(a: float = 1.0, c: float = 1.0) -> Activation:
    return Activation(Family.HARD_TANH, (a, c))


def eval(act: Activation, x: float) -> float:  # noqa: A001 - mirrors the public op name
    return float(act(x))


def center_at(act: Activation, tau: float, nodes: int = 128) -> Activation:
    """Shift so that E[act(tau*xi)] = 0 for a fixed input scale tau."""
    if act.is_odd:
        return act.with_shift(0.0)
    raw = act.with_shift(0.0)
    return act.with_shift(gauss_quad.gh_expectation(raw, tau, nodes))


def joint_center(act: Activation, sigma_a: float, sigma_b: float, tau0: float,
                 tol: float = 1e-12, max_iter: int = 10_000, nodes: int = 128):
    """Solve the coupled (shift, tau*) fixed point; returns (centered activation, tau*)."""
    raw = act.with_shift(0.0)
    sa2 = sigma_a * sigma_a
    floor = (sigma_b * tau0) ** 2
    tau = math.sqrt(sa2 * gauss_quad.gh_expectation(_square(raw), tau0, nodes) + floor) \
        if sa2 > 0 else abs(sigma_b) * tau0
    shift = 0.0 if act.is_odd else gauss_quad.gh_expectation(raw, tau, nodes)
    for _ in range(max_iter):
        cur = raw.with_shift(shift)
        slope = 0.5 * sa2 * gauss_quad.hermite_moment(_square(cur), 2, tau, nodes)
        if slope >= 1.0:
            raise AssumptionViolated(
                f"tau map is expansive for {act} at tau={tau:.6g} (slope {slope:.4g})")
        new_tau = math.sqrt(sa2 * gauss_quad.gh_expectation(_square(cur), tau, nodes) + floor)
        new_shift = 0.0 if act.is_odd else gauss_quad.gh_expectation(raw, new_tau, nodes)
        done = abs(new_tau - tau) < tol and abs(new_shift - shift) < tol
        tau, shift = new_tau, new_shift
        if done:
            return raw.with_shift(shift), tau
    raise NoConvergence(f"centering of {act} did not converge in {max_iter} alternations")


def center_activation(act: Activation, sigma_a: float, sigma_b: float, tau0: float) -> Activation:
    return joint_center(act, sigma_a, sigma_b, tau0)[0]


def _square(f) -> gauss_quad.Squared:
    return gauss_quad.Squared(f)
