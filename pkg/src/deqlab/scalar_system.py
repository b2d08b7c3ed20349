"""Scalar fixed points and coefficient systems.

The high-dimensional kernel equivalents depend on (activation, sigma_a, sigma_b)
only through a handful of Gaussian moments evaluated at the limiting scale tau*.
This module computes tau*, the CK four-tuple (gamma*, alpha_1..3, plus alpha_4),
the NTK four-tuple (kappa*, beta_1..3), the explicit-network layer recursion,
and the finite-depth trajectories used as a convergence oracle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gauss_quad
from .activations import Activation, center_at, joint_center
from .errors import AssumptionViolated, ConfigError, NoConvergence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeqConfig:
    sigma_a: float
    sigma_b: float
    activation: Activation
    tau0: float

    def __post_init__(self):
        if not (self.sigma_a >= 0):
            raise ConfigError(f"sigma_a must be >= 0, got {self.sigma_a}")
        if not (self.sigma_b > 0):
            raise ConfigError(f"sigma_b must be > 0, got {self.sigma_b}")
        if not (self.tau0 > 0):
            raise ConfigError(f"tau0 must be > 0, got {self.tau0}")
        object.__setattr__(self, "sigma_a", float(self.sigma_a))
        object.__setattr__(self, "sigma_b", float(self.sigma_b))
        object.__setattr__(self, "tau0", float(self.tau0))

    @classmethod
    def from_variance(cls, sigma_a2: float, sigma_b: float, activation: Activation,
                      tau0: float) -> "DeqConfig":
        if sigma_a2 < 0:
            raise ConfigError("sigma_a^2 must be nonnegative")
        return cls(math.sqrt(sigma_a2), sigma_b, activation, tau0)

    @property
    def sigma_a2(self) -> float:
        return self.sigma_a ** 2

    def with_activation(self, act: Activation) -> "DeqConfig":
        return replace(self, activation=act)


@dataclass(frozen=True)
class CKCoefficients:
    gamma_star: float
    alpha1: float
    alpha2: float
    alpha3: float
    alpha4: float
    tau_star: float
    moments: gauss_quad.MomentBundle = field(repr=False, compare=False, default=None)
    activation: Activation = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {"gamma_star": self.gamma_star, "alpha1": self.alpha1, "alpha2": self.alpha2,
                "alpha3": self.alpha3, "alpha4": self.alpha4, "tau_star": self.tau_star,
                "shift": self.activation.shift if self.activation is not None else None}


@dataclass(frozen=True)
class NTKCoefficients:
    kappa_star: float
    beta1: float
    beta2: float
    beta3: float
    adot0: float
    adot1: float
    beta3_form: str = "standard"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExplicitCoefficients:
    tau: tuple          # tau~_0..tau~_L
    alpha1: tuple       # alpha~_{l,1}, l = 0..L
    alpha2: tuple
    alpha3: tuple
    alpha4: tuple
    layers: tuple       # centred activations actually used

    @property
    def depth(self) -> int:
        return len(self.tau) - 1

    def final(self) -> dict:
        return {"tau": self.tau[-1], "alpha1": self.alpha1[-1], "alpha2": self.alpha2[-1],
                "alpha3": self.alpha3[-1], "alpha4": self.alpha4[-1]}

    def to_dict(self) -> dict:
        return {"tau": list(self.tau), "alpha1": list(self.alpha1), "alpha2": list(self.alpha2),
                "alpha3": list(self.alpha3), "alpha4": list(self.alpha4),
                "layers": [a.to_spec() for a in self.layers]}


@dataclass(frozen=True)
class FiniteDepthTrajectory:
    alpha: np.ndarray   # (depth+1, 4)
    beta: np.ndarray    # (depth+1, 3)
    kappa2: np.ndarray  # (depth+1,)


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    bound: float
    passed: bool

    @property
    def margin(self) -> float:
        return self.bound - self.value


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple
    tau_star: float | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tau_star": self.tau_star,
                "checks": [{"name": c.name, "value": c.value, "bound": c.bound,
                            "passed": c.passed, "margin": c.margin} for c in self.checks]}


def _square(f):
    return gauss_quad.Squared(f)


def solve_tau_star(cfg: DeqConfig, tol: float = 1e-13, max_iter: int = 100_000,
                   nodes: int = gauss_quad.DEFAULT_NODES) -> float:
    """Plain fixed-point iteration of tau -> sqrt(sigma_a^2 E[phi^2(tau xi)] + sigma_b^2 tau0^2)
    for the activation exactly as given (no re-centring)."""
    sa2 = cfg.sigma_a2
    floor = (cfg.sigma_b * cfg.tau0) ** 2
    sq = _square(cfg.activation)
    slope = 0.5 * sa2 * gauss_quad.hermite_moment(sq, 2, cfg.tau0, nodes)
    if slope >= 1.0:
        raise AssumptionViolated(f"tau map is expansive at tau0 (slope {slope:.4g})")
    tau = cfg.tau0
    for _ in range(max_iter):
        new = math.sqrt(sa2 * gauss_quad.expectation(sq, tau, nodes) + floor)
        if abs(new - tau) < tol:
            return new
        if not math.isfinite(new):
            break
        tau = new
    raise NoConvergence(f"tau* iteration did not converge in {max_iter} steps")


def centered(cfg: DeqConfig) -> tuple[DeqConfig, float]:
    """Config with the activation centred at its own tau*, and that tau*."""
    act, tau = joint_center(cfg.activation, cfg.sigma_a, cfg.sigma_b, cfg.tau0)
    return cfg.with_activation(act), tau


def check_assumptions(cfg: DeqConfig) -> AssumptionReport:
    sa2 = cfg.sigma_a2
    checks = []
    L1 = cfg.activation.lipschitz
    bound = 1.0 / (4.0 * L1 * L1)
    checks.append(Check("lipschitz_contraction", sa2, bound, sa2 < bound))

    def tau_slope(act, tau):
        return 0.5 * sa2 * gauss_quad.hermite_moment(_square(act), 2, tau)

    act0 = cfg.activation if cfg.activation.is_odd else center_at(cfg.activation, cfg.tau0)
    v = tau_slope(act0, cfg.tau0)
    checks.append(Check("tau_map_contraction@tau0", v, 1.0, v < 1.0))
    try:
        ccfg, tau = centered(cfg)
    except (AssumptionViolated, NoConvergence) as exc:
        log.info("centring failed: %s", exc)
        checks.append(Check("tau_star_exists", 1.0, 0.0, False))
        return AssumptionReport(tuple(checks))
    mb = gauss_quad.fast_moment_bundle(ccfg.activation, tau)
    v = 0.5 * sa2 * mb.f2
    checks.append(Check("tau_map_contraction@tau*", v, 1.0, v < 1.0))
    v = sa2 * mb.m1 ** 2
    checks.append(Check("ck_linear_contraction", v, 1.0, v < 1.0))
    v = sa2 * mb.d1sq
    checks.append(Check("ntk_diagonal_contraction", v, 1.0, v < 1.0))
    return AssumptionReport(tuple(checks), tau)


def _gate(cfg: DeqConfig) -> tuple[DeqConfig, float]:
    report = check_assumptions(cfg)
    if not report.passed:
        names = ", ".join(c.name for c in report.failures())
        raise AssumptionViolated(f"assumptions fail for {cfg.activation}: {names}")
    return centered(cfg)


def ck_from_moments(mb: gauss_quad.MomentBundle, sigma_a2: float, sigma_b: float) -> dict:
    sb2 = sigma_b * sigma_b
    lin = sigma_a2 * mb.m1 ** 2
    alpha1 = sb2 * mb.m1 ** 2 / (1.0 - lin)
    alpha4 = sb2 / (1.0 - 0.5 * sigma_a2 * mb.f2)
    alpha2 = mb.m2 ** 2 * alpha4 ** 2 / (4.0 * (1.0 - lin))
    alpha3 = mb.m2 ** 2 * (sigma_a2 * alpha1 + sb2) ** 2 / (2.0 * (1.0 - lin))
    return {"gamma_star": math.sqrt(max(mb.s2, 0.0)), "alpha1": alpha1, "alpha2": alpha2,
            "alpha3": alpha3, "alpha4": alpha4}


def ck_coefficients(cfg: DeqConfig) -> CKCoefficients:
    ccfg, tau = _gate(cfg)
    mb = gauss_quad.fast_moment_bundle(ccfg.activation, tau)
    vals = ck_from_moments(mb, cfg.sigma_a2, cfg.sigma_b)
    # tau*^2 = sigma_a^2 gamma*^2 + sigma_b^2 tau0^2, checked undivided so tiny sigma_a is fine
    gap = tau ** 2 - (cfg.sigma_b * cfg.tau0) ** 2 - cfg.sigma_a2 * vals["gamma_star"] ** 2
    if abs(gap) > 1e-9 * max(1.0, tau ** 2):
        raise NoConvergence("gamma*^2 inconsistent with the tau* equation")
    return CKCoefficients(tau_star=tau, moments=mb, activation=ccfg.activation, **vals)


def ntk_coefficients(cfg: DeqConfig, ck: CKCoefficients | None = None,
                     beta3_form: str = "standard") -> NTKCoefficients:
    """beta3_form: "standard" uses adot1 = sigma_a^2 E[phi'']^2 (sigma_a^2 alpha1 + sigma_b^2);
    "alternative" uses beta1 (sigma_a^2 E[phi'']^2 + sigma_b^2) alpha1."""
    if ck is None:
        ck = ck_coefficients(cfg)
    mb = ck.moments
    sa2, sb2 = cfg.sigma_a2, cfg.sigma_b ** 2
    adot0 = sa2 * mb.m1 ** 2
    diag = sa2 * mb.d1sq
    if adot0 >= 1.0 or diag >= 1.0:
        raise AssumptionViolated("NTK recursion does not contract")
    adot1 = sa2 * mb.m2 ** 2 * (sa2 * ck.alpha1 + sb2)
    beta1 = ck.alpha1 / (1.0 - adot0)
    beta2 = ck.alpha2 / (1.0 - adot0)
    if beta3_form == "standard":
        beta3 = (ck.alpha3 + beta1 * adot1) / (1.0 - adot0)
    elif beta3_form == "alternative":
        beta3 = (ck.alpha3 + beta1 * (sa2 * mb.m2 ** 2 + sb2) * ck.alpha1) / (1.0 - adot0)
    else:
        raise ConfigError(f"unknown beta3_form {beta3_form!r}")
    kappa = math.sqrt(mb.s2 / (1.0 - diag))
    return NTKCoefficients(kappa, beta1, beta2, beta3, adot0, adot1, beta3_form)


def explicit_coefficients(layers, tau0: float, nodes: int = gauss_quad.DEFAULT_NODES
                          ) -> ExplicitCoefficients:
    """Layer recursion for a fully connected explicit net; each layer is re-centred
    at the scale of its input."""
    layers = list(layers)
    if not layers:
        raise ConfigError("need at least one layer")
    tau = [float(tau0)]
    a1, a2, a3, a4 = [1.0], [0.0], [0.0], [1.0]
    used = []
    for act in layers:
        t = tau[-1]
        act = center_at(act.with_shift(0.0), t, nodes)
        used.append(act)
        mb = _bundle(act, t, nodes)
        e1, e2 = mb.m1 ** 2, mb.m2 ** 2
        p1, p2, p3, p4 = a1[-1], a2[-1], a3[-1], a4[-1]
        a1.append(e1 * p1)
        a2.append(e1 * p2 + 0.25 * e2 * p4 * p4)
        a3.append(e1 * p3 + 0.5 * e2 * p1 * p1)
        a4.append(0.5 * mb.f2 * p4)
        tau.append(math.sqrt(max(mb.s2, 0.0)))
    return ExplicitCoefficients(tuple(tau), tuple(a1), tuple(a2), tuple(a3), tuple(a4),
                                tuple(used))


def _bundle(act, tau, nodes):
    if nodes == gauss_quad.DEFAULT_NODES:
        return gauss_quad.fast_moment_bundle(act, tau)
    return gauss_quad.moment_bundle(act, tau, nodes)


def finite_depth_coefficients(cfg: DeqConfig, depth: int) -> FiniteDepthTrajectory:
    """Layer-l coefficients of G^(l), K^(l) started from G^(0) = K^(0) = E[phi^2] I,
    so every off-diagonal coefficient starts at zero."""
    if depth < 0:
        raise ConfigError("depth must be >= 0")
    ccfg, tau = _gate(cfg)
    mb = gauss_quad.fast_moment_bundle(ccfg.activation, tau)
    sa2, sb2 = cfg.sigma_a2, cfg.sigma_b ** 2
    e1, e2 = mb.m1 ** 2, mb.m2 ** 2
    adot0 = sa2 * e1
    alpha = np.zeros((depth + 1, 4))
    beta = np.zeros((depth + 1, 3))
    kappa2 = np.zeros(depth + 1)
    kappa2[0] = mb.s2
    for l in range(1, depth + 1):
        p1, p2, p3, p4 = alpha[l - 1]
        alpha[l, 0] = sa2 * e1 * p1 + sb2 * e1
        alpha[l, 1] = sa2 * e1 * p2 + 0.25 * e2 * p4 * p4
        alpha[l, 2] = sa2 * e1 * p3 + 0.5 * e2 * (sa2 * p1 + sb2) ** 2
        alpha[l, 3] = 0.5 * sa2 * mb.f2 * p4 + sb2
        adot1 = sa2 * e2 * (sa2 * p1 + sb2)
        b1, b2, b3 = beta[l - 1]
        beta[l, 0] = alpha[l, 0] + b1 * adot0
        beta[l, 1] = alpha[l, 1] + b2 * adot0
        beta[l, 2] = alpha[l, 2] + b3 * adot0 + b1 * adot1
        kappa2[l] = mb.s2 + sa2 * mb.d1sq * kappa2[l - 1]
    return FiniteDepthTrajectory(alpha, beta, kappa2)
