"""Synthesise a shallow explicit network whose CK equivalent equals a DEQ's.

Depth 1 uses a hard-tanh layer with unknowns (a, c); depth 2 uses two leaky-ReLU
layers with unknowns (a_1, b_1, a_2, b_2), solved as b_l = a_l * s_l with
s_l in [0, 1] so the ordering constraint becomes a box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from . import activations as acts
from .errors import ConfigError, DepthInsufficient, NoConvergence
from .gmm import substream
from .parallel import run_blocks
from .scalar_system import CKCoefficients, explicit_coefficients

RESTARTS = 100
A_RANGE = (1e-2, 1e1)
C_RANGE = (0.0, 5.0)
A_FLOOR = 1e-8
FD_STEP = 1e-6


@dataclass(frozen=True)
class MatchTarget:
    alpha1: float
    alpha2: float
    alpha3: float
    gamma_star: float
    tau0: float

    def __post_init__(self):
        vals = (self.alpha1, self.alpha2, self.alpha3, self.gamma_star, self.tau0)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("match target must be finite")
        if self.alpha1 < 0:
            raise ConfigError("alpha1 must be non-negative")

    @classmethod
    def from_ck(cls, ck: CKCoefficients, tau0: float) -> "MatchTarget":
        return cls(ck.alpha1, ck.alpha2, ck.alpha3, ck.gamma_star, tau0)

    def vector(self) -> np.ndarray:
        return np.array([self.alpha1, self.alpha2, self.alpha3, self.gamma_star])


@dataclass
class MatchResult:
    depth: int
    layers: tuple
    residuals: np.ndarray
    solver_iterations: int
    converged: bool
    params: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "layers": [a.to_spec() for a in self.layers],
            "residuals": [float(r) for r in self.residuals],
            "residual_inf_norm": float(np.max(np.abs(self.residuals))),
            "solver_iterations": int(self.solver_iterations),
            "converged": bool(self.converged),
        }


def decide_depth(target: MatchTarget, tol: float = 1e-8) -> int:
    gap = abs(target.alpha2 - 0.5 * target.alpha3)
    return 1 if gap <= tol * max(1.0, abs(target.alpha3)) else 2


def _bounds(depth: int):
    if depth == 1:                                   # (a, c)
        return np.array([A_FLOOR, 0.0]), np.array([np.inf, np.inf])
    if depth == 2:                                   # (a1, s1, a2, s2)
        return (np.array([A_FLOOR, 0.0, A_FLOOR, 0.0]),
                np.array([np.inf, 1.0, np.inf, 1.0]))
    raise ConfigError(f"depth must be 1 or 2, got {depth}")


def build_layers(params, depth: int) -> tuple:
    """Activations for a parameter vector in solver coordinates."""
    p = np.asarray(params, dtype=float)
    if depth == 1:
        return (acts.hard_tanh(p[0], p[1]),)
    return tuple(acts.leaky_relu(p[i], p[i] * p[i + 1]) for i in (0, 2))


def to_solver_params(layers) -> np.ndarray:
    """Inverse of build_layers: (a, c) or (a1, b1/a1, a2, b2/a2)."""
    out = []
    for act in layers:
        if act.family is acts.Family.HARD_TANH:
            out.extend(act.params)
        elif act.family is acts.Family.LEAKY_RELU:
            a, b = act.params
            out.extend((a, b / a))
        else:
            raise ConfigError(f"cannot match with {act.family.value}")
    return np.array(out)


def match_residuals(params, depth: int, target: MatchTarget) -> np.ndarray:
    ex = explicit_coefficients(build_layers(params, depth), target.tau0)
    L = ex.depth
    return np.array([ex.alpha1[L] - target.alpha1, ex.alpha2[L] - target.alpha2,
                     ex.alpha3[L] - target.alpha3, ex.tau[L] - target.gamma_star])


def jacobian(params, depth: int, target: MatchTarget) -> np.ndarray:
    """Central differences, step FD_STEP * max(1, |x_i|), kept inside the box."""
    x = np.asarray(params, dtype=float)
    lo, hi = _bounds(depth)
    J = np.empty((4, x.size))
    for i in range(x.size):
        h = FD_STEP * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] = min(x[i] + h, hi[i])
        dn[i] = max(x[i] - h, lo[i])
        J[:, i] = (match_residuals(up, depth, target)
                   - match_residuals(dn, depth, target)) / (up[i] - dn[i])
    return J


def _starts(depth: int, seed: int) -> np.ndarray:
    rng = substream(seed, 0x3A7C, depth)
    la, ha = np.log(A_RANGE[0]), np.log(A_RANGE[1])
    if depth == 1:
        a = np.exp(rng.uniform(la, ha, RESTARTS))
        c = rng.uniform(*C_RANGE, RESTARTS)
        return np.stack([a, c], axis=1)
    a = np.exp(rng.uniform(la, ha, (RESTARTS, 2)))
    s = rng.uniform(0.0, 1.0, (RESTARTS, 2))
    return np.stack([a[:, 0], s[:, 0], a[:, 1], s[:, 1]], axis=1)


def _solve_one(x0, depth, target):
    lo, hi = _bounds(depth)
    fun = lambda x: match_residuals(x, depth, target)          # noqa: E731
    jac = lambda x: jacobian(x, depth, target)                 # noqa: E731
    try:
        sol = least_squares(fun, np.clip(x0, lo, hi), jac=jac, bounds=(lo, hi),
                            method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                            max_nfev=200)
    except (ValueError, FloatingPointError, ConfigError):
        return None
    r = fun(sol.x)
    if not np.all(np.isfinite(r)):
        return None
    return sol.x, r, int(sol.nfev)


def match_activation(target: MatchTarget, depth: int | None = None, tol: float = 1e-8,
                     seed: int = 0, threads: int | None = None,
                     depth_tol: float = 1e-8) -> MatchResult:
    """Least-squares fit of the four matching equations over RESTARTS starts.

    The best restart (lowest objective, ties broken by restart index) is
    reported; ``converged`` means its residual infinity-norm is below ``tol``.
    """
    rule = decide_depth(target, depth_tol)
    if depth is None:
        depth = rule
    _bounds(depth)
    if depth == 1 and rule == 2:
        raise DepthInsufficient(
            f"alpha2={target.alpha2:.6g} differs from alpha3/2={target.alpha3 / 2:.6g}; "
            "a single hidden layer cannot match this target")

    starts = _starts(depth, seed)
    results = run_blocks(lambda x0: _solve_one(x0, depth, target), list(starts), threads)
    best, best_obj, evals = None, math.inf, 0
    for res in results:
        if res is None:
            continue
        evals += res[2]
        obj = float(res[1] @ res[1])
        if obj < best_obj:
            best, best_obj = res, obj
    if best is None:
        raise NoConvergence("every restart of the matching solve failed")
    x, r, _ = best
    converged = bool(np.max(np.abs(r)) < tol)
    layers = explicit_coefficients(build_layers(x, depth), target.tau0).layers
    return MatchResult(depth, tuple(layers), r, evals, converged, x)
