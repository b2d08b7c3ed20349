"""Gaussian expectation engine.

Every scalar moment in the library is an expectation ``E[g(tau*xi)]`` with
``xi ~ N(0, 1)``.  Smooth integrands use Gauss-Hermite rules (probabilists'
weight).  Integrands that carry a ``breakpoints`` attribute (kinks or jumps in
x-space) are integrated piecewise with Gauss-Legendre panels split at the
breakpoints, which keeps the rule exponentially convergent for ReLU-type and
clipped activations.

Weak derivatives go through Gaussian integration by parts:
``E[g^(k)(tau*xi)] = E[He_k(xi) g(tau*xi)] / tau**k``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import hermite_e, legendre
from scipy.special import erf, roots_hermitenorm

from .errors import InvalidNodes, InvalidOrder, NotPSD

log = logging.getLogger(__name__)

DEFAULT_NODES = 128
DEFAULT_NODES_2D = 96
# |xi| beyond this carries < 1e-30 Gaussian mass
TAIL = 12.0
_SQRT_2PI = math.sqrt(2.0 * math.pi)
_CHUNK = 2_000_000


@lru_cache(maxsize=None)
def hermite_rule(nodes: int):
    x, w = roots_hermitenorm(nodes)
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def _legendre_rule(nodes: int):
    x, w = legendre.leggauss(nodes)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _check_nodes(nodes: int) -> None:
    if not (8 <= int(nodes) <= 512):
        raise InvalidNodes(f"nodes must lie in [8, 512], got {nodes}")


def breakpoints_of(f) -> tuple:
    return tuple(getattr(f, "breakpoints", ()) or ())


def splits_of(f) -> tuple:
    """Breakpoints plus optional ``panel_splits``: extra 1D panel edges for smooth
    functions with complex poles near the real axis (tanh, sigmoid)."""
    return tuple(sorted(set(breakpoints_of(f)) | set(getattr(f, "panel_splits", ()) or ())))


class Squared:
    """x -> f(x)**2, keeping f's breakpoints."""

    def __init__(self, f):
        self.f = f
        self.breakpoints = breakpoints_of(f)
        self.panel_splits = tuple(getattr(f, "panel_splits", ()) or ())

    def __call__(self, x):
        v = self.f(x)
        return v * v


def _panel_rule(breaks: np.ndarray, per_panel: int):
    """Nodes/weights (already multiplied by the N(0,1) density) for panels of
    [-TAIL, TAIL] split at the rows of ``breaks``.

    breaks: (R, nb) ascending along axis 1.  Returns (R, (nb+1)*per_panel) arrays.
    """
    gx, gw = _legendre_rule(per_panel)
    R = breaks.shape[0]
    edges = np.concatenate(
        [np.full((R, 1), -TAIL), np.clip(breaks, -TAIL, TAIL), np.full((R, 1), TAIL)], axis=1)
    lo, hi = edges[:, :-1], edges[:, 1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    x = mid[:, :, None] + half[:, :, None] * gx[None, None, :]
    w = half[:, :, None] * gw[None, None, :] * np.exp(-0.5 * x * x) / _SQRT_2PI
    return x.reshape(R, -1), w.reshape(R, -1)


def _rule_1d(breaks_x, tau: float, nodes: int):
    if not breaks_x:
        return hermite_rule(nodes)
    b = np.sort(np.asarray(breaks_x, dtype=float)) / tau
    x, w = _panel_rule(b[None, :], nodes)
    return x[0], w[0]


def expectation(f, tau: float, nodes: int = DEFAULT_NODES) -> float:
    """E[f(tau*xi)] without range checks (internal hot path)."""
    x, w = _rule_1d(splits_of(f), tau, nodes)
    return float(np.dot(w, f(tau * x)))


def gh_expectation(f, tau: float, nodes: int = DEFAULT_NODES, breakpoints=None) -> float:
    """E[f(tau*xi)], xi ~ N(0,1).

    Without breakpoints this is the ``nodes``-point Gauss-Hermite rule, exact for
    polynomials of degree <= 2*nodes - 1.  ``breakpoints`` (or an attribute of
    the same name on ``f``) switches to panel quadrature split at those points.
    """
    _check_nodes(nodes)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    breaks = tuple(breakpoints) if breakpoints is not None else splits_of(f)
    x, w = _rule_1d(breaks, tau, nodes)
    return float(np.dot(w, f(tau * x)))


def hermite_moment(act, k: int, tau: float, nodes: int = DEFAULT_NODES) -> float:
    """k-th Gaussian weak-derivative moment E[act^(k)(tau*xi)], k in 0..4."""
    if not 0 <= int(k) <= 4:
        raise InvalidOrder(f"derivative order must be in 0..4, got {k}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x, w = _rule_1d(splits_of(act), tau, nodes)
    coef = np.zeros(k + 1)
    coef[k] = 1.0
    he = hermite_e.hermeval(x, coef)
    return float(np.dot(w, he * act(tau * x))) / tau ** k


@dataclass(frozen=True)
class MomentBundle:
    m0: float
    m1: float
    m2: float
    m3: float
    s2: float
    d1sq: float
    f2: float
    f4: float
    tau: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("m0", "m1", "m2", "m3", "s2", "d1sq", "f2", "f4", "tau")}


def moment_bundle(act, tau: float, nodes: int = DEFAULT_NODES) -> MomentBundle:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x, w = _rule_1d(splits_of(act), tau, nodes)
    fx = act(tau * x)
    sq = fx * fx
    he = [hermite_e.hermeval(x, [0] * k + [1]) for k in range(5)]
    m = [float(np.dot(w, he[k] * fx)) / tau ** k for k in range(4)]
    d1 = act.derivative(tau * x) if hasattr(act, "derivative") else _fd_derivative(act, tau * x)
    if getattr(act, "is_odd", False):
        m[0] = m[2] = 0.0     # even-order moments of an odd function vanish exactly
    return MomentBundle(
        m0=m[0], m1=m[1], m2=m[2], m3=m[3],
        s2=float(np.dot(w, sq)),
        d1sq=float(np.dot(w, d1 * d1)),
        f2=float(np.dot(w, he[2] * sq)) / tau ** 2,
        f4=float(np.dot(w, he[4] * sq)) / tau ** 4,
        tau=float(tau),
    )


def _fd_derivative(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


# ---------------------------------------------------------------- bivariate

def bivariate_expectation_pairs(f, g, lam_ii, lam_jj, lam_ij, nodes: int = DEFAULT_NODES_2D):
    """Vectorised E[f(u) g(v)] for centred Gaussian (u, v) with covariances
    (lam_ii, lam_jj, lam_ij), one entry per element of the input arrays."""
    lii = np.atleast_1d(np.asarray(lam_ii, dtype=float))
    ljj = np.atleast_1d(np.asarray(lam_jj, dtype=float))
    lij = np.atleast_1d(np.asarray(lam_ij, dtype=float))
    lii, ljj, lij = np.broadcast_arrays(lii, ljj, lij)
    if np.any(lii <= 0) or np.any(ljj <= 0):
        raise NotPSD("diagonal variances must be positive")
    prod = lii * ljj
    if np.any(lij * lij > prod * (1 + 1e-12)):
        raise NotPSD("2x2 covariance is indefinite")
    bound = np.sqrt(prod)
    lij = np.clip(lij, -bound, bound)

    out = np.empty(lii.shape, dtype=float)
    degenerate = np.abs(lij * lij - prod) < 1e-12
    if degenerate.any():
        out[degenerate] = _rank_one(f, g, lii[degenerate], ljj[degenerate],
                                    np.sign(lij[degenerate]), nodes)
    full = ~degenerate
    if full.any():
        out[full] = _full_rank(f, g, lii[full], ljj[full], lij[full], nodes)
    return out


def bivariate_expectation(f, g, lam_ii: float, lam_jj: float, lam_ij: float,
                          nodes: int = DEFAULT_NODES_2D) -> float:
    """E[f(u) g(v)], (u, v) ~ N(0, [[lam_ii, lam_ij], [lam_ij, lam_jj]]).

    Uses u = sqrt(lam_ii) xi_i, v = lam_ij/sqrt(lam_ii) xi_i + sqrt(lam_jj - lam_ij^2/lam_ii) xi_j.
    """
    return float(bivariate_expectation_pairs(f, g, lam_ii, lam_jj, lam_ij, nodes)[0])


def _rank_one(f, g, lii, ljj, sign, nodes):
    su, sv = np.sqrt(lii), np.sqrt(ljj)
    bf, bg = breakpoints_of(f), breakpoints_of(g)
    if not bf and not bg:
        x, w = hermite_rule(nodes)
        u = su[:, None] * x[None, :]
        v = (sign * sv)[:, None] * x[None, :]
        return (f(u) * g(v)) @ w
    cols = [np.asarray(bf)[None, :] / su[:, None]]
    if bg:
        # sign 0 cannot occur here: lam_ij^2 == lam_ii*lam_jj > 0
        cols.append(np.asarray(bg)[None, :] / (sign * sv)[:, None])
    breaks = np.sort(np.concatenate(cols, axis=1), axis=1)
    x, w = _panel_rule(breaks, nodes)
    return np.sum(w * f(su[:, None] * x) * g((sign * sv)[:, None] * x), axis=1)


def _full_rank(f, g, lii, ljj, lij, nodes):
    su = np.sqrt(lii)
    a = lij / su
    b = np.sqrt(np.maximum(ljj - lij * lij / lii, 0.0))
    bf, bg = breakpoints_of(f), breakpoints_of(g)
    per = nodes if not (bf or bg) else max(8, nodes // 2)
    n_pairs = lii.size
    out = np.empty(n_pairs)

    if not bf:
        xo, wo = hermite_rule(nodes)
        q_outer = xo.size
    else:
        q_outer = (len(bf) + 1) * per
    q_inner = nodes if not bg else (len(bg) + 1) * per
    step = max(1, _CHUNK // (q_outer * q_inner))

    for s in range(0, n_pairs, step):
        sl = slice(s, min(n_pairs, s + step))
        P = sl.stop - sl.start
        if bf:
            br = np.sort(np.asarray(bf, dtype=float))[None, :] / su[sl, None]
            xo_p, wo_p = _panel_rule(br, per)
        else:
            xo_p = np.broadcast_to(xo, (P, q_outer))
            wo_p = np.broadcast_to(wo, (P, q_outer))
        u = su[sl, None] * xo_p                          # (P, Qo)
        shift = a[sl, None] * xo_p                       # (P, Qo)
        if bg:
            kinks = np.sort(np.asarray(bg, dtype=float))
            bb = b[sl, None, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                br = (kinks[None, None, :] - shift[:, :, None]) / bb
            br = np.where(np.isfinite(br), br, np.sign(br) * TAIL * 2)
            br = np.nan_to_num(br, nan=TAIL * 2)
            xi, wi = _panel_rule(br.reshape(P * q_outer, -1), per)
            xi = xi.reshape(P, q_outer, -1)
            wi = wi.reshape(P, q_outer, -1)
        else:
            xi_1, wi_1 = hermite_rule(nodes)
            xi = xi_1[None, None, :]
            wi = wi_1[None, None, :]
        v = shift[:, :, None] + b[sl, None, None] * xi
        inner = np.sum(np.broadcast_to(wi, v.shape) * g(v), axis=2)   # (P, Qo)
        out[sl] = np.sum(wo_p * f(u) * inner, axis=1)
    return out


# ---------------------------------------------------------------- closed forms

def _phi(x):
    return math.exp(-0.5 * x * x) / _SQRT_2PI


def _closed_form(act, tau: float):
    """Analytic bundle for piecewise-linear families, or None."""
    fam = getattr(getattr(act, "family", None), "value", None)
    s = float(getattr(act, "shift", 0.0))
    if fam in ("Linear", "ReLU", "LeakyReLU"):
        if fam == "Linear":
            a, b = 1.0, 1.0
        elif fam == "ReLU":
            a, b = 1.0, 0.0
        else:
            a, b = act.params
        d = a - b
        r = 1.0 / _SQRT_2PI
        return MomentBundle(
            m0=d * tau * r - s,
            m1=0.5 * (a + b),
            m2=d * r / tau,
            m3=0.0,
            s2=0.5 * (a * a + b * b) * tau * tau - 2.0 * s * d * tau * r + s * s,
            d1sq=0.5 * (a * a + b * b),
            f2=a * a + b * b - 2.0 * s * d * r / tau,
            f4=2.0 * s * d * r / tau ** 3,
            tau=float(tau),
        )
    if fam == "HardTanh":
        a, c = act.params
        k = c / tau
        P = float(erf(k / math.sqrt(2.0)))
        pk = _phi(k)
        inner2 = P - 2.0 * k * pk          # E[xi^2; |xi| <= k]
        return MomentBundle(
            m0=-s,
            m1=a * P,
            m2=0.0,
            m3=-2.0 * a * k * pk / tau ** 2,
            s2=a * a * (tau * tau * inner2 + c * c * (1.0 - P)) + s * s,
            d1sq=a * a * P,
            f2=2.0 * a * a * inner2,
            f4=-4.0 * a * a * k ** 3 * pk / tau ** 2,
            tau=float(tau),
        )
    return None


def alt_htanh_moments(a: float, c: float, tau: float) -> dict:
    """Alternative exponential expressions for the Hard-Tanh moments.

    Kept for auditing only; several of them do not depend on ``c`` the way the
    true expectations do, so nothing on a computational path uses them.
    """
    e1, e2 = math.exp(-tau * tau), math.exp(-2 * tau * tau)
    return {
        "s2": 0.5 * (c * c + a * a + (c * c - a * a) * e2 - c * c * e1),
        "m1": a * math.exp(-tau * tau / 2),
        "m2": -c * math.exp(-tau * tau / 2),
        "f2": 2 * e2 * (a * a + c * c * (math.exp(tau * tau) - 1)),
    }


def closed_form_moments(act, tau: float):
    """Analytic MomentBundle for Linear/ReLU/LeakyReLU/HardTanh, else None.

    For HardTanh the exponential shortcuts are audited against the
    Hermite route; disagreements above 1e-6 are logged and the analytic values
    (which agree with quadrature) are returned.
    """
    bundle = _closed_form(act, tau)
    if bundle is None:
        return None
    if act.family.value == "HardTanh":
        a, c = act.params
        alt = alt_htanh_moments(a, c, tau)
        quad = moment_bundle(act, tau)
        for key, val in alt.items():
            ref = getattr(quad, key)
            if abs(val - ref) > 1e-6:
                log.info("shortcut H-Tanh form for %s disagrees with quadrature: %.6g vs %.6g "
                         "(a=%g, c=%g, tau=%g)", key, val, ref, a, c, tau)
    return bundle


def fast_moment_bundle(act, tau: float, nodes: int = DEFAULT_NODES) -> MomentBundle:
    """Closed form when one exists, quadrature otherwise."""
    b = _closed_form(act, tau)
    return b if b is not None else moment_bundle(act, tau, nodes)
