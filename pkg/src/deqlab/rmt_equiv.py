"""Closed-form high-dimensional equivalents of CK / NTK matrices.

Every equivalent has the shape

    coeff_linear * X^T X + V core V^T + identity_shift * I,

with V = [J / sqrt(p), psi] (n x (K+1)) and
core = [[c2 t t^T + c3 T, c2 t], [c2 t^T, c2]].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .gmm import GmmStats
from .kernels import KernelKind, KernelMatrix, Method
from .scalar_system import CKCoefficients, ExplicitCoefficients, NTKCoefficients


@dataclass(frozen=True)
class EquivalentSpec:
    coeff_linear: float
    c2: float
    c3: float
    identity_shift: float

    def core(self, stats: GmmStats) -> np.ndarray:
        t = np.asarray(stats.t, dtype=float)
        T = np.asarray(stats.T, dtype=float)
        K = t.size
        C = np.empty((K + 1, K + 1))
        C[:K, :K] = self.c2 * np.outer(t, t) + self.c3 * T
        C[:K, K] = self.c2 * t
        C[K, :K] = self.c2 * t
        C[K, K] = self.c2
        return 0.5 * (C + C.T)


def ck_spec(ck: CKCoefficients, tau0: float) -> EquivalentSpec:
    return EquivalentSpec(ck.alpha1, ck.alpha2, ck.alpha3,
                          ck.gamma_star ** 2 - tau0 ** 2 * ck.alpha1)


def ntk_spec(ntk: NTKCoefficients, tau0: float) -> EquivalentSpec:
    return EquivalentSpec(ntk.beta1, ntk.beta2, ntk.beta3,
                          ntk.kappa_star ** 2 - tau0 ** 2 * ntk.beta1)


def explicit_spec(ex: ExplicitCoefficients, tau0: float, layer: int | None = None
                  ) -> EquivalentSpec:
    l = ex.depth if layer is None else layer
    a1 = ex.alpha1[l]
    return EquivalentSpec(a1, ex.alpha2[l], ex.alpha3[l], ex.tau[l] ** 2 - tau0 ** 2 * a1)


def design_matrix(stats: GmmStats, p: int) -> np.ndarray:
    return np.concatenate([stats.J / math.sqrt(p), np.asarray(stats.psi)[:, None]], axis=1)


def assemble(spec: EquivalentSpec, stats: GmmStats, X: np.ndarray) -> np.ndarray:
    """Dense n x n equivalent.  The V core V^T term is applied as a rank-(K+1)
    update straight into the Gram buffer and the result is mirrored from its
    upper triangle, so it is exactly symmetric."""
    p, n = X.shape
    if stats.n != n:
        raise DimensionMismatch(f"stats describe n={stats.n} samples, X has {n}")
    V = design_matrix(stats, p)
    C = spec.core(stats)
    # core is PSD up to sign pattern; use the symmetric square-root-free form V C V^T
    out = X.T @ X
    out *= spec.coeff_linear
    VC = V @ C
    out += VC @ V.T
    out[np.diag_indices(n)] += spec.identity_shift
    iu = np.triu_indices(n, 1)
    out[(iu[1], iu[0])] = out[iu]
    return out


def approx_implicit_ck(ck: CKCoefficients, stats: GmmStats, X: np.ndarray) -> KernelMatrix:
    spec = ck_spec(ck, stats.tau0)
    return KernelMatrix(assemble(spec, stats, X), KernelKind.ApproxCK, Method.RMTFormula,
                        {"n": X.shape[1], "spec": spec})


def approx_implicit_ntk(ntk: NTKCoefficients, stats: GmmStats, X: np.ndarray) -> KernelMatrix:
    spec = ntk_spec(ntk, stats.tau0)
    return KernelMatrix(assemble(spec, stats, X), KernelKind.ApproxNTK, Method.RMTFormula,
                        {"n": X.shape[1], "spec": spec})


def approx_explicit_ck(ex: ExplicitCoefficients, stats: GmmStats, X: np.ndarray,
                       layer: int | None = None) -> KernelMatrix:
    spec = explicit_spec(ex, stats.tau0, layer)
    return KernelMatrix(assemble(spec, stats, X), KernelKind.ApproxCK, Method.RMTFormula,
                        {"n": X.shape[1], "spec": spec})
