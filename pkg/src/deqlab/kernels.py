"""Exact and Monte-Carlo kernel matrices.

Exact kernels run the defining covariance recursions with bivariate Gaussian
quadrature on every upper-triangle pair.  The Monte-Carlo estimator draws a
random DEQ of width m, iterates it to its fixed point and forms Z^T Z.
"""
from __future__ import annotations

import enum
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gauss_quad
from .activations import Activation
from .errors import DimensionMismatch, DivergentNTK, NoConvergence, OutOfMemory, ParseError
from .gmm import substream
from .parallel import resolve_threads, run_blocks, single_threaded_blas
from .scalar_system import DeqConfig, centered, check_assumptions, explicit_coefficients

log = logging.getLogger(__name__)

EXACT_SOFT_LIMIT = 256
MC_BLOCK = 64
PAIR_CHUNK = 2048
DEFAULT_MC_BUDGET = 1 << 30      # bytes allowed for a dense m x m weight matrix

# substream tags
_TAG_A, _TAG_B, _TAG_A_LAZY, _TAG_B_LAZY, _TAG_W = 0xA1, 0xB1, 0xA2, 0xB2, 0xC1


class KernelKind(enum.IntEnum):
    ImplicitCK = 0
    ImplicitNTK = 1
    ExplicitCK = 2
    ExplicitNTK = 3
    ApproxCK = 4
    ApproxNTK = 5


class Method(str, enum.Enum):
    Quadrature = "Quadrature"
    MonteCarlo = "MonteCarlo"
    RMTFormula = "RMTFormula"


@dataclass
class KernelMatrix:
    data: np.ndarray
    kind: KernelKind
    method: Method
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------- quadrature

def _pair_matrix(f, g, Lam: np.ndarray, nodes: int, threads=None) -> np.ndarray:
    n = Lam.shape[0]
    iu, ju = np.triu_indices(n)
    d = np.diag(Lam).copy()
    lij = Lam[iu, ju]
    bound = np.sqrt(d[iu] * d[ju])
    lij = np.clip(lij, -bound, bound)
    starts = range(0, iu.size, PAIR_CHUNK)

    def work(s):
        sl = slice(s, s + PAIR_CHUNK)
        return gauss_quad.bivariate_expectation_pairs(f, g, d[iu[sl]], d[ju[sl]], lij[sl], nodes)

    vals = np.concatenate(run_blocks(work, starts, threads))
    M = np.empty((n, n))
    M[iu, ju] = vals
    M[ju, iu] = vals
    return M


def _gram(X: np.ndarray) -> np.ndarray:
    XtX = X.T @ X
    return np.triu(XtX) + np.triu(XtX, 1).T


def _size_warning(n: int):
    if n > EXACT_SOFT_LIMIT:
        warnings.warn(f"exact quadrature kernel at n={n} is slow; the Monte-Carlo path "
                      "is intended for this size", RuntimeWarning, stacklevel=3)


def _deq_ready(cfg: DeqConfig) -> tuple[DeqConfig, float]:
    report = check_assumptions(cfg)
    if not report.passed:
        from .errors import AssumptionViolated
        raise AssumptionViolated(
            "assumptions fail: " + ", ".join(c.name for c in report.failures()))
    return centered(cfg)


def implicit_ck_exact(cfg: DeqConfig, X: np.ndarray, tol: float = 1e-12,
                      max_layers: int = 500, nodes: int = gauss_quad.DEFAULT_NODES_2D,
                      threads=None):
    """(G*, Gdot*) from the CK recursion started at G^(0) = E[phi^2(tau* xi)] I."""
    ccfg, tau = _deq_ready(cfg)
    phi = ccfg.activation
    sa2, sb2 = cfg.sigma_a2, cfg.sigma_b ** 2
    n = X.shape[1]
    _size_warning(n)
    XtX = _gram(X)
    G = gauss_quad.expectation(gauss_quad.Squared(phi), tau) * np.eye(n)
    deltas = []
    for layer in range(1, max_layers + 1):
        Lam = sa2 * G + sb2 * XtX
        G_new = _pair_matrix(phi, phi, Lam, nodes, threads)
        delta = float(np.max(np.abs(G_new - G)))
        deltas.append(delta)
        G = G_new
        if delta < tol or cfg.sigma_a == 0:
            break
    else:
        raise NoConvergence(f"CK recursion not converged after {max_layers} layers "
                            f"(last delta {deltas[-1]:.3g})")
    Lam = sa2 * G + sb2 * XtX
    Gdot = sa2 * _pair_matrix(phi.d1, phi.d1, Lam, nodes, threads)
    meta = {"n": n, "iterations": layer, "delta": deltas[-1], "tau_star": tau,
            "deltas": deltas}
    return (KernelMatrix(G, KernelKind.ImplicitCK, Method.Quadrature, meta),
            KernelMatrix(Gdot, KernelKind.ImplicitCK, Method.Quadrature,
                         dict(meta, derivative=True)))


def implicit_ntk_from_ck(G: KernelMatrix, Gdot: KernelMatrix) -> KernelMatrix:
    """K* = G* / (1 - Gdot*) elementwise."""
    if G.data.shape != Gdot.data.shape:
        raise DimensionMismatch("G and Gdot differ in shape")
    if np.any(Gdot.data >= 1.0 - 1e-9):
        raise DivergentNTK(f"max Gdot = {Gdot.data.max():.6g} >= 1")
    K = G.data / (1.0 - Gdot.data)
    K = np.triu(K) + np.triu(K, 1).T
    return KernelMatrix(K, KernelKind.ImplicitNTK, G.method, dict(G.meta))


def implicit_ntk_finite_depth(cfg: DeqConfig, X: np.ndarray, depth: int,
                              nodes: int = gauss_quad.DEFAULT_NODES_2D, threads=None
                              ) -> KernelMatrix:
    """Truncated NTK sum: K^(l) = G^(l) + Gdot^(l) * K^(l-1), K^(0) = G^(0)."""
    ccfg, tau = _deq_ready(cfg)
    phi = ccfg.activation
    sa2, sb2 = cfg.sigma_a2, cfg.sigma_b ** 2
    n = X.shape[1]
    _size_warning(n)
    XtX = _gram(X)
    G = gauss_quad.expectation(gauss_quad.Squared(phi), tau) * np.eye(n)
    K = G.copy()
    for _ in range(depth):
        Lam = sa2 * G + sb2 * XtX
        G = _pair_matrix(phi, phi, Lam, nodes, threads)
        Gdot = sa2 * _pair_matrix(phi.d1, phi.d1, Lam, nodes, threads)
        K = G + Gdot * K
    return KernelMatrix(K, KernelKind.ImplicitNTK, Method.Quadrature,
                        {"n": n, "iterations": depth, "tau_star": tau})


def _explicit_layers(layers, X, tau0):
    if tau0 is None:
        tau0 = math.sqrt(float(np.mean(np.sum(X * X, axis=0))))
    return explicit_coefficients(layers, tau0).layers, tau0


def explicit_ck_exact(layers, X: np.ndarray, tau0: float | None = None,
                      nodes: int = gauss_quad.DEFAULT_NODES_2D, threads=None) -> list:
    """Sigma^(1..L) with Sigma^(0) = X^T X.  Layer l is centred at the scale
    tau~_{l-1} of the scalar recursion started from tau0 (default: rms column norm)."""
    used, tau0 = _explicit_layers(layers, X, tau0)
    _size_warning(X.shape[1])
    S = _gram(X)
    out = []
    for l, act in enumerate(used, start=1):
        S = _pair_matrix(act, act, S, nodes, threads)
        out.append(KernelMatrix(S, KernelKind.ExplicitCK, Method.Quadrature,
                                {"n": X.shape[1], "layer": l, "tau0": tau0}))
    return out


def explicit_ntk_exact(layers, X: np.ndarray, tau0: float | None = None,
                       nodes: int = gauss_quad.DEFAULT_NODES_2D, threads=None) -> KernelMatrix:
    """Theta^(l) = Sigma^(l) + Theta^(l-1) * Sigmadot^(l), Theta^(0) = X^T X."""
    used, tau0 = _explicit_layers(layers, X, tau0)
    _size_warning(X.shape[1])
    S = _gram(X)
    Theta = S.copy()
    for act in used:
        Sdot = _pair_matrix(act.d1, act.d1, S, nodes, threads)
        S = _pair_matrix(act, act, S, nodes, threads)
        Theta = S + Theta * Sdot
    return KernelMatrix(Theta, KernelKind.ExplicitNTK, Method.Quadrature,
                        {"n": X.shape[1], "layers": len(used), "tau0": tau0})


# ---------------------------------------------------------------- Monte Carlo

class DenseGaussian:
    """Explicit m_out x m_in standard-normal matrix, generated in fixed column blocks."""

    def __init__(self, m_out: int, m_in: int, seed: int, tag: int, rep: int):
        self.shape = (m_out, m_in)
        self.M = np.empty((m_out, m_in))
        for k, s in enumerate(range(0, m_in, MC_BLOCK)):
            e = min(m_in, s + MC_BLOCK)
            self.M[:, s:e] = substream(seed, tag, rep, k).standard_normal((m_out, e - s))

    def apply(self, Z: np.ndarray, threads=None) -> np.ndarray:
        starts = range(0, Z.shape[1], MC_BLOCK)
        parts = run_blocks(lambda s: self.M @ Z[:, s:s + MC_BLOCK], starts, threads)
        return np.concatenate(parts, axis=1)


class LazyGaussian:
    """Standard-normal matrix sampled only on the subspace it has been applied to.

    For orthonormal Q the product A Q has i.i.d. N(0, 1) entries, so A can be
    revealed one new direction at a time: A Z = W (Q^T Z) + W_new S_k V_k^T,
    where the residual of Z outside span(Q) is factored by SVD.  The law of
    every product equals that of a fully drawn A, at memory cost m_out x rank.
    """

    def __init__(self, m_out: int, m_in: int, seed: int, tag: int, rep: int,
                 rel_drop: float = 1e-13):
        self.shape = (m_out, m_in)
        self.seed, self.tag, self.rep = seed, tag, rep
        self.Q = np.empty((m_in, 0))
        self.W = np.empty((m_out, 0))
        self.rel_drop = rel_drop

    @property
    def rank(self) -> int:
        return self.Q.shape[1]

    def apply(self, Z: np.ndarray, threads=None) -> np.ndarray:
        Q, W = self.Q, self.W
        C = Q.T @ Z
        R = Z - Q @ C
        C2 = Q.T @ R
        R -= Q @ C2
        C += C2
        out = W @ C
        scale = np.linalg.norm(Z)
        if scale == 0:
            return out
        U, s, Vt = np.linalg.svd(R, full_matrices=False)
        keep = s > self.rel_drop * scale
        room = self.shape[1] - self.rank
        k = min(int(np.count_nonzero(keep)), room)
        if k:
            U = U[:, :k]
            U -= Q @ (Q.T @ U)
            U, r = np.linalg.qr(U)
            coef = r @ (s[:k, None] * Vt[:k])
            first = self.rank
            W_new = np.empty((self.shape[0], k))
            for j in range(k):
                W_new[:, j] = substream(self.seed, self.tag, self.rep,
                                        first + j).standard_normal(self.shape[0])
            out += W_new @ coef
            self.Q = np.concatenate([Q, U], axis=1)
            self.W = np.concatenate([W, W_new], axis=1)
        return out


def _weights(m_out, m_in, seed, tag, lazy_tag, rep, lazy):
    if lazy:
        return LazyGaussian(m_out, m_in, seed, lazy_tag, rep)
    return DenseGaussian(m_out, m_in, seed, tag, rep)


def choose_lazy(m: int, mode: str = "auto", budget: int = DEFAULT_MC_BUDGET) -> bool:
    if mode == "dense":
        if 8 * m * m > 4 * budget:
            raise OutOfMemory(f"dense {m}x{m} weights need {8 * m * m / 2**30:.1f} GiB; "
                              "use mode='lazy' or a smaller width")
        return False
    if mode == "lazy":
        return True
    return 8 * m * m > budget


@dataclass
class DeqFixedPoint:
    Z: np.ndarray          # (m, n) features at the fixed point
    pre: np.ndarray        # (m, n) pre-activations sigma_a A z + sigma_b B x
    iterations: int
    delta: float


def deq_fixed_point(phi: Activation, sigma_a: float, sigma_b: float, X: np.ndarray, m: int,
                    seed: int, rep: int = 0, iters: int = 100, tol: float = 1e-10,
                    mode: str = "auto", threads=None) -> DeqFixedPoint:
    """Forward pass of one random DEQ: z = phi(sigma_a A z + sigma_b B x) / sqrt(m), z0 = 0."""
    p, n = X.shape
    lazy = choose_lazy(m, mode)
    with single_threaded_blas():
        B = _weights(m, p, seed, _TAG_B, _TAG_B_LAZY, rep, lazy)
        U = sigma_b * B.apply(X, threads)
        del B
        A = _weights(m, m, seed, _TAG_A, _TAG_A_LAZY, rep, lazy)
        Z = np.zeros((m, n))
        pre = U
        rs = 1.0 / math.sqrt(m)
        delta = math.inf
        it = 0
        for it in range(1, iters + 1):
            pre = U if sigma_a == 0 else sigma_a * A.apply(Z, threads) + U
            Z_new = phi(pre) * rs
            nz = np.linalg.norm(Z_new)
            if not math.isfinite(nz) or nz > 1e12:
                raise NoConvergence("DEQ iterate diverged")
            delta = np.linalg.norm(Z_new - Z) / nz if nz > 0 else 0.0
            Z = Z_new
            if delta < tol or sigma_a == 0:
                break
    return DeqFixedPoint(Z, pre, it, float(delta))


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def implicit_ck_montecarlo(cfg: DeqConfig, X: np.ndarray, m: int = 4096, iters: int = 100,
                           reps: int = 1, seed: int = 0, tol: float = 1e-10,
                           mode: str = "auto", threads=None, with_derivative: bool = False):
    """Wide random-DEQ estimate of G*; with ``with_derivative`` also returns
    Gdot = sigma_a^2 phi'(U)^T phi'(U) / m at the fixed point."""
    if m < 64:
        raise ValueError("width m must be >= 64")
    ccfg, tau = _deq_ready(cfg)
    phi = ccfg.activation
    n = X.shape[1]
    G = np.zeros((n, n))
    Gd = np.zeros((n, n))
    its, deltas = [], []
    for rep in range(reps):
        fp = deq_fixed_point(phi, cfg.sigma_a, cfg.sigma_b, X, m, seed, rep, iters, tol,
                             mode, threads)
        with single_threaded_blas():
            G += _sym(fp.Z.T @ fp.Z)
            if with_derivative:
                D = phi.derivative(fp.pre)
                Gd += cfg.sigma_a2 * _sym(D.T @ D) / m
        its.append(fp.iterations)
        deltas.append(fp.delta)
    meta = {"n": n, "seed": seed, "m": m, "reps": reps, "iterations": its,
            "delta": max(deltas), "tau_star": tau, "lazy": choose_lazy(m, mode)}
    Gk = KernelMatrix(G / reps, KernelKind.ImplicitCK, Method.MonteCarlo, meta)
    if not with_derivative:
        return Gk
    return Gk, KernelMatrix(Gd / reps, KernelKind.ImplicitCK, Method.MonteCarlo,
                            dict(meta, derivative=True))


def implicit_ntk_montecarlo(cfg: DeqConfig, X: np.ndarray, **kw) -> KernelMatrix:
    G, Gd = implicit_ck_montecarlo(cfg, X, with_derivative=True, **kw)
    return implicit_ntk_from_ck(G, Gd)


def explicit_ck_montecarlo(layers, X: np.ndarray, m: int = 4096, seed: int = 0,
                           tau0: float | None = None, share_input_weights: bool = False,
                           mode: str = "auto", threads=None) -> KernelMatrix:
    """Random explicit net z_l = sigma_l(W_l z_{l-1}) / sqrt(m), z_0 = x.

    With ``share_input_weights`` the first layer reuses the input matrix B that a
    DEQ with the same seed draws, so both estimates share their input randomness.
    """
    used, tau0 = _explicit_layers(layers, X, tau0)
    lazy = choose_lazy(m, mode)
    Z = X
    with single_threaded_blas():
        for l, act in enumerate(used):
            if l == 0 and share_input_weights:
                W = _weights(m, Z.shape[0], seed, _TAG_B, _TAG_B_LAZY, 0, lazy)
            else:
                W = _weights(m, Z.shape[0], seed, _TAG_W + l, _TAG_W + 0x40 + l, 0, lazy)
            Z = act(W.apply(Z, threads)) / math.sqrt(m)
        S = _sym(Z.T @ Z)
    return KernelMatrix(S, KernelKind.ExplicitCK, Method.MonteCarlo,
                        {"n": X.shape[1], "seed": seed, "m": m, "layers": len(used),
                         "tau0": tau0})


# ---------------------------------------------------------------- export

_MAGIC = b"DKLK"


def write_binary(K: KernelMatrix, path) -> None:
    n = K.n
    with open(path, "wb") as fh:
        # 16-byte header: magic, n, kind, reserved
        fh.write(_MAGIC + struct.pack("<III", n, int(K.kind), 0))
        fh.write(np.ascontiguousarray(K.data, dtype="<f8").tobytes(order="C"))


def read_binary(path) -> KernelMatrix:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != _MAGIC:
            raise ParseError(f"{path}: not a kernel file")
        n, kind, _ = struct.unpack("<III", head[4:])
        raw = fh.read()
    if len(raw) != 8 * n * n:
        raise ParseError(f"{path}: expected {n * n} values, found {len(raw) // 8}")
    data = np.frombuffer(raw, dtype="<f8").reshape(n, n).astype(np.float64)
    return KernelMatrix(data, KernelKind(kind), Method.Quadrature, {"n": n, "source": str(path)})


def write_csv(K: KernelMatrix, path) -> None:
    np.savetxt(path, K.data, delimiter=",", fmt="%.17g")
