"""Spectral norms, relative errors, full spectra and histograms."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NotSymmetric, SizeGuard

DENSE_FALLBACK_MAX = 2048
DENSE_MAX = 4096


@dataclass
class SpectrumReport:
    spectral_norm: float
    top_eigenvalue: float
    bottom_eigenvalue: float
    histogram: tuple | None = None     # (edges, counts)
    iterations_used: int = 0


def _as_array(M):
    return np.asarray(getattr(M, "data", M), dtype=float)


def _check_symmetric(M: np.ndarray):
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotSymmetric(f"matrix of shape {M.shape} is not square")
    fro = np.linalg.norm(M)
    if np.linalg.norm(M - M.T) > 1e-9 * max(fro, 1e-300):
        raise NotSymmetric("matrix is not symmetric")


def _start_vector(n: int) -> np.ndarray:
    # fixed, dense, non-degenerate start: deterministic without an RNG
    v = np.cos(np.arange(1, n + 1) * 0.7071067811865476) + 1.0 / math.sqrt(n)
    return v / np.linalg.norm(v)


def _power(M: np.ndarray, shift: float, tol: float, max_iter: int):
    """Dominant (largest-magnitude) eigenvalue of M - shift I.

    Stops when the Rayleigh quotient moves by < tol relative and the residual
    ||(M - shift) v - lambda v|| is below sqrt(tol) relative.
    """
    v = _start_vector(M.shape[0])
    lam = 0.0
    rtol = math.sqrt(tol)
    for it in range(1, max_iter + 1):
        w = M @ v - shift * v
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, it
        scale = max(abs(new), 1e-300)
        if (it > 1 and abs(new - lam) < tol * scale
                and np.linalg.norm(w - new * v) < rtol * scale):
            return new, it
        v = w / nw
        lam = new
    raise NoConvergence("power iteration did not converge")


def extreme_eigenvalues(M, tol: float = 1e-12, max_iter: int = 10_000):
    """(lambda_min, lambda_max, iterations).

    Power iteration on M finds the dominant eigenvalue; a second run on
    M - lambda_dom I finds the opposite end.  Falls back to a dense solve for
    n <= 2048 when either run stalls (e.g. +-lambda of equal magnitude).
    """
    M = _as_array(M)
    _check_symmetric(M)
    n = M.shape[0]
    if not np.any(M):
        return 0.0, 0.0, 0
    try:
        dom, i1 = _power(M, 0.0, tol, max_iter)
        other, i2 = _power(M, dom, tol, max_iter)
        other += dom
        if abs(other - dom) <= tol * abs(dom):
            other = dom
        return min(dom, other), max(dom, other), i1 + i2
    except NoConvergence:
        if n > DENSE_FALLBACK_MAX:
            raise
        ev = np.linalg.eigvalsh(M)
        return float(ev[0]), float(ev[-1]), 2 * max_iter


def spectral_norm(M, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """max |lambda| of a symmetric matrix: one power iteration for the dominant
    eigenvalue, dense fallback for n <= 2048 if it stalls."""
    M = _as_array(M)
    _check_symmetric(M)
    if not np.any(M):
        return 0.0
    try:
        return abs(_power(M, 0.0, tol, max_iter)[0])
    except NoConvergence:
        if M.shape[0] > DENSE_FALLBACK_MAX:
            raise
        ev = np.linalg.eigvalsh(M)
        return float(max(abs(ev[0]), abs(ev[-1])))


def relative_spectral_error(A, B) -> float:
    A, B = _as_array(A), _as_array(B)
    if A.shape != B.shape:
        raise DimensionMismatch(f"shapes {A.shape} and {B.shape} differ")
    D = A - B
    D = 0.5 * (D + D.T)
    return spectral_norm(D) / spectral_norm(A)


def eigenvalues_dense(M) -> np.ndarray:
    """Full ascending spectrum (LAPACK tridiagonal reduction + QL/QR)."""
    M = _as_array(M)
    if M.shape[0] > DENSE_MAX:
        raise SizeGuard(f"dense spectrum limited to n <= {DENSE_MAX}")
    _check_symmetric(M)
    return np.linalg.eigvalsh(M)


def histogram(eigs, bins: int = 40, drop_below: float | None = None):
    """Equal-width histogram over [min, max]; ``drop_below`` removes |lambda| < threshold."""
    eigs = np.asarray(eigs, dtype=float)
    if drop_below is not None:
        eigs = eigs[np.abs(eigs) >= drop_below]
    if eigs.size == 0:
        return np.linspace(0.0, 1.0, bins + 1), np.zeros(bins, dtype=np.int64)
    lo, hi = float(eigs.min()), float(eigs.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(eigs, bins=bins, range=(lo, hi))
    return edges, counts


def spectrum_report(M, bins: int | None = 40, drop_below: float | None = None
                    ) -> SpectrumReport:
    ev = eigenvalues_dense(M)
    hist = histogram(ev, bins, drop_below) if bins else None
    return SpectrumReport(float(max(abs(ev[0]), abs(ev[-1]))), float(ev[-1]), float(ev[0]),
                          hist, 0)


def write_histogram_csv(edges, counts, path) -> None:
    """Two columns: bin_center, density (counts normalised to unit area)."""
    edges = np.asarray(edges, dtype=float)
    counts = np.asarray(counts, dtype=float)
    width = np.diff(edges)
    total = counts.sum()
    dens = counts / (total * width) if total > 0 else counts
    centers = 0.5 * (edges[:-1] + edges[1:])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "density"])
        for c, d in zip(centers, dens):
            w.writerow([repr(float(c)), repr(float(d))])
