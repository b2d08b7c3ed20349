"""Gaussian mixture data: model, sampler, and second-order statistics.

A sample from class ``a`` is ``x = (mu_a + eps) / sqrt(p)`` with ``eps ~ N(0, C_a)``.
Population quantities (``tau0``, ``t``, ``T``) come from the model covariances;
the fluctuation vector ``psi`` comes from the drawn residuals.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CholeskyFailure, ConfigError, DimensionTooSmall, ParseError, RaggedRows

# spawn-key tag so sampling streams never collide with weight streams
_SAMPLE_STREAM = 0x5A


@dataclass
class GmmModel:
    means: np.ndarray              # (K, p), unnormalised
    covs: list                     # K arrays (p, p)
    class_sizes: tuple

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covs = [np.asarray(c, dtype=float) for c in self.covs]
        self.class_sizes = tuple(int(v) for v in self.class_sizes)
        K, p = self.means.shape
        if len(self.covs) != K or len(self.class_sizes) != K:
            raise ConfigError("means, covs and class_sizes must all have K entries")
        for c in self.covs:
            if c.shape != (p, p):
                raise ConfigError(f"covariance shape {c.shape} does not match p={p}")
            if not np.allclose(c, c.T, rtol=0, atol=1e-12 * max(1.0, np.abs(c).max())):
                raise ConfigError("covariances must be symmetric")
        if any(v < 0 for v in self.class_sizes):
            raise ConfigError("class sizes must be nonnegative")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def p(self) -> int:
        return self.means.shape[1]

    @property
    def n(self) -> int:
        return sum(self.class_sizes)

    def with_sizes(self, sizes) -> "GmmModel":
        return GmmModel(self.means, self.covs, tuple(sizes))


@dataclass
class GmmSample:
    X: np.ndarray                  # (p, n)
    labels: np.ndarray             # (n,) class index per column
    residuals: np.ndarray | None   # (p, n) eps, or None for external data


@dataclass
class GmmStats:
    tau0: float
    J: np.ndarray                  # (n, K) one-hot
    psi: np.ndarray                # (n,)
    t: np.ndarray                  # (K,)
    T: np.ndarray                  # (K, K)
    chi: np.ndarray                # (n,)
    plug_in: bool = field(default=False)

    @property
    def n(self) -> int:
        return self.J.shape[0]

    @property
    def K(self) -> int:
        return self.J.shape[1]


def equal_sizes(n: int, K: int) -> tuple:
    base, extra = divmod(n, K)
    return tuple(base + (1 if a < extra else 0) for a in range(K))


def default_model(p: int, K: int = 2, n: int | None = None) -> GmmModel:
    """mu_a = 8 e_{8(a-1)+1}, C_a = (1 + 8(a-1)/sqrt(p)) I_p, equal class sizes."""
    if p < 8 * K:
        raise DimensionTooSmall(f"need p >= 8K = {8 * K}, got p={p}")
    means = np.zeros((K, p))
    for a in range(K):
        means[a, 8 * a] = 8.0
    covs = [(1.0 + 8.0 * a / math.sqrt(p)) * np.eye(p) for a in range(K)]
    sizes = equal_sizes(n if n is not None else round(p / 0.8), K)
    return GmmModel(means, covs, sizes)


def model_from_spec(spec: dict, n: int | None = None) -> GmmModel:
    """JSON model spec.

    ``{"p": 1000, "means": [[...], ...] | [{"index": 0, "value": 8}, ...],
       "covs": [{"scaled_identity": 1.0} | [[...]], ...], "class_sizes": [...]}``
    or ``{"default_mixture": true, "p": ..., "K": 2}``.  ``n`` overrides class sizes
    with an equal split.
    """
    try:
        if spec.get("default_mixture"):
            return default_model(int(spec["p"]), int(spec.get("K", 2)), n)
        p = int(spec["p"])
        means = []
        for m in spec["means"]:
            if isinstance(m, dict):
                v = np.zeros(p)
                v[int(m["index"])] = float(m["value"])
                means.append(v)
            else:
                means.append(np.asarray(m, dtype=float))
        covs = []
        for c in spec["covs"]:
            if isinstance(c, dict):
                covs.append(float(c["scaled_identity"]) * np.eye(p))
            else:
                covs.append(np.asarray(c, dtype=float))
        K = len(means)
        sizes = equal_sizes(n, K) if n is not None else tuple(spec["class_sizes"])
        return GmmModel(np.array(means), covs, sizes)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad GMM spec: {exc}") from exc


def substream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox generator for the substream identified by ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _cholesky(C: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    p = C.shape[0]
    jitter = 1e-12 * max(np.trace(C) / p, 1e-300)
    try:
        return np.linalg.cholesky(C + jitter * np.eye(p))
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure("covariance is numerically indefinite") from exc


def _factor(C: np.ndarray) -> np.ndarray | float:
    """Scalar sqrt for scaled identities, Cholesky factor otherwise."""
    d = np.diag(C)
    if np.all(d == d[0]) and np.count_nonzero(C - np.diag(d)) == 0:
        return math.sqrt(d[0]) if d[0] >= 0 else _cholesky(C)
    return _cholesky(C)


def sample_gmm(model: GmmModel, seed: int) -> GmmSample:
    """Columns grouped by class; column j uses its own substream, so the draw is
    independent of how columns are scheduled."""
    p, n = model.p, model.n
    X = np.empty((p, n))
    eps = np.empty((p, n))
    labels = np.empty(n, dtype=np.int64)
    j = 0
    for a, size in enumerate(model.class_sizes):
        L = _factor(model.covs[a])
        start = j
        for _ in range(size):
            z = substream(seed, _SAMPLE_STREAM, j).standard_normal(p)
            eps[:, j] = L * z if isinstance(L, float) else L @ z
            j += 1
        labels[start:j] = a
        X[:, start:j] = (model.means[a][:, None] + eps[:, start:j]) / math.sqrt(p)
    return GmmSample(X, labels, eps)


def one_hot(labels: np.ndarray, K: int) -> np.ndarray:
    J = np.zeros((labels.size, K))
    J[np.arange(labels.size), labels] = 1.0
    return J


def population_tau0(model: GmmModel) -> float:
    """sqrt(tr C° / p) for the size-weighted average covariance C°."""
    sizes = np.asarray(model.class_sizes, dtype=float)
    C0 = sum(w * C for w, C in zip(sizes / sizes.sum(), model.covs))
    return math.sqrt(np.trace(C0) / model.p)


def compute_stats(model: GmmModel, sample: GmmSample) -> GmmStats:
    p, K = model.p, model.K
    sizes = np.asarray(model.class_sizes, dtype=float)
    weights = sizes / sizes.sum()
    C0 = sum(w * C for w, C in zip(weights, model.covs))
    traces = np.array([np.trace(C) for C in model.covs])
    tau0 = math.sqrt(np.trace(C0) / p)
    t = (traces - np.trace(C0)) / math.sqrt(p)
    T = np.array([[np.sum(model.covs[a] * model.covs[b]) for b in range(K)]
                  for a in range(K)]) / p
    labels = sample.labels
    if sample.residuals is None:
        raise ConfigError("population statistics need residuals; use plug_in_stats")
    psi = np.sum(sample.residuals ** 2, axis=0) / p - traces[labels] / p
    chi = np.sum(sample.X ** 2, axis=0) - tau0 ** 2
    return GmmStats(tau0, one_hot(labels, K), psi, t, T, chi)


def plug_in_stats(X: np.ndarray, labels: np.ndarray | None = None) -> GmmStats:
    """Approximate statistics for external data (no model, no residuals).

    psi_i ~ ||x_i||^2 - class mean of ||x||^2 and tau0^2 ~ grand mean of ||x_i||^2.
    t and T come from the per-class centred sample covariances.
    """
    X = np.asarray(X, dtype=float)
    p, n = X.shape
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    remap = {c: i for i, c in enumerate(classes)}
    lab = np.array([remap[c] for c in labels], dtype=np.int64)
    K = classes.size
    sq = np.sum(X * X, axis=0)
    tau0 = math.sqrt(sq.mean())
    psi = sq - np.array([sq[lab == a].mean() for a in range(K)])[lab]
    # class covariances on the sqrt(p)-scaled data, as in the model
    covs = []
    for a in range(K):
        Y = math.sqrt(p) * X[:, lab == a]
        Y = Y - Y.mean(axis=1, keepdims=True)
        covs.append(Y @ Y.T / max(Y.shape[1] - 1, 1))
    w = np.bincount(lab, minlength=K) / n
    C0 = sum(wa * C for wa, C in zip(w, covs))
    t = np.array([np.trace(C - C0) for C in covs]) / math.sqrt(p)
    T = np.array([[np.sum(covs[a] * covs[b]) for b in range(K)] for a in range(K)]) / p
    chi = sq - tau0 ** 2
    return GmmStats(tau0, one_hot(lab, K), psi, t, T, chi, plug_in=True)


def load_matrix_csv(path, header: bool = False, labels: bool = False):
    """Read a numeric CSV.

    Without ``labels`` the file is the p x n matrix itself (rows = features).
    With ``labels`` each row is one sample followed by an integer class label;
    the result is still returned as (p x n, labels).
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        width = None
        for r, row in enumerate(reader, start=1):
            if header and r == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise RaggedRows(f"expected {width} fields, got {len(row)}", row=r)
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", row=r, column=c) from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"no data rows in {path}")
    M = np.array(rows, dtype=np.float64)
    if not labels:
        return M, None
    if M.shape[1] < 2:
        raise ParseError("labelled CSV needs at least one feature column")
    lab = M[:, -1]
    if np.any(lab != np.round(lab)):
        bad = int(np.argmax(lab != np.round(lab)))
        raise ParseError("label is not an integer", row=bad + 1 + int(header), column=M.shape[1])
    return np.ascontiguousarray(M[:, :-1].T), lab.astype(np.int64)
