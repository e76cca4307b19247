"""Gaussian densities, maximum-likelihood fitting and EM for Gaussian mixtures.

All density evaluation happens in log space through the Cholesky factor of
the covariance; :func:`density` exponentiates only at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import (
    ConfigError,
    CorruptModelError,
    EmptyComponentError,
    SingularCovarianceError,
    VersionMismatchError,
)

FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)
REG_COVAR_RELATIVE = 1e-6


def _offending_pair(sigma: np.ndarray) -> tuple[int, int]:
    """Best guess at which dimensions make ``sigma`` singular."""
    diag = np.diag(sigma)
    if diag.size == 1 or np.any(diag <= 0):
        i = int(np.argmin(diag))
        return (i, i)
    scale = np.sqrt(diag)
    corr = sigma / np.outer(scale, scale)
    np.fill_diagonal(corr, 0.0)
    i, j = np.unravel_index(int(np.argmax(np.abs(corr))), corr.shape)
    return (int(min(i, j)), int(max(i, j)))


def _cholesky(sigma: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        chol = None
    if chol is None or not np.all(np.diag(chol) > 0) or not np.all(np.isfinite(chol)):
        pair = _offending_pair(sigma)
        raise SingularCovarianceError(
            f"covariance is not positive-definite; dimensions {pair} are degenerate", dims=pair
        )
    return chol


@dataclass(frozen=True, eq=False)
class GaussianModel:
    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray
    log_det: float

    @classmethod
    def from_params(cls, mu, sigma) -> "GaussianModel":
        mu = np.array(mu, dtype=np.float64).reshape(-1)
        sigma = np.array(sigma, dtype=np.float64, ndmin=2)
        if sigma.shape != (mu.size, mu.size):
            raise ConfigError(f"sigma shape {sigma.shape} does not match mu length {mu.size}")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma)):
            raise ConfigError("model parameters must be finite")
        if not np.allclose(sigma, sigma.T, rtol=1e-9, atol=0.0):
            raise ConfigError("sigma must be symmetric")
        chol = _cholesky(sigma)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        for arr in (mu, sigma, chol):
            arr.flags.writeable = False
        return cls(mu, sigma, chol, log_det)

    @property
    def dim(self) -> int:
        return self.mu.size

    def __eq__(self, other):
        if not isinstance(other, GaussianModel):
            return NotImplemented
        return np.array_equal(self.mu, other.mu) and np.array_equal(self.sigma, other.sigma)

    __hash__ = None

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianModel":
        return cls.from_params(d["mu"], d["sigma"])


@dataclass(frozen=True, eq=False)
class GmmModel:
    components: tuple[GaussianModel, ...]
    weights: np.ndarray
    # per-init EM log-likelihood traces (mean per sample); not serialized
    traces: tuple[tuple[float, ...], ...] = field(default=(), compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if not comps:
            raise ConfigError("mixture needs at least one component")
        if w.size != len(comps):
            raise ConfigError("one weight per component required")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must be nonnegative and sum to 1, got {w.tolist()}")
        if len({c.dim for c in comps}) != 1:
            raise ConfigError("mixture components must share a dimension")
        w.flags.writeable = False
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def p(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def __eq__(self, other):
        if not isinstance(other, GmmModel):
            return NotImplemented
        return self.components == other.components and np.array_equal(self.weights, other.weights)

    __hash__ = None

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        return cls(tuple(GaussianModel.from_dict(c) for c in d["components"]), d["weights"])


# --------------------------------------------------------------------------
# evaluation


def _as_rows(model: GaussianModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    rows = x.reshape(1, -1) if single else x
    if rows.shape[1] != model.dim:
        raise ValueError(f"expected vectors of length {model.dim}, got {rows.shape[1]}")
    return rows, single


def mahalanobis_sq(model: GaussianModel, x):
    """Squared Mahalanobis distance of ``x`` (a vector or rows of a matrix) from the mean."""
    rows, single = _as_rows(model, x)
    z = solve_triangular(model.chol, (rows - model.mu).T, lower=True, check_finite=False)
    t2 = np.einsum("ij,ij->j", z, z)
    return float(t2[0]) if single else t2


def log_density(model: GaussianModel, x):
    t2 = mahalanobis_sq(model, x)
    return -0.5 * (model.dim * LOG_2PI + model.log_det + t2)


def density(model: GaussianModel, x):
    out = np.exp(log_density(model, x))
    return float(out) if np.ndim(out) == 0 else out


def peak_density(model: GaussianModel) -> float:
    """Maximum of the density, attained at the mean."""
    return density(model, model.mu)


def log_likelihood(model: GaussianModel, X) -> float:
    return float(np.sum(log_density(model, np.atleast_2d(X))))


def gmm_component_density(gmm: GmmModel, k: int, x):
    """Density of component ``k`` alone; the mixture weight is not applied."""
    if not 0 <= k < gmm.p:
        raise IndexError(f"component {k} out of range for p={gmm.p}")
    return density(gmm.components[k], x)


def gmm_log_likelihood(gmm: GmmModel, X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    lp = np.column_stack([log_density(c, X) for c in gmm.components]) + np.log(gmm.weights)
    return float(np.sum(logsumexp(lp, axis=1)))


# --------------------------------------------------------------------------
# fitting


def default_reg_covar(X: np.ndarray) -> float:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        return 0.0
    return REG_COVAR_RELATIVE * float(np.mean(np.var(X, axis=0)))


def fit_gaussian(X, reg_covar: Optional[float] = None) -> GaussianModel:
    """Maximum-likelihood Gaussian: column means and the 1/N covariance.

    ``reg_covar`` is added to the covariance diagonal; by default it is
    ``1e-6`` times the mean per-column variance.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if n < d + 1:
        pair = _offending_pair(np.cov(X, rowvar=False, bias=True).reshape(d, d)) if n > 1 else (0, 0)
        raise SingularCovarianceError(
            f"need at least {d + 1} rows to fit a {d}-dimensional Gaussian, got {n}; "
            f"dimensions {pair} are degenerate",
            dims=pair,
        )
    if reg_covar is None:
        reg_covar = default_reg_covar(X)
    mu = X.mean(axis=0)
    diff = X - mu
    sigma = diff.T @ diff / n
    sigma = 0.5 * (sigma + sigma.T)
    sigma[np.diag_indices(d)] += reg_covar
    return GaussianModel.from_params(mu, sigma)


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 200
    tol: float = 1e-8
    n_init: int = 3
    reg_covar: Optional[float] = None
    seed: int = 0
    kmeans_iters: int = 10

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ConfigError("tol must be > 0")
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")
        if self.reg_covar is not None and self.reg_covar < 0:
            raise ConfigError("reg_covar must be >= 0")


def _kmeans_pp(X, p, rng, iters):
    n = X.shape[0]
    centers = np.empty((p, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, p):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[k] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dist, axis=1)
        for k in range(p):
            members = X[labels == k]
            if members.shape[0]:
                centers[k] = members.mean(axis=0)
    return centers, labels


def _pooled_cov(X, centers, labels, reg):
    diff = X - centers[labels]
    cov = diff.T @ diff / X.shape[0]
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices(X.shape[1])] += reg
    return cov


def _estep(X, weights, comps):
    lp = np.column_stack([log_density(c, X) for c in comps]) + np.log(weights)
    norm = logsumexp(lp, axis=1)
    return float(np.mean(norm)), np.exp(lp - norm[:, None]), norm


def _mstep(X, resp, reg):
    n, d = X.shape
    nk = resp.sum(axis=0)
    means = (resp.T @ X) / nk[:, None]
    comps = []
    for k in range(resp.shape[1]):
        diff = X - means[k]
        cov = (resp[:, k, None] * diff).T @ diff / nk[k]
        cov = 0.5 * (cov + cov.T)
        cov[np.diag_indices(d)] += reg
        comps.append(GaussianModel.from_params(means[k], cov))
    return nk / n, comps


def _em_run(X, p, cfg, reg, rng):
    n = X.shape[0]
    centers, labels = _kmeans_pp(X, p, rng, cfg.kmeans_iters)
    pooled = _pooled_cov(X, centers, labels, reg)
    counts = np.bincount(labels, minlength=p).astype(np.float64)
    weights = np.maximum(counts, 1.0)
    weights /= weights.sum()
    comps = [GaussianModel.from_params(c, pooled) for c in centers]

    traces = []
    trace = []
    reseeded = False
    min_mass = 10.0 * np.finfo(np.float64).eps * n
    ll, resp, norm = _estep(X, weights, comps)
    trace.append(ll)
    for _ in range(cfg.max_iters):
        nk = resp.sum(axis=0)
        empty = np.flatnonzero(nk < min_mass)
        if empty.size:
            if reseeded:
                raise EmptyComponentError(f"component(s) {empty.tolist()} lost all responsibility twice")
            reseeded = True
            # move each empty component onto the worst-explained point
            order = np.argsort(norm, kind="stable")
            for j, k in enumerate(empty):
                comps[k] = GaussianModel.from_params(X[order[j]], pooled)
            weights = np.where(nk < min_mass, 1.0 / p, nk / n)
            weights /= weights.sum()
            traces.append(tuple(trace))
            trace = []
            ll, resp, norm = _estep(X, weights, comps)
            trace.append(ll)
            continue
        weights, comps = _mstep(X, resp, reg)
        prev = ll
        ll, resp, norm = _estep(X, weights, comps)
        trace.append(ll)
        if abs(ll - prev) <= cfg.tol * max(abs(prev), 1e-300):
            break
    traces.append(tuple(trace))
    return ll, weights, comps, traces


def fit_gmm(X, p: int, cfg: EmConfig = EmConfig()) -> GmmModel:
    """Fit a ``p``-component full-covariance mixture by EM.

    Each of ``cfg.n_init`` runs starts from k-means++ seeding refined by a
    few Lloyd iterations, with every covariance set to the pooled
    within-cluster covariance. The run with the highest final
    log-likelihood wins. Per-iteration mean log-likelihoods of every run
    are kept on ``GmmModel.traces``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if p < 1:
        raise ConfigError("p must be >= 1")
    if n < p * (d + 1):
        raise SingularCovarianceError(
            f"need at least p*(d+1) = {p * (d + 1)} rows for {p} components in {d} dims, got {n}"
        )
    reg = default_reg_covar(X) if cfg.reg_covar is None else float(cfg.reg_covar)
    best = None
    all_traces = []
    for run in range(cfg.n_init):
        rng = np.random.default_rng([cfg.seed, run])
        ll, weights, comps, traces = _em_run(X, p, cfg, reg, rng)
        all_traces.extend(traces)
        if best is None or ll > best[0]:
            best = (ll, weights, comps)
    _, weights, comps = best
    return GmmModel(tuple(comps), weights, traces=tuple(all_traces))


# --------------------------------------------------------------------------
# serialization


def model_to_dict(model) -> dict:
    if isinstance(model, GaussianModel):
        return {"format_version": FORMAT_VERSION, "kind": "gaussian", **model.to_dict()}
    if isinstance(model, GmmModel):
        return {"format_version": FORMAT_VERSION, "kind": "gmm", **model.to_dict()}
    raise TypeError(f"not a density model: {type(model).__name__}")


def model_from_dict(d: dict):
    if not isinstance(d, dict) or "format_version" not in d:
        raise CorruptModelError("density model JSON lacks format_version")
    if d["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"density model format_version {d['format_version']!r} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        kind = d["kind"]
        if kind == "gaussian":
            return GaussianModel.from_dict(d)
        if kind == "gmm":
            return GmmModel.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModelError(f"malformed density model: {exc}") from None
    raise CorruptModelError(f"unknown density model kind {kind!r}")
