"""Gaussian process model of the log-transmissivity field.

A stationary Matern 5/2 prior is fitted to the direct measurements by
minimizing the negative log marginal likelihood over (sigma, length) with
a deterministic multi-start Nelder-Mead search, then conditioned on those
measurements by the standard kriging identities:

    mean(x) = C(x) C_s^-1 y_s
    cov(x, x') = C(x, x') - C(x) C_s^-1 C(x')

The nugget is a small diagonal variance on the training covariance C_s
only; it stabilizes the Cholesky factorization and plays the role of
measurement noise. Predictive covariance at cell centers therefore drops
to ~nugget at observed cells.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist

from .mesh import Mesh, ObservationSet

_SQRT5 = np.sqrt(5.0)


class GprError(ValueError):
    pass


@dataclass(frozen=True)
class KernelParams:
    sigma: float          # marginal standard deviation
    length: float         # correlation length
    nugget: float = 0.0   # diagonal variance on the training covariance

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise GprError(f"sigma must be positive and finite, got {self.sigma}")
        if not (self.length > 0 and np.isfinite(self.length)):
            raise GprError(f"length must be positive and finite, got {self.length}")
        if not (self.nugget >= 0 and np.isfinite(self.nugget)):
            raise GprError(f"nugget must be nonnegative, got {self.nugget}")


@dataclass(frozen=True)
class GpPosterior:
    """Conditioned field model evaluated at every cell center."""

    mean: np.ndarray      # (n,)
    cov: np.ndarray       # (n, n), symmetric PSD
    params: KernelParams
    train: ObservationSet


def matern52(r, params: KernelParams):
    """Matern 5/2 covariance at separation r; the nugget is added at r == 0."""
    r = np.asarray(r, dtype=np.float64)
    s = _SQRT5 * r / params.length
    k = params.sigma**2 * (1.0 + s + s**2 / 3.0) * np.exp(-s)
    if params.nugget:
        k = k + params.nugget * (r == 0)
    if k.ndim == 0:
        return float(k)
    return k


def _cov_matrix(X1: np.ndarray, X2: np.ndarray, params: KernelParams,
                nugget_diag: bool) -> np.ndarray:
    r = cdist(X1, X2)
    s = _SQRT5 * r / params.length
    k = params.sigma**2 * (1.0 + s + s**2 / 3.0) * np.exp(-s)
    if nugget_diag:
        k[np.diag_indices_from(k)] += params.nugget
    return k


def neg_log_marginal_likelihood(params: KernelParams, X_s: np.ndarray,
                                y_s: np.ndarray) -> float:
    """0.5 y^T C_s^-1 y + 0.5 log det C_s + (n/2) log 2 pi, via Cholesky.

    Returns +inf when C_s is numerically indefinite so that optimizers
    treat such hyperparameters as infeasible.
    """
    X_s = np.atleast_2d(np.asarray(X_s, dtype=np.float64))
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_s.size == 0:
        raise GprError("need at least one training point")
    C_s = _cov_matrix(X_s, X_s, params, nugget_diag=True)
    try:
        cho = cho_factor(C_s, lower=True)
    except LinAlgError:
        return np.inf
    alpha = cho_solve(cho, y_s)
    logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
    return float(0.5 * y_s @ alpha + 0.5 * logdet + 0.5 * y_s.size * np.log(2 * np.pi))


def default_nugget(y_s: np.ndarray, scale: float = 1e-8) -> float:
    """Stabilizing nugget proportional to the sample variance of the data."""
    v = float(np.var(np.asarray(y_s, dtype=np.float64)))
    return scale * v if v > 0 else scale


def fit_hyperparameters(X_s: np.ndarray, y_s: np.ndarray,
                        nugget: float | None = None,
                        grid_size: int = 4,
                        maxiter: int = 200) -> KernelParams:
    """Maximum-likelihood (sigma, length) by multi-start Nelder-Mead.

    Starts on a grid_size x grid_size log-spaced grid bounded by the data
    scales (sample std for sigma, pairwise-distance range for length); the
    nugget is held fixed (default 1e-8 * var(y_s)). Deterministic.

    Degenerate (constant) data floors sigma, pins length to the top of the
    search box, and warns.
    """
    X_s = np.atleast_2d(np.asarray(X_s, dtype=np.float64))
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_s.size < 2:
        raise GprError("need at least two training points to fit hyperparameters")
    d = pdist(X_s)
    d = d[d > 0]
    if d.size == 0:
        raise GprError("training points are not distinct")
    d_min, d_max = float(d.min()), float(d.max())

    std = float(np.std(y_s))
    if nugget is None:
        nugget = default_nugget(y_s)
    if std == 0.0:
        warnings.warn("constant training data; returning floored sigma", RuntimeWarning)
        return KernelParams(sigma=1e-8, length=d_max, nugget=nugget)

    sig_grid = np.geomspace(0.3 * std, 3.0 * std, grid_size)
    len_grid = np.geomspace(max(d_min, d_max / 100.0), d_max, grid_size)

    def objective(logp):
        try:
            p = KernelParams(sigma=np.exp(logp[0]), length=np.exp(logp[1]), nugget=nugget)
        except (GprError, FloatingPointError, OverflowError):
            return np.inf
        return neg_log_marginal_likelihood(p, X_s, y_s)

    best_val, best_logp = np.inf, None
    for s0 in sig_grid:
        for l0 in len_grid:
            x0 = np.array([np.log(s0), np.log(l0)])
            v0 = objective(x0)
            if v0 < best_val:
                best_val, best_logp = v0, x0
            res = minimize(objective, x0, method="Nelder-Mead",
                           options={"maxiter": maxiter, "xatol": 1e-6, "fatol": 1e-9})
            if res.fun < best_val:
                best_val, best_logp = res.fun, res.x
    if best_logp is None or not np.isfinite(best_val):
        raise GprError("marginal-likelihood optimization failed on all starts")
    return KernelParams(sigma=float(np.exp(best_logp[0])),
                        length=float(np.exp(best_logp[1])), nugget=nugget)


def condition(params: KernelParams, train: ObservationSet, mesh: Mesh) -> GpPosterior:
    """Kriging mean and covariance at all cell centers given the training set.

    One Cholesky factorization of C_s serves both the mean and the
    covariance downdate. Raises GprError when C_s is singular (duplicate
    points with zero nugget).
    """
    if len(train) == 0:
        raise GprError("condition requires at least one observation")
    train.check_against(mesh.n)
    X = mesh.centers
    Xs = X[train.indices]
    C_s = _cov_matrix(Xs, Xs, params, nugget_diag=True)
    try:
        cho = cho_factor(C_s, lower=True)
    except LinAlgError as err:
        raise GprError(f"training covariance is singular: {err}") from err
    K_xs = _cov_matrix(X, Xs, params, nugget_diag=False)
    mean = K_xs @ cho_solve(cho, train.values)
    cov = _cov_matrix(X, X, params, nugget_diag=False) - K_xs @ cho_solve(cho, K_xs.T)
    cov = 0.5 * (cov + cov.T)
    return GpPosterior(mean=mean, cov=cov, params=params, train=train)
