"""Truncated conditional Karhunen-Loeve basis of the field model.

The posterior covariance at cell centers is eigendecomposed (dense
symmetric solver; cells are equiareal so no quadrature weighting enters),
the spectrum is truncated to a relative tail-energy tolerance, and the
kept pairs are packed into the map

    y(xi) = mean + Psi @ xi,   Psi[:, j] = sqrt(lambda_j) * phi_j

so a low-dimensional coefficient vector xi parameterizes the field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gpr import GpPosterior


class CkleError(ValueError):
    pass


@dataclass(frozen=True)
class EigenPairs:
    lambdas: np.ndarray   # nonincreasing, nonnegative
    vectors: np.ndarray   # orthonormal columns, vectors[:, j] pairs lambdas[j]


@dataclass(frozen=True)
class CkleBasis:
    mean: np.ndarray
    psi: np.ndarray           # (n, n_y), columns sqrt(lambda_j) phi_j
    lambdas_kept: np.ndarray  # (n_y,)
    rtol_achieved: float

    @property
    def n(self) -> int:
        return self.psi.shape[0]

    @property
    def n_terms(self) -> int:
        return self.psi.shape[1]


def eigendecompose(cov: np.ndarray) -> EigenPairs:
    """Full symmetric eigendecomposition sorted by descending eigenvalue.

    Small negative eigenvalues (roundoff from a PSD matrix) are clamped to
    zero; a clearly indefinite or non-symmetric input is rejected.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise CkleError(f"covariance must be square, got shape {cov.shape}")
    scale = max(float(np.abs(cov).max()), 1.0)
    if np.abs(cov - cov.T).max() > 1e-10 * scale:
        raise CkleError("covariance is not symmetric")
    lam, vec = np.linalg.eigh(cov)
    lam, vec = lam[::-1].copy(), vec[:, ::-1].copy()
    lmax = max(float(lam[0]), 0.0)
    if lam[-1] < -1e-8 * max(lmax, 1.0):
        raise CkleError(f"covariance is indefinite (lambda_min = {lam[-1]:.3e})")
    np.clip(lam, 0.0, None, out=lam)
    return EigenPairs(lambdas=lam, vectors=vec)


def truncate(pairs: EigenPairs, rtol: float | None = None, n_y: int | None = None) -> int:
    """Number of terms keeping the relative tail energy at or below rtol.

    An explicit ``n_y`` overrides the tolerance (capped at the full size).
    """
    lam = pairs.lambdas
    n = lam.size
    if n_y is not None:
        if n_y < 1:
            raise CkleError("n_y must be at least 1")
        return min(int(n_y), n)
    if rtol is None:
        raise CkleError("either rtol or n_y is required")
    if not 0.0 <= rtol < 1.0:
        raise CkleError(f"rtol must be in [0, 1), got {rtol}")
    total = float(lam.sum())
    if total <= 0.0:
        raise CkleError("spectrum is identically zero")
    # tails[k] = sum(lam[k:]), computed as exact partial sums of positives
    tails = np.concatenate((np.cumsum(lam[::-1])[::-1], [0.0]))
    for k in range(1, n + 1):
        if tails[k] <= rtol * total:
            return k
    return n


def tail_ratio(lambdas: np.ndarray, n_y: int) -> float:
    total = float(np.sum(lambdas))
    if total <= 0.0:
        return 0.0
    return float(np.sum(lambdas[n_y:])) / total


def build_basis(post: GpPosterior, rtol: float | None = 1e-8,
                n_y: int | None = None, max_terms: int | None = None) -> CkleBasis:
    """Eigendecompose the posterior covariance and truncate.

    ``n_y`` pins the number of terms; otherwise the smallest count meeting
    ``rtol`` is used, optionally capped by ``max_terms``.
    """
    pairs = eigendecompose(post.cov)
    k = truncate(pairs, rtol=rtol, n_y=n_y)
    if max_terms is not None and n_y is None:
        k = min(k, int(max_terms))
    lam = pairs.lambdas[:k]
    psi = pairs.vectors[:, :k] * np.sqrt(lam)
    return CkleBasis(mean=post.mean.copy(), psi=psi, lambdas_kept=lam.copy(),
                     rtol_achieved=tail_ratio(pairs.lambdas, k))


def expand(basis: CkleBasis, xi: np.ndarray) -> np.ndarray:
    """Field realization mean + Psi @ xi."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (basis.n_terms,):
        raise ValueError(f"xi has shape {xi.shape}, expected ({basis.n_terms},)")
    return basis.mean + basis.psi @ xi


def save_basis(basis: CkleBasis, path) -> None:
    """Text artifact: header "N N_y", mean (N lines), Psi rows (N lines)."""
    with open(path, "w") as fh:
        fh.write(f"{basis.n} {basis.n_terms}\n")
        for v in basis.mean:
            fh.write(f"{v:.17e}\n")
        for row in basis.psi:
            fh.write(" ".join(f"{v:.17e}" for v in row) + "\n")


def load_basis(path) -> CkleBasis:
    """Inverse of save_basis. Spectrum metadata is reconstructed from Psi."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CkleError(f"malformed basis header in {path}")
        n, n_y = int(header[0]), int(header[1])
        mean = np.array([float(fh.readline()) for _ in range(n)])
        psi = np.loadtxt(fh, ndmin=2)
    if psi.shape != (n, n_y):
        raise CkleError(f"basis shape mismatch in {path}: {psi.shape} != {(n, n_y)}")
    lam = np.sum(psi**2, axis=0)  # columns are sqrt(lambda) * unit vectors
    return CkleBasis(mean=mean, psi=psi, lambdas_kept=lam, rtol_achieved=np.nan)
