"""Sparse Cholesky factorization with elimination-tree bookkeeping.

Implements an up-looking LL^T factorization for SPD matrices in CSC form,
keeping the elimination tree and the full symbolic pattern of L. The tree
is what makes unit-vector forward solves cheap: the nonzero support of
L^-1 e_x is exactly the tree path from x to its root, so a solve only has
to touch the columns on that path. ``solve_columns`` uses this to build
A^-1 H^T for a handful of unit columns at a fraction of the cost of full
solves.

Numeric kernels are numba-compiled; symbolic structure (tree, column
pointers) is computed once per sparsity pattern and can be reused across
refactorizations of matrices with the same pattern.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from numba import njit


class NotPositiveDefiniteError(ValueError):
    def __init__(self, pivot: int):
        super().__init__(f"non-positive pivot at column {pivot}; matrix is not SPD")
        self.pivot = pivot


@njit(cache=True)
def _etree(n, Ap, Ai):
    # Elimination tree of a symmetric CSC matrix (upper entries drive it).
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k  # path compression
                if nxt == -1:
                    parent[i] = k
                i = nxt
    return parent


@njit(cache=True)
def _ereach(Ap, Ai, k, parent, stamp, mark, s):
    # Pattern of L[k, 0:k]: union of tree paths from the upper entries of
    # column k up to node k. Returns top; s[top:n] holds the pattern in an
    # order where every node precedes its ancestors.
    n = mark.shape[0]
    top = n
    mark[k] = stamp
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i >= k:
            continue
        ln = 0
        while i != -1 and mark[i] != stamp:
            s[ln] = i
            ln += 1
            mark[i] = stamp
            i = parent[i]
        while ln > 0:
            top -= 1
            ln -= 1
            s[top] = s[ln]
    return top


@njit(cache=True)
def _column_counts(n, Ap, Ai, parent):
    counts = np.ones(n, dtype=np.int64)  # diagonal entries
    mark = np.zeros(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, k + 1, mark, s)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@njit(cache=True)
def _chol_numeric(n, Ap, Ai, Ax, parent, Lp, Li, Lx):
    # Up-looking factorization: compute row k of L against finished columns.
    # Column layout of L: diagonal first, sub-diagonal rows appended in
    # increasing order as later rows are processed.
    head = Lp[:n].copy()
    mark = np.zeros(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    x = np.zeros(n, dtype=np.float64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, k + 1, mark, s)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            if Ai[p] <= k:
                x[Ai[p]] = Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, head[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            q = head[i]
            Li[q] = k
            Lx[q] = lki
            head[i] += 1
        if d <= 0.0:
            return k
        q = head[k]
        Li[q] = k
        Lx[q] = np.sqrt(d)
        head[k] += 1
    return -1


@njit(cache=True)
def _lsolve(Lp, Li, Lx, x):
    # x <- L \ x (dense rhs). Zero entries are skipped, so unit-vector
    # solves perform exactly the closure-restricted arithmetic.
    n = Lp.shape[0] - 1
    for j in range(n):
        xj = x[j]
        if xj != 0.0:
            xj /= Lx[Lp[j]]
            x[j] = xj
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[Li[p]] -= Lx[p] * xj


@njit(cache=True)
def _ltsolve(Lp, Li, Lx, x):
    # x <- L^T \ x (dense rhs).
    n = Lp.shape[0] - 1
    for j in range(n - 1, -1, -1):
        acc = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            acc -= Lx[p] * x[Li[p]]
        x[j] = acc / Lx[Lp[j]]


@njit(cache=True)
def _partial_lsolve(Lp, Li, Lx, closure, x):
    # Forward solve restricted to the closure columns; all sub-diagonal
    # rows of those columns lie inside the closure, so nothing is missed.
    for t in range(closure.shape[0]):
        j = closure[t]
        xj = x[j]
        if xj != 0.0:
            xj /= Lx[Lp[j]]
            x[j] = xj
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[Li[p]] -= Lx[p] * xj


@dataclass(frozen=True)
class CholSymbolic:
    """Pattern-only analysis, reusable across same-pattern refactorizations."""

    n: int
    perm: np.ndarray | None  # A[perm][:, perm] = L L^T; None = natural order
    parent: np.ndarray       # elimination tree, -1 at roots
    Lp: np.ndarray           # column pointers of L


@dataclass(frozen=True)
class CholeskyFactor:
    L: sp.csc_matrix
    perm: np.ndarray | None
    etree: np.ndarray
    symbolic: CholSymbolic

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @cached_property
    def _arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # int64 views for the numba kernels (scipy stores int32 indices)
        return (self.L.indptr.astype(np.int64), self.L.indices.astype(np.int64),
                self.L.data)

    def _inverse_perm(self) -> np.ndarray | None:
        if self.perm is None:
            return None
        pinv = np.empty_like(self.perm)
        pinv[self.perm] = np.arange(self.perm.size)
        return pinv


def _as_sorted_csc(A) -> sp.csc_matrix:
    C = sp.csc_matrix(A)
    C.sum_duplicates()
    C.sort_indices()
    return C


def _permute(A: sp.csc_matrix, perm: np.ndarray) -> sp.csc_matrix:
    return _as_sorted_csc(A[perm][:, perm])


def symbolic_factor(A, perm: np.ndarray | None = None) -> CholSymbolic:
    """Elimination tree and column pointers of L for A's pattern."""
    C = _as_sorted_csc(A)
    n = C.shape[0]
    if C.shape[0] != C.shape[1]:
        raise ValueError("matrix must be square")
    if perm is not None:
        perm = np.asarray(perm, dtype=np.int64)
        if np.sort(perm).tolist() != list(range(n)):
            raise ValueError("perm is not a permutation of 0..n-1")
        C = _permute(C, perm)
    Ap = C.indptr.astype(np.int64)
    Ai = C.indices.astype(np.int64)
    parent = _etree(n, Ap, Ai)
    counts = _column_counts(n, Ap, Ai, parent)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    return CholSymbolic(n=n, perm=perm, parent=parent, Lp=Lp)


def factorize(A, perm: np.ndarray | None = None,
              symbolic: CholSymbolic | None = None) -> CholeskyFactor:
    """Numeric LL^T factorization of an SPD matrix.

    ``perm`` is an optional fill-reducing permutation (natural order by
    default). Pass a previously computed ``symbolic`` to skip the pattern
    analysis when refactorizing a matrix with the identical pattern.
    Raises NotPositiveDefiniteError with the failing pivot index otherwise.
    """
    C = _as_sorted_csc(A)
    n = C.shape[0]
    if symbolic is None:
        symbolic = symbolic_factor(C, perm)
    elif perm is not None and (symbolic.perm is None or not np.array_equal(perm, symbolic.perm)):
        raise ValueError("perm disagrees with the symbolic analysis")
    if symbolic.perm is not None:
        C = _permute(C, symbolic.perm)
    Ap = C.indptr.astype(np.int64)
    Ai = C.indices.astype(np.int64)
    Ax = np.asarray(C.data, dtype=np.float64)
    nnz = int(symbolic.Lp[n])
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    bad = _chol_numeric(n, Ap, Ai, Ax, symbolic.parent, symbolic.Lp, Li, Lx)
    if bad >= 0:
        raise NotPositiveDefiniteError(int(bad))
    L = sp.csc_matrix((Lx, Li, symbolic.Lp.copy()), shape=(n, n))
    return CholeskyFactor(L=L, perm=symbolic.perm, etree=symbolic.parent, symbolic=symbolic)


def find_sparsity(factor: CholeskyFactor, x: int) -> np.ndarray:
    """Support of L^-1 e_x: walk from x to the root of the elimination tree.

    Each hop goes to the first sub-diagonal nonzero of the current column,
    which is by construction the tree parent. Indices are in permuted
    coordinates and returned ascending.
    """
    n = factor.n
    if not 0 <= x < n:
        raise IndexError(f"index {x} out of range [0, {n})")
    Lp, Li = factor.L.indptr, factor.L.indices
    path = [x]
    j = x
    while Lp[j] + 1 < Lp[j + 1]:
        j = int(Li[Lp[j] + 1])  # first entry below the diagonal
        path.append(j)
    return np.array(path, dtype=np.int64)


def partial_forward_solve(factor: CholeskyFactor, x: int,
                          closure: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Solve L z = e_x touching only the closure columns.

    Returns (support, values); the support is the closure of x, which may
    be passed in precomputed since it depends on the pattern only.
    """
    if closure is None:
        closure = find_sparsity(factor, x)
    Lp, Li, Lx = factor._arrays
    w = np.zeros(factor.n)
    w[x] = 1.0
    _partial_lsolve(Lp, Li, Lx, closure, w)
    return closure, w[closure]


def full_solve(factor: CholeskyFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = rhs by forward + backward substitution (permutation-aware)."""
    b = np.asarray(rhs, dtype=np.float64)
    if b.shape != (factor.n,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({factor.n},)")
    x = b[factor.perm].copy() if factor.perm is not None else b.copy()
    Lp, Li, Lx = factor._arrays
    _lsolve(Lp, Li, Lx, x)
    _ltsolve(Lp, Li, Lx, x)
    if factor.perm is not None:
        out = np.empty_like(x)
        out[factor.perm] = x
        return out
    return x


def solve_columns(factor: CholeskyFactor, obs_indices: np.ndarray,
                  closures: list[np.ndarray] | None = None) -> np.ndarray:
    """W = A^-1 H^T for the unit columns selected by ``obs_indices``.

    Forward solves are closure-restricted; the backward solves are dense.
    ``closures`` may carry the per-column supports (in permuted
    coordinates) precomputed by ``compute_closures`` since the pattern,
    and hence every closure, is fixed for a given mesh.
    """
    idx = np.asarray(obs_indices, dtype=np.int64)
    n = factor.n
    pinv = factor._inverse_perm()
    Lp, Li, Lx = factor._arrays
    W = np.zeros((n, idx.size))
    for k, i in enumerate(idx):
        xp = int(pinv[i]) if pinv is not None else int(i)
        closure = closures[k] if closures is not None else find_sparsity(factor, xp)
        col = np.zeros(n)
        col[xp] = 1.0
        _partial_lsolve(Lp, Li, Lx, closure, col)
        _ltsolve(Lp, Li, Lx, col)
        if pinv is not None:
            W[factor.perm, k] = col
        else:
            W[:, k] = col
    return W


def compute_closures(factor: CholeskyFactor, obs_indices: np.ndarray) -> list[np.ndarray]:
    """Closure of each observation column, in permuted coordinates."""
    pinv = factor._inverse_perm()
    out = []
    for i in np.asarray(obs_indices, dtype=np.int64):
        xp = int(pinv[i]) if pinv is not None else int(i)
        out.append(find_sparsity(factor, xp))
    return out
