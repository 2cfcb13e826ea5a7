"""Two-point flux finite-volume discretization of steady Darcy flow.

Assembles the SPD system A(y) u = b(y) for the log-transmissivity field y
(cell transmissivity T = exp(y), harmonic face averaging), solves the
forward problem through the sparse Cholesky factorization, and provides
the per-cell sensitivities of the discrete residual l = A u - b needed by
the inversion Jacobians.

Dirichlet conditions enter through half-cell (ghost-face)
transmissibilities so A stays exactly symmetric; Neumann faces only load
the right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import sparsechol
from .mesh import DIRICHLET, NEUMANN, Mesh, validate_field


class InvalidParameterError(ValueError):
    """exp(y) overflowed or produced non-finite transmissibilities."""


class SingularSystemError(ValueError):
    """No Dirichlet face anywhere: A(y) is singular for every y."""


@dataclass(frozen=True)
class FvSystem:
    A: sp.csc_matrix  # symmetric positive definite
    b: np.ndarray


def face_transmissibility(y_i: float, y_j: float, face_len: float, dist: float) -> float:
    """(face_len / dist) * harmonic mean of exp(y_i), exp(y_j); positive."""
    ti, tj = np.exp(y_i), np.exp(y_j)
    t = (face_len / dist) * 2.0 * ti * tj / (ti + tj)
    if not np.isfinite(t) or t <= 0.0:
        raise InvalidParameterError(f"non-finite transmissibility for y=({y_i}, {y_j})")
    return float(t)


def _face_trans(mesh: Mesh, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Interior-face transmissibilities plus the exp(y) values at both sides."""
    with np.errstate(over="ignore", invalid="ignore"):
        ti = np.exp(y[mesh.iface_i])
        tj = np.exp(y[mesh.iface_j])
        t = (mesh.iface_len / mesh.iface_dist) * 2.0 * ti * tj / (ti + tj)
    return t, ti, tj


def _dirichlet_trans(mesh: Mesh, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dmask = mesh.bface_kind == DIRICHLET
    cells = mesh.bface_cell[dmask]
    with np.errstate(over="ignore"):
        td = (mesh.bface_len[dmask] / mesh.bface_dhalf[dmask]) * np.exp(y[cells])
    return cells, td


def assemble(mesh: Mesh, y: np.ndarray) -> FvSystem:
    """Build A(y) and b(y) for the mass balance of every active cell.

    Raises SingularSystemError when the mesh carries no Dirichlet face and
    InvalidParameterError when exp(y) is not finite.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (mesh.n,):
        raise ValueError(f"y has shape {y.shape}, expected ({mesh.n},)")
    if not mesh.has_dirichlet():
        raise SingularSystemError("mesh has no Dirichlet face; system is singular")

    t, _, _ = _face_trans(mesh, y)
    dcells, td = _dirichlet_trans(mesh, y)
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(td))):
        raise InvalidParameterError("exp(y) overflow produced non-finite transmissibility")

    i, j = mesh.iface_i, mesh.iface_j
    rows = np.concatenate((i, j, i, j, dcells))
    cols = np.concatenate((i, j, j, i, dcells))
    vals = np.concatenate((t, t, -t, -t, td))
    A = sp.csc_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n, mesh.n)))
    A.sort_indices()

    b = np.zeros(mesh.n)
    dmask = mesh.bface_kind == DIRICHLET
    np.add.at(b, dcells, td * mesh.bface_value[dmask])
    nmask = mesh.bface_kind == NEUMANN
    # outward-positive flux q_N drains the cell
    np.add.at(b, mesh.bface_cell[nmask], -mesh.bface_value[nmask] * mesh.bface_len[nmask])
    return FvSystem(A=A, b=b)


def residual(sys: FvSystem, u: np.ndarray) -> np.ndarray:
    """Discrete mass-balance residual l = A u - b."""
    return sys.A @ np.asarray(u, dtype=np.float64) - sys.b


def solve_forward(sys: FvSystem, factor: sparsechol.CholeskyFactor | None = None,
                  symbolic: sparsechol.CholSymbolic | None = None) -> np.ndarray:
    """Solve A u = b by sparse Cholesky; relative residual is ~1e-15.

    A NotPositiveDefiniteError from the factorization carries the failing
    pivot, i.e. the cell at which positive definiteness broke down.
    """
    if factor is None:
        factor = sparsechol.factorize(sys.A, symbolic=symbolic)
    return sparsechol.full_solve(factor, sys.b)


def residual_sensitivity(mesh: Mesh, y: np.ndarray, u: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Sparse column dA/dy_p @ u - db/dy_p as (indices, values).

    ``u`` is the forward solution at ``y``. Nonzeros are confined to cell p
    and its face neighbors.
    """
    if not 0 <= p < mesh.n:
        raise IndexError(f"cell index {p} out of range [0, {mesh.n})")
    y = validate_field(mesh, y, "y")
    u = validate_field(mesh, u, "u")
    g = {}
    ti = np.exp(y)

    for f in range(mesh.n_interior_faces):
        a, c = int(mesh.iface_i[f]), int(mesh.iface_j[f])
        if p != a and p != c:
            continue
        q = c if p == a else a
        tp, tq = ti[p], ti[q]
        t = (mesh.iface_len[f] / mesh.iface_dist[f]) * 2.0 * tp * tq / (tp + tq)
        dt = t * tq / (tp + tq)  # d t / d y_p
        g[p] = g.get(p, 0.0) + dt * (u[p] - u[q])
        g[q] = g.get(q, 0.0) + dt * (u[q] - u[p])

    for f in range(mesh.n_boundary_faces):
        if mesh.bface_cell[f] != p or mesh.bface_kind[f] != DIRICHLET:
            continue
        td = (mesh.bface_len[f] / mesh.bface_dhalf[f]) * ti[p]  # d td / d y_p = td
        g[p] = g.get(p, 0.0) + td * (u[p] - mesh.bface_value[f])

    idx = np.array(sorted(g), dtype=np.int64)
    return idx, np.array([g[k] for k in idx])


def residual_sensitivity_matrix(mesh: Mesh, y: np.ndarray, u: np.ndarray) -> sp.csc_matrix:
    """All sensitivity columns at once: S[:, p] = dA/dy_p @ u - db/dy_p."""
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    t, ti, tj = _face_trans(mesh, y)
    i, j = mesh.iface_i, mesh.iface_j
    dti = t * tj / (ti + tj)  # d t / d y_i
    dtj = t * ti / (ti + tj)  # d t / d y_j
    du = u[i] - u[j]

    dmask = mesh.bface_kind == DIRICHLET
    dcells, td = _dirichlet_trans(mesh, y)
    dres = td * (u[dcells] - mesh.bface_value[dmask])

    rows = np.concatenate((i, j, i, j, dcells))
    cols = np.concatenate((i, i, j, j, dcells))
    vals = np.concatenate((dti * du, -dti * du, dtj * du, -dtj * du, dres))
    S = sp.csc_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n, mesh.n)))
    S.sort_indices()
    return S
