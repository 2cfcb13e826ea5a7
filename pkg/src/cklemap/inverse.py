"""MAP and CKLE-parameterized estimators for the log-transmissivity field.

Both methods minimize the stacked residual

    f = [ u_s - H_u u ;  y_s - H_y y ;  sqrt(gamma) D y ]

over either the full grid field y (MAP) or the basis coefficients xi with
y = mean + Psi xi (CKLE path), using a trust-region Gauss-Newton solver.
The costly Jacobian block is the head-observation one; it is formed from
the per-cell residual sensitivities S and W = A^-1 H_u^T, where W comes
either from full triangular solves or from the closure-restricted forward
solves (the accelerated path). The observation and smoothness blocks are
constant and computed once per problem.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from . import ckle, fvtpfa, sparsechol
from .mesh import Mesh, ObservationSet, gradient_operator, observation_matrix

STATUS_FTOL = "converged-ftol"
STATUS_GTOL = "converged-gtol"
STATUS_XTOL = "converged-xtol"
STATUS_MAXITER = "max-iter"
STATUS_TIMEOUT = "timeout"

_METHODS = ("map", "cklemap", "cklemap-accel")


@dataclass(frozen=True)
class InverseConfig:
    gamma: float = 1e-6
    ftol: float = 1e-8
    gtol: float = 1e-8
    xtol: float = 1e-8
    max_iterations: int = 500
    method: str = "cklemap"
    initial_guess: str = "gp-mean"   # "gp-mean" | "zero"
    weight_u: float = 1.0            # misfit weights; unit by default
    weight_y: float = 1.0
    time_budget_s: float | None = None
    estimate_boundary_flux: bool = False  # reserved, not implemented

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        for name in ("ftol", "gtol", "xtol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.initial_guess not in ("gp-mean", "zero"):
            raise ValueError(f"unknown initial_guess policy {self.initial_guess!r}")
        if self.estimate_boundary_flux:
            raise NotImplementedError("boundary-flux estimation is not implemented")


@dataclass
class LsqResult:
    x_hat: np.ndarray
    cost_history: list[float]
    iterations: int
    status: str
    wall_time: float


@dataclass
class InversionReport:
    y_hat: np.ndarray
    u_hat: np.ndarray
    rel_l2_error: float | None
    abs_linf_error: float | None
    lsq: LsqResult
    method: str
    gamma: float
    n_unknowns: int


class BlockJacobian:
    """Stacked Jacobian [top; tail] whose tail block is iteration-constant.

    The normal-equation pieces J^T J and J^T f are assembled from the
    blocks so that the fixed tail Gram matrix is reused, which is what
    keeps the grid-unknown method affordable: its tail is a large sparse
    matrix whose dense Gram would otherwise be recomputed every iteration.
    """

    def __init__(self, top: np.ndarray, tail, tail_gram: np.ndarray):
        self.top = top
        self.tail = tail
        self.tail_gram = tail_gram
        self.shape = (top.shape[0] + tail.shape[0], top.shape[1])

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return np.concatenate((self.top @ v, self.tail @ v))

    def rmatvec(self, f: np.ndarray) -> np.ndarray:
        m = self.top.shape[0]
        return self.top.T @ f[:m] + self.tail.T @ f[m:]

    def gram(self) -> np.ndarray:
        return self.tail_gram + self.top.T @ self.top

    def toarray(self) -> np.ndarray:
        tail = self.tail.toarray() if sp.issparse(self.tail) else self.tail
        return np.vstack((self.top, tail))


def _jac_gram(J):
    return J.gram() if hasattr(J, "gram") else J.T @ J


def _jac_rmatvec(J, f):
    return J.rmatvec(f) if hasattr(J, "rmatvec") else J.T @ f


class _ForwardState:
    """Assembly + factorization shared by residual and Jacobian at one point."""

    __slots__ = ("x", "y", "u", "factor")

    def __init__(self, x, y, u, factor):
        self.x = x
        self.y = y
        self.u = u
        self.factor = factor


class _DarcyLsqProblem:
    """Common machinery for both parameterizations of the misfit problem."""

    def __init__(self, mesh: Mesh, obs_u: ObservationSet, obs_y: ObservationSet,
                 gamma: float, weight_u: float = 1.0, weight_y: float = 1.0,
                 accelerated: bool = False):
        obs_u.check_against(mesh.n)
        obs_y.check_against(mesh.n)
        self.mesh = mesh
        self.obs_u = obs_u
        self.obs_y = obs_y
        self.gamma = gamma
        self.weight_u = weight_u
        self.weight_y = weight_y
        self.accelerated = accelerated
        self.D = gradient_operator(mesh)
        self._symbolic: sparsechol.CholSymbolic | None = None
        self._closures: list[np.ndarray] | None = None
        self._state: _ForwardState | None = None
        self.n_residuals = (len(obs_u) + len(obs_y)
                            + (self.D.shape[0] if gamma > 0 else 0))

    # -- forward model ----------------------------------------------------
    def _field(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _solve_state(self, x: np.ndarray) -> _ForwardState:
        if self._state is not None and np.array_equal(self._state.x, x):
            return self._state
        y = self._field(x)
        system = fvtpfa.assemble(self.mesh, y)
        if self._symbolic is None:
            self._symbolic = sparsechol.symbolic_factor(system.A)
        factor = sparsechol.factorize(system.A, symbolic=self._symbolic)
        u = sparsechol.full_solve(factor, system.b)
        self._state = _ForwardState(x.copy(), y, u, factor)
        return self._state

    def residual(self, x: np.ndarray) -> np.ndarray:
        """Stacked misfit; +inf on forward-model failure so the trust
        region backs off instead of aborting."""
        try:
            state = self._solve_state(x)
        except (fvtpfa.InvalidParameterError, sparsechol.NotPositiveDefiniteError):
            return np.full(self.n_residuals, np.inf)
        blocks = [self.weight_u * (self.obs_u.values - state.u[self.obs_u.indices]),
                  self.weight_y * (self.obs_y.values - state.y[self.obs_y.indices])]
        if self.gamma > 0:
            blocks.append(np.sqrt(self.gamma) * (self.D @ state.y))
        return np.concatenate(blocks)

    def _head_block_grid(self, state: _ForwardState) -> np.ndarray:
        """-H_u du/dy = (S^T A^-1 H_u^T)^T, with S the residual sensitivities."""
        S = fvtpfa.residual_sensitivity_matrix(self.mesh, state.y, state.u)
        if self.accelerated:
            if self._closures is None:
                self._closures = sparsechol.compute_closures(state.factor,
                                                             self.obs_u.indices)
            W = sparsechol.solve_columns(state.factor, self.obs_u.indices,
                                         closures=self._closures)
        else:
            W = np.empty((self.mesh.n, len(self.obs_u)))
            for k, i in enumerate(self.obs_u.indices):
                e = np.zeros(self.mesh.n)
                e[i] = 1.0
                W[:, k] = sparsechol.full_solve(state.factor, e)
        return (S.T @ W).T


class CklemapProblem(_DarcyLsqProblem):
    """Least-squares problem in the basis coefficients xi."""

    def __init__(self, mesh: Mesh, basis: ckle.CkleBasis, obs_u: ObservationSet,
                 obs_y: ObservationSet, gamma: float, weight_u: float = 1.0,
                 weight_y: float = 1.0, accelerated: bool = False):
        super().__init__(mesh, obs_u, obs_y, gamma, weight_u, weight_y, accelerated)
        if basis.n != mesh.n:
            raise ValueError("basis and mesh sizes disagree")
        self.basis = basis
        tail_blocks = [-weight_y * basis.psi[obs_y.indices, :]]
        if gamma > 0:
            tail_blocks.append(np.sqrt(gamma) * (self.D @ basis.psi))
        self._tail = np.vstack(tail_blocks)
        self._tail_gram = self._tail.T @ self._tail
        self.n_unknowns = basis.n_terms

    def _field(self, xi: np.ndarray) -> np.ndarray:
        return ckle.expand(self.basis, xi)

    def jacobian(self, xi: np.ndarray) -> BlockJacobian:
        state = self._solve_state(xi)
        top = self.weight_u * (self._head_block_grid(state) @ self.basis.psi)
        return BlockJacobian(top, self._tail, self._tail_gram)


class MapProblem(_DarcyLsqProblem):
    """Least-squares problem directly in the grid values of y."""

    def __init__(self, mesh: Mesh, obs_u: ObservationSet, obs_y: ObservationSet,
                 gamma: float, weight_u: float = 1.0, weight_y: float = 1.0,
                 accelerated: bool = False):
        super().__init__(mesh, obs_u, obs_y, gamma, weight_u, weight_y, accelerated)
        H_y = observation_matrix(obs_y.indices, mesh.n)
        tail_blocks = [-weight_y * H_y]
        if gamma > 0:
            tail_blocks.append(np.sqrt(gamma) * self.D)
        self._tail = sp.vstack(tail_blocks, format="csr")
        self._tail_gram = (self._tail.T @ self._tail).toarray()
        self.n_unknowns = mesh.n

    def _field(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64)

    def jacobian(self, y: np.ndarray) -> BlockJacobian:
        state = self._solve_state(y)
        top = self.weight_u * self._head_block_grid(state)
        return BlockJacobian(top, self._tail, self._tail_gram)


# -- functional entry points ------------------------------------------------

def residual_cklemap(xi, basis, mesh, obs_u, obs_y, gamma) -> np.ndarray:
    return CklemapProblem(mesh, basis, obs_u, obs_y, gamma).residual(np.asarray(xi, float))


def jacobian_cklemap(xi, basis, mesh, obs_u, obs_y, gamma,
                     accelerated: bool = False) -> np.ndarray:
    problem = CklemapProblem(mesh, basis, obs_u, obs_y, gamma, accelerated=accelerated)
    return problem.jacobian(np.asarray(xi, float)).toarray()


def residual_map(y, mesh, obs_u, obs_y, gamma) -> np.ndarray:
    return MapProblem(mesh, obs_u, obs_y, gamma).residual(np.asarray(y, float))


def jacobian_map(y, mesh, obs_u, obs_y, gamma, accelerated: bool = False) -> np.ndarray:
    problem = MapProblem(mesh, obs_u, obs_y, gamma, accelerated=accelerated)
    return problem.jacobian(np.asarray(y, float)).toarray()


# -- trust-region Gauss-Newton solver --------------------------------------

def _solve_spd(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with escalating diagonal jitter on indefiniteness."""
    n = H.shape[0]
    base = max(np.trace(H) / n, 1.0) * 1e-14
    jitter = 0.0
    for _ in range(20):
        try:
            cho = cho_factor(H + jitter * np.eye(n), lower=True)
            return cho_solve(cho, rhs)
        except LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 10.0
    raise LinAlgError("normal equations remained indefinite after jitter escalation")


def _tr_step_2d(g: np.ndarray, H, s_gn: np.ndarray, delta: float) -> np.ndarray:
    """Exact trust-region step on span{g, s_gn} (two-dimensional subspace)."""
    if np.linalg.norm(s_gn) <= delta:
        return s_gn
    # orthonormal basis of the subspace
    cols = []
    for v in (g, s_gn):
        w = v.copy()
        for c in cols:
            w -= (c @ w) * c
        nw = np.linalg.norm(w)
        if nw > 1e-12 * max(np.linalg.norm(v), 1.0):
            cols.append(w / nw)
    V = np.column_stack(cols)
    Hh = V.T @ (H @ V)
    Hh = 0.5 * (Hh + Hh.T)
    gh = V.T @ g
    ah = _tr_subproblem_small(gh, Hh, delta)
    return V @ ah


def _tr_subproblem_small(g: np.ndarray, H: np.ndarray, delta: float) -> np.ndarray:
    """More-Sorensen solution of min g.a + 0.5 a.H.a, |a| <= delta (dim <= 2)."""
    lam, Q = np.linalg.eigh(H)
    c = Q.T @ g
    eps = 1e-14 * max(float(np.abs(lam).max()), 1.0)

    def step_norm(mu):
        return np.linalg.norm(c / (lam + mu))

    if lam[0] > eps and step_norm(0.0) <= delta:
        return -Q @ (c / lam)
    mu_lo = max(0.0, -lam[0]) + eps
    if step_norm(mu_lo) <= delta:
        # hard case: pad along the weakest eigenvector to reach the boundary
        a = -c / (lam + mu_lo)
        a[0] += np.sqrt(max(delta**2 - a @ a, 0.0))
        return Q @ a
    mu_hi = mu_lo + np.linalg.norm(c) / delta + np.abs(lam).max() + 1.0
    while step_norm(mu_hi) > delta:
        mu_hi *= 2.0
    for _ in range(200):
        mu = 0.5 * (mu_lo + mu_hi)
        if step_norm(mu) > delta:
            mu_lo = mu
        else:
            mu_hi = mu
        if mu_hi - mu_lo <= 1e-14 * mu_hi:
            break
    return -Q @ (c / (lam + mu_hi))


def trust_region_lsq(problem, x0: np.ndarray, *, ftol: float = 1e-8,
                     gtol: float = 1e-8, xtol: float = 1e-8,
                     max_iterations: int = 500,
                     time_budget_s: float | None = None,
                     initial_radius: float | None = None) -> LsqResult:
    """Trust-region Gauss-Newton for min 0.5 ||f(x)||^2.

    ``problem`` exposes residual(x) and jacobian(x); the Jacobian may be a
    dense array or any object with gram/rmatvec/matvec (see
    BlockJacobian). Steps solve the quadratic model on the span of the
    gradient and the Gauss-Newton direction, exactly, inside the radius.
    Non-finite trial residuals shrink the radius rather than aborting.

    Terminates on relative cost decrease (ftol), the max-norm of the
    gradient J^T f (gtol), the step size relative to ||x|| (xtol), the
    iteration cap, or an optional wall-clock budget. Iterations count
    accepted steps, i.e. Jacobian evaluations.
    """
    t_start = time.perf_counter()
    x = np.asarray(x0, dtype=np.float64).copy()
    f = problem.residual(x)
    if not np.all(np.isfinite(f)):
        raise ValueError("residual is not finite at the initial guess")
    cost = 0.5 * float(f @ f)
    history = [cost]
    if cost == 0.0:
        return LsqResult(x, history, 0, STATUS_FTOL, time.perf_counter() - t_start)

    delta = initial_radius if initial_radius is not None else 100.0 * max(np.linalg.norm(x), 1.0)
    status = STATUS_MAXITER
    iterations = 0

    def out_of_time():
        return time_budget_s is not None and time.perf_counter() - t_start >= time_budget_s

    while iterations < max_iterations:
        if out_of_time():
            status = STATUS_TIMEOUT
            break
        J = problem.jacobian(x)
        g = _jac_rmatvec(J, f)
        if np.abs(g).max() <= gtol:
            status = STATUS_GTOL
            break
        H = _jac_gram(J)
        s_gn = _solve_spd(H, -g)

        done = False
        while True:
            s = _tr_step_2d(g, H, s_gn, delta)
            pred = -(g @ s + 0.5 * s @ (H @ s))
            snorm = np.linalg.norm(s)
            if pred <= 0 or snorm == 0.0:
                status = STATUS_XTOL
                done = True
                break
            f_trial = problem.residual(x + s)
            finite = np.all(np.isfinite(f_trial))
            cost_trial = 0.5 * float(f_trial @ f_trial) if finite else np.inf
            rho = (cost - cost_trial) / pred if finite else -np.inf

            if rho < 0.25:
                delta = 0.25 * snorm
            elif rho > 0.75 and snorm >= 0.99 * delta:
                delta = min(2.0 * delta, 1e14)

            if rho > 1e-4:
                iterations += 1
                x = x + s
                f = f_trial
                prev, cost = cost, cost_trial
                history.append(cost)
                if prev - cost <= ftol * prev:
                    status = STATUS_FTOL
                    done = True
                elif snorm <= xtol * (np.linalg.norm(x) + xtol):
                    status = STATUS_XTOL
                    done = True
                break
            if delta <= xtol * (np.linalg.norm(x) + xtol):
                status = STATUS_XTOL
                done = True
                break
            if out_of_time():
                status = STATUS_TIMEOUT
                done = True
                break
        if done:
            break

    return LsqResult(x, history, iterations, status, time.perf_counter() - t_start)


# -- end-to-end driver ------------------------------------------------------

def error_metrics(y_hat: np.ndarray, y_ref: np.ndarray) -> tuple[float, float]:
    """Relative l2 and absolute max error of an estimate against a reference."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if y_hat.shape != y_ref.shape:
        raise ValueError(f"shape mismatch {y_hat.shape} vs {y_ref.shape}")
    ref_norm = np.linalg.norm(y_ref)
    if ref_norm == 0.0:
        raise ValueError("reference field has zero norm")
    diff = y_hat - y_ref
    return float(np.linalg.norm(diff) / ref_norm), float(np.abs(diff).max())


def invert(config: InverseConfig, mesh: Mesh, obs_u: ObservationSet,
           obs_y: ObservationSet, basis: ckle.CkleBasis | None = None,
           reference: np.ndarray | None = None) -> InversionReport:
    """Run the configured estimator and report fields, errors and solver stats.

    CKLE methods require ``basis`` and start from xi = 0, i.e. at the
    conditioned mean field; the grid method starts from the same field
    (``basis.mean``) when a basis is given, from zero otherwise. Non-
    convergence is reported through the status, not raised.
    """
    common = dict(gamma=config.gamma, weight_u=config.weight_u,
                  weight_y=config.weight_y)
    if config.method in ("cklemap", "cklemap-accel"):
        if basis is None:
            raise ValueError(f"method {config.method!r} requires a basis")
        problem = CklemapProblem(mesh, basis, obs_u, obs_y,
                                 accelerated=(config.method == "cklemap-accel"),
                                 **common)
        x0 = np.zeros(basis.n_terms)
    else:
        problem = MapProblem(mesh, obs_u, obs_y, **common)
        if config.initial_guess == "gp-mean" and basis is not None:
            x0 = basis.mean.copy()
        else:
            if config.initial_guess == "gp-mean" and basis is None:
                warnings.warn("no basis given; grid method starts from zero",
                              RuntimeWarning)
            x0 = np.zeros(mesh.n)

    result = trust_region_lsq(problem, x0, ftol=config.ftol, gtol=config.gtol,
                              xtol=config.xtol,
                              max_iterations=config.max_iterations,
                              time_budget_s=config.time_budget_s)
    y_hat = problem._field(result.x_hat)
    u_hat = fvtpfa.solve_forward(fvtpfa.assemble(mesh, y_hat))
    rel_l2 = abs_linf = None
    if reference is not None:
        rel_l2, abs_linf = error_metrics(y_hat, reference)
    return InversionReport(y_hat=y_hat, u_hat=u_hat, rel_l2_error=rel_l2,
                           abs_linf_error=abs_linf, lsq=result,
                           method=config.method, gamma=config.gamma,
                           n_unknowns=problem.n_unknowns)
