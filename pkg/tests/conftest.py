import numpy as np
import pytest

from cklemap.mesh import BoundaryCondition, BoundaryRule, MeshSpec, build_mesh


def box_spec(nx, ny=None, dx=None, dy=None, left=1.0, right=0.0, flux=0.0):
    """Unit-square test domain: Dirichlet left/right, Neumann top/bottom."""
    ny = nx if ny is None else ny
    dx = 1.0 / nx if dx is None else dx
    dy = 1.0 / ny if dy is None else dy
    return MeshSpec(nx=nx, ny=ny, dx=dx, dy=dy, boundaries=(
        BoundaryRule("left", 0, ny - 1, BoundaryCondition("dirichlet", left)),
        BoundaryRule("right", 0, ny - 1, BoundaryCondition("dirichlet", right)),
        BoundaryRule("top", 0, nx - 1, BoundaryCondition("neumann", flux)),
        BoundaryRule("bottom", 0, nx - 1, BoundaryCondition("neumann", flux)),
    ))


def box_mesh(nx, **kw):
    return build_mesh(box_spec(nx, **kw))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_sparse_spd(n, rng, density=0.1):
    """Diagonally dominant random symmetric matrix, strictly SPD."""
    import scipy.sparse as sp

    B = sp.random(n, n, density=density, random_state=rng, format="csc")
    A = B + B.T
    A = A + sp.eye(n) * (np.abs(A).sum(axis=1).max() + 1.0)
    return sp.csc_matrix(A)
