import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import solve_triangular

from cklemap.sparsechol import (
    NotPositiveDefiniteError,
    compute_closures,
    factorize,
    find_sparsity,
    full_solve,
    partial_forward_solve,
    solve_columns,
    symbolic_factor,
)
from conftest import random_sparse_spd


def tridiag(n, diag=4.0, off=-1.0):
    return sp.diags([off * np.ones(n - 1), diag * np.ones(n), off * np.ones(n - 1)],
                    [-1, 0, 1], format="csc")


def test_diagonal_factor():
    f = factorize(sp.diags([4.0, 9.0]).tocsc())
    np.testing.assert_allclose(f.L.toarray(), np.diag([2.0, 3.0]))
    np.testing.assert_array_equal(f.etree, [-1, -1])


def test_tridiagonal_etree_chain():
    f = factorize(tridiag(5))
    np.testing.assert_array_equal(f.etree, [1, 2, 3, 4, -1])


def test_random_spd_reconstruction(rng):
    A = random_sparse_spd(50, rng)
    f = factorize(A)
    err = sp.linalg.norm(f.L @ f.L.T - A) / sp.linalg.norm(A)
    assert err <= 1e-10


def test_not_spd_reports_pivot():
    A = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))  # indefinite
    with pytest.raises(NotPositiveDefiniteError) as err:
        factorize(A)
    assert err.value.pivot == 1


def test_find_sparsity_diagonal():
    f = factorize(sp.diags([1.0, 2.0, 3.0]).tocsc())
    np.testing.assert_array_equal(find_sparsity(f, 1), [1])


def test_find_sparsity_chain():
    f = factorize(tridiag(5))
    np.testing.assert_array_equal(find_sparsity(f, 2), [2, 3, 4])


def fig2_graph_matrix():
    # symmetric pattern with edges (1-based) 1-2,1-3,2-3,1-4,3-4,3-6,5-6,4-7,6-8,7-8
    edges = [(1, 2), (1, 3), (2, 3), (1, 4), (3, 4), (3, 6), (5, 6), (4, 7), (6, 8), (7, 8)]
    n = 8
    A = np.eye(n) * 10.0
    for a, b in edges:
        A[a - 1, b - 1] = A[b - 1, a - 1] = -1.0
    return sp.csc_matrix(A)


def test_closure_of_node_three_on_graph_example():
    # factor of the 8-node graph: closure of vertex 3 is {3,4,6,7,8} (1-based)
    f = factorize(fig2_graph_matrix())
    closure = find_sparsity(f, 2)  # node 3, 0-based
    np.testing.assert_array_equal(closure + 1, [3, 4, 6, 7, 8])


def test_closure_is_etree_root_path(rng):
    A = random_sparse_spd(40, rng, density=0.08)
    f = factorize(A)
    for x in (0, 13, 25, 39):
        path = []
        j = x
        while j != -1:
            path.append(j)
            j = f.etree[j]
        np.testing.assert_array_equal(find_sparsity(f, x), path)


def test_partial_solve_against_dense(rng):
    for _ in range(20):
        n = int(rng.integers(5, 80))
        A = random_sparse_spd(n, rng, density=0.1)
        f = factorize(A)
        Ld = f.L.toarray()
        x = int(rng.integers(0, n))
        support, z = partial_forward_solve(f, x)
        e = np.zeros(n)
        e[x] = 1.0
        zd = solve_triangular(Ld, e, lower=True)
        np.testing.assert_allclose(z, zd[support], atol=1e-12)
        assert np.all(np.isin(np.nonzero(np.abs(zd) > 0)[0], support))


def test_partial_solve_at_root():
    f = factorize(tridiag(4))
    support, z = partial_forward_solve(f, 3)
    np.testing.assert_array_equal(support, [3])
    assert z[0] == pytest.approx(1.0 / f.L[3, 3])


def test_solve_columns_identity():
    f = factorize(sp.eye(6, format="csc"))
    W = solve_columns(f, np.array([1, 4]))
    np.testing.assert_array_equal(W, np.eye(6)[:, [1, 4]])


def test_solve_columns_against_dense(rng):
    A = random_sparse_spd(64, rng, density=0.06)
    f = factorize(A)
    obs = rng.choice(64, size=8, replace=False)
    W = solve_columns(f, obs)
    Wd = np.linalg.solve(A.toarray(), np.eye(64)[:, obs])
    assert np.abs(W - Wd).max() <= 1e-10
    for k, i in enumerate(obs):
        e = np.zeros(64)
        e[i] = 1.0
        assert np.abs(A @ W[:, k] - e).max() <= 1e-10


def test_solve_columns_equals_naive_full_solves(rng):
    A = random_sparse_spd(50, rng, density=0.08)
    f = factorize(A)
    obs = np.array([3, 17, 44])
    W = solve_columns(f, obs, closures=compute_closures(f, obs))
    for k, i in enumerate(obs):
        e = np.zeros(50)
        e[i] = 1.0
        np.testing.assert_allclose(W[:, k], full_solve(f, e), atol=1e-10)


def test_full_solve_basics(rng):
    f = factorize(sp.eye(5, format="csc"))
    np.testing.assert_array_equal(full_solve(f, np.zeros(5)), np.zeros(5))
    rhs = rng.standard_normal(5)
    np.testing.assert_array_equal(full_solve(f, rhs), rhs)


def test_full_solve_against_dense(rng):
    A = random_sparse_spd(60, rng, density=0.07)
    f = factorize(A)
    b = rng.standard_normal(60)
    np.testing.assert_allclose(full_solve(f, b), np.linalg.solve(A.toarray(), b),
                               atol=1e-11)


def test_permuted_factorization(rng):
    A = random_sparse_spd(30, rng, density=0.1)
    perm = rng.permutation(30)
    f = factorize(A, perm=perm)
    b = rng.standard_normal(30)
    np.testing.assert_allclose(full_solve(f, b), np.linalg.solve(A.toarray(), b),
                               atol=1e-11)
    W = solve_columns(f, np.array([2, 9]))
    Wd = np.linalg.solve(A.toarray(), np.eye(30)[:, [2, 9]])
    assert np.abs(W - Wd).max() <= 1e-10


def test_symbolic_reuse(rng):
    A = random_sparse_spd(40, rng, density=0.08)
    sym = symbolic_factor(A)
    f1 = factorize(A, symbolic=sym)
    A2 = A.copy()
    A2.data = A2.data * 1.7  # same pattern, different values
    A2 = A2 + sp.eye(40) * 50.0
    # adding the identity keeps the pattern (diagonal already present)
    f2 = factorize(A2, symbolic=sym)
    np.testing.assert_array_equal(f1.etree, f2.etree)
    np.testing.assert_array_equal(f1.L.indptr, f2.L.indptr)
    np.testing.assert_array_equal(f1.L.indices, f2.L.indices)
    fresh = factorize(A2)
    np.testing.assert_allclose(f2.L.toarray(), fresh.L.toarray())


def test_symbolic_perm_mismatch_rejected(rng):
    A = random_sparse_spd(10, rng)
    sym = symbolic_factor(A)
    with pytest.raises(ValueError, match="perm"):
        factorize(A, perm=np.arange(10)[::-1], symbolic=sym)
