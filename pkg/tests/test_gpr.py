import numpy as np
import pytest

from cklemap.gpr import (
    GprError,
    KernelParams,
    condition,
    default_nugget,
    fit_hyperparameters,
    matern52,
    neg_log_marginal_likelihood,
)
from cklemap.mesh import ObservationSet
from conftest import box_mesh


def test_params_validation():
    with pytest.raises(GprError):
        KernelParams(sigma=-1.0, length=1.0)
    with pytest.raises(GprError):
        KernelParams(sigma=1.0, length=0.0)
    with pytest.raises(GprError):
        KernelParams(sigma=1.0, length=1.0, nugget=-1e-3)


def test_matern_zero_lag():
    p = KernelParams(sigma=2.0, length=0.5, nugget=1e-4)
    assert matern52(0.0, p) == pytest.approx(4.0 + 1e-4)
    p0 = KernelParams(sigma=2.0, length=0.5)
    assert matern52(0.0, p0) == pytest.approx(4.0)


def test_matern_reference_value():
    # (1 + sqrt5 + 5/3) exp(-sqrt5) at sigma=1, ell=1, r=1
    p = KernelParams(sigma=1.0, length=1.0)
    assert matern52(1.0, p) == pytest.approx(0.52399410883182031, rel=1e-12)


def test_matern_decay():
    p = KernelParams(sigma=1.0, length=0.3)
    r = np.linspace(1.0, 30.0, 200)
    k = matern52(r, p)
    assert np.all(np.diff(k) < 0)
    assert k[-1] < 1e-10


def test_nlml_single_point():
    p = KernelParams(sigma=1.3, length=1.0, nugget=1e-8)
    got = neg_log_marginal_likelihood(p, np.array([[0.0, 0.0]]), np.array([0.0]))
    assert got == pytest.approx(1.1813028006307437, rel=1e-12)


def test_nlml_matches_dense_bruteforce(rng):
    X = rng.uniform(0, 1, size=(10, 2))
    y = rng.standard_normal(10)
    p = KernelParams(sigma=1.4, length=0.3, nugget=1e-6)
    from scipy.spatial.distance import cdist

    C = matern52(cdist(X, X), p)  # nugget lands on the diagonal at r=0
    brute = (0.5 * y @ np.linalg.inv(C) @ y
             + 0.5 * np.log(np.linalg.det(C))
             + 5.0 * np.log(2 * np.pi))
    assert neg_log_marginal_likelihood(p, X, y) == pytest.approx(brute, abs=1e-8)


def test_nlml_zero_data_keeps_logdet_only(rng):
    X = rng.uniform(0, 1, size=(6, 2))
    y = rng.standard_normal(6)
    p = KernelParams(sigma=1.0, length=0.4, nugget=1e-8)
    full = neg_log_marginal_likelihood(p, X, y)
    no_quad = neg_log_marginal_likelihood(p, X, np.zeros(6))
    assert no_quad < full
    from scipy.spatial.distance import cdist

    C = matern52(cdist(X, X), p)
    sign, logdet = np.linalg.slogdet(C)
    assert no_quad == pytest.approx(0.5 * logdet + 3.0 * np.log(2 * np.pi), rel=1e-10)


def test_nlml_infeasible_returns_inf():
    X = np.zeros((2, 2))  # duplicate points, zero nugget: singular
    p = KernelParams(sigma=1.0, length=1.0, nugget=0.0)
    assert neg_log_marginal_likelihood(p, X, np.array([0.0, 1.0])) == np.inf


def test_fit_recovers_known_kernel():
    rng = np.random.default_rng(42)
    true = KernelParams(sigma=1.0, length=0.2, nugget=1e-8)
    X = rng.uniform(0, 1, size=(200, 2))
    from scipy.spatial.distance import cdist

    C = matern52(cdist(X, X), true) + 1e-10 * np.eye(200)
    y = np.linalg.cholesky(C) @ rng.standard_normal(200)
    fit = fit_hyperparameters(X, y)
    assert abs(np.log(fit.sigma) - np.log(true.sigma)) <= 0.3
    assert abs(np.log(fit.length) - np.log(true.length)) <= 0.3


def test_fit_beats_every_start(rng):
    X = rng.uniform(0, 1, size=(30, 2))
    y = np.sin(4 * X[:, 0]) + 0.2 * rng.standard_normal(30)
    fit = fit_hyperparameters(X, y)
    best = neg_log_marginal_likelihood(fit, X, y)
    std = float(np.std(y))
    from scipy.spatial.distance import pdist

    d = pdist(X)
    d = d[d > 0]
    for s0 in np.geomspace(0.3 * std, 3.0 * std, 4):
        for l0 in np.geomspace(max(d.min(), d.max() / 100), d.max(), 4):
            start = KernelParams(sigma=s0, length=l0, nugget=fit.nugget)
            assert best <= neg_log_marginal_likelihood(start, X, y) + 1e-9


def test_fit_constant_data_warns():
    X = np.array([[0.0, 0.0], [5.0, 0.0]])
    with pytest.warns(RuntimeWarning, match="constant"):
        fit = fit_hyperparameters(X, np.array([2.0, 2.0]))
    assert fit.length == pytest.approx(5.0)  # upper bound of the search box


def test_fit_deterministic(rng):
    X = rng.uniform(0, 1, size=(40, 2))
    y = rng.standard_normal(40)
    a = fit_hyperparameters(X, y)
    b = fit_hyperparameters(X, y)
    assert a == b


def test_condition_single_observation():
    m = box_mesh(4)
    obs = ObservationSet(np.array([5]), np.array([1.5]))
    p = KernelParams(sigma=1.0, length=0.4, nugget=1e-10)
    post = condition(p, obs, m)
    assert post.mean[5] == pytest.approx(1.5, abs=1e-8)
    assert post.cov[5, 5] <= 1e-10 + 1e-8


def test_condition_requires_observations():
    m = box_mesh(3)
    p = KernelParams(sigma=1.0, length=0.4)
    with pytest.raises(GprError):
        condition(p, ObservationSet(np.array([], dtype=int), np.array([])), m)


def test_condition_duplicate_points_zero_nugget():
    # degenerate training covariance must surface, not crash downstream
    m = box_mesh(3)
    p = KernelParams(sigma=1.0, length=1e6, nugget=0.0)  # nearly constant kernel
    obs = ObservationSet(np.array([0, 1, 2]), np.array([1.0, 1.0, 1.0]))
    with pytest.raises(GprError):
        condition(p, obs, m)


def test_posterior_contracts(rng):
    m = box_mesh(6)
    idx = rng.choice(m.n, size=7, replace=False)
    p = KernelParams(sigma=1.3, length=0.25, nugget=1e-8)
    obs = ObservationSet(idx, rng.standard_normal(7))
    post = condition(p, obs, m)
    assert np.abs(post.cov - post.cov.T).max() <= 1e-12
    evals = np.linalg.eigvalsh(post.cov)
    assert evals.min() >= -1e-10
    # variance never grows above the prior
    assert np.all(np.diag(post.cov) <= p.sigma**2 + 1e-10)
    # interpolation at the data
    np.testing.assert_allclose(post.mean[idx], obs.values, atol=1e-6)
    assert np.all(np.diag(post.cov)[idx] <= p.nugget + 1e-8)


def test_mean_interpolates_with_tiny_nugget(rng):
    m = box_mesh(5)
    idx = np.array([0, 7, 13, 21])
    p = KernelParams(sigma=1.0, length=0.3, nugget=1e-12)
    vals = rng.standard_normal(4)
    post = condition(p, ObservationSet(idx, vals), m)
    np.testing.assert_allclose(post.mean[idx], vals, atol=1e-6)


def test_posterior_invariant_to_training_order(rng):
    m = box_mesh(5)
    idx = np.array([3, 9, 17, 20])
    vals = rng.standard_normal(4)
    p = KernelParams(sigma=1.0, length=0.3, nugget=1e-9)
    post1 = condition(p, ObservationSet(idx, vals), m)
    shuffle = np.array([2, 0, 3, 1])
    post2 = condition(p, ObservationSet(idx[shuffle], vals[shuffle]), m)
    np.testing.assert_allclose(post1.mean, post2.mean, atol=1e-10)
    np.testing.assert_allclose(post1.cov, post2.cov, atol=1e-10)


def test_default_nugget_scales_with_variance(rng):
    y = rng.standard_normal(50) * 3.0
    assert default_nugget(y) == pytest.approx(1e-8 * y.var())
    assert default_nugget(np.zeros(10)) == 1e-8
