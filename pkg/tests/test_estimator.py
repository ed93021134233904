import numpy as np
import pytest

from sparse_smpc.errors import DimensionMismatch, EmptyDomain, SingularInnovation
from sparse_smpc.estimator import (RlsState, lift_regressor, point_estimate_domain, project_mean, reshape_mean,
                                   rls_update)
from sparse_smpc.polytope import Polytope, contains, init_fps
from sparse_smpc.sparse_recovery import build_fsps

# argmin (x - mu)' M (x - mu) over x1 + 2 x2 <= 1, M = [[4, 1], [1, 1]], mu = (2, 1);
# nested grid search to 1e-6, frozen.
GRID_MINIMIZER = (2.2307692339200003, -0.6153846169600002)


def batch_posterior(mu0, P0, phis, ys, noise_cov):
    """Regularized least squares in information form."""
    info = np.linalg.inv(P0)
    vec = info @ mu0
    Rinv = np.linalg.inv(np.atleast_2d(noise_cov))
    for phi, y in zip(phis, ys):
        L = lift_regressor(phi, len(y))
        info = info + L.T @ Rinv @ L
        vec = vec + L.T @ Rinv @ y
    cov = np.linalg.inv(info)
    return cov @ vec, cov


def test_lift_shapes():
    np.testing.assert_array_equal(lift_regressor([1.0, 2.0, 3.0], 1), [[1, 2, 3]])
    np.testing.assert_array_equal(lift_regressor([1.0, 2.0], 2), [[1, 2, 0, 0], [0, 0, 1, 2]])


def test_lift_matches_matrix_product(rng):
    H = rng.normal(size=(3, 5))
    phi = rng.normal(size=5)
    np.testing.assert_allclose(lift_regressor(phi, 3) @ H.reshape(-1), H @ phi, atol=1e-13)


def test_scalar_update():
    s2 = 0.25
    out = rls_update(RlsState([0.0], [[1.0]]), [1.0], [1.0], [[s2]])
    assert out.mean[0] == pytest.approx(1 / (1 + s2), rel=1e-14)
    assert out.covariance[0, 0] == pytest.approx(s2 / (1 + s2), rel=1e-13)


def test_zero_regressor_keeps_state():
    st = RlsState(np.ones(4), 0.1)
    assert rls_update(st, np.zeros(4), [0.3], [[0.01]]) is st


def test_singular_innovation():
    with pytest.raises(SingularInnovation):
        rls_update(RlsState([0.0, 0.0], np.diag([1.0, 0.0])), [0.0, 1.0], [1.0], [[0.0]])
    with pytest.raises(DimensionMismatch):
        rls_update(RlsState(np.zeros(3), 1.0), np.ones(2), [1.0], [[0.1]])


@pytest.mark.parametrize("n_y", [1, 2])
def test_recursive_matches_batch(n_y, rng):
    dim = 6
    mu0 = rng.normal(size=n_y * dim)
    P0 = 0.1 * np.eye(n_y * dim)
    R = np.diag(rng.uniform(0.001, 0.01, size=n_y))
    phis = rng.normal(size=(50, dim))
    ys = rng.normal(size=(50, n_y))
    st = RlsState(mu0, P0)
    for phi, y in zip(phis, ys):
        st = rls_update(st, phi, y, R)
    mean, cov = batch_posterior(mu0, P0, phis, ys, R)
    np.testing.assert_allclose(st.mean, mean, atol=1e-8)
    np.testing.assert_allclose(st.covariance, cov, atol=1e-8)


def test_covariance_never_grows(rng):
    st = RlsState(np.ones(10), 0.1)
    for _ in range(40):
        new = rls_update(st, rng.normal(size=10), [0.0], [[1 / 300]])
        assert np.linalg.eigvalsh(new.covariance).max() <= np.linalg.eigvalsh(st.covariance).max() + 1e-12
        assert np.linalg.eigvalsh(new.covariance).min() > 0
        np.testing.assert_array_equal(new.covariance, new.covariance.T)
        st = new


def test_mean_inside_domain_is_kept():
    fps = init_fps(-np.ones(3), np.ones(3))
    st = RlsState([0.2, -0.1, 0.5], 0.1)
    np.testing.assert_array_equal(project_mean(st, point_estimate_domain(fps)), st.mean)


def test_identity_weight_on_box_clamps():
    fps = init_fps(-np.ones(4), np.ones(4))
    st = RlsState([2.0, -0.5, -3.0, 0.9], 1.0)
    np.testing.assert_allclose(project_mean(st, point_estimate_domain(fps)), [1.0, -0.5, -1.0, 0.9], atol=1e-7)


def test_anisotropic_halfspace_against_grid():
    M = np.array([[4.0, 1.0], [1.0, 1.0]])
    st = RlsState([2.0, 1.0], np.linalg.inv(M))
    fps = Polytope([[1.0, 2.0], [1, 0], [-1, 0], [0, 1], [0, -1]], [1.0, 3, 3, 3, 3])
    x = project_mean(st, point_estimate_domain(fps))
    np.testing.assert_allclose(x, GRID_MINIMIZER, atol=1e-4)
    np.testing.assert_allclose(x, [29 / 13, -8 / 13], atol=1e-7)


def test_projection_beats_random_feasible_points(rng):
    n = 4
    L = rng.normal(size=(n, n))
    P = L @ L.T + 0.1 * np.eye(n)
    st = RlsState(3 * rng.normal(size=n), P)
    fps = Polytope(np.vstack([np.eye(n), -np.eye(n), rng.normal(size=(3, n))]),
                   np.r_[np.ones(2 * n), rng.uniform(0.2, 1.0, size=3)])
    x = project_mean(st, point_estimate_domain(fps))
    M = np.linalg.inv(P)
    f = lambda z: (z - st.mean) @ M @ (z - st.mean)
    assert contains(fps, x, 1e-7)
    checked = 0
    while checked < 1000:
        z = rng.uniform(-1, 1, size=n)
        if contains(fps, z, 0.0):
            assert f(x) <= f(z) + 1e-9
            checked += 1


def test_domain_without_sparse_set_is_fps():
    fps = init_fps(-np.ones(3), np.ones(3))
    dom = point_estimate_domain(fps)
    assert dom.combined is fps and dom.fsps_box is None


def test_domain_sparse_box_inside_fps():
    fps = init_fps(-3 * np.ones(3), 3 * np.ones(3))
    fsps = build_fsps([[0.5, 0.0, -0.5]], [0.1], 4, c_bar=2.0)  # radius 0.4
    dom = point_estimate_domain(fps, fsps)
    lo, hi = dom.fsps_box
    for p in np.random.default_rng(0).uniform(-3, 3, size=(500, 3)):
        assert contains(dom.combined, p, 0.0) == bool(np.all((p >= lo[0]) & (p <= hi[0])))


def test_domain_drops_implied_sparse_rows():
    fps = init_fps(-np.ones(2), np.ones(2))
    dom = point_estimate_domain(fps, build_fsps([[0.0, 0.0]], [1.0], 100))
    assert dom.sparse_rows is None
    assert dom.combined is fps


def test_disjoint_domain_raises():
    fps = init_fps(-np.ones(2), np.ones(2))
    with pytest.raises(EmptyDomain):
        point_estimate_domain(fps, build_fsps([[5.0, 5.0]], [0.1], 4))
    with pytest.raises(ValueError):
        point_estimate_domain(fps, shape="disc")


def test_projection_lands_in_sparse_box():
    fps = init_fps(-3 * np.ones(3), 3 * np.ones(3))
    fsps = build_fsps([[0.5, 0.0, -0.5]], [0.1], 4, c_bar=2.0)
    st = RlsState(np.ones(3), 0.1)
    x = project_mean(st, point_estimate_domain(fps, fsps))
    np.testing.assert_allclose(x, [0.9, 0.4, -0.1], atol=1e-7)


def test_projection_onto_ball():
    fps = init_fps(-3 * np.ones(2), 3 * np.ones(2))
    fsps = build_fsps([[0.0, 0.0]], [0.5], 4)  # radius 2 sqrt(2), inside the FPS box
    r = fsps.radii[0]
    st = RlsState([3.0, 3.0], 1.0)
    x = project_mean(st, point_estimate_domain(fps, fsps, "ball"))
    np.testing.assert_allclose(x, np.array([1.0, 1.0]) * r / np.sqrt(2), atol=1e-6)


def test_reshape_roundtrip(rng):
    H = rng.normal(size=(2, 5))
    np.testing.assert_array_equal(reshape_mean(H.reshape(-1), 2, 5).coefficients, H)
    v = rng.normal(size=5)
    np.testing.assert_array_equal(reshape_mean(v, 1, 5).coefficients[0], v)
    phi = rng.normal(size=5)
    np.testing.assert_allclose(reshape_mean(H.reshape(-1), 2, 5).coefficients @ phi,
                               lift_regressor(phi, 2) @ H.reshape(-1), atol=1e-13)
    with pytest.raises(DimensionMismatch):
        reshape_mean(np.zeros(7), 2, 5)
