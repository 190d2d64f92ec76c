import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghsa.gaussmodel import (DILATION, Camera, GaussianSet, build_covariance,
                             build_covariance_backward, conic_from_cov2d, project_gaussian,
                             project_gaussians)
from ghsa.errors import CulledBehindCamera, InvalidArgument, ShapeError


def axis_camera(f=100.0, size=64):
    c = (size - 1) / 2
    return Camera(np.eye(3), np.zeros(3), f, f, c, c, size, size)


def test_unit_covariance():
    np.testing.assert_allclose(build_covariance([1.0, 1, 1], [1, 0, 0, 0]), np.eye(3))


def test_axis_scaled_covariance():
    np.testing.assert_allclose(build_covariance([2.0, 1, 1], [1, 0, 0, 0]), np.diag([4.0, 1, 1]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_covariance_eigenvalues_are_squared_scales(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.01, 3, 3)
    q = rng.normal(size=4)
    ev = np.linalg.eigvalsh(build_covariance(s, q))
    np.testing.assert_allclose(np.sort(ev), np.sort(s ** 2), rtol=1e-9, atol=1e-12)


def test_nonpositive_scale_rejected():
    with pytest.raises(InvalidArgument):
        build_covariance([1.0, 0.0, 1.0], [1, 0, 0, 0])


def test_covariance_gradient():
    rng = np.random.default_rng(0)
    s, q, G = rng.uniform(0.2, 2, 3), rng.normal(size=4), rng.normal(size=(3, 3))
    ds, dq = build_covariance_backward(s, q, G)
    eps = 1e-6
    for i in range(3):
        e = np.eye(3)[i] * eps
        fd = np.sum(G * (build_covariance(s + e, q) - build_covariance(s - e, q))) / (2 * eps)
        assert abs(fd - ds[i]) < 1e-7
    for i in range(4):
        e = np.eye(4)[i] * eps
        fd = np.sum(G * (build_covariance(s, q + e) - build_covariance(s, q - e))) / (2 * eps)
        assert abs(fd - dq[i]) < 1e-7


def test_on_axis_projection():
    cam = axis_camera()
    mu2d, cov2d, z = project_gaussian([0, 0, 2.0], np.eye(3), cam)
    np.testing.assert_allclose(mu2d, [cam.cx, cam.cy])
    np.testing.assert_allclose(cov2d, np.diag([2500.0, 2500.0]) + DILATION * np.eye(2))
    assert z == 2.0


def test_projection_linear_in_covariance():
    cam = axis_camera()
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 3))
    S = A @ A.T
    _, c1, _ = project_gaussian([0.1, -0.2, 3.0], S, cam)
    _, c4, _ = project_gaussian([0.1, -0.2, 3.0], 4 * S, cam)
    np.testing.assert_allclose(c4 - DILATION * np.eye(2), 4 * (c1 - DILATION * np.eye(2)),
                               rtol=1e-12)


def test_off_axis_covariance_matches_numeric_jacobian():
    cam = axis_camera(80.0)
    rng = np.random.default_rng(2)
    mu = np.array([0.4, -0.3, 2.5])
    A = rng.normal(size=(3, 3)) * 0.1
    S = A @ A.T

    def proj(p):
        return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])

    J = np.zeros((2, 3))
    h = 1e-6
    for i in range(3):
        e = np.eye(3)[i] * h
        J[:, i] = (proj(mu + e) - proj(mu - e)) / (2 * h)
    _, cov2d, _ = project_gaussian(mu, S, cam)
    np.testing.assert_allclose(cov2d - DILATION * np.eye(2), J @ S @ J.T, rtol=1e-4)


def test_behind_camera_is_culled():
    with pytest.raises(CulledBehindCamera):
        project_gaussian([0, 0, -1.0], np.eye(3), axis_camera())


def test_batch_projection_flags_invalid_rows():
    mu = np.array([[0, 0, 2.0], [0, 0, -1.0], [0, 0, 0.0]])
    _, cov2d, _, valid = project_gaussians(mu, np.broadcast_to(np.eye(3), (3, 3, 3)),
                                           axis_camera())
    assert valid.tolist() == [True, False, False]
    assert np.all(np.isfinite(cov2d))


def test_conic_is_inverse():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 2, 2))
    cov = A @ A.transpose(0, 2, 1) + np.eye(2)
    con = conic_from_cov2d(cov)
    Q = np.stack([np.stack([con[:, 0], con[:, 1]], -1), np.stack([con[:, 1], con[:, 2]], -1)], 1)
    np.testing.assert_allclose(Q @ cov, np.broadcast_to(np.eye(2), (5, 2, 2)), atol=1e-12)


def test_camera_round_trip_and_centre():
    cam = Camera(np.diag([1.0, -1, -1]), [0.1, 0.2, 0.8], 100, 110, 63.5, 60, 128, 120)
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.R, cam.R)
    np.testing.assert_allclose(cam.R @ cam.position + cam.t, 0, atol=1e-15)


def test_gaussian_set_row_count_checked():
    with pytest.raises(ShapeError):
        GaussianSet(np.zeros((2, 3)), np.ones((3, 3)), np.zeros((2, 4)), np.zeros(2),
                    np.zeros((2, 16, 3)))
