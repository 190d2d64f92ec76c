"""Gaussian parameter sets, cameras, and EWA projection to screen space."""

from dataclasses import dataclass

import numpy as np

from .coremath import quat_to_rot, quat_to_rot_backward
from .errors import CulledBehindCamera, InvalidArgument, ShapeError

NEAR_PLANE = 0.01
# Screen-space low-pass filter added to every projected covariance (px^2).
DILATION = 0.3


@dataclass
class GaussianSet:
    """Regular (head) Gaussians.

    ``opacity`` is post-activation in [0, 1]; ``sh`` is ``(N, K, 3)``.
    """

    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        n = len(self.mu)
        for name in ("scale", "quat", "opacity", "sh"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"GaussianSet.{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.mu)

    def subset(self, index):
        return GaussianSet(self.mu[index], self.scale[index], self.quat[index],
                           self.opacity[index], self.sh[index])

    def copy(self):
        return self.subset(slice(None))

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @classmethod
    def empty(cls, sh_degree=3, dtype=np.float64):
        k = (sh_degree + 1) ** 2
        return cls(np.zeros((0, 3), dtype), np.ones((0, 3), dtype), np.zeros((0, 4), dtype),
                   np.zeros(0, dtype), np.zeros((0, k, 3), dtype))


@dataclass
class Camera:
    """Pinhole camera. ``R``/``t`` map world points to camera space
    (``x_cam = R x + t``) with +z pointing forward and +y down the image."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument("focal lengths must be positive")

    @property
    def position(self):
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def size(self):
        return self.height, self.width

    def project_points(self, pts_world):
        pc = np.asarray(pts_world) @ self.R.T + self.t
        z = pc[..., 2]
        return np.stack([self.fx * pc[..., 0] / z + self.cx,
                         self.fy * pc[..., 1] / z + self.cy], axis=-1), z

    def to_dict(self):
        return {"R": self.R.ravel().tolist(), "t": self.t.tolist(), "fx": self.fx,
                "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["R"]), np.array(d["t"]), d["fx"], d["fy"], d["cx"], d["cy"],
                   int(d["width"]), int(d["height"]))


@dataclass
class Splats:
    """Screen-space Gaussians ready for rasterisation (one row per splat)."""

    mu2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.mu2d)


def build_covariance(scale, quat):
    """``R S S^T R^T`` for a single Gaussian or a batch."""
    scale = np.asarray(scale)
    if np.any(scale <= 0):
        raise InvalidArgument("Gaussian scales must be positive")
    R = quat_to_rot(quat)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def build_covariance_backward(scale, quat, d_cov):
    """Returns ``(d_scale, d_quat)`` for a full-matrix gradient ``d_cov``."""
    R = quat_to_rot(quat)
    M = R * scale[..., None, :]
    dM = (d_cov + np.swapaxes(d_cov, -1, -2)) @ M
    d_scale = np.sum(R * dM, axis=-2)
    dR = dM * scale[..., None, :]
    return d_scale, quat_to_rot_backward(quat, dR)


def to_camera(mu, cov, cam):
    mu_c = mu @ cam.R.T.astype(mu.dtype) + cam.t.astype(mu.dtype)
    Rc = cam.R.astype(cov.dtype)
    cov_c = Rc @ cov @ Rc.T
    return mu_c, cov_c


def to_camera_backward(cam, d_mu_c, d_cov_c):
    Rc = cam.R.astype(d_mu_c.dtype)
    return d_mu_c @ Rc, Rc.T @ d_cov_c @ Rc


def projection_jacobian(mu_c, cam):
    x, y, z = mu_c[..., 0], mu_c[..., 1], mu_c[..., 2]
    J = np.zeros(mu_c.shape[:-1] + (2, 3), dtype=mu_c.dtype)
    J[..., 0, 0] = cam.fx / z
    J[..., 0, 2] = -cam.fx * x / (z * z)
    J[..., 1, 1] = cam.fy / z
    J[..., 1, 2] = -cam.fy * y / (z * z)
    return J


def project_gaussians(mu_c, cov_c, cam, near=NEAR_PLANE, dilation=DILATION):
    """Perspective projection of camera-space means and EWA covariances.

    Returns ``(mu2d, cov2d, depth, valid)``; rows with ``z <= near`` are
    flagged invalid (their outputs are finite placeholders).
    """
    z = mu_c[..., 2]
    valid = z > near
    zs = np.where(valid, z, 1.0).astype(mu_c.dtype)
    safe = np.concatenate([mu_c[..., :2], zs[..., None]], axis=-1)
    mu2d = np.stack([cam.fx * safe[..., 0] / zs + cam.cx,
                     cam.fy * safe[..., 1] / zs + cam.cy], axis=-1)
    J = projection_jacobian(safe, cam)
    cov2d = J @ cov_c @ np.swapaxes(J, -1, -2)
    cov2d[..., 0, 0] += dilation
    cov2d[..., 1, 1] += dilation
    return mu2d, cov2d, z, valid


def project_gaussian(mu_c, cov_c, cam, near=NEAR_PLANE):
    """Single Gaussian already in camera space; raises when culled."""
    mu_c = np.asarray(mu_c, dtype=float)
    if mu_c[2] <= near:
        raise CulledBehindCamera(f"z={mu_c[2]:.4g} is behind the near plane")
    mu2d, cov2d, depth, _ = project_gaussians(mu_c[None], np.asarray(cov_c, float)[None], cam, near)
    return mu2d[0], cov2d[0], float(depth[0])


def project_gaussians_backward(mu_c, cov_c, cam, valid, d_mu2d, d_cov2d):
    """Gradients w.r.t. camera-space means and covariances.

    ``d_cov2d`` is a full 2x2 matrix gradient. Invalid rows get zeros.
    """
    x, y, z = mu_c[..., 0], mu_c[..., 1], np.where(valid, mu_c[..., 2], 1.0)
    fx, fy = cam.fx, cam.fy
    d_mu = np.zeros_like(mu_c)
    d_mu[..., 0] = fx * d_mu2d[..., 0] / z
    d_mu[..., 1] = fy * d_mu2d[..., 1] / z
    d_mu[..., 2] = -(fx * x * d_mu2d[..., 0] + fy * y * d_mu2d[..., 1]) / (z * z)

    safe = np.stack([x, y, z], axis=-1)
    J = projection_jacobian(safe, cam)
    G = 0.5 * (d_cov2d + np.swapaxes(d_cov2d, -1, -2))
    d_cov = np.swapaxes(J, -1, -2) @ G @ J
    dJ = 2 * G @ J @ cov_c
    z2 = z * z
    z3 = z2 * z
    d_mu[..., 0] += dJ[..., 0, 2] * (-fx / z2)
    d_mu[..., 1] += dJ[..., 1, 2] * (-fy / z2)
    d_mu[..., 2] += (dJ[..., 0, 0] * (-fx / z2) + dJ[..., 1, 1] * (-fy / z2)
                     + dJ[..., 0, 2] * (2 * fx * x / z3) + dJ[..., 1, 2] * (2 * fy * y / z3))
    d_mu[~valid] = 0
    d_cov[~valid] = 0
    return d_mu, d_cov


def conic_from_cov2d(cov2d):
    """Inverse 2D covariance packed as ``(a, b, c)`` with ``Q = [[a, b], [b, c]]``."""
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=-1)


def conic_backward(cov2d, d_conic):
    """Full-matrix gradient on ``cov2d`` from a gradient on packed conic entries."""
    Q = np.linalg.inv(cov2d)
    dQ = np.empty_like(cov2d)
    dQ[..., 0, 0] = d_conic[..., 0]
    dQ[..., 1, 1] = d_conic[..., 2]
    dQ[..., 0, 1] = dQ[..., 1, 0] = 0.5 * d_conic[..., 1]
    return -Q @ dQ @ Q
