"""Pinhole cameras, quaternions and Gaussian covariance projection.

Conventions: camera frame is x right, y down, z forward; pixel centres sit
at integer coordinates with (0, 0) the top-left pixel; quaternions are
stored (w, x, y, z). Everything here runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateRotationError,
    InvalidDepthError,
    InvalidScaleError,
)

MIN_VIEW_DEPTH = 1e-6


@dataclass(frozen=True)
class Camera:
    """Intrinsics ``K`` plus a world-to-camera transform ``x_cam = R x + t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    _K_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "_K_inv", np.linalg.inv(K))

    @classmethod
    def from_fov(cls, width, height, fov_x_deg, R=None, t=None):
        f = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        K = [[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1]]
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if t is None else t, width, height)

    @classmethod
    def looking_along(cls, K, center, yaw, width, height):
        """Level camera at ``center`` whose optical axis has heading ``yaw`` (rad, world z up)."""
        forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        R = np.stack([right, down, forward])
        return cls(K, R, -R @ np.asarray(center, dtype=np.float64), width, height)

    @property
    def P(self):
        """3x4 projection matrix K [R | t]."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def image_size(self):
        return (self.width, self.height)

    def to_dict(self):
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["K"], d["R"], d["t"], int(d["width"]), int(d["height"]))


def to_view(camera: Camera, x):
    return np.asarray(x, dtype=np.float64) @ camera.R.T + camera.t


def project_points(camera: Camera, points):
    """Vectorised projection of (N, 3) world points.

    Returns ``(pixels (N, 2), depth (N,), in_front (N,))``. Pixels of points
    behind the camera are NaN.
    """
    xc = to_view(camera, np.atleast_2d(points))
    z = xc[:, 2]
    in_front = z > MIN_VIEW_DEPTH
    safe_z = np.where(in_front, z, np.nan)
    uvw = xc @ camera.K.T
    pixels = uvw[:, :2] / safe_z[:, None]
    return pixels, z, in_front


def project_point(camera: Camera, x):
    pixels, z, in_front = project_points(camera, np.asarray(x, dtype=np.float64).reshape(1, 3))
    if not in_front[0]:
        raise BehindCameraError(f"point has view depth {z[0]:.3g} <= {MIN_VIEW_DEPTH}")
    return pixels[0], float(z[0])


def pixel_rays(camera: Camera, pixels):
    """Unnormalised world-space directions whose view depth component is 1."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    homog = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
    return (homog @ camera._K_inv.T) @ camera.R


def unproject_pixels(camera: Camera, pixels, depths):
    """World points at view depth ``depths`` (broadcast against pixels)."""
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise InvalidDepthError("depth must be positive")
    dirs = pixel_rays(camera, pixels)
    return camera.center + dirs * depths[..., None]


def unproject_pixel(camera: Camera, pixel, depth):
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    return unproject_pixels(camera, np.reshape(pixel, (1, 2)), np.array([depth]))[0]


def quaternion_matrix(q):
    """Rotation matrices from (..., 4) quaternions *without* normalising.

    Equals the true rotation only for unit ``q``; the polynomial form is what
    the splatting backward pass differentiates.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_matrix_backward(q, grad_R):
    """Gradient of :func:`quaternion_matrix` w.r.t. ``q`` given dL/dR."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    G = grad_R
    g = lambda i, j: G[..., i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (
        y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1)
        - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2)
    )
    dy = 2 * (
        -2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0)
        + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2)
    )
    dz = 2 * (
        -2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0)
        - 2 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1)
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise DegenerateRotationError("quaternion norm below 1e-12")
    return q / n


def quaternion_to_rotation(q):
    return quaternion_matrix(normalize_quaternion(q))


def build_covariance(r, s):
    """Sigma = R diag(s)^2 R^T, batched over leading axes."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(~(s > 0)):
        raise InvalidScaleError("scales must be positive")
    R = quaternion_to_rotation(r)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def view_jacobian(xc, K):
    """d(pixel)/d(view-space point) for (..., 3) view points, shape (..., 2, 3)."""
    x, y, z = xc[..., 0], xc[..., 1], xc[..., 2]
    fx, fy = K[0, 0], K[1, 1]
    J = np.zeros(xc.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def projection_jacobians(camera: Camera, mu):
    """Batched d(pixel)/d(world point), (N, 2, 3); raises for points behind the camera."""
    xc = to_view(camera, np.atleast_2d(mu))
    if np.any(xc[:, 2] <= MIN_VIEW_DEPTH):
        raise BehindCameraError("Jacobian requested for a point behind the camera")
    return view_jacobian(xc, camera.K) @ camera.R


def projection_jacobian(camera: Camera, mu):
    return projection_jacobians(camera, np.reshape(mu, (1, 3)))[0]


def project_covariance(sigma, camera: Camera, mu):
    """Screen-space covariance J W Sigma W^T J^T (rotation-only W)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    batched = sigma.ndim == 3
    J = projection_jacobians(camera, np.reshape(mu, (-1, 3)))
    if not batched:
        J = J[0]
    out = J @ sigma @ np.swapaxes(J, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))
