"""Camera pose parameterization and look-at extrinsics.

Camera frame convention: x = right, y = up, z = -forward (the camera looks
down its local -z axis). ``CameraExtrinsics.rotation`` maps world vectors into
the camera frame, so a world point ``p`` has camera coordinates
``rotation @ (p - translation)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

# below this norm the orthogonalized up axis is considered degenerate
_DEGENERATE_UP = 1e-6


@dataclass(frozen=True)
class RadialBounds:
    r_min: float = 0.75
    r_max: float = 1.3

    def __post_init__(self):
        if not (0.0 < self.r_min < self.r_max):
            raise InvalidInputError(
                f"radial bounds need 0 < r_min < r_max, got r_min={self.r_min}, r_max={self.r_max}"
            )


@dataclass(frozen=True)
class CameraPose5:
    """Look-at viewpoint: camera center in spherical coordinates plus up-vector angles."""

    theta: float
    phi: float
    r: float
    theta_up: float
    phi_up: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.phi, self.r, self.theta_up, self.phi_up])

    @classmethod
    def from_array(cls, values) -> "CameraPose5":
        v = [float(x) for x in values]
        return cls(*v)

    def position(self) -> np.ndarray:
        return spherical_to_cartesian(self.theta, self.phi, self.r)


@dataclass(frozen=True)
class CameraExtrinsics:
    rotation: np.ndarray  # 3x3, world -> camera
    translation: np.ndarray  # camera center in world coordinates

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation.T

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation + self.translation

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[2]

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls(np.eye(3), np.zeros(3))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def squash_array(raw: np.ndarray, bounds: RadialBounds, theta_max: float = math.pi) -> np.ndarray:
    """Vectorized squashing of ``(..., 5)`` unconstrained values into pose ranges."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 5:
        raise InvalidInputError(f"raw pose must have trailing dimension 5, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("raw pose contains non-finite values")
    s = _sigmoid(raw)
    out = np.empty_like(s)
    out[..., 0] = theta_max * s[..., 0]
    out[..., 1] = 2.0 * math.pi * s[..., 1]
    out[..., 2] = bounds.r_min + (bounds.r_max - bounds.r_min) * s[..., 2]
    out[..., 3] = math.pi * s[..., 3]
    out[..., 4] = 2.0 * math.pi * s[..., 4]
    return out


def squash_pose(raw, bounds: RadialBounds, theta_max: float = math.pi) -> CameraPose5:
    """Map a 5-vector of unconstrained policy outputs to a valid pose with sigmoids.

    ``theta_max`` optionally caps the polar angle (default pi keeps the full range).
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(5)
    return CameraPose5.from_array(squash_array(raw, bounds, theta_max))


def spherical_to_cartesian(theta: float, phi: float, r: float) -> np.ndarray:
    st = math.sin(theta)
    return np.array([r * st * math.cos(phi), r * st * math.sin(phi), r * math.cos(theta)])


def cartesian_to_spherical(point) -> tuple[float, float, float]:
    """Inverse of :func:`spherical_to_cartesian`, with phi wrapped into [0, 2pi)."""
    x, y, z = (float(c) for c in point)
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise InvalidInputError("cannot invert the origin")
    theta = math.acos(max(-1.0, min(1.0, z / r)))
    phi = math.atan2(y, x) % (2.0 * math.pi)
    return theta, phi, r


def up_vector(theta_up: float, phi_up: float) -> np.ndarray:
    return spherical_to_cartesian(theta_up, phi_up, 1.0)


def _orthogonalize(v: np.ndarray, forward: np.ndarray) -> np.ndarray:
    return v - np.dot(v, forward) * forward


def look_at_from_vectors(center, up, target=None) -> CameraExtrinsics:
    """Build extrinsics for a camera at ``center`` fixating ``target`` with the given up hint."""
    center = np.asarray(center, dtype=np.float64)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    look = target - center
    dist = np.linalg.norm(look)
    if dist == 0.0:
        raise InvalidInputError("camera center coincides with the look-at target")
    forward = look / dist

    cam_up = _orthogonalize(np.asarray(up, dtype=np.float64), forward)
    n = np.linalg.norm(cam_up)
    if n < _DEGENERATE_UP:
        for fallback in (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])):
            cam_up = _orthogonalize(fallback, forward)
            n = np.linalg.norm(cam_up)
            if n >= _DEGENERATE_UP:
                break
    cam_up = cam_up / n
    right = np.cross(forward, cam_up)
    right /= np.linalg.norm(right)
    # re-derive up from right x forward so the frame is orthonormal to machine precision
    cam_up = np.cross(right, forward)
    rotation = np.stack([right, cam_up, -forward])
    return CameraExtrinsics(rotation=rotation, translation=center.copy())


def look_at_extrinsics(pose: CameraPose5, target=None) -> CameraExtrinsics:
    return look_at_from_vectors(pose.position(), up_vector(pose.theta_up, pose.phi_up), target)
