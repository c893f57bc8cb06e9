"""Pinhole cameras, rays, frustum tests, scene contraction and virtual trajectories.

Conventions
-----------
* Camera frame: +x right, +y down, +z along the viewing direction (OpenCV style).
* ``Pose`` is world-from-camera: ``x_world = R @ x_cam + t``; ``t`` is the camera center.
* Pixel ``(px, py)`` covers ``[px, px+1) x [py, py+1)`` in continuous image
  coordinates; its ray passes through ``(px + 0.5, py + 0.5)`` and ``project`` returns
  continuous coordinates, so an on-axis point lands on ``(cx, cy)``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "Intrinsics",
    "Pose",
    "Camera",
    "Ray",
    "pixel_ray",
    "pixel_rays",
    "image_rays",
    "project",
    "project_points",
    "in_frustum",
    "in_frustum_points",
    "contract",
    "contract_points",
    "look_at",
    "circle_trajectory",
    "camera_set_hash",
]


def _frozen_vec(v, n=3) -> np.ndarray:
    a = np.array(v, dtype=np.float64).reshape(n)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height or self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be positive integers, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _frozen_vec(self.translation)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise DomainError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def translated(self, offset) -> "Pose":
        return Pose(self.rotation, self.translation + np.asarray(offset, dtype=np.float64))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose
    near: float
    far: float

    def __post_init__(self):
        if not (np.isfinite(self.near) and np.isfinite(self.far)):
            raise DomainError("near/far must be finite")
        if not (0 < self.near < self.far):
            raise DomainError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def with_intrinsics(self, intrinsics: Intrinsics) -> "Camera":
        return Camera(intrinsics, self.pose, self.near, self.far)

    def with_pose(self, pose: Pose) -> "Camera":
        return Camera(self.intrinsics, pose, self.near, self.far)

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "pose": self.pose.matrix.tolist(),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(Intrinsics.from_dict(d["intrinsics"]), Pose.from_matrix(d["pose"]), float(d["near"]), float(d["far"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen_vec(self.origin))
        object.__setattr__(self, "direction", _frozen_vec(self.direction))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise DomainError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise DomainError("ray needs t_near < t_far")

    def at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return self.origin + s[..., None] * self.direction


def _check_pixel(camera: Camera, px, py):
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    ok = (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
    if not np.all(ok):
        raise DomainError(f"pixel outside {camera.width}x{camera.height} image")
    return px, py


def pixel_rays(camera: Camera, px, py) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``pixel_ray``: returns (origins, unit directions), each ``(..., 3)``."""
    px, py = _check_pixel(camera, px, py)
    K = camera.intrinsics
    d_cam = np.stack(
        [(px + 0.5 - K.cx) / K.fx, (py + 0.5 - K.cy) / K.fy, np.ones_like(px)], axis=-1
    )
    d = d_cam @ camera.pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def pixel_ray(camera: Camera, px: float, py: float) -> Ray:
    o, d = pixel_rays(camera, px, py)
    return Ray(o, d, camera.near, camera.far)


def image_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rays for every pixel in row-major order, shapes ``(H*W, 3)``."""
    py, px = np.mgrid[0 : camera.height, 0 : camera.width]
    return pixel_rays(camera, px.ravel().astype(np.float64), py.ravel().astype(np.float64))


def project_points(camera: Camera, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points to continuous image coordinates; returns (u, v, depth).

    Pixel ``(i, j)`` covers ``u in [i, i+1)``, so the ray of ``pixel_ray(c, i, j)`` projects
    back to ``(i + 0.5, j + 0.5)``. ``depth <= 0`` means behind the camera (u, v are NaN).
    """
    p = camera.pose.world_to_camera(np.asarray(points, dtype=np.float64))
    z = p[..., 2]
    K = camera.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        front = z > 0
        px = np.where(front, K.fx * p[..., 0] / z + K.cx, np.nan)
        py = np.where(front, K.fy * p[..., 1] / z + K.cy, np.nan)
    return px, py, z


def project(camera: Camera, point):
    """Return ``(px, py, depth)`` or ``None`` when the point is behind the camera."""
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise DomainError("point must be finite")
    px, py, z = project_points(camera, point)
    if z <= 0:
        return None
    return float(px), float(py), float(z)


def in_frustum_points(camera: Camera, points) -> np.ndarray:
    u, v, z = project_points(camera, points)
    with np.errstate(invalid="ignore"):
        return (
            (z > 0)
            & (u >= 0) & (u < camera.width)
            & (v >= 0) & (v < camera.height)
            & (z >= camera.near) & (z <= camera.far)
        )


def in_frustum(camera: Camera, point) -> bool:
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise DomainError("point must be finite")
    return bool(in_frustum_points(camera, point))


def contract_points(points) -> np.ndarray:
    """Mip-NeRF 360 style contraction of unbounded space into a radius-2 ball."""
    p = np.asarray(points, dtype=np.float64)
    n = np.linalg.norm(p, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        outside = (2.0 - 1.0 / n) * (p / n)
    return np.where(n <= 1.0, p, outside)


def contract(point) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise DomainError("point must be finite")
    return contract_points(point)


def look_at(eye, target, up) -> Pose:
    """Pose at ``eye`` whose +z axis points at ``target``; ``up`` is the world-space up
    direction (image rows grow opposite to it). Falls back to world +x when ``up`` is
    parallel to the viewing direction."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    dist = np.linalg.norm(fwd)
    if dist < 1e-12:
        raise DomainError("look_at target coincides with the camera center")
    z = fwd / dist
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    if np.linalg.norm(np.cross(z, up)) < 1e-9:
        up = np.array([1.0, 0.0, 0.0])
        if np.linalg.norm(np.cross(z, up)) < 1e-9:
            up = np.array([0.0, 1.0, 0.0])
    x = np.cross(-up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def circle_trajectory(center: Pose, radius: float, m: int, look_at_point) -> list[Pose]:
    """``m`` poses evenly spaced on a circle in the center pose's local x-y plane, all
    looking at ``look_at_point`` with the center pose's up vector."""
    if radius < 0:
        raise DomainError("radius must be non-negative")
    if m < 1:
        raise DomainError("m must be >= 1")
    R = center.rotation
    up = -R[:, 1]
    poses = []
    for j in range(m):
        theta = 2.0 * np.pi * j / m
        eye = center.translation + radius * (np.cos(theta) * R[:, 0] + np.sin(theta) * R[:, 1])
        poses.append(look_at(eye, look_at_point, up))
    return poses


def camera_set_hash(cameras) -> str:
    """Short digest identifying an ordered set of cameras (poses, intrinsics, bounds)."""
    h = hashlib.sha256()
    for c in cameras:
        h.update(np.asarray(c.pose.matrix, dtype="<f8").tobytes())
        h.update(np.asarray(c.intrinsics.matrix, dtype="<f8").tobytes())
        h.update(struct.pack("<2d", c.near, c.far))
    return h.hexdigest()[:16]
