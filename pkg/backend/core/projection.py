# backend/core/projection.py
# Pinhole camera (OpenCV convention: x right, y down, z forward) and Proj.

import logging
from dataclasses import dataclass

import numpy as np

from core.errors import ConfigError

NEAR_EPS = 1e-6
SENTINEL_PIXEL = (-1.0, -1.0)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Camera:
    focal: np.ndarray
    principal: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    resolution: tuple
    name: str = ""

    def __post_init__(self):
        focal = np.array(self.focal, dtype=np.float64).reshape(2)
        principal = np.array(self.principal, dtype=np.float64).reshape(2)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        W, H = (int(x) for x in self.resolution)
        if np.any(focal <= 0):
            raise ConfigError(f"Camera '{self.name}': focal lengths must be positive")
        if W < 1 or H < 1:
            raise ConfigError(f"Camera '{self.name}': resolution must be at least 1x1, got {W}x{H}")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ConfigError(f"Camera '{self.name}': rotation must be orthonormal with det +1")
        for arr in (focal, principal, R, t):
            arr.setflags(write=False)
        object.__setattr__(self, "focal", focal)
        object.__setattr__(self, "principal", principal)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "resolution", (W, H))

    @property
    def width(self):
        return self.resolution[0]

    @property
    def height(self):
        return self.resolution[1]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rescaled(self, width, height):
        """Same pose, intrinsics scaled to a new resolution."""
        sx, sy = width / self.width, height / self.height
        focal = self.focal * (sx, sy)
        principal = (self.principal + 0.5) * (sx, sy) - 0.5
        return Camera(focal, principal, self.rotation, self.translation, (width, height), self.name)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), focal=300.0, resolution=(256, 256), name=""):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ConfigError("look_at: up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        W, H = resolution
        fx = fy = float(focal)
        return cls((fx, fy), ((W - 1) / 2.0, (H - 1) / 2.0), R, -R @ eye, (W, H), name)


@dataclass(frozen=True)
class ProjectedPoints:
    pixels: np.ndarray
    depths: np.ndarray
    in_front: np.ndarray

    def inside(self, resolution):
        """In front and within [-0.5, W-0.5) x [-0.5, H-0.5)."""
        W, H = resolution
        u, v = self.pixels[:, 0], self.pixels[:, 1]
        return self.in_front & (u >= -0.5) & (u < W - 0.5) & (v >= -0.5) & (v < H - 0.5)


def _positions(points):
    return np.asarray(getattr(points, "positions", points), dtype=np.float64)


def project(points, camera):
    cam = camera.world_to_camera(_positions(points))
    z = cam[:, 2]
    in_front = z > NEAR_EPS
    safe_z = np.where(in_front, z, 1.0)
    pixels = np.empty((len(cam), 2))
    pixels[:, 0] = camera.focal[0] * cam[:, 0] / safe_z + camera.principal[0]
    pixels[:, 1] = camera.focal[1] * cam[:, 1] / safe_z + camera.principal[1]
    if not in_front.all():
        logger.debug("camera %s: %d points behind the near plane", camera.name, int((~in_front).sum()))
    pixels[~in_front] = SENTINEL_PIXEL
    return ProjectedPoints(pixels, z, in_front)


def unproject(pixels, depths, camera):
    """Inverse of project for points in front of the camera."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    cam = np.empty((len(pixels), 3))
    cam[:, 0] = (pixels[:, 0] - camera.principal[0]) / camera.focal[0] * depths
    cam[:, 1] = (pixels[:, 1] - camera.principal[1]) / camera.focal[1] * depths
    cam[:, 2] = depths
    return (cam - camera.translation) @ camera.rotation
