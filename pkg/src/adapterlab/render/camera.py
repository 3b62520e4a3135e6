"""Pinhole camera with OpenCV axis convention (x right, y down, z forward).

Depth everywhere in the renderer is camera-space z, not Euclidean ray length.
Ray directions returned by :meth:`Camera.ray_directions` are scaled so their
camera-space z component is exactly 1, which makes the ray parameter equal to
z-depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Camera:
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    focal: float
    principal_point: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "principal_point", (float(self.principal_point[0]), float(self.principal_point[1])))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, focal, width, height):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        n = np.linalg.norm(right)
        if n < 1e-12:
            raise ValueError("up vector parallel to viewing direction")
        right /= n
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye, focal, (width / 2.0, height / 2.0), width, height)

    @classmethod
    def orbit(cls, azimuth_deg, elevation_deg, distance, *, focal, width, height, target=(0.0, 0.0, 0.0)):
        az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
        eye = np.asarray(target) + distance * np.array(
            [np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)]
        )
        return cls.look_at(eye, target, focal=focal, width=width, height=height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, width: int, height: int | None = None) -> "Camera":
        height = width if height is None else height
        sx, sy = width / self.width, height / self.height
        if abs(sx - sy) > 1e-12:
            raise ValueError("anisotropic rescale not supported")
        cx, cy = self.principal_point
        return Camera(self.rotation, self.translation, self.focal * sx, (cx * sx, cy * sy), width, height)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def project(self, points: np.ndarray):
        """Return pixel coordinates (u, v) and z-depth for world points."""
        pc = self.world_to_camera(np.asarray(points, dtype=np.float64))
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[..., 0] / z + self.principal_point[0]
            v = self.focal * pc[..., 1] / z + self.principal_point[1]
        return u, v, z

    def pixel_rays(self) -> np.ndarray:
        """Camera-space directions (H, W, 3) through pixel centres, with z == 1."""
        cx, cy = self.principal_point
        u = (np.arange(self.width) + 0.5 - cx) / self.focal
        v = (np.arange(self.height) + 0.5 - cy) / self.focal
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)

    def ray_directions(self) -> np.ndarray:
        """World-space ray directions (H, W, 3) whose camera z component is 1."""
        return self.pixel_rays() @ self.rotation
