"""Pinhole cameras with yaw/pitch/roll orientation.

World frame is z-up (x east, y north). Camera frame follows the OpenCV
convention: x right, y down, z forward. Yaw is measured counter-clockwise
from +x in the ground plane, negative pitch looks down.

Pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)``; its center sits
at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def focal(self) -> float:
        """Focal length in pixels (horizontal fov, square pixels)."""
        return 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def cx(self) -> float:
        return 0.5 * self.width

    @property
    def cy(self) -> float:
        return 0.5 * self.height

    def matrix(self) -> np.ndarray:
        f = self.focal
        return np.array([[f, 0.0, self.cx], [0.0, f, self.cy], [0.0, 0.0, 1.0]])

    def resized(self, width: int, height: int) -> Intrinsics:
        return replace(self, width=int(width), height=int(height))


def rotation_from_euler(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """Camera-to-world rotation; columns are the camera right, down and forward axes."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, cp * sy, sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    if roll:
        cr, sr = math.cos(roll), math.sin(roll)
        right, down = cr * right + sr * down, -sr * right + cr * down
    return np.stack([right, down, forward], axis=1)


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    yaw: float
    pitch: float
    intrinsics: Intrinsics
    roll: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.yaw, self.pitch, self.roll)

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(R, t)`` with ``x_cam = R @ x_world + t``."""
        r_cw = self.rotation.T
        return r_cw, -r_cw @ np.asarray(self.position, dtype=float)

    def with_resolution(self, width: int, height: int) -> CameraPose:
        return replace(self, intrinsics=self.intrinsics.resized(width, height))

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space ray directions through every pixel center, shape (H, W, 3)."""
        k = self.intrinsics
        cols = np.arange(k.width) + 0.5
        rows = np.arange(k.height) + 0.5
        u, v = np.meshgrid(cols, rows)
        d = np.stack([(u - k.cx) / k.focal, (v - k.cy) / k.focal, np.ones_like(u)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to continuous pixel coordinates; returns (uv, z_cam)."""
        r, t = self.world_to_camera()
        pc = np.asarray(points, dtype=float) @ r.T + t
        k = self.intrinsics
        z = pc[..., 2]
        uv = np.stack([k.focal * pc[..., 0] / z + k.cx, k.focal * pc[..., 1] / z + k.cy], axis=-1)
        return uv, z

    def to_dict(self) -> dict:
        return {
            "position": [float(x) for x in self.position],
            "yaw": float(self.yaw),
            "pitch": float(self.pitch),
            "roll": float(self.roll),
            "intrinsics": {
                "fov_deg": float(self.intrinsics.fov_deg),
                "width": int(self.intrinsics.width),
                "height": int(self.intrinsics.height),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraPose:
        return cls(
            position=tuple(float(x) for x in d["position"]),
            yaw=float(d["yaw"]),
            pitch=float(d["pitch"]),
            roll=float(d.get("roll", 0.0)),
            intrinsics=Intrinsics(**d["intrinsics"]),
        )
