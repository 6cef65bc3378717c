"""Reference ray caster for box scenes; the ground-truth renderer of the dataset."""

from __future__ import annotations

import numpy as np

from ..camera import CameraPose
from .scene import BoxScene

SKY_RGB = np.array([0.55, 0.72, 0.92])
SUN_DIR = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])
AMBIENT = 0.35


def lambert(normal: np.ndarray) -> np.ndarray:
    return AMBIENT + (1.0 - AMBIENT) * np.clip(normal @ SUN_DIR, 0.0, None)


def _checker_factor(x: np.ndarray, y: np.ndarray, seed: int, cell: float) -> np.ndarray:
    i = np.floor(x / cell).astype(np.int64)
    j = np.floor(y / cell).astype(np.int64)
    h = (i * 73856093) ^ (j * 19349663) ^ (int(seed) * 83492791)
    h = (h ^ (h >> 13)) * 1274126177
    h = (h ^ (h >> 16)) & 0xFFFF
    return 0.8 + 0.2 * (h / 65535.0)


def render_reference(scene: BoxScene, pose: CameraPose, resolution=None) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast ``scene`` from ``pose``.

    Returns ``(rgb, depth)`` with rgb in [0, 1], shape (H, W, 3), and depth the
    Euclidean distance to the nearest hit; sky pixels get ``SKY_RGB`` and
    depth 0.
    """
    if resolution is not None:
        pose = pose.with_resolution(*resolution)
    k = pose.intrinsics
    dirs = pose.pixel_rays().reshape(-1, 3)
    origin = np.asarray(pose.position, dtype=float)
    n = dirs.shape[0]

    best_t = np.full(n, np.inf)
    rgb = np.tile(SKY_RGB, (n, 1))

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs

        g = scene.ground
        dz = dirs[:, 2]
        t_ground = np.where(dz < 0, -origin[2] / dz, np.inf)
        hit = origin[None, :2] + t_ground[:, None] * dirs[:, :2]
        on = (
            np.isfinite(t_ground)
            & (t_ground > 0)
            & (hit[:, 0] >= g.extent[0])
            & (hit[:, 0] <= g.extent[1])
            & (hit[:, 1] >= g.extent[2])
            & (hit[:, 1] <= g.extent[3])
        )
        shade = lambert(np.array([0.0, 0.0, 1.0]))
        ground_col = np.asarray(g.rgb) * shade
        best_t[on] = t_ground[on]
        if g.checker_seed is None:
            rgb[on] = ground_col
        else:
            f = _checker_factor(hit[on, 0], hit[on, 1], g.checker_seed, g.checker_cell_m)
            rgb[on] = ground_col[None, :] * f[:, None]

        for box in scene.boxes:
            t1 = (box.lo - origin) * inv
            t2 = (box.hi - origin) * inv
            # parallel rays: (lo-o)*inf may be nan when lo==o; treat as non-separating
            tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
            tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
            t_near = tmin.max(axis=1)
            t_far = tmax.min(axis=1)
            m = (t_near <= t_far) & (t_near > 0) & (t_near < best_t)
            if not np.any(m):
                continue
            axis = np.argmax(tmin[m], axis=1)
            sign_pos = dirs[m, axis] < 0  # entering through the +axis face
            face = axis * 2 + sign_pos.astype(int)
            normals = np.zeros((axis.size, 3))
            normals[np.arange(axis.size), axis] = np.where(sign_pos, 1.0, -1.0)
            colors = np.asarray(box.face_rgb)[face]
            rgb[m] = colors * lambert(normals)[:, None]
            best_t[m] = t_near[m]

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return np.clip(rgb, 0.0, 1.0).reshape(k.height, k.width, 3), depth.reshape(k.height, k.width)
