"""3D Gaussian primitives: covariance, density, normals and scene storage.

Quaternions are stored ``(w, x, y, z)``. A Gaussian's covariance is
``R diag(s)^2 R^T`` where ``R`` is the quaternion's rotation and ``s`` the
per-axis scales.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

RECORD_FLOATS = 14  # mu:3, scales:3, quat:4, rgb:3, opacity:1


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


@dataclass(frozen=True)
class Gaussian3D:
    mu: np.ndarray
    scales: np.ndarray
    rot: np.ndarray
    rgb: np.ndarray
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=float))
        object.__setattr__(self, "rgb", np.asarray(self.rgb, dtype=float))
        q = np.asarray(self.rot, dtype=float)
        n = np.linalg.norm(q)
        if not n > 0:
            raise ValueError("rotation quaternion must be non-zero")
        object.__setattr__(self, "rot", q / n)
        if np.any(self.scales <= 0):
            raise ValueError("scales must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.rot)


def covariance(g: Gaussian3D) -> np.ndarray:
    r = g.rotation
    cov = r @ np.diag(g.scales**2) @ r.T
    return 0.5 * (cov + cov.T)


def evaluate_density(g: Gaussian3D, x) -> float:
    """Unnormalized Gaussian density ``exp(-0.5 d^T Sigma^-1 d)``, ``d = x - mu``."""
    # Sigma^-1 = R diag(1/s^2) R^T, so the quadratic form is |diag(1/s) R^T d|^2.
    local = (g.rotation.T @ (np.asarray(x, dtype=float) - g.mu)) / g.scales
    return float(np.exp(-0.5 * local @ local))


def gaussian_normal(g: Gaussian3D) -> np.ndarray:
    """Rotation-frame axis of the smallest scale; ties go to the lowest axis index."""
    return g.rotation[:, int(np.argmin(g.scales))].copy()


# ---------------------------------------------------------------------------
# batched torch versions used by the renderer and the optimizer


def quat_to_rotmat_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]  # fmt: skip
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def covariance_torch(scales: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    r = quat_to_rotmat_torch(quats)
    m = r * scales[..., None, :]
    return m @ m.transpose(-1, -2)


def normals_torch(scales: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    r = quat_to_rotmat_torch(quats)
    idx = torch.argmin(scales.detach(), dim=-1)
    return torch.gather(r, -1, idx[..., None, None].expand(*idx.shape, 3, 1)).squeeze(-1)


# ---------------------------------------------------------------------------


@dataclass
class SceneModel:
    """An optimized Gaussian set, stored as parallel arrays.

    ``gaussians`` exposes the same data as a list of ``Gaussian3D``.
    """

    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    bounds: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(n, 4)
        self.rgb = np.asarray(self.rgb, dtype=float).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, dtype=float).reshape(n)
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(2, 3)
        self.background = np.asarray(self.background, dtype=float).reshape(3)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [
            Gaussian3D(self.means[i], self.scales[i], self.quats[i], self.rgb[i], float(self.opacity[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_gaussians(cls, gaussians, bounds, background=(0.0, 0.0, 0.0)) -> SceneModel:
        gs = list(gaussians)
        return cls(
            means=[g.mu for g in gs],
            scales=[g.scales for g in gs],
            quats=[g.rot for g in gs],
            rgb=[g.rgb for g in gs],
            opacity=[g.opacity for g in gs],
            bounds=bounds,
            background=background,
        )

    @classmethod
    def empty(cls, bounds, background=(0.0, 0.0, 0.0)) -> SceneModel:
        z = np.zeros((0, 3))
        return cls(z, z, np.zeros((0, 4)), z, np.zeros(0), bounds, background)

    def out_of_bounds(self) -> np.ndarray:
        """Mask of Gaussians whose center lies outside ``bounds`` (soft invariant)."""
        return np.any((self.means < self.bounds[0]) | (self.means > self.bounds[1]), axis=1)

    def subset(self, mask) -> SceneModel:
        return SceneModel(
            self.means[mask], self.scales[mask], self.quats[mask], self.rgb[mask],
            self.opacity[mask], self.bounds, self.background,
        )  # fmt: skip

    def records(self) -> np.ndarray:
        return np.concatenate(
            [self.means, self.scales, self.quats, self.rgb, self.opacity[:, None]], axis=1
        ).reshape(-1, RECORD_FLOATS)

    def save(self, path) -> None:
        """Binary records plus a ``.json`` sidecar holding bounds and background."""
        path = Path(path)
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(self)))
            f.write(self.records().astype("<f4").tobytes())
        sidecar = {"bounds": self.bounds.tolist(), "background": self.background.tolist(), "count": len(self)}
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))

    @classmethod
    def load(cls, path) -> SceneModel:
        path = Path(path)
        raw = path.read_bytes()
        (n,) = struct.unpack_from("<I", raw, 0)
        rec = np.frombuffer(raw, dtype="<f4", count=n * RECORD_FLOATS, offset=4).astype(np.float64)
        rec = rec.reshape(n, RECORD_FLOATS)
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        bounds = meta.get("bounds", [[-np.inf] * 3, [np.inf] * 3])
        background = meta.get("background", [0.0, 0.0, 0.0])
        return cls(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10:13], rec[:, 13], bounds, background)


class GaussianParams(torch.nn.Module):
    """Unconstrained optimizer parameterization of a ``SceneModel``.

    Scales are stored as logs and opacity as a logit so both stay in range
    by construction; quaternions are normalized on use.
    """

    def __init__(self, scene: SceneModel, dtype=torch.float32, learn_background: bool = False):
        super().__init__()
        t = lambda a: torch.nn.Parameter(torch.as_tensor(np.asarray(a), dtype=dtype).clone())  # noqa: E731
        op = np.clip(scene.opacity, 1e-6, 1 - 1e-6)
        self.means = t(scene.means)
        self.log_scales = t(np.log(scene.scales))
        self.quats = t(scene.quats)
        self.rgb = t(scene.rgb)
        self.opacity_logit = t(np.log(op / (1 - op)))
        self.background = t(scene.background)
        self.background.requires_grad_(learn_background)
        self.bounds = np.asarray(scene.bounds, dtype=float)

    def __len__(self) -> int:
        return self.means.shape[0]

    def activated(self) -> dict[str, torch.Tensor]:
        return {
            "means": self.means,
            "scales": torch.exp(self.log_scales),
            "quats": self.quats,
            "rgb": self.rgb,
            "opacity": torch.sigmoid(self.opacity_logit),
            "background": self.background,
        }

    def to_scene(self) -> SceneModel:
        with torch.no_grad():
            a = self.activated()
            q = a["quats"] / a["quats"].norm(dim=-1, keepdim=True)
            return SceneModel(
                a["means"].double().numpy(),
                a["scales"].double().numpy(),
                q.double().numpy(),
                a["rgb"].clamp(0, 1).double().numpy(),
                a["opacity"].double().numpy(),
                self.bounds,
                a["background"].double().numpy(),
            )
