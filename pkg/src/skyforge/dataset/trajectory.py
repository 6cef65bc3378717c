from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..camera import CameraPose, Intrinsics


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera protocol for one lane: sample spacing, altitudes, pitches, yaw quantum."""

    spacing_m: float = 2.0
    aerial_altitude_m: float = 52.0
    ground_altitude_m: float = 2.0
    aerial_pitch_rad: float = -math.pi / 4
    ground_pitch_rad: float = 0.0
    yaw_quantum_rad: float = math.pi / 4
    fov_deg: float = 70.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.spacing_m <= 0:
            raise ValueError("spacing_m must be positive")
        if self.yaw_quantum_rad <= 0:
            raise ValueError("yaw_quantum_rad must be positive")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fov_deg, self.width, self.height)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def lane_samples(lane, spacing: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Points every ``spacing`` meters of arc length along a polyline.

    Returns ``(arc, xy, heading)`` where heading is the direction of the
    segment the sample lies on; a sample exactly on a vertex takes the
    outgoing segment (the incoming one at the final vertex).
    """
    pts = np.asarray(lane, dtype=float)
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 0
    seg, seg_len = seg[keep], seg_len[keep]
    starts = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = starts[-1]
    if total < spacing:
        return np.zeros(0), np.zeros((0, 2)), np.zeros(0)
    n = int(math.floor(total / spacing + 1e-9)) + 1
    arc = np.arange(n) * spacing
    idx = np.clip(np.searchsorted(starts, arc, side="right") - 1, 0, len(seg) - 1)
    local = arc - starts[idx]
    anchor = pts[:-1][keep]
    xy = anchor[idx] + seg[idx] / seg_len[idx, None] * local[:, None]
    heading = np.arctan2(seg[idx, 1], seg[idx, 0])
    return arc, xy, heading


def snap_yaw(angle: float, quantum: float) -> float:
    """Nearest multiple of ``quantum`` in [0, 2*pi)."""
    n = int(round(2 * math.pi / quantum))
    k = int(round(angle / quantum)) % n
    return k * quantum


def sample_lane_poses(scene, lane, spec: TrajectorySpec) -> tuple[list[CameraPose], list[CameraPose]]:
    """Index-paired aerial and ground poses sampled along ``lane``.

    ``scene`` is accepted for interface symmetry; the street corridors are
    clear by construction so no clearance adjustment is applied.
    """
    _, xy, heading = lane_samples(lane, spec.spacing_m)
    k = spec.intrinsics
    aerial, ground = [], []
    for (x, y), h in zip(xy, heading):
        yaw = snap_yaw(float(h), spec.yaw_quantum_rad)
        x, y = float(x), float(y)
        ground.append(CameraPose((x, y, spec.ground_altitude_m), yaw, spec.ground_pitch_rad, k))
        aerial.append(CameraPose((x, y, spec.aerial_altitude_m), yaw, spec.aerial_pitch_rad, k))
    return aerial, ground
