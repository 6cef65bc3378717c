"""Procedural box-city scenes: colored axis-aligned buildings on a ground plane."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Face order used for per-face colors: -x, +x, -y, +y, -z, +z.
FACE_NAMES = ("-x", "+x", "-y", "+y", "-z", "+z")


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    face_rgb: tuple[tuple[float, float, float], ...]

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > self.lo) and np.all(p < self.hi))


@dataclass(frozen=True)
class Ground:
    extent: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    rgb: tuple[float, float, float] = (0.42, 0.42, 0.40)
    checker_seed: int | None = None
    checker_cell_m: float = 4.0


@dataclass(frozen=True)
class Corridor:
    """A clear straight street: ``axis`` is the travel axis, ``offset`` the cross coordinate."""

    axis: str
    offset: float
    width: float


@dataclass(frozen=True)
class BoxScene:
    boxes: tuple[Box, ...]
    ground: Ground
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]]
    seed: int
    corridors: tuple[Corridor, ...] = field(default=())

    @property
    def extent(self) -> float:
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        return float(np.max(hi[:2] - lo[:2]))

    def inside_any_box(self, p) -> bool:
        return any(b.contains(p) for b in self.boxes)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "bounds": [list(map(float, self.bounds[0])), list(map(float, self.bounds[1]))],
            "ground": {
                "extent": list(map(float, self.ground.extent)),
                "rgb": list(map(float, self.ground.rgb)),
                "checker_seed": self.ground.checker_seed,
                "checker_cell_m": float(self.ground.checker_cell_m),
            },
            "corridors": [
                {"axis": c.axis, "offset": float(c.offset), "width": float(c.width)}
                for c in self.corridors
            ],
            "boxes": [
                {
                    "center": list(map(float, b.center)),
                    "size": list(map(float, b.size)),
                    "face_rgb": [list(map(float, c)) for c in b.face_rgb],
                }
                for b in self.boxes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BoxScene:
        g = d["ground"]
        return cls(
            boxes=tuple(
                Box(tuple(b["center"]), tuple(b["size"]), tuple(tuple(c) for c in b["face_rgb"]))
                for b in d["boxes"]
            ),
            ground=Ground(tuple(g["extent"]), tuple(g["rgb"]), g["checker_seed"], g["checker_cell_m"]),
            bounds=(tuple(d["bounds"][0]), tuple(d["bounds"][1])),
            seed=int(d["seed"]),
            corridors=tuple(Corridor(c["axis"], c["offset"], c["width"]) for c in d["corridors"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


DEFAULT_BOUNDS = ((-50.0, -50.0, 0.0), (50.0, 50.0, 40.0))


def _footprints_overlap(a, b, gap):
    # a, b: (xmin, xmax, ymin, ymax)
    return not (a[1] + gap <= b[0] or b[1] + gap <= a[0] or a[3] + gap <= b[2] or b[3] + gap <= a[2])


def _building_colors(rng: np.random.Generator) -> tuple[tuple[float, float, float], ...]:
    base = rng.uniform(0.25, 0.9, size=3)
    facades = [np.clip(base * rng.uniform(0.9, 1.1), 0.0, 1.0) for _ in range(4)]
    roof = np.clip(0.35 * base + rng.uniform(0.1, 0.3), 0.0, 1.0)
    bottom = 0.5 * base
    faces = facades + [bottom, roof]
    return tuple(tuple(float(x) for x in f) for f in faces)


def generate_scene(
    seed: int,
    n_buildings: int,
    bounds=DEFAULT_BOUNDS,
    corridor_width: float = 8.0,
    checker: bool = True,
    max_attempts: int = 200,
) -> BoxScene:
    """Sample a box city with two perpendicular clear streets.

    Buildings are rejection-sampled so that footprints never overlap each
    other or the streets. Raises ``SceneGenerationError`` when the streets or
    a building cannot be placed within ``max_attempts`` draws.
    """
    if n_buildings < 0:
        raise ValueError("n_buildings must be >= 0")
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if np.any(hi <= lo):
        raise ValueError("bounds must be non-degenerate")
    if corridor_width < 6.0:
        raise ValueError("corridor must be at least 6 m wide")
    rng = np.random.default_rng(seed)

    corridors = []
    for axis, cross in (("x", 1), ("y", 0)):
        span = hi[cross] - lo[cross]
        margin = 0.25 * span
        for _ in range(max_attempts):
            off = rng.uniform(lo[cross] + margin, hi[cross] - margin)
            if off - corridor_width / 2 > lo[cross] and off + corridor_width / 2 < hi[cross]:
                corridors.append(Corridor(axis, float(off), float(corridor_width)))
                break
        else:
            raise SceneGenerationError(f"could not place the {axis}-street within {max_attempts} attempts")

    blocked = []
    for c in corridors:
        half = c.width / 2
        if c.axis == "x":
            blocked.append((lo[0], hi[0], c.offset - half, c.offset + half))
        else:
            blocked.append((c.offset - half, c.offset + half, lo[1], hi[1]))

    boxes: list[Box] = []
    placed: list[tuple] = []
    height_cap = min(30.0, hi[2] - lo[2])
    for k in range(n_buildings):
        for _ in range(max_attempts):
            w, d = rng.uniform(6.0, 16.0, size=2)
            h = rng.uniform(min(6.0, height_cap), height_cap)
            cx = rng.uniform(lo[0] + w / 2, hi[0] - w / 2) if hi[0] - lo[0] > w else None
            cy = rng.uniform(lo[1] + d / 2, hi[1] - d / 2) if hi[1] - lo[1] > d else None
            if cx is None or cy is None:
                continue
            fp = (cx - w / 2, cx + w / 2, cy - d / 2, cy + d / 2)
            if any(_footprints_overlap(fp, b, 1.0) for b in blocked):
                continue
            if any(_footprints_overlap(fp, b, 1.0) for b in placed):
                continue
            placed.append(fp)
            boxes.append(
                Box(
                    center=(float(cx), float(cy), float(lo[2] + h / 2)),
                    size=(float(w), float(d), float(h)),
                    face_rgb=_building_colors(rng),
                )
            )
            break
        else:
            raise SceneGenerationError(f"could not place building {k} within {max_attempts} attempts")

    ground = Ground(
        extent=(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])),
        checker_seed=int(seed) if checker else None,
    )
    return BoxScene(
        boxes=tuple(boxes),
        ground=ground,
        bounds=(tuple(map(float, lo)), tuple(map(float, hi))),
        seed=int(seed),
        corridors=tuple(corridors),
    )


def scene_lanes(scene: BoxScene, margin: float = 2.0) -> dict[str, np.ndarray]:
    """Polylines running down the center of the scene's streets.

    Returns the two straight streets and an L-shaped turn at their crossing.
    """
    lo, hi = np.asarray(scene.bounds[0]), np.asarray(scene.bounds[1])
    lanes: dict[str, np.ndarray] = {}
    by_axis = {c.axis: c for c in scene.corridors}
    if "x" in by_axis:
        y = by_axis["x"].offset
        lanes["street_x"] = np.array([[lo[0] + margin, y], [hi[0] - margin, y]])
    if "y" in by_axis:
        x = by_axis["y"].offset
        lanes["street_y"] = np.array([[x, lo[1] + margin], [x, hi[1] - margin]])
    if "x" in by_axis and "y" in by_axis:
        x, y = by_axis["y"].offset, by_axis["x"].offset
        lanes["turn"] = np.array([[lo[0] + margin, y], [x, y], [x, hi[1] - margin]])
    return lanes
