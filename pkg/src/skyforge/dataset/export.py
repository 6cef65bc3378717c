"""Writing and reading geo-aligned aerial/ground datasets on disk.

Layout under ``out_dir``::

    manifest.json
    scene_000/<lane>/aerial/0000.png
    scene_000/<lane>/ground/0000.png
    scene_000/<lane>/depth/0000.f32      (aerial depth, little-endian float32, row-major)
    scene_000/<lane>/depth/header.json   ({"width", "height", "dtype"})
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..camera import CameraPose
from .raycast import render_reference
from .scene import BoxScene
from .trajectory import TrajectorySpec, sample_lane_poses

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


class ManifestExistsError(FileExistsError):
    pass


def save_png(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_depth(path, depth: np.ndarray) -> None:
    np.asarray(depth, dtype="<f4").tofile(path)


def load_depth(path, width: int, height: int) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(height, width).astype(np.float64)


@dataclass(frozen=True)
class PairRecord:
    index: int
    aerial_image: str
    aerial_pose: CameraPose
    ground_image: str
    ground_pose: CameraPose
    depth: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "aerial_image": self.aerial_image,
            "aerial_pose": self.aerial_pose.to_dict(),
            "ground_image": self.ground_image,
            "ground_pose": self.ground_pose.to_dict(),
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PairRecord:
        return cls(
            index=int(d["index"]),
            aerial_image=d["aerial_image"],
            aerial_pose=CameraPose.from_dict(d["aerial_pose"]),
            ground_image=d["ground_image"],
            ground_pose=CameraPose.from_dict(d["ground_pose"]),
            depth=d["depth"],
        )


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    spec: TrajectorySpec
    scenes: list[dict]  # {"scene_id", "split", "descriptor", "lanes": [{"lane_id", "polyline", "records"}]}
    schema_version: int = SCHEMA_VERSION

    # -- queries ---------------------------------------------------------
    def scene_ids(self, split: str | None = None) -> list[str]:
        return [s["scene_id"] for s in self.scenes if split is None or s["split"] == split]

    def scene(self, scene_id: str) -> dict:
        for s in self.scenes:
            if s["scene_id"] == scene_id:
                return s
        raise KeyError(scene_id)

    def box_scene(self, scene_id: str) -> BoxScene:
        return BoxScene.from_dict(self.scene(scene_id)["descriptor"])

    def lanes(self, scene_id: str) -> list[dict]:
        return self.scene(scene_id)["lanes"]

    def records(self, scene_id: str, lane_id: str | None = None) -> list[PairRecord]:
        out = []
        for lane in self.lanes(scene_id):
            if lane_id is None or lane["lane_id"] == lane_id:
                out.extend(lane["records"])
        return out

    def path(self, rel: str) -> Path:
        return self.root / rel

    def load_image(self, rel: str) -> np.ndarray:
        return load_png(self.path(rel))

    def load_depth(self, rel: str) -> np.ndarray:
        header = json.loads((self.path(rel).parent / "header.json").read_text())
        return load_depth(self.path(rel), header["width"], header["height"])

    # -- (de)serialization -----------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "trajectory": self.spec.to_dict(),
            "scenes": [
                {
                    "scene_id": s["scene_id"],
                    "split": s["split"],
                    "descriptor": s["descriptor"],
                    "lanes": [
                        {
                            "lane_id": lane["lane_id"],
                            "polyline": lane["polyline"],
                            "records": [r.to_dict() for r in lane["records"]],
                        }
                        for lane in s["lanes"]
                    ],
                }
                for s in self.scenes
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {d.get('schema_version')!r}")
        scenes = []
        for s in d["scenes"]:
            lanes = [
                {
                    "lane_id": lane["lane_id"],
                    "polyline": lane["polyline"],
                    "records": [PairRecord.from_dict(r) for r in lane["records"]],
                }
                for lane in s["lanes"]
            ]
            scenes.append({**s, "lanes": lanes})
        return cls(path.parent, int(d["seed"]), TrajectorySpec(**d["trajectory"]), scenes)

    def validate(self) -> None:
        """Check pairing and that every referenced file exists."""
        for s in self.scenes:
            for lane in s["lanes"]:
                for r in lane["records"]:
                    a, g = r.aerial_pose.position, r.ground_pose.position
                    if a[0] != g[0] or a[1] != g[1]:
                        raise ValueError(f"pair {r.index} of {s['scene_id']}/{lane['lane_id']} not geo-aligned")
                    for rel in (r.aerial_image, r.ground_image, r.depth):
                        if not self.path(rel).is_file():
                            raise FileNotFoundError(self.path(rel))


def export_dataset(
    scenes: list[BoxScene],
    lanes: list[dict[str, np.ndarray]],
    spec: TrajectorySpec,
    out_dir,
    seed: int = 0,
    force: bool = False,
) -> DatasetManifest:
    """Render every lane of every scene and write images, depths and the manifest.

    The last scene is held out as the test split.
    """
    if len(scenes) < 2:
        raise ValueError("need at least 2 scenes so one can be held out")
    if len(lanes) != len(scenes):
        raise ValueError("one lane dict per scene is required")
    out = Path(out_dir)
    manifest_path = out / MANIFEST_NAME
    if manifest_path.exists() and not force:
        raise ManifestExistsError(f"{manifest_path} exists; pass force=True to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    entries = []
    for si, (scene, scene_lanes) in enumerate(zip(scenes, lanes)):
        scene_id = f"scene_{si:03d}"
        lane_entries = []
        for lane_id in sorted(scene_lanes):
            poly = np.asarray(scene_lanes[lane_id], dtype=float)
            aerial, ground = sample_lane_poses(scene, poly, spec)
            base = Path(scene_id) / lane_id
            for view in ("aerial", "ground", "depth"):
                (out / base / view).mkdir(parents=True, exist_ok=True)
            (out / base / "depth" / "header.json").write_text(
                json.dumps({"width": spec.width, "height": spec.height, "dtype": "<f4"}, sort_keys=True)
            )
            records = []
            for i, (pa, pg) in enumerate(zip(aerial, ground)):
                rgb_a, depth_a = render_reference(scene, pa)
                rgb_g, _ = render_reference(scene, pg)
                name = f"{i:04d}"
                rec = PairRecord(
                    index=i,
                    aerial_image=str(base / "aerial" / f"{name}.png"),
                    aerial_pose=pa,
                    ground_image=str(base / "ground" / f"{name}.png"),
                    ground_pose=pg,
                    depth=str(base / "depth" / f"{name}.f32"),
                )
                save_png(out / rec.aerial_image, rgb_a)
                save_png(out / rec.ground_image, rgb_g)
                save_depth(out / rec.depth, depth_a)
                records.append(rec)
            lane_entries.append({"lane_id": lane_id, "polyline": poly.tolist(), "records": records})
        entries.append(
            {
                "scene_id": scene_id,
                "split": "test" if si == len(scenes) - 1 else "train",
                "descriptor": scene.to_dict(),
                "lanes": lane_entries,
            }
        )

    manifest = DatasetManifest(out, int(seed), spec, entries)
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(manifest.to_json())
    os.replace(tmp, manifest_path)
    return manifest


def generate_dataset(
    seed: int,
    n_scenes: int,
    n_buildings: int,
    out_dir,
    spec: TrajectorySpec | None = None,
    bounds=None,
    lane_ids: tuple[str, ...] | None = None,
    force: bool = False,
) -> DatasetManifest:
    """Generate ``n_scenes`` box cities from per-scene seeds and export them."""
    from .scene import DEFAULT_BOUNDS, generate_scene, scene_lanes

    spec = spec or TrajectorySpec()
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes)
    scenes, lanes = [], []
    for s in seeds:
        scene = generate_scene(int(s), n_buildings, bounds or DEFAULT_BOUNDS)
        all_lanes = scene_lanes(scene)
        if lane_ids is not None:
            all_lanes = {k: v for k, v in all_lanes.items() if k in lane_ids}
        scenes.append(scene)
        lanes.append(all_lanes)
    return export_dataset(scenes, lanes, spec, out_dir, seed=seed, force=force)
