"""Procedural box-city scenes, camera trajectories, reference rendering and export."""

from .export import (
    DatasetManifest,
    ManifestExistsError,
    PairRecord,
    export_dataset,
    generate_dataset,
    load_depth,
    load_png,
    save_depth,
    save_png,
)
from .raycast import SKY_RGB, render_reference
from .scene import Box, BoxScene, Corridor, Ground, SceneGenerationError, generate_scene, scene_lanes
from .trajectory import TrajectorySpec, lane_samples, sample_lane_poses, snap_yaw

__all__ = [
    "Box",
    "BoxScene",
    "Corridor",
    "DatasetManifest",
    "Ground",
    "ManifestExistsError",
    "PairRecord",
    "SKY_RGB",
    "SceneGenerationError",
    "TrajectorySpec",
    "export_dataset",
    "generate_dataset",
    "generate_scene",
    "lane_samples",
    "load_depth",
    "load_png",
    "render_reference",
    "sample_lane_poses",
    "save_depth",
    "save_png",
    "scene_lanes",
    "snap_yaw",
]
