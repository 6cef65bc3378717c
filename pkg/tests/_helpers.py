"""Shared oracles and fixtures for the test suite."""

import math

import numpy as np
import torch

from skyforge.camera import CameraPose, Intrinsics
from skyforge.gaussians import GaussianParams, SceneModel
from skyforge.splat import render_tensors


def central_difference_check(loss_fn, params, h, floor=1e-8, skip=None):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Returns ``{name: max relative error}``; relative error uses
    ``max(|analytic|, |numeric|, floor)`` as the denominator.
    """
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()))
    report = {}
    for (name, p), g in zip(params.items(), grads):
        worst = 0.0
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            if skip is not None and skip(name, i):
                continue
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            num = (up - down) / (2 * h)
            ana = g.view(-1)[i].item()
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        report[name] = worst
    return report


def look_at_pose(pos, target, fov=60.0, width=16, height=16):
    d = np.asarray(target, float) - np.asarray(pos, float)
    yaw = math.atan2(d[1], d[0])
    pitch = math.atan2(d[2], math.hypot(d[0], d[1]))
    return CameraPose(tuple(map(float, pos)), yaw, pitch, Intrinsics(fov, width, height))


def gradcheck_fixture(seed=0, n=5, res=16):
    """A <=5-Gaussian float64 scene in front of a 16x16 camera plus a random target."""
    rng = np.random.default_rng(seed)
    cam = look_at_pose((-6.0, 0.0, 1.0), (0.0, 0.0, 1.0), fov=60.0, width=res, height=res)
    means = np.column_stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.2, 1.2, n), rng.uniform(0.2, 1.8, n)])
    scene = SceneModel(
        means,
        rng.uniform(0.3, 0.9, size=(n, 3)),
        rng.normal(size=(n, 4)),
        rng.uniform(0.1, 0.9, size=(n, 3)),
        rng.uniform(0.3, 0.8, size=n),
        [[-5, -5, -5], [5, 5, 5]],
        [0.2, 0.3, 0.4],
    )
    params = GaussianParams(scene, dtype=torch.float64, learn_background=True)
    target = torch.as_tensor(rng.uniform(size=(res, res, 3)))
    return cam, params, target


def render_loss(params, cam, target, tile_size=None):
    out = render_tensors(**params.activated(), cam=cam, tile_size=tile_size)
    return ((out["rgb"] - target) ** 2).mean()


# flat-plane fixture: a checkered ground with no buildings, seen from four lanes
PLANE_BOUNDS = ((-30.0, -30.0, 0.0), (30.0, 30.0, 20.0))
PLANE_LANES = {
    "east": [[-20.0, 0.0], [20.0, 0.0]],
    "west": [[20.0, 6.0], [-20.0, 6.0]],
    "north": [[0.0, -20.0], [0.0, 20.0]],
    "south": [[6.0, 20.0], [6.0, -20.0]],
}
PLANE_POINTS = 400
# calibrated once, see the plane-fit baseline in the project notes
PLANE_FIT = dict(iterations=1500, s_target=0.1, densify_until=0.0, log_interval=250)
PLANE_LAMBDA_SDF = 0.5
PLANE_FIT_SECONDS: dict = {}  # wall time per lambda, filled by the plane_fits fixture


def plane_manifest(out_dir, width=32, height=32):
    from skyforge.dataset import BoxScene, Ground, TrajectorySpec, export_dataset

    ground = Ground((-30.0, 30.0, -30.0, 30.0), checker_seed=7, checker_cell_m=4.0)
    scenes = [BoxScene((), ground, PLANE_BOUNDS, s) for s in (0, 1)]
    lanes = [{k: np.asarray(v) for k, v in PLANE_LANES.items()}] * 2
    spec = TrajectorySpec(aerial_altitude_m=20.0, width=width, height=height)
    return export_dataset(scenes, lanes, spec, out_dir)


def tiny_pipeline_config(root, seed=3):
    """A 32x32 end-to-end config that runs every stage in seconds."""
    return {
        "schema_version": 1,
        "root": str(root),
        "seed": seed,
        "data": {"scenes": 2, "buildings": 4, "bounds": [[-40, -40, 0], [40, 40, 30]],
                 "trajectory": {"width": 32, "height": 32}},
        "fit": {"points": 300, "config": {"iterations": 30, "log_interval": 10, "eval_views": 2}},
        "codec": {"steps": 20, "channels": [8, 16, 16]},
        "ldm": {"net": {"base_channels": 16, "groups": 4}, "train": {"steps": 10, "batch_size": 4}},
        "acm": {"train": {"steps": 5, "batch_size": 2}},
        "vcm": {"frames": 4, "train": {"steps": 3, "batch_size": 1}},
        "infer": {"frames": 4, "length": 6, "lanes": ["street_x"], "seeds": [0, 1], "steps": 4},
        "evaluate": {},
    }
