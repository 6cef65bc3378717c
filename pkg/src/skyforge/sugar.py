"""Surface-aligned Gaussian scene fitting from aerial views.

The fit minimizes an L1 photometric loss plus two regularizers:

* a surface-alignment residual: for sample points ``p`` drawn from the
  Gaussians, ``mean |<p - mu*, n*> / s_target - <p - mu_g, n_g> / s_g|`` where
  ``g`` generated ``p``, ``g*`` is the Mahalanobis-nearest Gaussian to ``p``,
  ``n`` is a Gaussian's smallest-scale axis and ``s_g`` its smallest scale.
  With ``s_target`` fixed this pulls every Gaussian toward a flat disc of the
  target thickness.
* ``mean((1 - opacity)^2)``, pushing opacities toward one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .dataset import SKY_RGB, DatasetManifest
from .gaussians import GaussianParams, SceneModel, normals_torch, quat_to_rotmat_torch
from .metrics import psnr, ssim_torch
from .splat import render_tensors

log = logging.getLogger(__name__)


class FitDivergedError(FloatingPointError):
    pass


@dataclass
class FitConfig:
    iterations: int = 2000
    lr_means: float = 5e-5  # multiplied by the scene extent
    lr_means_final: float = 5e-7  # exponential decay target for the position rate
    lr_scales: float = 0.01
    lr_quats: float = 0.002
    lr_rgb: float = 0.01
    lr_opacity: float = 0.05
    lr_background: float = 0.0
    lambda_sdf: float = 0.2
    lambda_opacity: float = 0.05
    lambda_dssim: float = 0.0  # optional (1 - SSIM) / 2 photometric term
    sdf_sample_count: int = 512
    sdf_start_iteration: int | None = None  # default: 25% of iterations
    s_target: float | None = None  # default: 1% of the scene extent
    densify_interval: int = 200
    densify_until: float = 0.5  # fraction of iterations
    densify_percentile: float = 97.5
    max_gaussians: int = 4000
    prune_opacity: float = 0.01
    views_per_step: int = 1
    eval_views: int = 4
    log_interval: int = 100
    checkpoint_interval: int = 0
    tile_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        for name in ("lambda_sdf", "lambda_opacity", "lambda_dssim", "lr_means", "lr_scales", "lr_quats", "lr_rgb", "lr_opacity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def sdf_start(self) -> int:
        if self.sdf_start_iteration is not None:
            return self.sdf_start_iteration
        return self.iterations // 4


@dataclass
class FitReport:
    entries: list[dict] = field(default_factory=list)
    init_psnr: float = float("nan")
    final_psnr: float = float("nan")
    init_mean_opacity: float = float("nan")
    final_mean_opacity: float = float("nan")
    final_sdf_residual: float = float("nan")
    final_loss: float = float("nan")
    s_target: float = float("nan")
    n_gaussians: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


@dataclass
class SdfSampleBatch:
    points: np.ndarray  # (P, 3)
    generator: np.ndarray  # (P,) index of the Gaussian each point was drawn from
    nearest: np.ndarray  # (P,) Mahalanobis-nearest Gaussian g*
    z: np.ndarray | None = None  # (P, 3) standard-normal draws, p = mu_g + R_g S_g z

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# initialization


def aerial_views(manifest: DatasetManifest, scene_id: str):
    """(images, poses, depths) for every aerial record of one scene."""
    recs = manifest.records(scene_id)
    images = [manifest.load_image(r.aerial_image) for r in recs]
    depths = [manifest.load_depth(r.depth) for r in recs]
    return images, [r.aerial_pose for r in recs], depths


def init_from_depth(manifest: DatasetManifest, n_points: int, seed: int = 0, scene_id: str | None = None,
                    opacity: float = 0.9) -> SceneModel:
    """Seed isotropic Gaussians by back-projecting random valid aerial depth pixels."""
    if n_points <= 0:
        raise ValueError("n_points must be positive; an empty scene cannot be fit")
    scene_id = scene_id or manifest.scene_ids()[0]
    images, poses, depths = aerial_views(manifest, scene_id)
    if not poses:
        raise ValueError(f"scene {scene_id} has no aerial views")
    valid = [np.flatnonzero(d.reshape(-1) > 0) for d in depths]
    counts = np.array([len(v) for v in valid])
    total = int(counts.sum())
    if total < n_points:
        raise ValueError(f"only {total} valid depth pixels, {n_points} requested")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(total, size=n_points, replace=False))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    view = np.searchsorted(offsets, pick, side="right") - 1

    pts = np.empty((n_points, 3))
    cols = np.empty((n_points, 3))
    for v in np.unique(view):
        sel = view == v
        flat = valid[v][pick[sel] - offsets[v]]
        rays = poses[v].pixel_rays().reshape(-1, 3)[flat]
        d = depths[v].reshape(-1)[flat]
        pts[sel] = np.asarray(poses[v].position) + d[:, None] * rays
        cols[sel] = images[v].reshape(-1, 3)[flat]

    desc = manifest.scene(scene_id)["descriptor"]
    bounds = np.asarray(desc["bounds"], dtype=float)
    k = min(4, n_points)
    if k > 1:
        dist, _ = cKDTree(pts).query(pts, k=k)
        nn = dist[:, 1:].mean(axis=1)
    else:
        nn = np.full(n_points, 0.01 * float(np.max(bounds[1, :2] - bounds[0, :2])))
    nn = np.maximum(nn, 1e-3)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n_points, 1))
    return SceneModel(pts, np.repeat(nn[:, None], 3, axis=1), quats, cols, np.full(n_points, opacity), bounds,
                      SKY_RGB)


# ---------------------------------------------------------------------------
# surface-alignment residual


def _inv_frames(means, scales, quats):
    rot = quat_to_rotmat_torch(quats)
    return rot, 1.0 / scales


def mahalanobis_nearest(points: torch.Tensor, means, scales, quats, chunk: int = 256) -> torch.Tensor:
    """Index of the Gaussian minimizing ``(p - mu)^T Sigma^-1 (p - mu)`` for each point."""
    with torch.no_grad():
        rot, inv_s = _inv_frames(means, scales, quats)
        out = []
        for i in range(0, points.shape[0], chunk):
            d = points[i : i + chunk, None, :] - means[None]  # (c, N, 3)
            local = torch.einsum("cnj,nji->cni", d, rot) * inv_s[None]
            out.append(torch.argmin((local * local).sum(-1), dim=1))
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def sample_sdf_points(scene, count: int, seed: int) -> SdfSampleBatch:
    """Draw each point from a uniformly chosen Gaussian's own distribution."""
    if isinstance(scene, GaussianParams):
        a = scene.activated()
        means, scales, quats = a["means"].detach(), a["scales"].detach(), a["quats"].detach()
    else:
        means, scales, quats = (torch.as_tensor(x, dtype=torch.float64) for x in (scene.means, scene.scales, scene.quats))
    n = means.shape[0]
    if n == 0:
        raise ValueError("cannot sample from an empty scene")
    rng = np.random.default_rng(seed)
    gen = rng.integers(0, n, size=count)
    z = torch.as_tensor(rng.standard_normal((count, 3)), dtype=means.dtype)
    g = torch.as_tensor(gen)
    rot = quat_to_rotmat_torch(quats[g])
    pts = means[g] + torch.einsum("pij,pj->pi", rot, z * scales[g])
    nearest = mahalanobis_nearest(pts, means, scales, quats)
    return SdfSampleBatch(pts.double().numpy(), gen, nearest.numpy(), z.double().numpy())


def sdf_residual_tensors(points, generator, nearest, means, scales, quats, s_target: float) -> torch.Tensor:
    p = torch.as_tensor(points, dtype=means.dtype)
    g = torch.as_tensor(generator, dtype=torch.long)
    gs = torch.as_tensor(nearest, dtype=torch.long)
    normals = normals_torch(scales, quats)
    s_min = scales.min(dim=-1).values
    ideal = ((p - means[gs]) * normals[gs]).sum(-1) / s_target
    actual = ((p - means[g]) * normals[g]).sum(-1) / s_min[g]
    return (ideal - actual).abs().mean()


def sdf_residual_pathwise(batch: SdfSampleBatch, means, scales, quats, s_target: float) -> torch.Tensor:
    """Same value as ``sdf_residual_tensors`` but with the points re-drawn from the live parameters.

    Gradients then flow through the sample positions, so a generator's own
    mean cancels out of its residual instead of receiving a random-sign push
    along its normal.
    """
    g = torch.as_tensor(batch.generator, dtype=torch.long)
    z = torch.as_tensor(batch.z, dtype=means.dtype)
    pts = means[g] + torch.einsum("pij,pj->pi", quat_to_rotmat_torch(quats[g]), z * scales[g])
    return sdf_residual_tensors(pts, batch.generator, batch.nearest, means, scales, quats, s_target)


def sdf_residual(batch: SdfSampleBatch, scene, s_target: float):
    """Mean absolute difference between ideal and actual normalized signed distances.

    ``scene`` may be a ``SceneModel`` (returns a float) or ``GaussianParams``
    (returns a differentiable tensor).
    """
    if len(batch) == 0:
        raise ValueError("empty sample batch")
    if isinstance(scene, GaussianParams):
        a = scene.activated()
        return sdf_residual_tensors(batch.points, batch.generator, batch.nearest, a["means"], a["scales"],
                                    a["quats"], s_target)
    t = lambda x: torch.as_tensor(np.asarray(x), dtype=torch.float64)  # noqa: E731
    r = sdf_residual_tensors(batch.points, batch.generator, batch.nearest, t(scene.means), t(scene.scales),
                             t(scene.quats), s_target)
    return float(r)


# ---------------------------------------------------------------------------
# fitting


def _make_optimizer(params: GaussianParams, cfg: FitConfig, extent: float) -> torch.optim.Adam:
    groups = [
        {"params": [params.means], "lr": cfg.lr_means * extent},
        {"params": [params.log_scales], "lr": cfg.lr_scales},
        {"params": [params.quats], "lr": cfg.lr_quats},
        {"params": [params.rgb], "lr": cfg.lr_rgb},
        {"params": [params.opacity_logit], "lr": cfg.lr_opacity},
    ]
    if params.background.requires_grad:
        groups.append({"params": [params.background], "lr": cfg.lr_background})
    return torch.optim.Adam(groups, eps=1e-15)


def _means_lr(cfg: FitConfig, extent: float, it: int) -> float:
    if cfg.lr_means <= 0 or cfg.lr_means_final <= 0:
        return cfg.lr_means * extent
    frac = min(max(it / cfg.iterations, 0.0), 1.0)
    return extent * math.exp((1 - frac) * math.log(cfg.lr_means) + frac * math.log(cfg.lr_means_final))


def _eval_psnr(params: GaussianParams, images, poses, idx, tile_size) -> float:
    with torch.no_grad():
        a = params.activated()
        vals = []
        for i in idx:
            out = render_tensors(**a, cam=poses[i], tile_size=tile_size)["rgb"].clamp(0, 1)
            vals.append(psnr(out.double().numpy(), images[i]))
    return float(np.mean(vals))


def _densify(scene: SceneModel, grad_avg: np.ndarray, cfg: FitConfig, extent: float,
             rng: np.random.Generator) -> SceneModel:
    if len(scene) >= cfg.max_gaussians or not np.any(grad_avg > 0):
        return scene
    thresh = np.percentile(grad_avg, cfg.densify_percentile)
    pick = np.flatnonzero((grad_avg >= thresh) & (grad_avg > 0))
    pick = pick[: max(0, cfg.max_gaussians - len(scene))]
    if pick.size == 0:
        return scene
    big = scene.scales[pick].max(axis=1) > 0.01 * extent
    clone, split = pick[~big], pick[big]

    means, scales = [scene.means], [scene.scales]
    quats, rgb, op = [scene.quats], [scene.rgb], [scene.opacity]
    keep = np.ones(len(scene), dtype=bool)
    if clone.size:
        means.append(scene.means[clone])
        scales.append(scene.scales[clone])
        quats.append(scene.quats[clone])
        rgb.append(scene.rgb[clone])
        op.append(scene.opacity[clone])
    if split.size:
        keep[split] = False
        r = np.stack([quat_to_rotmat_torch(torch.as_tensor(scene.quats[split])).numpy()] * 2)
        s = np.stack([scene.scales[split]] * 2)
        z = rng.standard_normal(s.shape) * s
        means.append((scene.means[split][None] + np.einsum("kpij,kpj->kpi", r, z)).reshape(-1, 3))
        scales.append((s / 1.6).reshape(-1, 3))
        quats.append(np.concatenate([scene.quats[split]] * 2))
        rgb.append(np.concatenate([scene.rgb[split]] * 2))
        op.append(np.concatenate([scene.opacity[split]] * 2))
    keep = np.concatenate([keep, np.ones(sum(len(m) for m in means[1:]), dtype=bool)])
    out = SceneModel(np.concatenate(means), np.concatenate(scales), np.concatenate(quats), np.concatenate(rgb),
                     np.concatenate(op), scene.bounds, scene.background)
    return out.subset(keep)


def prune(scene: SceneModel, threshold: float) -> SceneModel:
    """Drop Gaussians with opacity strictly below ``threshold``."""
    return scene.subset(scene.opacity >= threshold)


def fit_scene(manifest: DatasetManifest, init: SceneModel, cfg: FitConfig, scene_id: str | None = None,
              out_dir=None) -> tuple[SceneModel, FitReport]:
    """Optimize ``init`` against the aerial views of one scene."""
    scene_id = scene_id or manifest.scene_ids()[0]
    images, poses, _ = aerial_views(manifest, scene_id)
    if not images:
        raise ValueError("no aerial images to fit")
    if len(init) == 0:
        raise ValueError("cannot fit an empty scene")
    extent = float(np.max(init.bounds[1, :2] - init.bounds[0, :2]))
    s_target = cfg.s_target if cfg.s_target is not None else 0.01 * extent
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    targets = [torch.as_tensor(im, dtype=torch.float32) for im in images]
    eval_idx = np.linspace(0, len(images) - 1, min(cfg.eval_views, len(images))).round().astype(int)
    densify_stop = int(cfg.densify_until * cfg.iterations)

    params = GaussianParams(init, dtype=torch.float32, learn_background=cfg.lr_background > 0)
    opt = _make_optimizer(params, cfg, extent)
    report = FitReport(s_target=s_target)
    report.init_psnr = _eval_psnr(params, images, poses, eval_idx, cfg.tile_size)
    report.init_mean_opacity = float(init.opacity.mean())

    grad_acc = torch.zeros(len(params))
    grad_cnt = torch.zeros(len(params))
    run_loss, run_n = 0.0, 0
    last_r = float("nan")
    for it in range(1, cfg.iterations + 1):
        opt.zero_grad(set_to_none=True)
        a = params.activated()
        loss = 0.0
        for v in rng.integers(0, len(images), size=cfg.views_per_step):
            out = render_tensors(**a, cam=poses[v], tile_size=cfg.tile_size)
            loss = loss + (out["rgb"] - targets[v]).abs().mean() / cfg.views_per_step
            if cfg.lambda_dssim > 0:
                dssim = 0.5 * (1.0 - ssim_torch(out["rgb"], targets[v]))
                loss = loss + cfg.lambda_dssim * dssim / cfg.views_per_step
        if cfg.lambda_sdf > 0 and it > cfg.sdf_start:
            batch = sample_sdf_points(params, cfg.sdf_sample_count, int(rng.integers(2**31)))
            r = sdf_residual_pathwise(batch, a["means"], a["scales"], a["quats"], s_target)
            last_r = float(r.detach())
            loss = loss + cfg.lambda_sdf * r
        if cfg.lambda_opacity > 0:
            loss = loss + cfg.lambda_opacity * ((1.0 - a["opacity"]) ** 2).mean()
        if not torch.isfinite(loss):
            raise FitDivergedError(f"non-finite loss at iteration {it}")
        loss.backward()
        with torch.no_grad():
            gn = params.means.grad.norm(dim=-1)
            grad_acc += gn
            grad_cnt += (gn > 0).float()
        opt.param_groups[0]["lr"] = _means_lr(cfg, extent, it)
        opt.step()
        with torch.no_grad():
            params.rgb.clamp_(0.0, 1.0)
        run_loss += float(loss.detach())
        run_n += 1

        if it % cfg.densify_interval == 0:
            scene = params.to_scene()
            if it <= densify_stop:
                avg = (grad_acc / grad_cnt.clamp(min=1)).numpy()
                scene = _densify(scene, avg, cfg, extent, rng)
            scene = prune(scene, cfg.prune_opacity)
            if len(scene) == 0:
                raise FitDivergedError("pruning removed every Gaussian")
            params = GaussianParams(scene, dtype=torch.float32, learn_background=cfg.lr_background > 0)
            opt = _make_optimizer(params, cfg, extent)
            grad_acc = torch.zeros(len(params))
            grad_cnt = torch.zeros(len(params))

        if it % cfg.log_interval == 0 or it == cfg.iterations:
            entry = {
                "iteration": it,
                "loss": run_loss / max(run_n, 1),
                "psnr": _eval_psnr(params, images, poses, eval_idx, cfg.tile_size),
                "sdf_residual": last_r,
                "n_gaussians": len(params),
            }
            report.entries.append(entry)
            log.info("fit %s it=%d loss=%.4f psnr=%.2f n=%d", scene_id, it, entry["loss"], entry["psnr"], len(params))
            run_loss, run_n = 0.0, 0
        if out_dir is not None and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            params.to_scene().save(Path(out_dir) / f"checkpoint_{it:06d}.bin")

    final = params.to_scene()
    report.final_psnr = report.entries[-1]["psnr"]
    report.final_loss = report.entries[-1]["loss"]
    report.final_mean_opacity = float(final.opacity.mean())
    report.n_gaussians = len(final)
    t = lambda x: torch.as_tensor(x, dtype=torch.float64)  # noqa: E731
    batch = sample_sdf_points(final, cfg.sdf_sample_count, cfg.seed)
    report.final_sdf_residual = float(sdf_residual_tensors(batch.points, batch.generator, batch.nearest,
                                                           t(final.means), t(final.scales), t(final.quats), s_target))
    return final, report


# ---------------------------------------------------------------------------


def extract_surface_points(scene: SceneModel, per_gaussian: int, seed: int = 0,
                           min_opacity: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Oriented samples on each opaque Gaussian's mid-plane.

    Points lie in the plane through ``mu`` orthogonal to the smallest-scale
    axis, uniformly within one standard deviation (an ellipse) along the two
    larger axes. Returns ``(points, normals)``, both (M, 3).
    """
    opaque = np.flatnonzero(scene.opacity > min_opacity)
    if opaque.size == 0 or per_gaussian <= 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    rot = quat_to_rotmat_torch(torch.as_tensor(scene.quats[opaque])).numpy()
    order = np.argsort(scene.scales[opaque], axis=1, kind="stable")
    pts, nrm = [], []
    for j, i in enumerate(opaque):
        small, a1, a2 = order[j]
        radius = np.sqrt(rng.uniform(size=per_gaussian))
        theta = rng.uniform(0, 2 * math.pi, size=per_gaussian)
        u = radius * np.cos(theta) * scene.scales[i, a1]
        v = radius * np.sin(theta) * scene.scales[i, a2]
        p = scene.means[i] + u[:, None] * rot[j][:, a1] + v[:, None] * rot[j][:, a2]
        pts.append(p)
        nrm.append(np.repeat(rot[j][:, small][None], per_gaussian, axis=0))
    return np.concatenate(pts), np.concatenate(nrm)
