"""Differentiable Gaussian splatting: projection, front-to-back compositing, rendering.

Everything here is plain PyTorch so gradients with respect to every Gaussian
field and the background come from autograd. Two compositing paths share the
same math:

* dense (``tile_size=None``): every Gaussian is evaluated at every pixel;
  exact, used by gradient checks.
* tiled: Gaussians are binned to square pixel tiles by a conservative
  footprint radius (where the Gaussian's alpha falls below ``ALPHA_EPS``), and
  each tile composites only its own list. Pixels outside a Gaussian's footprint
  differ from the dense path by less than ``ALPHA_EPS`` per Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .camera import CameraPose
from .gaussians import Gaussian3D, SceneModel, covariance_torch

NEAR = 0.2
DILATION = 0.3  # px^2 added to both diagonal entries of the 2D covariance
ALPHA_MAX = 0.999
T_MIN = 1e-4
ALPHA_EPS = 1e-5
FOV_GUARD = 1.3  # Jacobian evaluated with x/z, y/z clamped to 1.3x the frustum


@dataclass
class Gaussian2D:
    mean_px: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    opacity: float


@dataclass
class RenderOutput:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray | None = None


@dataclass
class PriorImage:
    """A ground-view prior rendered from an aerial-fit scene."""

    rgb: np.ndarray
    alpha: np.ndarray
    pose: CameraPose
    index: int | None = None
    kind: str = "prior"


def _camera(cam: CameraPose, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    r, t = cam.world_to_camera()
    return torch.as_tensor(r, dtype=dtype), torch.as_tensor(t, dtype=dtype)


def project_tensors(means: torch.Tensor, cov3d: torch.Tensor, cam: CameraPose):
    """Batched EWA projection.

    Returns ``(mean2d (N,2), cov2d (N,2,2), depth (N,), visible (N,) bool)``.
    """
    k = cam.intrinsics
    f = k.focal
    r, t = _camera(cam, means.dtype)
    pc = means @ r.T + t
    z = pc[:, 2]
    visible = z > NEAR
    zs = torch.where(visible, z, torch.ones_like(z))
    u = f * pc[:, 0] / zs + k.cx
    v = f * pc[:, 1] / zs + k.cy
    mean2d = torch.stack([u, v], dim=-1)

    lim_x = FOV_GUARD * 0.5 * k.width / f
    lim_y = FOV_GUARD * 0.5 * k.height / f
    tx = (pc[:, 0] / zs).clamp(-lim_x, lim_x)
    ty = (pc[:, 1] / zs).clamp(-lim_y, lim_y)
    zero = torch.zeros_like(zs)
    jac = torch.stack(
        [
            torch.stack([f / zs, zero, -f * tx / zs], dim=-1),
            torch.stack([zero, f / zs, -f * ty / zs], dim=-1),
        ],
        dim=-2,
    )
    m = jac @ r
    cov2d = m @ cov3d @ m.transpose(-1, -2)
    cov2d = cov2d + DILATION * torch.eye(2, dtype=means.dtype)

    # cull means lying more than 1.3 frame diagonals outside the frame
    diag = math.hypot(k.width, k.height)
    with torch.no_grad():
        dx = torch.clamp(torch.maximum(-u, u - k.width), min=0.0)
        dy = torch.clamp(torch.maximum(-v, v - k.height), min=0.0)
        visible = visible & (torch.hypot(dx, dy) <= FOV_GUARD * diag)
    return mean2d, cov2d, z, visible


def project_gaussian(g: Gaussian3D, cam: CameraPose) -> Gaussian2D | None:
    """Project one Gaussian; ``None`` when it is culled."""
    mu = torch.as_tensor(g.mu, dtype=torch.float64)[None]
    cov = covariance_torch(
        torch.as_tensor(g.scales, dtype=torch.float64)[None], torch.as_tensor(g.rot, dtype=torch.float64)[None]
    )
    mean2d, cov2d, depth, vis = project_tensors(mu, cov, cam)
    if not bool(vis[0]):
        return None
    return Gaussian2D(mean2d[0].numpy(), cov2d[0].numpy(), float(depth[0]), np.asarray(g.rgb), float(g.opacity))


def composite(sorted_gaussians, pixel, background=(0.0, 0.0, 0.0), return_weights: bool = False):
    """Front-to-back alpha blending of depth-sorted 2D Gaussians at one pixel.

    Each Gaussian contributes ``c_i a_i T_i`` with ``T_i = prod_{j<i}(1 - a_j)``
    and ``a_i = min(opacity_i * exp(-0.5 d^T cov^-1 d), ALPHA_MAX)``; the
    background receives the leftover transmittance. Compositing stops once
    transmittance drops below ``T_MIN``.
    """
    p = np.asarray(pixel, dtype=float)
    color = np.zeros(3)
    trans = 1.0
    weights = []
    for g in sorted_gaussians:
        if trans < T_MIN:
            weights.append(0.0)
            continue
        d = p - g.mean_px
        a = g.opacity * math.exp(-0.5 * float(d @ np.linalg.solve(g.cov2d, d)))
        a = min(max(a, 0.0), ALPHA_MAX)
        w = a * trans
        color = color + w * np.asarray(g.rgb)
        weights.append(w)
        trans = trans * (1.0 - a)
    color = color + trans * np.asarray(background, dtype=float)
    if return_weights:
        return color, np.array(weights), trans
    return color


def _alphas(mean2d, conic, opacity, pix):
    # mean2d (..., K, 2), conic (..., K, 3), opacity (..., K), pix (..., P, 2) -> (..., K, P)
    dx = pix[..., None, :, 0] - mean2d[..., :, None, 0]
    dy = pix[..., None, :, 1] - mean2d[..., :, None, 1]
    q = conic[..., 0, None] * dx * dx + 2.0 * conic[..., 1, None] * dx * dy + conic[..., 2, None] * dy * dy
    return (opacity[..., None] * torch.exp(-0.5 * q)).clamp(0.0, ALPHA_MAX)


def _blend(alpha, rgb, depth):
    """Composite along the K axis. alpha (..., K, P); rgb (..., K, 3); depth (..., K)."""
    with torch.no_grad():
        t_raw = torch.cumprod(1.0 - alpha, dim=-2)
        t_excl = torch.cat([torch.ones_like(t_raw[..., :1, :]), t_raw[..., :-1, :]], dim=-2)
        live = t_excl >= T_MIN
    a = alpha * live
    one_minus = 1.0 - a
    t_incl = torch.cumprod(one_minus, dim=-2)
    trans = torch.cat([torch.ones_like(t_incl[..., :1, :]), t_incl[..., :-1, :]], dim=-2)
    w = a * trans
    color = w.transpose(-1, -2) @ rgb
    exp_depth = (w * depth[..., :, None]).sum(dim=-2)
    if a.shape[-2] > 0:
        bg_w = t_incl[..., -1, :]
    else:
        bg_w = torch.ones(a.shape[:-2] + a.shape[-1:], dtype=a.dtype)
    return color, bg_w, exp_depth


def _conic(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1), det


def render_tensors(
    means: torch.Tensor,
    scales: torch.Tensor,
    quats: torch.Tensor,
    rgb: torch.Tensor,
    opacity: torch.Tensor,
    background: torch.Tensor,
    cam: CameraPose,
    tile_size: int | None = 8,
) -> dict[str, torch.Tensor]:
    """Render activated Gaussian parameters; returns ``rgb (H,W,3)``, ``alpha``, ``depth``."""
    k = cam.intrinsics
    h, w = k.height, k.width
    dtype = means.dtype
    cov3d = covariance_torch(scales, quats)
    mean2d, cov2d, depth, visible = project_tensors(means, cov3d, cam)
    idx = torch.nonzero(visible).squeeze(-1)
    order = torch.sort(depth.detach()[idx], stable=True).indices
    idx = idx[order]
    mean2d, cov2d, depth = mean2d[idx], cov2d[idx], depth[idx]
    col, op = rgb[idx], opacity[idx]
    conic, det = _conic(cov2d)

    if tile_size is None or idx.numel() == 0:
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=dtype) + 0.5, torch.arange(w, dtype=dtype) + 0.5, indexing="ij"
        )
        pix = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)
        alpha = _alphas(mean2d, conic, op, pix)
        color, bg_w, exp_depth = _blend(alpha, col, depth)
        img = color + bg_w[:, None] * background
        return {
            "rgb": img.reshape(h, w, 3),
            "alpha": (1.0 - bg_w).reshape(h, w),
            "depth": exp_depth.reshape(h, w),
        }

    ts = int(tile_size)
    ty, tx = -(-h // ts), -(-w // ts)
    with torch.no_grad():
        tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
        lam = tr + torch.sqrt(torch.clamp(tr * tr - det, min=0.0))
        ratio = torch.clamp(op.detach() / ALPHA_EPS, min=1.0)
        radius = torch.sqrt(2.0 * torch.log(ratio) * lam)
        x0, y0 = mean2d[:, 0] - radius, mean2d[:, 1] - radius
        x1, y1 = mean2d[:, 0] + radius, mean2d[:, 1] + radius
        tiles_x = torch.arange(tx, dtype=dtype) * ts
        tiles_y = torch.arange(ty, dtype=dtype) * ts
        hit_x = (x1[None, :] >= tiles_x[:, None]) & (x0[None, :] <= tiles_x[:, None] + ts)  # (tx, M)
        hit_y = (y1[None, :] >= tiles_y[:, None]) & (y0[None, :] <= tiles_y[:, None] + ts)  # (ty, M)
        hit = (hit_y[:, None, :] & hit_x[None, :, :]).reshape(ty * tx, -1) & (radius > 0)[None, :]
        counts = hit.sum(dim=1)
        kmax = max(int(counts.max()), 1)
        # stable sort keeps the global depth order inside each tile
        sel = torch.sort((~hit).to(torch.int8), dim=1, stable=True).indices[:, :kmax]
        valid = torch.gather(hit, 1, sel)

    ly, lx = torch.meshgrid(torch.arange(ts, dtype=dtype), torch.arange(ts, dtype=dtype), indexing="ij")
    local = torch.stack([lx.reshape(-1), ly.reshape(-1)], dim=-1) + 0.5
    origin = torch.stack(
        torch.meshgrid(tiles_y, tiles_x, indexing="ij")[::-1], dim=-1
    ).reshape(-1, 1, 2)
    pix = origin + local[None]  # (n_tiles, P, 2)

    op_t = op[sel] * valid
    alpha = _alphas(mean2d[sel], conic[sel], op_t, pix)
    color, bg_w, exp_depth = _blend(alpha, col[sel], depth[sel] * valid)
    img = color + bg_w[..., None] * background

    def untile(x, c):
        x = x.reshape(ty, tx, ts, ts, c).permute(0, 2, 1, 3, 4).reshape(ty * ts, tx * ts, c)
        return x[:h, :w]

    return {
        "rgb": untile(img, 3),
        "alpha": untile((1.0 - bg_w)[..., None], 1)[..., 0],
        "depth": untile(exp_depth[..., None], 1)[..., 0],
    }


def scene_tensors(scene: SceneModel, dtype=torch.float64) -> dict[str, torch.Tensor]:
    as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
    return {
        "means": as_t(scene.means),
        "scales": as_t(scene.scales),
        "quats": as_t(scene.quats),
        "rgb": as_t(scene.rgb),
        "opacity": as_t(scene.opacity),
        "background": as_t(scene.background),
    }


def render(scene: SceneModel, cam: CameraPose, resolution=None, tile_size: int | None = 8,
           dtype=torch.float64) -> RenderOutput:
    """Render ``scene`` from ``cam``; ``resolution`` is ``(width, height)``."""
    if resolution is not None:
        cam = cam.with_resolution(*resolution)
    with torch.no_grad():
        out = render_tensors(**scene_tensors(scene, dtype), cam=cam, tile_size=tile_size)
    return RenderOutput(
        rgb=out["rgb"].numpy().astype(np.float64),
        alpha=out["alpha"].numpy().astype(np.float64),
        depth=out["depth"].numpy().astype(np.float64),
    )


def render_prior(scene: SceneModel, ground_pose: CameraPose, index: int | None = None, resolution=None,
                 tile_size: int | None = 8) -> PriorImage:
    """Ground-view prior: same mechanics as ``render``, composited over the scene background."""
    out = render(scene, ground_pose, resolution=resolution, tile_size=tile_size)
    pose = ground_pose if resolution is None else ground_pose.with_resolution(*resolution)
    return PriorImage(rgb=np.clip(out.rgb, 0.0, 1.0), alpha=out.alpha, pose=pose, index=index)
