import math

import numpy as np
import pytest
import torch

from _helpers import central_difference_check, gradcheck_fixture, render_loss
from skyforge.camera import CameraPose, Intrinsics
from skyforge.gaussians import Gaussian3D, SceneModel
from skyforge.splat import (
    DILATION,
    Gaussian2D,
    _alphas,
    _blend,
    composite,
    project_gaussian,
    render,
    render_prior,
    render_tensors,
)

RED, GREEN, BLUE = np.eye(3)
BOUNDS = [[-100, -100, -100], [100, 100, 100]]


def g2(mean, var, depth, rgb, opacity):
    return Gaussian2D(np.asarray(mean, float), var * np.eye(2), depth, np.asarray(rgb, float), opacity)


# -- project_gaussian -------------------------------------------------------


def test_on_axis_projection_matches_pinhole_oracle():
    cam = CameraPose((0.0, 0.0, 0.0), 0.0, 0.0, Intrinsics(60.0, 64, 48))
    d, s = 10.0, 0.5
    g = Gaussian3D([d, 0, 0], [s, s, s], [1, 0, 0, 0], [1, 1, 1], 1.0)
    p = project_gaussian(g, cam)
    k = cam.intrinsics
    np.testing.assert_allclose(p.mean_px, [k.cx, k.cy], atol=1e-12)
    expected = (k.focal * s / d) ** 2 + DILATION
    np.testing.assert_allclose(p.cov2d, expected * np.eye(2), atol=1e-9)
    assert p.depth == pytest.approx(d)


def test_behind_camera_is_culled():
    cam = CameraPose((0.0, 0.0, 0.0), 0.0, 0.0, Intrinsics(60.0, 32, 32))
    assert project_gaussian(Gaussian3D([-3, 0, 0], [1, 1, 1], [1, 0, 0, 0], [1, 1, 1], 1.0), cam) is None
    assert project_gaussian(Gaussian3D([0.1, 0, 0], [1, 1, 1], [1, 0, 0, 0], [1, 1, 1], 1.0), cam) is None


def test_far_outside_frame_is_culled():
    cam = CameraPose((0.0, 0.0, 0.0), 0.0, 0.0, Intrinsics(60.0, 32, 32))
    g = Gaussian3D([1.0, 50.0, 0], [1, 1, 1], [1, 0, 0, 0], [1, 1, 1], 1.0)
    assert project_gaussian(g, cam) is None


def test_rigid_translation_invariance(rng):
    for _ in range(10):
        q = rng.normal(size=4)
        g = Gaussian3D(rng.uniform(-2, 2, 3) + [8, 0, 0], rng.uniform(0.1, 1, 3), q, [1, 0, 0], 0.7)
        cam = CameraPose((0.0, 0.0, 0.0), 0.1, -0.2, Intrinsics(60.0, 32, 32))
        off = rng.uniform(-100, 100, 3)
        g2_ = Gaussian3D(g.mu + off, g.scales, q, [1, 0, 0], 0.7)
        cam2 = CameraPose(tuple(off), 0.1, -0.2, Intrinsics(60.0, 32, 32))
        a, b = project_gaussian(g, cam), project_gaussian(g2_, cam2)
        np.testing.assert_allclose(a.mean_px, b.mean_px, atol=1e-9)
        np.testing.assert_allclose(a.cov2d, b.cov2d, atol=1e-9)
        assert a.depth == pytest.approx(b.depth, abs=1e-9)


# -- composite ----------------------------------------------------------------


def test_single_opaque_gaussian_at_mean():
    bg = np.array([0.2, 0.4, 0.6])
    c = composite([g2((5, 5), 4.0, 1.0, GREEN, 1.0)], (5, 5), bg)
    np.testing.assert_allclose(c, GREEN * 0.999 + bg * 0.001, atol=1e-15)


def test_two_half_alpha_gaussians():
    bg = np.array([0.0, 1.0, 0.0])
    stack = [g2((0, 0), 1.0, 1.0, RED, 0.5), g2((0, 0), 1.0, 2.0, BLUE, 0.5)]
    c = composite(stack, (0, 0), bg)
    np.testing.assert_allclose(c, 0.5 * RED + 0.25 * BLUE + 0.25 * bg, atol=1e-15)


def _hand_eq2(colors, alphas, bg):
    # direct transcription of C = sum c_i a_i prod_{j<i}(1 - a_j), plus background
    total = np.zeros(3)
    for i in range(len(alphas)):
        prod = 1.0
        for j in range(i):
            prod *= 1 - alphas[j]
        total += colors[i] * alphas[i] * prod
    rest = 1.0
    for a in alphas:
        rest *= 1 - a
    return total + rest * bg


def test_three_stack_off_center_matches_hand_evaluation():
    bg = np.array([0.1, 0.1, 0.1])
    pix = np.array([3.0, 4.0])
    stack = [
        g2((2, 4), 2.0, 1.0, RED, 0.6),
        g2((3, 3), 1.5, 2.0, GREEN, 0.9),
        g2((4, 5), 3.0, 3.0, BLUE, 0.4),
    ]
    alphas = [g.opacity * math.exp(-0.5 * float((pix - g.mean_px) @ (pix - g.mean_px)) / g.cov2d[0, 0])
              for g in stack]
    expected = _hand_eq2([g.rgb for g in stack], alphas, bg)
    np.testing.assert_allclose(composite(stack, pix, bg), expected, atol=1e-12)


def test_zero_opacity_is_noop(rng):
    stack = [g2(rng.uniform(0, 8, 2), rng.uniform(1, 4), i, rng.uniform(size=3), rng.uniform(0.2, 0.9))
             for i in range(4)]
    pix = (4.0, 4.0)
    base = composite(stack, pix)
    for pos in range(5):
        s = stack[:pos] + [g2((4, 4), 2.0, 0.0, RED, 0.0)] + stack[pos:]
        np.testing.assert_array_equal(composite(s, pix), base)


def test_weights_sum_to_one_and_transmittance_monotone(rng):
    for _ in range(50):
        n = rng.integers(1, 12)
        stack = [g2(rng.uniform(0, 8, 2), rng.uniform(0.5, 4), i, rng.uniform(size=3), rng.uniform(0, 1))
                 for i in range(n)]
        _, w, t_final = composite(stack, rng.uniform(0, 8, 2), return_weights=True)
        assert abs(w.sum() + t_final - 1.0) <= 1e-12
        assert np.all(w >= 0)


def test_early_termination():
    stack = [g2((0, 0), 1.0, i, RED if i < 3 else BLUE, 0.999) for i in range(6)]
    c, w, t = composite(stack, (0, 0), return_weights=True)
    # after two 0.999 layers T = 1e-6 < 1e-4 so nothing further is blended
    assert w[0] > 0 and w[1] > 0 and np.all(w[2:] == 0)
    assert c[2] == 0.0
    assert t == pytest.approx(1e-6)


def test_batched_blend_matches_scalar_composite(rng):
    n, p = 7, 30
    means = rng.uniform(0, 10, (n, 2))
    var = rng.uniform(0.5, 5, n)
    op = rng.uniform(0, 1, n)
    col = rng.uniform(size=(n, 3))
    pix = rng.uniform(0, 10, (p, 2))
    bg = np.array([0.3, 0.2, 0.1])
    conic = np.column_stack([1 / var, np.zeros(n), 1 / var])
    a = _alphas(torch.tensor(means), torch.tensor(conic), torch.tensor(op), torch.tensor(pix))
    color, bg_w, _ = _blend(a, torch.tensor(col), torch.arange(n, dtype=torch.float64))
    out = (color + bg_w[:, None] * torch.tensor(bg)).numpy()
    stack = [g2(means[i], var[i], i, col[i], op[i]) for i in range(n)]
    for j in range(p):
        np.testing.assert_allclose(out[j], composite(stack, pix[j], bg), atol=1e-12)


# -- render -------------------------------------------------------------------


def test_empty_scene_renders_background():
    scene = SceneModel.empty(BOUNDS, background=(0.1, 0.5, 0.9))
    cam = CameraPose((0.0, 0.0, 0.0), 0.0, 0.0, Intrinsics(60.0, 12, 10))
    out = render(scene, cam)
    np.testing.assert_array_equal(out.rgb, np.broadcast_to([0.1, 0.5, 0.9], (10, 12, 3)))
    assert np.all(out.alpha == 0)


def test_opaque_center_gaussian():
    rgb = np.array([0.9, 0.3, 0.1])
    scene = SceneModel.from_gaussians([Gaussian3D([5, 0, 0], [2, 2, 2], [1, 0, 0, 0], rgb, 1.0)], BOUNDS)
    cam = CameraPose((0.0, 0.0, 0.0), 0.0, 0.0, Intrinsics(60.0, 17, 17))
    out = render(scene, cam)
    # composite oracle at the center pixel (q = 0): C = 0.999 rgb + 0.001 background
    expected = composite([project_gaussian(scene.gaussians[0], cam)], (8.5, 8.5), scene.background)
    np.testing.assert_allclose(out.rgb[8, 8], expected, atol=1e-12)
    assert np.abs(out.rgb[8, 8] - rgb).max() < 1e-3


def test_render_is_bit_deterministic(rng):
    cam, params, _ = gradcheck_fixture(3)
    scene = params.to_scene()
    a, b = render(scene, cam), render(scene, cam)
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.alpha.tobytes() == b.alpha.tobytes()


def test_equal_depth_composites_in_insertion_order():
    cam = CameraPose((0.0, 0.0, 0.0), 0.0, 0.0, Intrinsics(60.0, 8, 8))
    red = Gaussian3D([5, 0, 0], [1, 1, 1], [1, 0, 0, 0], RED, 0.8)
    blue = Gaussian3D([5, 0, 0], [1, 1, 1], [1, 0, 0, 0], BLUE, 0.8)
    rb = render(SceneModel.from_gaussians([red, blue], BOUNDS), cam).rgb[4, 4]
    br = render(SceneModel.from_gaussians([blue, red], BOUNDS), cam).rgb[4, 4]
    assert rb[0] > rb[2] and br[2] > br[0]
    np.testing.assert_allclose(rb[[0, 2]], br[[2, 0]], atol=1e-15)


def test_tiled_matches_dense(rng):
    n = 60
    scene = SceneModel(
        np.column_stack([rng.uniform(5, 20, n), rng.uniform(-6, 6, n), rng.uniform(-4, 4, n)]),
        rng.uniform(0.1, 1.5, (n, 3)), rng.normal(size=(n, 4)), rng.uniform(size=(n, 3)),
        rng.uniform(0.05, 1, n), BOUNDS, [0.3, 0.3, 0.3],
    )  # fmt: skip
    cam = CameraPose((0.0, 0.0, 0.0), 0.0, 0.0, Intrinsics(70.0, 40, 28))
    dense = render(scene, cam, tile_size=None)
    for ts in (4, 8, 16):
        tiled = render(scene, cam, tile_size=ts)
        assert np.abs(tiled.rgb - dense.rgb).max() < 1e-4
        assert np.abs(tiled.alpha - dense.alpha).max() < 1e-4
    assert np.all((dense.alpha >= 0) & (dense.alpha <= 1))


def test_energy_bound_on_render(rng):
    cam, params, _ = gradcheck_fixture(1)
    with torch.no_grad():
        a = params.activated()
        a["background"] = torch.zeros(3, dtype=torch.float64)
        a["rgb"] = torch.ones_like(a["rgb"])
        out = render_tensors(**a, cam=cam, tile_size=None)
    # with white Gaussians and black background the image equals the summed weights
    np.testing.assert_allclose(out["rgb"][..., 0].numpy(), out["alpha"].numpy(), atol=1e-12)
    assert float(out["alpha"].max()) <= 1.0


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_central_differences(seed):
    cam, params, target = gradcheck_fixture(seed)
    named = dict(params.named_parameters())
    report = central_difference_check(lambda: render_loss(params, cam, target), named, h=1e-5)
    assert set(report) == {"means", "log_scales", "quats", "rgb", "opacity_logit", "background"}
    for name, err in report.items():
        assert err < 1e-3, (name, err)


def test_tiled_gradients_close_to_dense():
    cam, params, target = gradcheck_fixture(2, res=16)
    named = dict(params.named_parameters())
    gd = torch.autograd.grad(render_loss(params, cam, target, None), list(named.values()))
    gt = torch.autograd.grad(render_loss(params, cam, target, 8), list(named.values()))
    for a, b in zip(gd, gt):
        assert torch.allclose(a, b, atol=1e-6, rtol=1e-3)


# -- render_prior -------------------------------------------------------------


def test_prior_horizon_matches_plane_projection():
    # a wide flat Gaussian lying on z=0, seen from a 2 m high level camera
    d = 20.0
    flat = Gaussian3D([d, 0, 0], [4.0, 30.0, 0.005], [1, 0, 0, 0], [0.8, 0.8, 0.8], 1.0)
    scene = SceneModel.from_gaussians([flat], BOUNDS, background=(0, 0, 1))
    pose = CameraPose((0.0, 0.0, 2.0), 0.0, 0.0, Intrinsics(70.0, 64, 64))
    prior = render_prior(scene, pose, index=3)
    assert prior.kind == "prior" and prior.index == 3
    k = pose.intrinsics
    col = prior.alpha[:, 32]
    # plane oracle: the center line of the strip projects to v = cy + f * h / d
    v_center = k.cy + k.focal * 2.0 / d
    assert abs((np.argmax(col) + 0.5) - v_center) <= 2.0
    # nothing above the horizon row v = cy
    horizon = int(k.cy)
    assert col[: horizon - 2].max() < 0.05
    assert col[int(v_center)] > 0.9
