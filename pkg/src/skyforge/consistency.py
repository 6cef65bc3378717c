"""View consistency: joint denoising of frame windows with spatial-temporal attention.

The consistency net is a copy of the base denoiser whose attention layers run
over all frames of a window (queries per frame, keys/values from every
frame). Only those attention projections train; base and control branch stay
frozen. Frame 1 of each window is a clean conditioning latent: it enters at
step 0, receives no noise and no control, and is excluded from the loss.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .control import ControlBranch, _freeze, generate_first_frame, images_to_tensor
from .diffusion.codec import LatentCodec, TrainingDivergedError
from .diffusion.ldm import TrainConfig, ddim_sample, sample_t, seeded_noise
from .diffusion.schedule import NoiseSchedule, add_noise
from .diffusion.unet import DenoiserNet, PromptEmbedding, UNetConfig
from .diffusion.weights import load_weights, save_weights

log = logging.getLogger(__name__)


class ConsistencyNet(nn.Module):
    """A denoiser copy whose attention attends across ``frames`` consecutive batch items."""

    def __init__(self, base: DenoiserNet):
        super().__init__()
        self.net = copy.deepcopy(base)
        for p in self.net.parameters():
            p.requires_grad_(False)
        for blk in self.net.attention_blocks():
            for lin in (blk.q, blk.k, blk.v, blk.proj):
                for p in lin.parameters():
                    p.requires_grad_(True)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def forward(self, z, t, cond, frames: int, control=None):
        return self.net(z, t, cond, control=control, frames=frames)

    def save(self, path) -> None:
        save_weights(path, self.state_dict(), {"kind": "consistency", "net_cfg": self.net.cfg.to_dict()})

    @classmethod
    def load(cls, path) -> ConsistencyNet:
        tensors, meta = load_weights(path)
        if meta.get("kind") != "consistency":
            raise ValueError(f"{path} does not hold consistency weights")
        m = cls(DenoiserNet(UNetConfig(**meta["net_cfg"])))
        m.load_state_dict(tensors)
        return m


@dataclass
class LatentSequence:
    frames: torch.Tensor  # (F, c, h, w) clean latents
    priors: torch.Tensor  # (F, 3, H, W) prior images

    def __post_init__(self):
        if len(self.frames) != len(self.priors):
            raise ValueError("priors must be index-aligned with frames")

    def __len__(self) -> int:
        return len(self.frames)


def noise_sequence(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise frames 2..F of (B, F, c, h, w) at one step per sequence; frame 1 is passed through untouched."""
    b, f = z0.shape[:2]
    noisy = add_noise(z0[:, 1:].reshape(b * (f - 1), *z0.shape[2:]), t.repeat_interleave(f - 1),
                      eps[:, 1:].reshape(b * (f - 1), *z0.shape[2:]), schedule)
    return torch.cat([z0[:, :1], noisy.reshape(b, f - 1, *z0.shape[2:])], dim=1)


def frame_steps(t: torch.Tensor, frames: int) -> torch.Tensor:
    """Per-frame steps for (B,) sequence steps: 0 for frame 1, ``t`` for the rest, flattened to (B*F,)."""
    steps = t[:, None].repeat(1, frames)
    steps[:, 0] = 0
    return steps.reshape(-1)


def control_mask(batch: int, frames: int) -> torch.Tensor:
    m = torch.ones(batch, frames)
    m[:, 0] = 0
    return m.reshape(-1)


def vcm_eps(net: ConsistencyNet, branch: ControlBranch | None, cond, zt: torch.Tensor, t: torch.Tensor,
            priors: torch.Tensor | None) -> torch.Tensor:
    """Noise prediction for (B, F, c, h, w) at sequence steps ``t`` (B,)."""
    b, f = zt.shape[:2]
    flat = zt.reshape(b * f, *zt.shape[2:])
    ctrl = None
    if branch is not None and priors is not None:
        ctrl = branch.controller(priors.reshape(b * f, *priors.shape[2:]), control_mask(b, f))
    out = net(flat, frame_steps(t, f), cond, frames=f, control=ctrl)
    return out.reshape(zt.shape)


def vcm_loss(net: ConsistencyNet, branch: ControlBranch | None, cond, z0: torch.Tensor, t: torch.Tensor,
             eps: torch.Tensor, priors: torch.Tensor | None, schedule: NoiseSchedule
             ) -> tuple[torch.Tensor, torch.Tensor]:
    """Noise-prediction MSE over frames 2..F of (B, F, c, h, w) and the noised network input.

    Frame 1 enters clean and is not scored.
    """
    zt = noise_sequence(z0, t, eps, schedule)
    pred = vcm_eps(net, branch, cond, zt, t, priors)
    return F.mse_loss(pred[:, 1:], eps[:, 1:]), zt


@dataclass
class ConsistencyLog:
    losses: list[float] = field(default_factory=list)
    frame1_intact: list[bool] = field(default_factory=list)


def _windows(sequences: list[LatentSequence], frames: int) -> list[tuple[int, int]]:
    out = []
    for i, s in enumerate(sequences):
        out += [(i, start) for start in range(len(s) - frames + 1)]
    return out


def train_vcm(sequences: list[LatentSequence], base: DenoiserNet, branch: ControlBranch | None,
              prompt: PromptEmbedding, schedule: NoiseSchedule, frames: int = 12,
              cfg: TrainConfig | None = None) -> tuple[ConsistencyNet, ConsistencyLog]:
    """Train the cross-frame attention on windows of ``frames`` consecutive latents."""
    cfg = cfg or TrainConfig(steps=1000, batch_size=2)
    if frames < 2:
        raise ValueError("windows need at least 2 frames")
    if any(len(s) < 2 for s in sequences):
        raise ValueError("every sequence needs at least 2 frames")
    wins = _windows(sequences, frames)
    if not wins:
        raise ValueError(f"no sequence is {frames} frames long")
    _freeze(base, prompt)
    if branch is not None:
        _freeze(branch)
    torch.manual_seed(cfg.seed)
    net = ConsistencyNet(base)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    cond = prompt().detach()
    logs = ConsistencyLog()
    for step in range(cfg.steps):
        pick = torch.randint(0, len(wins), (cfg.batch_size,), generator=g).tolist()
        z0 = torch.stack([sequences[wins[i][0]].frames[wins[i][1] : wins[i][1] + frames] for i in pick])
        pri = torch.stack([sequences[wins[i][0]].priors[wins[i][1] : wins[i][1] + frames] for i in pick])
        t = sample_t(len(z0), schedule, g)
        eps = torch.randn(z0.shape, generator=g)
        loss, zt = vcm_loss(net, branch, cond, z0, t, eps, pri, schedule)
        logs.frame1_intact.append(bool(torch.equal(zt[:, 0], z0[:, 0])))
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"consistency loss non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        logs.losses.append(float(loss.detach()))
        if step % cfg.log_interval == 0:
            log.info("vcm step %d loss %.4f", step, logs.losses[-1])
    return net, logs


@torch.no_grad()
def generate_sequence(first_frame, priors, net: ConsistencyNet, branch: ControlBranch | None,
                      prompt: PromptEmbedding, codec: LatentCodec, schedule: NoiseSchedule, seed: int = 0,
                      steps: int = 50) -> np.ndarray:
    """Frames 2..F (F-1, H, W, 3) conditioned on ``first_frame`` and the priors of frames 2..F."""
    priors = np.asarray(priors)
    n = len(priors)
    if n == 0:
        return np.zeros((0, *np.asarray(first_frame).shape))
    z1 = codec.encode_np(np.asarray(first_frame)[None])
    f = n + 1
    pri = images_to_tensor(np.concatenate([np.asarray(first_frame)[None], priors]))[None]
    shape = (1, f, *z1.shape[1:])
    net.eval()

    def clamp(z):
        z = z.clone()
        z[:, 0] = z1[0]
        return z

    def eps_fn(z, t):
        return vcm_eps(net, branch, prompt(), z, torch.full((1,), t), pri)

    z = ddim_sample(eps_fn, shape, schedule, steps, seed, z_T=seeded_noise(shape, seed), clamp=clamp)
    return codec.decode_np(z[0, 1:])


@dataclass
class LongSequence:
    frames: list[np.ndarray]
    windows: list[tuple[int, int]]  # [start, stop) output indices produced by each window
    conditions: list[np.ndarray]  # conditioning frame handed to each VCM window


def window_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def plan_windows(n_priors: int, frames: int) -> list[tuple[int, int]]:
    """Output index ranges: window 0 covers [0, F), later ones F-1 new frames each; the tail may be short."""
    if n_priors < 1:
        raise ValueError("need at least one prior")
    if frames < 2:
        raise ValueError("window must hold at least 2 frames")
    out, start = [], 0
    stop = min(frames, n_priors)
    out.append((0, stop))
    start = stop
    while start < n_priors:
        stop = min(start + frames - 1, n_priors)
        out.append((start, stop))
        start = stop
    return out


def generate_long(priors, frames: int, net: ConsistencyNet, branch: ControlBranch | None, base: DenoiserNet,
                  prompt: PromptEmbedding, codec: LatentCodec, schedule: NoiseSchedule, seed: int = 0,
                  steps: int = 50) -> LongSequence:
    """Autoregressive generation over a whole lane; each window is conditioned on the previous last frame."""
    priors = np.asarray(priors)
    plan = plan_windows(len(priors), frames)
    first = generate_first_frame(branch, base, prompt, codec, priors[0], schedule, seed=window_seed(seed, 0),
                                 steps=steps)
    out = [first]
    conds = []
    for k, (a, b) in enumerate(plan):
        lo = 1 if k == 0 else a
        if lo >= b:
            continue
        cond = out[-1]
        conds.append(cond)
        new = generate_sequence(cond, priors[lo:b], net, branch, prompt, codec, schedule,
                                seed=window_seed(seed, k + 1), steps=steps)
        out.extend(list(new))
    return LongSequence(out, plan, conds)


@torch.no_grad()
def generate_per_frame(priors, branch: ControlBranch | None, base: DenoiserNet, prompt: PromptEmbedding,
                       codec: LatentCodec, schedule: NoiseSchedule, seed: int = 0, steps: int = 50) -> np.ndarray:
    """Independent control-only generation of every frame (no cross-frame attention)."""
    return np.stack([
        generate_first_frame(branch, base, prompt, codec, p, schedule, seed=window_seed(seed, 1000 + i), steps=steps)
        for i, p in enumerate(np.asarray(priors))
    ])  # fmt: skip
