"""Appearance control: a trainable encoder copy steered by a ground-view prior image.

The branch copies the base denoiser's ``conv_in``, encoder levels and middle
block. A small hint encoder maps the prior image to latent resolution and is
added after the branch's ``conv_in``. Each branch output passes through a
zero-initialized 1x1 conv and is added to the matching base skip (and the
middle-block output), so a fresh branch leaves the base exactly unchanged.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion.codec import LatentCodec, TrainingDivergedError
from .diffusion.ldm import TrainConfig, ddim_sample, denoiser_eps_fn, sample_t
from .diffusion.schedule import NoiseSchedule, add_noise
from .diffusion.unet import DenoiserNet, PromptEmbedding, UNetConfig
from .diffusion.weights import load_weights, save_weights

log = logging.getLogger(__name__)


def zero_conv(channels: int) -> nn.Conv2d:
    c = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(c.weight)
    nn.init.zeros_(c.bias)
    return c


def inject_control(base_skips, branch_outputs, zero_layers=None) -> list[torch.Tensor]:
    """``base + zero_layer(branch)`` per level; plain sums when ``zero_layers`` is None."""
    if len(base_skips) != len(branch_outputs):
        raise ValueError(f"{len(base_skips)} base features vs {len(branch_outputs)} branch features")
    if zero_layers is not None and len(zero_layers) != len(base_skips):
        raise ValueError("one zero layer per injection site is required")
    out = []
    for i, (b, c) in enumerate(zip(base_skips, branch_outputs)):
        if zero_layers is not None:
            c = zero_layers[i](c)
        if b.shape != c.shape:
            raise ValueError(f"level {i}: base {tuple(b.shape)} vs branch {tuple(c.shape)}")
        out.append(b + c)
    return out


class HintEncoder(nn.Module):
    """Three convs taking the prior image to the latent grid; strides multiply to ``factor``."""

    def __init__(self, out_channels: int, factor: int = 4, hidden: int = 16):
        super().__init__()
        n_down = int(math.log2(factor))
        if 2**n_down != factor or n_down > 3:
            raise ValueError("factor must be 1, 2, 4 or 8")
        strides = [1] * (3 - n_down) + [2] * n_down
        chans = [3, hidden, 2 * hidden, out_channels]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, stride=s, padding=1) for i, s in enumerate(strides))

    def forward(self, x):
        for i, c in enumerate(self.convs):
            x = c(x)
            if i < len(self.convs) - 1:
                x = F.silu(x)
        return x


class ControlBranch(nn.Module):
    def __init__(self, base: DenoiserNet, factor: int = 4):
        super().__init__()
        self.net_cfg = base.cfg
        self.factor = factor
        self.encoder = copy.deepcopy(base.encoder)
        self.hint = HintEncoder(base.cfg.base_channels, factor)
        chans = self.encoder.skip_channels() + [self.encoder.mid2.conv2.out_channels]
        self.zero_layers = nn.ModuleList(zero_conv(c) for c in chans)

    def features(self, z, emb, prior, frames: int = 1):
        """Branch outputs before the zero layers: skips then the middle feature."""
        skips, mid = self.encoder(z, emb, frames=1, hint=self.hint(prior))
        return skips + [mid]

    def controller(self, prior: torch.Tensor, mask: torch.Tensor | None = None):
        """A ``control`` hook for ``DenoiserNet.forward``.

        ``mask`` (B,) scales each item's contribution; zero rows receive
        exactly no control.
        """

        def hook(z, emb, skips, mid, frames):
            outs = self.features(z, emb, prior)
            if mask is not None:
                m = mask.to(z.dtype).view(-1, 1, 1, 1)
                outs = [o * m for o in outs]
            merged = inject_control(skips + [mid], outs, self.zero_layers)
            return merged[:-1], merged[-1]

        return hook

    def save(self, path) -> None:
        meta = {"kind": "control", "net_cfg": self.net_cfg.to_dict(), "factor": self.factor}
        save_weights(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> ControlBranch:
        tensors, meta = load_weights(path)
        if meta.get("kind") != "control":
            raise ValueError(f"{path} does not hold control-branch weights")
        b = cls(DenoiserNet(UNetConfig(**meta["net_cfg"])), meta["factor"])
        b.load_state_dict(tensors)
        return b


def images_to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) floats in [0, 1] -> (N, 3, H, W) float32."""
    return torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


@dataclass
class ControlLog:
    losses: list[float] = field(default_factory=list)


def _freeze(*modules):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(False)


def train_acm(priors, latents: torch.Tensor, base: DenoiserNet, prompt: PromptEmbedding,
              schedule: NoiseSchedule, cfg: TrainConfig | None = None, factor: int = 4
              ) -> tuple[ControlBranch, ControlLog]:
    """Train a control branch on (prior image, ground latent) pairs with the base frozen.

    ``priors`` is (N, 3, H, W) or a list with ``None`` for missing priors,
    which is rejected.
    """
    cfg = cfg or TrainConfig()
    if isinstance(priors, (list, tuple)):
        if any(p is None for p in priors):
            raise ValueError("every training item needs a prior image")
        priors = torch.stack([torch.as_tensor(p) for p in priors])
    if len(priors) != len(latents):
        raise ValueError(f"{len(priors)} priors for {len(latents)} ground latents")
    _freeze(base, prompt)
    base.eval()
    torch.manual_seed(cfg.seed)
    branch = ControlBranch(base, factor)
    params = [p for p in branch.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    cond = prompt().detach()
    logs = ControlLog()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(latents), (cfg.batch_size,), generator=g)
        z0, hint = latents[idx], priors[idx]
        t = sample_t(len(z0), schedule, g)
        eps = torch.randn(z0.shape, generator=g)
        zt = add_noise(z0, t, eps, schedule)
        loss = F.mse_loss(base(zt, t, cond, control=branch.controller(hint)), eps)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"control loss non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        logs.losses.append(float(loss.detach()))
        if step % cfg.log_interval == 0:
            log.info("acm step %d loss %.4f", step, logs.losses[-1])
    return branch, logs


@torch.no_grad()
def control_eval_loss(branch: ControlBranch | None, base: DenoiserNet, prompt: PromptEmbedding,
                      schedule: NoiseSchedule, priors: torch.Tensor, latents: torch.Tensor, seed: int = 0,
                      draws: int = 4) -> float:
    """Mean L_Control over ``draws`` fixed (t, eps) draws per item."""
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(draws):
        t = sample_t(len(latents), schedule, g)
        eps = torch.randn(latents.shape, generator=g)
        zt = add_noise(latents, t, eps, schedule)
        ctrl = branch.controller(priors) if branch is not None else None
        total += float(F.mse_loss(base(zt, t, prompt(), control=ctrl), eps))
    return total / draws


@torch.no_grad()
def generate_first_frame(branch: ControlBranch | None, base: DenoiserNet, prompt: PromptEmbedding,
                         codec: LatentCodec, prior, schedule: NoiseSchedule, seed: int = 0,
                         steps: int = 50) -> np.ndarray:
    """Sample one ground image (H, W, 3) conditioned on ``prior`` (H, W, 3)."""
    hint = images_to_tensor(np.asarray(prior)[None])
    h, w = hint.shape[-2:]
    shape = (1, base.cfg.in_channels, h // codec.factor, w // codec.factor)
    ctrl = branch.controller(hint) if branch is not None else None
    base.eval()
    z = ddim_sample(denoiser_eps_fn(base, prompt(), ctrl), shape, schedule, steps, seed)
    return codec.decode_np(z)[0]
