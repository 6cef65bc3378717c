"""Latent denoiser training (epsilon-prediction MSE) and deterministic DDIM sampling."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import TrainingDivergedError
from .schedule import NoiseSchedule, add_noise
from .unet import DenoiserNet, PromptEmbedding, UNetConfig
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 5e-4
    grad_clip: float = 1.0
    log_interval: int = 250
    seed: int = 0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)

    def mean(self, start: int, stop: int | None = None) -> float:
        return float(np.mean(self.losses[start:stop]))


def seeded_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=dtype)


def sample_t(n: int, schedule: NoiseSchedule, g: torch.Generator) -> torch.Tensor:
    """Uniform integer steps in ``[1, T]``."""
    return torch.randint(1, schedule.T + 1, (n,), generator=g)


def ldm_loss(net: DenoiserNet, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, cond,
             schedule: NoiseSchedule, control=None) -> torch.Tensor:
    zt = add_noise(z0, t, eps, schedule)
    return F.mse_loss(net(zt, t, cond, control=control), eps)


def train_ldm(latents: torch.Tensor, schedule: NoiseSchedule, net_cfg: UNetConfig | None = None,
              cfg: TrainConfig | None = None) -> tuple[DenoiserNet, PromptEmbedding, TrainLog]:
    """Fit ``eps_theta`` on ``latents`` (N, c, h, w) jointly with the prompt embedding."""
    cfg = cfg or TrainConfig()
    net_cfg = net_cfg or UNetConfig(in_channels=latents.shape[1])
    torch.manual_seed(cfg.seed)
    net = DenoiserNet(net_cfg)
    prompt = PromptEmbedding(net_cfg.cond_dim, seed=cfg.seed)
    params = list(net.parameters()) + list(prompt.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    data = latents.float()
    logs = TrainLog()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(data), (cfg.batch_size,), generator=g)
        z0 = data[idx]
        t = sample_t(len(z0), schedule, g)
        eps = torch.randn(z0.shape, generator=g)
        loss = ldm_loss(net, z0, t, eps, prompt(), schedule)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"denoiser loss non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        logs.losses.append(float(loss.detach()))
        if step % cfg.log_interval == 0:
            log.info("ldm step %d loss %.4f", step, logs.losses[-1])
    return net, prompt, logs


@torch.no_grad()
def ddim_sample(eps_fn: EpsFn, shape, schedule: NoiseSchedule, steps: int = 50, seed: int = 0,
                z_T: torch.Tensor | None = None, clamp: Callable[[torch.Tensor], torch.Tensor] | None = None
                ) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) from ``z_T ~ N(0, I)`` seeded by ``seed``.

    ``eps_fn(z, t)`` predicts the noise at integer step ``t``. ``clamp``, if
    given, is applied to the state before every network call (used to pin
    conditioning frames).
    """
    ts = schedule.ddim_timesteps(steps)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float64)
    z = seeded_noise(shape, seed) if z_T is None else z_T.clone()
    for i, t in enumerate(ts):
        if clamp is not None:
            z = clamp(z)
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        a, a_prev = float(ab[t]), float(ab[t_prev])
        eps = eps_fn(z, t)
        x0 = (z - (1 - a) ** 0.5 * eps) / a**0.5
        z = a_prev**0.5 * x0 + (1 - a_prev) ** 0.5 * eps
    if clamp is not None:
        z = clamp(z)
    return z


def denoiser_eps_fn(net: DenoiserNet, cond, control=None) -> EpsFn:
    def fn(z, t):
        return net(z, torch.full((z.shape[0],), t), cond, control=control)

    return fn


def sample(net: DenoiserNet, schedule: NoiseSchedule, conditioning, steps: int = 50, seed: int = 0,
           shape=None, n: int = 1, control=None) -> torch.Tensor:
    """Latent ``z0_hat`` for ``n`` samples; ``shape`` defaults to ``(n, c, 16, 16)``."""
    shape = shape or (n, net.cfg.in_channels, 16, 16)
    net.eval()
    return ddim_sample(denoiser_eps_fn(net, conditioning, control), shape, schedule, steps, seed)


# -- persistence --------------------------------------------------------------


def save_denoiser(path, net: DenoiserNet, prompt: PromptEmbedding, schedule: NoiseSchedule, extra=None) -> None:
    tensors = {f"net.{k}": v for k, v in net.state_dict().items()}
    tensors.update({f"prompt.{k}": v for k, v in prompt.state_dict().items()})
    meta = {"kind": "denoiser", "net_cfg": net.cfg.to_dict(), "schedule": schedule.to_dict(), **(extra or {})}
    save_weights(path, tensors, meta)


def load_denoiser(path) -> tuple[DenoiserNet, PromptEmbedding, NoiseSchedule, dict]:
    tensors, meta = load_weights(path)
    if meta.get("kind") != "denoiser":
        raise ValueError(f"{path} does not hold denoiser weights")
    cfg = UNetConfig(**meta["net_cfg"])
    net = DenoiserNet(cfg)
    net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
    prompt = PromptEmbedding(cfg.cond_dim)
    prompt.load_state_dict({k[7:]: v for k, v in tensors.items() if k.startswith("prompt.")})
    return net, prompt, NoiseSchedule(**meta["schedule"]), meta


def config_dict(obj) -> dict:
    return asdict(obj)
