"""Small convolutional autoencoder mapping images to a scaled latent grid.

Latents are multiplied by ``latent_scale`` (set after training so encoded
training latents have unit standard deviation), which keeps the diffusion
noise schedule meaningful.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..metrics import psnr
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="replicate")


class _Res(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c1 = _conv(c, c)
        self.c2 = _conv(c, c)

    def forward(self, x):
        return x + self.c2(F.silu(self.c1(F.silu(x))))


@dataclass
class CodecConfig:
    factor: int = 4
    latent_channels: int = 4
    channels: tuple[int, ...] = (16, 32, 64)  # per level, full resolution first
    steps: int = 2500
    batch_size: int = 8
    lr: float = 1e-3
    grad_clip: float = 1.0
    constant_fraction: float = 0.125  # share of each batch replaced by random flat-color images
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ValueError("factor must be a power of two")
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != int(math.log2(self.factor)) + 1:
            raise ValueError("need one channel width per resolution level")


class LatentCodec(nn.Module):
    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        ch, lc = self.cfg.channels, self.cfg.latent_channels
        # residual blocks only below full resolution, where convs are cheap
        enc = [_conv(3, ch[0])]
        for a, b in zip(ch[:-1], ch[1:]):
            enc += [nn.SiLU(), _conv(a, b, stride=2), _Res(b)]
        enc += [nn.SiLU(), _conv(ch[-1], lc, k=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [_conv(lc, ch[-1], k=1), _Res(ch[-1])]
        for i in range(len(ch) - 1, 0, -1):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(ch[i], ch[i - 1])]
            if i > 1:
                dec.append(_Res(ch[i - 1]))
        dec += [nn.SiLU(), _conv(ch[0], 3)]
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.ones(()))

    @property
    def factor(self) -> int:
        return self.cfg.factor

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) in [0, 1] -> (N, c, H/f, W/f) scaled latents."""
        return self.encoder(images * 2 - 1) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z / self.latent_scale))

    def forward(self, images):
        return self.decode(self.encode(images))

    # numpy helpers, (N, H, W, 3) layout
    @torch.no_grad()
    def encode_np(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2)
        return self.encode(x)

    @torch.no_grad()
    def decode_np(self, z: torch.Tensor) -> np.ndarray:
        return self.decode(z).permute(0, 2, 3, 1).double().numpy()

    def save(self, path) -> None:
        save_weights(path, self.state_dict(), {"kind": "codec", "config": asdict(self.cfg)})

    @classmethod
    def load(cls, path) -> LatentCodec:
        tensors, meta = load_weights(path)
        if meta.get("kind") != "codec":
            raise ValueError(f"{path} does not hold codec weights")
        m = cls(CodecConfig(**meta["config"]))
        m.load_state_dict(tensors)
        return m


@dataclass
class CodecReport:
    losses: list[float] = field(default_factory=list)
    holdout_psnr: float = float("nan")
    latent_scale: float = 1.0
    n_train: int = 0
    n_holdout: int = 0


def train_codec(images, cfg: CodecConfig | None = None, holdout=None) -> tuple[LatentCodec, CodecReport]:
    """Fit the autoencoder to ``images`` (N, H, W, 3) with pixel L2.

    Held-out PSNR is measured on ``holdout`` when given, otherwise on a seeded
    ``holdout_fraction`` split of ``images``.
    """
    cfg = cfg or CodecConfig()
    images = np.asarray(images, dtype=np.float32)
    if len(images) < 100:
        raise ValueError(f"need at least 100 training images, got {len(images)}")
    h, w = images.shape[1:3]
    if h % cfg.factor or w % cfg.factor:
        raise ValueError(f"image size {h}x{w} not divisible by {cfg.factor}")
    rng = np.random.default_rng(cfg.seed)
    if holdout is None:
        order = rng.permutation(len(images))
        n_hold = max(1, int(round(cfg.holdout_fraction * len(images))))
        holdout, images = images[order[:n_hold]], images[order[n_hold:]]
    holdout = np.asarray(holdout, dtype=np.float32)
    torch.manual_seed(cfg.seed)
    codec = LatentCodec(cfg)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    # warmup needs at least two steps to be a valid phase on very short runs
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=max(cfg.steps, 4),
                                                pct_start=max(0.1, 2.0 / max(cfg.steps, 4)))
    data = torch.as_tensor(images).permute(0, 3, 1, 2).contiguous()
    rep = CodecReport(n_train=len(images), n_holdout=len(holdout))
    n_flat = int(round(cfg.constant_fraction * cfg.batch_size))
    for step in range(cfg.steps):
        x = data[torch.as_tensor(rng.integers(0, len(data), cfg.batch_size))]
        if n_flat:
            x = x.clone()
            x[:n_flat] = torch.as_tensor(rng.uniform(0, 1, (n_flat, 3, 1, 1)), dtype=x.dtype)
        loss = F.mse_loss(codec(x), x)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"codec loss non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(codec.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        rep.losses.append(float(loss.detach()))
        if step % 250 == 0:
            log.info("codec step %d loss %.5f", step, rep.losses[-1])

    codec.eval()
    with torch.no_grad():
        z = torch.cat([codec.encode(data[i : i + 64]) for i in range(0, len(data), 64)])
        codec.latent_scale.fill_(1.0 / float(z.std()))
        rec = codec.decode_np(codec.encode_np(holdout))
    rep.holdout_psnr = float(np.mean([psnr(a, b) for a, b in zip(rec, holdout)]))
    rep.latent_scale = float(codec.latent_scale)
    return codec, rep
