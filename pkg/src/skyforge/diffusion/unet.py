"""Conditional U-Net noise predictor for latent grids.

Layout for ``mults=(1, 2)`` (skip features marked ``*``)::

    conv_in*  ->  [res*  down*]  ->  [res+attn*]  ->  mid(res, attn, res)
                                                     -> up level 1 (2 x res+attn, consuming skips 3, 2)
                                                     -> upsample -> up level 0 (2 x res, skips 1, 0)
                                                     -> norm, SiLU, zero-init conv_out

Attention is enabled at the resolutions listed in ``attn_levels`` and in the
middle block. Every attention layer accepts a ``frames`` count: with
``frames > 1`` the batch is read as groups of consecutive frames and each
frame's queries attend to the keys/values of every frame in its group.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 32
    mults: tuple[int, ...] = (1, 2)
    attn_levels: tuple[int, ...] = (1,)
    heads: int = 4
    time_dim: int = 128
    cond_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        self.mults = tuple(int(m) for m in self.mults)
        self.attn_levels = tuple(int(a) for a in self.attn_levels)

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.as_tensor(t, dtype=torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).float()


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


@dataclass
class AttnProjections:
    """Query/key/value projections ``(C, C)`` applied as ``x @ W^T``, shared by every frame."""

    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    heads: int = 1


def st_attention_all(x: torch.Tensor, w: AttnProjections) -> torch.Tensor:
    """Spatial-temporal attention for every query frame at once.

    ``x`` is (..., F, N, C). Queries come from each frame; keys and values
    from the token-axis concatenation of all F frames. Returns (..., F, N, C).
    """
    *lead, f, n, c = x.shape
    if w.wq.shape[-1] != c:
        raise ValueError(f"projection expects {w.wq.shape[-1]} channels, tokens have {c}")
    if c % w.heads:
        raise ValueError("channels must divide evenly into heads")
    d = c // w.heads
    q = x @ w.wq.T
    kv_in = x.reshape(*lead, f * n, c)
    k = kv_in @ w.wk.T
    v = kv_in @ w.wv.T

    def split(t):  # (..., L, C) -> (..., heads, L, d)
        return t.reshape(*t.shape[:-1], w.heads, d).transpose(-2, -3)

    qh = split(q.reshape(*lead, f * n, c))
    kh, vh = split(k), split(v)
    # each query frame attends over all f*n keys, so frames can be flattened into one query axis
    att = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = (att @ vh).transpose(-2, -3).reshape(*lead, f * n, c)
    return out.reshape(*lead, f, n, c)


def st_attention(x: torch.Tensor, w: AttnProjections, query_frame: int) -> torch.Tensor:
    """Tokens for frame ``query_frame`` of ``x`` (F, N, C): Q from that frame, K/V from all frames."""
    if x.ndim != 3:
        raise ValueError("x must be (F, N, C)")
    f, n, c = x.shape
    if not 0 <= query_frame < f:
        raise IndexError(query_frame)
    return st_attention_all(x, w)[query_frame]


class AttentionBlock(nn.Module):
    """Pre-norm self-attention with a residual output projection."""

    def __init__(self, channels, heads, groups):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def projections(self) -> AttnProjections:
        return AttnProjections(self.q.weight, self.k.weight, self.v.weight, self.heads)

    def forward(self, x, frames: int = 1):
        b, c, h, w = x.shape
        if b % frames:
            raise ValueError(f"batch {b} is not a multiple of {frames} frames")
        t = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        t = t.reshape(b // frames, frames, h * w, c)
        out = self.proj(st_attention_all(t, self.projections()))
        return x + out.reshape(b, h * w, c).transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class _Level(nn.Module):
    """One encoder level: a res block, optional attention, optional downsample."""

    def __init__(self, cin, cout, cfg: UNetConfig, attn: bool, down: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.time_dim, cfg.groups)
        self.attn = AttentionBlock(cout, cfg.heads, cfg.groups) if attn else None
        self.down = Downsample(cout) if down else None


class Encoder(nn.Module):
    """conv_in, encoder levels and the middle block; the part a control branch copies."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        ch = [cfg.base_channels * m for m in cfg.mults]
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        self.levels = nn.ModuleList()
        prev = cfg.base_channels
        for i, c in enumerate(ch):
            self.levels.append(_Level(prev, c, cfg, i in cfg.attn_levels, i < len(ch) - 1))
            prev = c
        self.mid1 = ResBlock(prev, prev, cfg.time_dim, cfg.groups)
        self.mid_attn = AttentionBlock(prev, cfg.heads, cfg.groups)
        self.mid2 = ResBlock(prev, prev, cfg.time_dim, cfg.groups)

    def forward(self, x, emb, frames=1, hint=None):
        """Returns ``(skips, mid)``. ``hint`` is added after ``conv_in`` (control branches)."""
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = [h]
        for lvl in self.levels:
            h = lvl.res(h, emb)
            if lvl.attn is not None:
                h = lvl.attn(h, frames)
            skips.append(h)
            if lvl.down is not None:
                h = lvl.down(h)
                skips.append(h)
        h = self.mid1(h, emb)
        h = self.mid_attn(h, frames)
        h = self.mid2(h, emb)
        return skips, h

    def skip_channels(self) -> list[int]:
        out = [self.conv_in.out_channels]
        for lvl in self.levels:
            c = lvl.res.conv2.out_channels
            out.append(c)
            if lvl.down is not None:
                out.append(c)
        return out


class Decoder(nn.Module):
    def __init__(self, cfg: UNetConfig, skip_channels: list[int]):
        super().__init__()
        ch = [cfg.base_channels * m for m in cfg.mults]
        skips = list(skip_channels)
        self.levels = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(len(ch))):
            blocks = nn.ModuleList()
            for _ in range(2):  # one per encoder res block, one per downsample / conv_in
                sc = skips.pop()
                blocks.append(nn.ModuleDict({
                    "res": ResBlock(prev + sc, ch[i], cfg.time_dim, cfg.groups),
                    **({"attn": AttentionBlock(ch[i], cfg.heads, cfg.groups)} if i in cfg.attn_levels else {}),
                }))  # fmt: skip
                prev = ch[i]
            up = Upsample(prev) if i > 0 else None
            self.levels.append(nn.ModuleDict({"blocks": blocks, **({"up": up} if up is not None else {})}))
        self.norm_out = nn.GroupNorm(cfg.groups, prev)
        self.conv_out = nn.Conv2d(prev, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, h, skips, emb, frames=1):
        skips = list(skips)
        for lvl in self.levels:
            for blk in lvl["blocks"]:
                h = blk["res"](torch.cat([h, skips.pop()], dim=1), emb)
                if "attn" in blk:
                    h = blk["attn"](h, frames)
            if "up" in lvl:
                h = lvl["up"](h)
        return self.conv_out(F.silu(self.norm_out(h)))


class DenoiserNet(nn.Module):
    """``eps_theta(z_t, t, c)`` with the prompt embedding added to the time embedding."""

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        c = self.cfg
        self.time_mlp = nn.Sequential(nn.Linear(c.base_channels, c.time_dim), nn.SiLU(), nn.Linear(c.time_dim, c.time_dim))
        self.cond_proj = nn.Linear(c.cond_dim, c.time_dim)
        self.encoder = Encoder(c)
        self.decoder = Decoder(c, self.encoder.skip_channels())

    def embed(self, t, cond) -> torch.Tensor:
        """Time plus conditioning embedding; ``t`` (B,), ``cond`` (cond_dim,) or (B, cond_dim)."""
        emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels))
        if cond is not None:
            emb = emb + self.cond_proj(cond)
        return emb

    def forward(self, z, t, cond=None, control=None, frames: int = 1):
        """``control``: optional callable ``(z, emb, skips, mid, frames) -> (skips, mid)`` adding branch features."""
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        emb = self.embed(t, cond)
        skips, mid = self.encoder(z, emb, frames)
        if control is not None:
            skips, mid = control(z, emb, skips, mid, frames)
        return self.decoder(mid, skips, emb, frames)

    def attention_blocks(self) -> list[AttentionBlock]:
        return [m for m in self.modules() if isinstance(m, AttentionBlock)]


class PromptEmbedding(nn.Module):
    """A single learned conditioning vector standing in for an encoded text prompt."""

    def __init__(self, dim: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.c_text = nn.Parameter(torch.randn(dim, generator=g) * 0.02)

    def forward(self) -> torch.Tensor:
        return self.c_text
