"""Image and video quality metrics.

PSNR and SSIM are exact. Distribution distances (FID/FVD/KVD style) are
computed over features from fixed-seed random conv nets, so their values are
only comparable with each other under the same extractor seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
CLIP_LEN = 8
CLIP_STRIDE = 4
SHRINKAGE = 0.1


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP_DB / 10):
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ LUMA
    return img


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM of the luma channels over all fully-covered 11x11 windows."""
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = _gaussian_window()

    def filt(z):
        z = correlate1d(z, w, axis=0, mode="reflect")
        return correlate1d(z, w, axis=1, mode="reflect")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    r = SSIM_WINDOW // 2
    return float(s[r:-r, r:-r].mean())


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable luma SSIM for (H, W, 3) tensors; zero-padded borders are cropped."""
    luma = torch.as_tensor(LUMA, dtype=a.dtype)
    x = (a @ luma)[None, None]
    y = (b @ luma)[None, None]
    w = torch.as_tensor(_gaussian_window(), dtype=a.dtype)
    kx, ky = w.view(1, 1, 1, -1), w.view(1, 1, -1, 1)

    def filt(z):
        return F.conv2d(F.conv2d(z, kx), ky)

    c1, c2 = 0.01**2, 0.03**2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return s.mean()


# ---------------------------------------------------------------------------
# distribution distances


def _cov(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    c = np.cov(x, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
    if n < d + 1:
        # rank-deficient: shrink toward a scaled identity
        c = (1 - SHRINKAGE) * c + SHRINKAGE * (np.trace(c) / d) * np.eye(d)
    return c


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(features_a, features_b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    The cross term uses ``Tr((Sa^1/2 Sb Sa^1/2)^1/2)``, which equals
    ``Tr((Sa Sb)^1/2)`` but only needs symmetric eigendecompositions.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("feature sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    ca, cb = _cov(a), _cov(b)
    ra = _sqrtm_psd(ca)
    cross = _sqrtm_psd(ra @ cb @ ra)
    d = float(np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca) + np.trace(cb) - 2 * np.trace(cross))
    return max(d, 0.0)


def mmd2_unbiased(features_a, features_b) -> float:
    """Unbiased MMD^2 with the polynomial kernel ``(x.y/d + 1)^3``."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("need at least 2 samples per side")
    d = a.shape[1]
    k = lambda x, y: (x @ y.T / d + 1.0) ** 3  # noqa: E731
    kaa, kbb, kab = k(a, a), k(b, b), k(a, b)
    t_aa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    t_bb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(t_aa + t_bb - 2 * kab.mean())


# ---------------------------------------------------------------------------
# frozen random feature extractors


class FeatureExtractor:
    """Fixed-seed random conv features; never trained.

    ``image(imgs)`` maps (N, H, W, 3) to (N, d). ``clip(clips)`` maps
    (N, 8, H, W, 3) to (N, d): half the dimensions pool per-frame appearance,
    the other half pool a temporal convolution over frame differences, which
    makes clip features sensitive to frame order.
    """

    def __init__(self, seed: int = 0, dim: int = 32):
        self.seed = int(seed)
        self.dim = dim
        g = torch.Generator().manual_seed(self.seed)
        h = dim // 2

        def conv(cin, cout, k=3):
            return torch.randn(cout, cin, k, k, generator=g, dtype=torch.float64) / np.sqrt(cin * k * k)

        self.w1 = conv(3, 16)
        self.w2 = conv(16, 32)
        self.w3 = conv(32, dim)
        self.wt = torch.randn(h, 32, 3, generator=g, dtype=torch.float64) / np.sqrt(32 * 3)
        self.wa = torch.randn(h, 32, generator=g, dtype=torch.float64) / np.sqrt(32)

    def _trunk(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(F.conv2d(x, self.w1, stride=2, padding=1))
        return F.relu(F.conv2d(x, self.w2, stride=2, padding=1))

    @torch.no_grad()
    def image(self, imgs) -> np.ndarray:
        x = torch.as_tensor(np.asarray(imgs, dtype=np.float64)).permute(0, 3, 1, 2)
        x = F.relu(F.conv2d(self._trunk(x), self.w3, stride=2, padding=1))
        return x.mean(dim=(2, 3)).numpy()

    @torch.no_grad()
    def clip(self, clips) -> np.ndarray:
        c = np.asarray(clips, dtype=np.float64)
        n, t = c.shape[:2]
        if t != CLIP_LEN:
            raise ValueError(f"clips must have {CLIP_LEN} frames")
        x = torch.as_tensor(c.reshape(n * t, *c.shape[2:])).permute(0, 3, 1, 2)
        f = self._trunk(x).mean(dim=(2, 3)).reshape(n, t, -1)  # (N, T, 32)
        appearance = F.relu(f @ self.wa.T).mean(dim=1)
        diff = (f[:, 1:] - f[:, :-1]).transpose(1, 2)  # (N, 32, T-1)
        motion = F.relu(F.conv1d(diff, self.wt)).mean(dim=2) + F.relu(-F.conv1d(diff, self.wt)).mean(dim=2)
        return torch.cat([appearance, motion], dim=1).numpy()


def cut_clips(videos, length: int = CLIP_LEN, stride: int = CLIP_STRIDE) -> np.ndarray:
    """Sliding windows over each (T, H, W, 3) video."""
    out = []
    for v in videos:
        v = np.asarray(v)
        if len(v) < length:
            raise ValueError(f"clip of {len(v)} frames is shorter than the {length}-frame window")
        for s in range(0, len(v) - length + 1, stride):
            out.append(v[s : s + length])
    return np.stack(out)


def _clip_features(videos, extractor):
    clips = cut_clips(videos)
    if len(clips) < 2:
        raise ValueError("need at least 2 clips per side")
    return extractor.clip(clips)


def fvd_proxy(videos_a, videos_b, extractor: FeatureExtractor | None = None) -> float:
    ex = extractor or FeatureExtractor()
    return frechet_distance(_clip_features(videos_a, ex), _clip_features(videos_b, ex))


def kvd_proxy(videos_a, videos_b, extractor: FeatureExtractor | None = None) -> float:
    ex = extractor or FeatureExtractor()
    return mmd2_unbiased(_clip_features(videos_a, ex), _clip_features(videos_b, ex))


def fid_proxy(images_a, images_b, extractor: FeatureExtractor | None = None) -> float:
    ex = extractor or FeatureExtractor()
    return frechet_distance(ex.image(images_a), ex.image(images_b))


def adjacent_frame_distance(videos, extractor: FeatureExtractor | None = None) -> float:
    """Mean L2 distance between image features of consecutive frames."""
    ex = extractor or FeatureExtractor()
    d = []
    for v in videos:
        f = ex.image(np.asarray(v))
        d.append(np.linalg.norm(f[1:] - f[:-1], axis=1).mean())
    return float(np.mean(d))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    sequences: dict[str, dict] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)
    extractor_seed: int = 0
    clip_length: int = CLIP_LEN
    clip_stride: int = CLIP_STRIDE
    n_sequences: int = 0
    n_frames: int = 0
    n_clips: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def load_sequences(root) -> dict[str, np.ndarray]:
    """``root/<sequence>/*.png`` → {sequence: (T, H, W, 3)}, frames in name order."""
    from .dataset import load_png

    root = Path(root)
    seqs = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = sorted(d.glob("*.png"))
        if frames:
            seqs[d.name] = np.stack([load_png(f) for f in frames])
    return seqs


def evaluate_sequences(pred: dict[str, np.ndarray], gt: dict[str, np.ndarray], seed: int = 0) -> MetricReport:
    names = sorted(set(pred) & set(gt))
    if not names:
        raise ValueError("no sequences in common between prediction and ground truth")
    ex = FeatureExtractor(seed)
    rep = MetricReport(extractor_seed=seed)
    ps, ss = [], []
    for n in names:
        p, g = pred[n], gt[n]
        if p.shape != g.shape:
            raise ValueError(f"sequence {n}: shape {p.shape} vs {g.shape}")
        fp = [psnr(a, b) for a, b in zip(p, g)]
        fs = [ssim(a, b) for a, b in zip(p, g)]
        entry = {"psnr_db": float(np.mean(fp)), "ssim": float(np.mean(fs)), "frames": len(p),
                 "fid_proxy": fid_proxy(p, g, ex)}
        if len(p) >= CLIP_LEN and len(cut_clips([p])) >= 2:
            entry["fvd_proxy"] = fvd_proxy([p], [g], ex)
            entry["kvd_proxy"] = kvd_proxy([p], [g], ex)
        rep.sequences[n] = entry
        ps += fp
        ss += fs
    rep.n_sequences = len(names)
    rep.n_frames = len(ps)
    rep.aggregate = {"psnr_db": float(np.mean(ps)), "ssim": float(np.mean(ss))}
    pv, gv = [pred[n] for n in names], [gt[n] for n in names]
    rep.aggregate["fid_proxy"] = fid_proxy(np.concatenate(pv), np.concatenate(gv), ex)
    if all(len(v) >= CLIP_LEN for v in pv):
        clips = len(cut_clips(pv))
        if clips >= 2:
            rep.aggregate["fvd_proxy"] = fvd_proxy(pv, gv, ex)
            rep.aggregate["kvd_proxy"] = kvd_proxy(pv, gv, ex)
            rep.n_clips = clips
    return rep


def evaluate(pred_dir, gt_dir, out=None, seed: int = 0) -> MetricReport:
    rep = evaluate_sequences(load_sequences(pred_dir), load_sequences(gt_dir), seed)
    if out is not None:
        rep.save(out)
    return rep
