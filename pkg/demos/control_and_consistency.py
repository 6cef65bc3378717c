"""The two diffusion add-ons on a tiny untrained denoiser.

1. A freshly built control branch changes nothing: zero convolutions make the
   controlled forward pass bit-identical to the plain one.
2. Joint attention over frames: the first frame of a window is kept clean,
   and each later window is conditioned on the last frame of the previous one.

    python demos/control_and_consistency.py
"""

import numpy as np
import torch
import torch.nn as nn

from skyforge.consistency import ConsistencyNet, generate_long, noise_sequence, plan_windows
from skyforge.control import ControlBranch
from skyforge.diffusion.codec import CodecConfig, LatentCodec
from skyforge.diffusion.schedule import NoiseSchedule
from skyforge.diffusion.unet import DenoiserNet, PromptEmbedding, UNetConfig

torch.set_num_threads(1)
torch.manual_seed(0)
cfg = UNetConfig(base_channels=16, groups=4)
base = DenoiserNet(cfg).eval()
nn.init.normal_(base.decoder.conv_out.weight, std=0.05)  # a non-zero output to compare against
prompt = PromptEmbedding(cfg.cond_dim)
schedule = NoiseSchedule()

branch = ControlBranch(base, factor=4).eval()
z = torch.randn(2, 4, 8, 8)
prior = torch.rand(2, 3, 32, 32)
with torch.no_grad():
    plain = base(z, torch.tensor([10, 700]), prompt())
    ctrl = base(z, torch.tensor([10, 700]), prompt(), control=branch.controller(prior))
print("fresh control branch leaves the output bit-identical:", torch.equal(plain, ctrl))

z0 = torch.randn(1, 5, 4, 8, 8)
zt = noise_sequence(z0, torch.tensor([900]), torch.randn_like(z0), schedule)
print("frame 1 untouched by forward noising:", torch.equal(zt[:, 0], z0[:, 0]))
print("frames 2..5 noised:", not torch.equal(zt[:, 1:], z0[:, 1:]))

n, frames = 23, 12
print(f"{n} priors with {frames}-frame windows ->", plan_windows(n, frames))

codec = LatentCodec(CodecConfig(channels=(4, 8, 8))).eval()
net = ConsistencyNet(base)
priors = np.random.default_rng(0).random((9, 32, 32, 3))
seq = generate_long(priors, 4, net, branch, base, prompt, codec, schedule, seed=1, steps=4)
for (a, b), cond in zip(seq.windows, seq.conditions):
    src = max(a - 1, 0)  # the first window starts from the control-only frame 0
    print(f"window [{a}, {b}) conditioned on frame {src} byte for byte:", cond.tobytes() == seq.frames[src].tobytes())
