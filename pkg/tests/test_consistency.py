import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

import skyforge.consistency as cons
from skyforge.consistency import (
    ConsistencyNet,
    LatentSequence,
    frame_steps,
    generate_long,
    generate_per_frame,
    generate_sequence,
    noise_sequence,
    plan_windows,
    train_vcm,
    vcm_eps,
    vcm_loss,
)
from skyforge.control import ControlBranch, generate_first_frame
from skyforge.diffusion.codec import CodecConfig, LatentCodec
from skyforge.diffusion.ldm import TrainConfig
from skyforge.diffusion.schedule import NoiseSchedule
from skyforge.diffusion.unet import AttentionBlock, AttnProjections, DenoiserNet, PromptEmbedding, UNetConfig, st_attention
from skyforge.diffusion.weights import module_checksum

SMALL = UNetConfig(base_channels=16, groups=4)


def spatial_attention_oracle(x, wq, wk, wv, heads):
    """Plain per-frame multi-head self-attention in float64 numpy; x is (N, C)."""
    n, c = x.shape
    d = c // heads
    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    out = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        s = np.exp(s - s.max(1, keepdims=True))
        out[:, sl] = (s / s.sum(1, keepdims=True)) @ v[:, sl]
    return out


def _weights(seed, c, heads, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    w = [torch.randn(c, c, generator=g, dtype=dtype) / math.sqrt(c) for _ in range(3)]
    return AttnProjections(*w, heads=heads)


# -- st_attention -----------------------------------------------------------------


@given(seed=st.integers(0, 10_000), n=st.integers(1, 9), heads=st.sampled_from([1, 2, 4]))
@settings(max_examples=30, deadline=None)
def test_single_frame_reduces_to_spatial_attention(seed, n, heads):
    c = 8
    w = _weights(seed, c, heads, torch.float32)
    x = torch.randn(1, n, c, generator=torch.Generator().manual_seed(seed + 1))
    out = st_attention(x, w, 0).double().numpy()
    ref = spatial_attention_oracle(x[0].double().numpy(), *(m.double().numpy() for m in (w.wq, w.wk, w.wv)), heads)
    np.testing.assert_allclose(out, ref, atol=1e-6, rtol=0)


@given(seed=st.integers(0, 10_000), f=st.integers(2, 5), n=st.integers(1, 6), data=st.data())
@settings(max_examples=30, deadline=None)
def test_kv_frame_permutation_invariance(seed, f, n, data):
    w = _weights(seed, 8, 2, torch.float32)
    x = torch.randn(f, n, 8, generator=torch.Generator().manual_seed(seed + 1))
    query = data.draw(st.integers(0, f - 1))
    perm = data.draw(st.permutations(range(f)))
    moved = x[list(perm)]
    new_index = list(perm).index(query)
    a = st_attention(x, w, query)
    b = st_attention(moved, w, new_index)
    assert torch.allclose(a, b, atol=1e-6, rtol=0)


def test_two_frame_two_token_hand_table():
    # scalars: W^Q = 2, W^K = 0.5, W^V = 3; frame 1 tokens (1, 2), frame 2 tokens (0, -1)
    w = AttnProjections(torch.tensor([[2.0]], dtype=torch.float64), torch.tensor([[0.5]], dtype=torch.float64),
                        torch.tensor([[3.0]], dtype=torch.float64), heads=1)
    x = torch.tensor([[[1.0], [2.0]], [[0.0], [-1.0]]], dtype=torch.float64)
    # keys 0.5, 1, 0, -0.5 ; values 3, 6, 0, -3
    # frame 1, token 1: q = 2 -> scores 1, 2, 0, -1
    e = [math.exp(1), math.exp(2), math.exp(0), math.exp(-1)]
    f1t1 = (3 * e[0] + 6 * e[1] + 0 * e[2] - 3 * e[3]) / sum(e)
    # frame 1, token 2: q = 4 -> scores 2, 4, 0, -2
    e = [math.exp(2), math.exp(4), math.exp(0), math.exp(-2)]
    f1t2 = (3 * e[0] + 6 * e[1] - 3 * e[3]) / sum(e)
    # frame 2, token 1: q = 0 -> uniform weights
    f2t1 = (3 + 6 + 0 - 3) / 4
    # frame 2, token 2: q = -2 -> scores -1, -2, 0, 1
    e = [math.exp(-1), math.exp(-2), math.exp(0), math.exp(1)]
    f2t2 = (3 * e[0] + 6 * e[1] - 3 * e[3]) / sum(e)
    assert st_attention(x, w, 0)[:, 0].tolist() == pytest.approx([f1t1, f1t2], abs=1e-9)
    assert st_attention(x, w, 1)[:, 0].tolist() == pytest.approx([f2t1, f2t2], abs=1e-9)


@given(seed=st.integers(0, 10_000), f=st.integers(1, 4), heads=st.sampled_from([1, 2, 4]))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one(seed, f, heads):
    # a constant first channel copied into every value channel turns outputs into per-head row sums
    c = 8
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(f, 5, c, generator=g) * 3
    x[..., 0] = 1.0
    wv = torch.zeros(c, c)
    wv[:, 0] = 1.0
    w = AttnProjections(torch.randn(c, c, generator=g), torch.randn(c, c, generator=g), wv, heads)
    for i in range(f):
        assert torch.allclose(st_attention(x, w, i), torch.ones(5, c), atol=1e-6)


def test_st_attention_errors():
    w = _weights(0, 8, 2)
    with pytest.raises(ValueError):
        st_attention(torch.zeros(2, 3, 6, dtype=torch.float64), w, 0)
    with pytest.raises(ValueError):
        st_attention(torch.zeros(3, 8, dtype=torch.float64), w, 0)
    with pytest.raises(IndexError):
        st_attention(torch.zeros(2, 3, 8, dtype=torch.float64), w, 2)


def test_attention_block_frames_one_is_per_item():
    torch.manual_seed(0)
    blk = AttentionBlock(16, 4, 4)
    x = torch.randn(3, 16, 4, 4)
    joint = blk(x, frames=1)
    single = torch.cat([blk(x[i : i + 1]) for i in range(3)])
    assert torch.allclose(joint, single, atol=1e-6)
    with pytest.raises(ValueError):
        blk(x, frames=2)


# -- training ----------------------------------------------------------------------


def _base(seed=0):
    torch.manual_seed(seed)
    base = DenoiserNet(SMALL)
    nn.init.normal_(base.decoder.conv_out.weight, std=0.05)
    return base.eval()


def _branch(base, seed=1):
    torch.manual_seed(seed)
    br = ControlBranch(base, 4)
    for lay in br.zero_layers:
        nn.init.normal_(lay.weight, std=0.05)
    return br.eval()


def _sequences(n_seq=2, length=6, seed=0):
    """Slowly drifting latent sequences with matching prior images."""
    g = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(n_seq):
        start = torch.randn(1, 4, 4, 4, generator=g)
        drift = 0.1 * torch.randn(1, 4, 4, 4, generator=g)
        frames = start + drift * torch.arange(length).view(-1, 1, 1, 1)
        out.append(LatentSequence(frames, torch.rand(length, 3, 16, 16, generator=g)))
    return out


def test_consistency_net_trains_only_attention():
    net = ConsistencyNet(_base())
    names = net.trainable_names()
    assert names and all(n.split(".")[-2] in ("q", "k", "v", "proj") for n in names)
    # q, k, v weights plus the output projection's weight and bias
    assert len(names) == 5 * len(net.net.attention_blocks())


def test_noise_sequence_never_touches_frame_one():
    s = NoiseSchedule()
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        z0 = torch.randn(2, 5, 4, 4, 4, generator=g)
        t = torch.randint(1, s.T + 1, (2,), generator=g)
        zt = noise_sequence(z0, t, torch.randn(z0.shape, generator=g), s)
        assert torch.equal(zt[:, 0], z0[:, 0])
        assert not torch.equal(zt[:, 1:], z0[:, 1:])


def test_frame_steps_zero_for_first_frame():
    steps = frame_steps(torch.tensor([7, 900]), 3)
    assert steps.tolist() == [0, 7, 7, 0, 900, 900]


def test_loss_excludes_frame_one():
    base = _base()
    net = ConsistencyNet(base)
    br = _branch(base)
    s = NoiseSchedule()
    g = torch.Generator().manual_seed(3)
    z0 = torch.randn(2, 4, 4, 4, 4, generator=g)
    pri = torch.rand(2, 4, 3, 16, 16, generator=g)
    t = torch.tensor([300, 40])
    eps = torch.randn(z0.shape, generator=g)
    cond = PromptEmbedding(SMALL.cond_dim)()
    loss, zt = vcm_loss(net, br, cond, z0, t, eps, pri, s)
    other = eps.clone()
    other[:, 0] = 50.0
    loss2, _ = vcm_loss(net, br, cond, z0, t, other, pri, s)
    assert torch.equal(loss, loss2)
    pred = vcm_eps(net, br, cond, zt, t, pri)
    manual = ((pred[:, 1:] - eps[:, 1:]) ** 2).mean()
    assert torch.allclose(loss, manual, rtol=1e-6, atol=0)


def test_first_frame_gets_no_control():
    base = _base()
    net = ConsistencyNet(base)
    br = _branch(base)
    g = torch.Generator().manual_seed(4)
    zt = torch.randn(1, 3, 4, 4, 4, generator=g)
    pri = torch.rand(1, 3, 3, 16, 16, generator=g)
    cond = PromptEmbedding(SMALL.cond_dim)()
    with torch.no_grad():
        a = vcm_eps(net, br, cond, zt, torch.tensor([500]), pri)
        pri2 = pri.clone()
        pri2[:, 0] = torch.rand(3, 16, 16, generator=g)
        b = vcm_eps(net, br, cond, zt, torch.tensor([500]), pri2)
        pri3 = pri.clone()
        pri3[:, 1] = torch.rand(3, 16, 16, generator=g)
        c = vcm_eps(net, br, cond, zt, torch.tensor([500]), pri3)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


@pytest.fixture(scope="module")
def trained():
    base, s = _base(), NoiseSchedule()
    br = _branch(base)
    prompt = PromptEmbedding(SMALL.cond_dim)
    sums = module_checksum(base), module_checksum(br), module_checksum(prompt)
    net, log = train_vcm(_sequences(), base, br, prompt, s, frames=4,
                         cfg=TrainConfig(steps=200, batch_size=2, lr=2e-3, seed=0))
    return dict(base=base, branch=br, prompt=prompt, schedule=s, net=net, log=log, sums=sums)


def test_vcm_frame_one_intact_for_every_step(trained):
    assert len(trained["log"].frame1_intact) == 200
    assert all(trained["log"].frame1_intact)


def test_vcm_keeps_base_and_branch_frozen(trained):
    t = trained
    assert (module_checksum(t["base"]), module_checksum(t["branch"]), module_checksum(t["prompt"])) == t["sums"]


def test_vcm_loss_decreases(trained):
    losses = trained["log"].losses
    assert np.mean(losses[-40:]) < np.mean(losses[:40])


def test_vcm_one_step_moves_every_attention_block():
    base = _base()
    before = ConsistencyNet(base).state_dict()
    net, _ = train_vcm(_sequences(), base, _branch(base), PromptEmbedding(SMALL.cond_dim), NoiseSchedule(), frames=4,
                       cfg=TrainConfig(steps=1, batch_size=2, lr=1e-3))
    after = net.state_dict()
    for name in net.trainable_names():
        assert not torch.equal(before[name], after[name]), name
    frozen = set(after) - set(net.trainable_names())
    assert all(torch.equal(before[k], after[k]) for k in frozen)


def test_train_vcm_rejects_bad_input():
    base = _base()
    args = (base, None, PromptEmbedding(SMALL.cond_dim), NoiseSchedule())
    short = [LatentSequence(torch.zeros(1, 4, 4, 4), torch.zeros(1, 3, 16, 16))]
    with pytest.raises(ValueError):
        train_vcm(short, *args, frames=4, cfg=TrainConfig(steps=1))
    with pytest.raises(ValueError):
        train_vcm(_sequences(length=3), *args, frames=4, cfg=TrainConfig(steps=1))
    with pytest.raises(ValueError):
        train_vcm(_sequences(), *args, frames=1, cfg=TrainConfig(steps=1))
    with pytest.raises(ValueError):
        LatentSequence(torch.zeros(3, 4, 4, 4), torch.zeros(2, 3, 16, 16))


def test_consistency_net_save_load(tmp_path, trained):
    trained["net"].save(tmp_path / "v.skyw")
    back = ConsistencyNet.load(tmp_path / "v.skyw")
    assert module_checksum(back) == module_checksum(trained["net"])


# -- generation --------------------------------------------------------------------


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return LatentCodec(CodecConfig(channels=(4, 8, 8))).eval()


def _priors(n, seed=0):
    return np.random.default_rng(seed).random((n, 16, 16, 3))


def test_generate_sequence_shape_and_determinism(trained, codec):
    t = trained
    first = _priors(1, 9)[0]
    args = (first, _priors(5), t["net"], t["branch"], t["prompt"], codec, t["schedule"])
    a = generate_sequence(*args, seed=2, steps=6)
    b = generate_sequence(*args, seed=2, steps=6)
    assert a.shape == (5, 16, 16, 3)
    assert np.array_equal(a, b)
    recon = codec.decode_np(codec.encode_np(first[None]))[0]
    assert not any(np.array_equal(f, recon) for f in a)
    c = generate_sequence(*args, seed=3, steps=6)
    assert not np.array_equal(a, c)


@given(n=st.integers(1, 60), f=st.integers(2, 14))
@settings(max_examples=200, deadline=None)
def test_plan_windows_coverage(n, f):
    plan = plan_windows(n, f)
    # window 0 yields the ACM frame plus up to F-1 VCM frames, each later window F-1 more
    k = 0 if n == 1 else math.ceil((n - 1) / (f - 1))
    assert len(plan) == max(k, 1)
    assert plan[0][0] == 0 and plan[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(plan, plan[1:]))
    assert plan[0][1] - plan[0][0] == min(f, n)
    assert all(b - a <= f - 1 for a, b in plan[1:])
    assert 1 + k * (f - 1) >= n


def test_plan_windows_23_priors():
    assert plan_windows(23, 12) == [(0, 12), (12, 23)]


def test_generate_long_chains_windows(trained, codec, monkeypatch):
    t = trained
    calls = []
    real = cons.generate_sequence

    def spy(first, priors, *a, **k):
        calls.append((np.array(first, copy=True), len(priors)))
        return real(first, priors, *a, **k)

    monkeypatch.setattr(cons, "generate_sequence", spy)
    seq = generate_long(_priors(9), 4, t["net"], t["branch"], t["base"], t["prompt"], codec, t["schedule"], seed=1,
                        steps=4)
    assert len(seq.frames) == 9
    assert [c[1] for c in calls] == [3, 3, 2]
    ends = [b for _, b in seq.windows]
    for (cond, _), end in zip(calls, [1] + ends[:-1]):
        # condition of each window is the last frame produced before it, byte for byte
        assert cond.tobytes() == seq.frames[end - 1].tobytes()
    for cond, stored in zip([c[0] for c in calls], seq.conditions):
        assert cond.tobytes() == stored.tobytes()


def test_generate_long_23_priors(trained, codec, monkeypatch):
    t = trained
    calls = []
    real = cons.generate_sequence
    monkeypatch.setattr(cons, "generate_sequence", lambda f, p, *a, **k: calls.append(len(p)) or real(f, p, *a, **k))
    seq = generate_long(_priors(23), 12, t["net"], t["branch"], t["base"], t["prompt"], codec, t["schedule"],
                        steps=2)
    assert calls == [11, 11]
    assert len(seq.frames) == 23


def test_generate_long_single_prior_skips_vcm(trained, codec, monkeypatch):
    t = trained
    monkeypatch.setattr(cons, "generate_sequence", lambda *a, **k: pytest.fail("VCM must not run for one prior"))
    seq = generate_long(_priors(1), 12, t["net"], t["branch"], t["base"], t["prompt"], codec, t["schedule"], seed=4,
                        steps=3)
    assert len(seq.frames) == 1
    alone = generate_first_frame(t["branch"], t["base"], t["prompt"], codec, _priors(1)[0], t["schedule"],
                                 seed=cons.window_seed(4, 0), steps=3)
    assert np.array_equal(seq.frames[0], alone)


def test_generate_long_deterministic(trained, codec):
    t = trained
    args = (_priors(6), 4, t["net"], t["branch"], t["base"], t["prompt"], codec, t["schedule"])
    a = generate_long(*args, seed=5, steps=3)
    b = generate_long(*args, seed=5, steps=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


def test_per_frame_baseline_uses_distinct_seeds(trained, codec):
    t = trained
    same = np.repeat(_priors(1), 3, axis=0)
    out = generate_per_frame(same, t["branch"], t["base"], t["prompt"], codec, t["schedule"], seed=0, steps=3)
    assert out.shape == (3, 16, 16, 3)
    assert not np.array_equal(out[0], out[1])
