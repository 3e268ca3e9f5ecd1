import numpy as np
import pytest
import torch
import torch.nn.functional as F

from vidlab.codec import encode_instruction, encode_video, make_embedding_table, null_video
from vidlab.core import DimensionError, Domain, FormatError, Rng, VideoTensor
from vidlab.denoiser import (ArchConfig, flatten, forward, inflate2d, init_params, load_checkpoint, param_count,
                             save_checkpoint, unflatten)
from vidlab.diffusion import (Batch, DropoutPolicy, LossConfig, loss_sd, make_schedule, param_gradients,
                              prepare_batch, q_sample)

from oracles import TINY, framewise_oracle, gradient_check, random_inputs, small_batch


def test_inflate_identity_kernel():
    k = torch.zeros(1, 1, 3, 3)
    k[0, 0, 1, 1] = 1.0
    k3 = inflate2d(k)
    assert k3.shape == (1, 1, 1, 3, 3)
    assert torch.equal(k3[:, :, 0], k)


def test_inflate_shape_and_copy():
    k = torch.randn(8, 4, 3, 3)
    k3 = inflate2d(k)
    assert k3.shape == (8, 4, 1, 3, 3)
    k3[0, 0, 0, 0, 0] = 100.0
    assert k[0, 0, 0, 0] != 100.0


def test_inflated_single_frame_matches_conv2d():
    gen = torch.Generator().manual_seed(0)
    k = torch.randn(5, 3, 3, 3, generator=gen, dtype=torch.float64)
    x = torch.randn(2, 3, 7, 6, generator=gen, dtype=torch.float64)
    y3 = F.conv3d(x[:, :, None], inflate2d(k), padding=(0, 1, 1))[:, :, 0]
    assert torch.equal(y3, F.conv2d(x, k, padding=1))


@pytest.mark.parametrize("shape", [(8, 4, 5, 5), (3, 3, 3), (2, 2, 3, 1)])
def test_inflate_rejects_non3x3(shape):
    with pytest.raises(DimensionError):
        inflate2d(torch.zeros(shape))


def test_init_deterministic_and_seed_sensitive(tiny_config):
    a = flatten(init_params(tiny_config, Rng(1)))
    b = flatten(init_params(tiny_config, Rng(1)))
    c = flatten(init_params(tiny_config, Rng(2)))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_identity_init_structure():
    model = init_params(ArchConfig(**TINY, temporal_init="identity"), Rng(0))
    for name, p in model.named_parameters():
        if name.endswith("temporal_weight"):
            expected = torch.zeros_like(p)
            idx = torch.arange(p.shape[0])
            expected[idx, idx, 1, 0, 0] = 1.0
            assert torch.equal(p, expected), name
        if ".temporal.out." in name:
            assert torch.count_nonzero(p) == 0, name


@pytest.mark.parametrize("cfg", [dict(TINY), dict(TINY, levels=2, attn_levels=(0, 1))])
def test_identity_mode_matches_framewise_2d(cfg):
    model = init_params(ArchConfig(**cfg, temporal_init="identity"), Rng(5))
    for seed in range(3):
        z, t, text, mask, cv = random_inputs(seed, f=4)
        with torch.no_grad():
            got = model(z, t, text, mask, cv)
            want = framewise_oracle(model, z, t, text, mask, cv)
        assert (got - want).abs().max() < 1e-5


def test_identity_mode_single_frame_stacking():
    model = init_params(ArchConfig(**TINY, temporal_init="identity"), Rng(3))
    z, t, text, mask, cv = random_inputs(9, f=5)
    with torch.no_grad():
        whole = model(z, t, text, mask, cv)
        parts = torch.cat([model(z[:, i:i + 1], t, text, mask, cv[:, i:i + 1]) for i in range(5)], dim=1)
    assert (whole - parts).abs().max() < 1e-5


def test_identity_mode_frame_permutation():
    model = init_params(ArchConfig(**TINY, temporal_init="identity"), Rng(4))
    z, t, text, mask, cv = random_inputs(2, f=5)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        out = model(z, t, text, mask, cv)
        out_p = model(z[:, perm], t, text, mask, cv[:, perm])
    assert (out[:, perm] - out_p).abs().max() < 1e-5


def test_random_mode_couples_frames(tiny_model):
    z, t, text, mask, cv = random_inputs(2, f=4)
    z2 = z.clone()
    z2[:, 0] += 1.0
    with torch.no_grad():
        a = tiny_model(z, t, text, mask, cv)
        b = tiny_model(z2, t, text, mask, cv)
    assert (a[:, 3] - b[:, 3]).abs().max() > 0


@pytest.mark.parametrize("levels", [1, 2])
def test_output_shape(levels):
    cfg = ArchConfig(**dict(TINY, levels=levels))
    model = init_params(cfg, Rng(0))
    z, t, text, mask, cv = random_inputs(0, b=1, f=5)
    with torch.no_grad():
        assert model(z, t, text, mask, cv).shape == z.shape


def _single(table8, seed=0):
    rng = Rng(seed)
    z = VideoTensor(rng.normal((4, 3, 8, 8)))
    cv = encode_video(VideoTensor(rng.integers(0, 255, size=(4, 3, 8, 8)).astype(np.float32), Domain.PIXEL))
    return z, cv


def test_forward_text_sensitivity(tiny_model, table8):
    z, cv = _single(table8)
    a = forward(tiny_model, z, 500, encode_instruction([1, 2, 3], table8), cv)
    b = forward(tiny_model, z, 500, encode_instruction([1, 2, 4], table8), cv)
    assert a.shape == z.shape
    assert np.abs(a.data - b.data).max() > 0


def test_forward_video_sensitivity(tiny_model, table8):
    z, cv = _single(table8)
    c = encode_instruction([1, 2, 3], table8)
    a = forward(tiny_model, z, 500, c, cv)
    b = forward(tiny_model, z, 500, c, null_video(cv.shape))
    assert np.abs(a.data - b.data).max() > 0


def test_forward_deterministic(tiny_model, table8):
    z, cv = _single(table8)
    c = encode_instruction([5, 6], table8)
    assert forward(tiny_model, z, 10, c, cv).bit_equal(forward(tiny_model, z, 10, c, cv))


def test_forward_shape_mismatch(tiny_model, table8):
    z, cv = _single(table8)
    with pytest.raises(DimensionError):
        forward(tiny_model, VideoTensor(np.zeros((3, 3, 8, 8), np.float32)), 10,
                encode_instruction([1], table8), cv)


def test_flatten_roundtrip(tiny_config):
    model = init_params(tiny_config, Rng(0))
    vec = flatten(init_params(tiny_config, Rng(1)))
    assert param_count(model) == vec.numel() < 10_000
    assert torch.equal(flatten(unflatten(model, vec)), vec)
    with pytest.raises(DimensionError):
        unflatten(model, vec[:-1])


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path, {"note": 1})
    back, meta = load_checkpoint(path)
    assert meta["note"] == 1
    assert back.config == tiny_model.config
    assert torch.equal(flatten(back), flatten(tiny_model))


def test_checkpoint_bad_magic(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_gradients_with_zero_lambda_equal_mse(tiny_model, table8):
    batch = small_batch(table8)
    sched = make_schedule()
    g0 = param_gradients(tiny_model, batch, sched, LossConfig(0.0))
    tiny_model.zero_grad()
    z_t = q_sample(batch.z0, batch.t, batch.eps, sched)
    loss_sd(tiny_model(z_t, batch.t, batch.text, batch.text_mask, batch.c_v), batch.eps).backward()
    g_mse = torch.cat([p.grad.reshape(-1) for p in tiny_model.parameters()])
    assert torch.equal(g0, g_mse)


def test_gradient_matches_fine_differences(tiny_model):
    # with h = 1e-4 the O(h^2) truncation error is negligible elementwise
    table = make_embedding_table(23, TINY["text_dim"])
    elementwise, _ = gradient_check(tiny_model, small_batch(table, frames=2), make_schedule(), LossConfig(1e-3), h=1e-4)
    assert elementwise.max() < 1e-4


def test_empty_batch_rejected(tiny_model, table8):
    with pytest.raises(ValueError):
        prepare_batch([], make_schedule(), DropoutPolicy(), table8, Rng(0))
    b = small_batch(table8)
    empty = Batch(b.z0[:0], b.t[:0], b.eps[:0], b.text[:0], b.text_mask[:0], b.c_v[:0], b.dropout[:0])
    with pytest.raises(ValueError):
        param_gradients(tiny_model, empty, make_schedule(), LossConfig())
