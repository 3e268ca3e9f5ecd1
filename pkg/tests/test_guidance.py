import numpy as np
import pytest
import torch

from vidlab.codec import encode_instruction, encode_video, make_embedding_table, null_text, null_video
from vidlab.core import DimensionError, Domain, Rng, VideoTensor
from vidlab.denoiser import ArchConfig, forward, init_params
from vidlab.diffusion import ConfigError, make_schedule
from vidlab.guidance import GuidanceScales, combine, guided_noise, sample_edit, sampling_timesteps
from vidlab.triplets import gen_triplets

from oracles import TINY


def test_combine_scalar_example():
    out = combine(np.array(0.0), np.array(1.0), np.array(2.0), GuidanceScales(1.5, 7.5))
    assert out == 9.0


def test_combine_unit_and_zero_scales_exact():
    e = [Rng(i).normal((2, 3, 4, 4)) for i in range(3)]
    assert np.array_equal(combine(*e, GuidanceScales(1.0, 1.0)), e[2])
    assert np.array_equal(combine(*e, GuidanceScales(0.0, 0.0)), e[0])


def test_combine_is_affine_in_each_scale():
    e = [Rng(i).normal(50).astype(np.float64) for i in range(3)]
    d = 0.7
    dv = combine(*e, GuidanceScales(1.5 + d, 7.5)) - combine(*e, GuidanceScales(1.5, 7.5))
    dt = combine(*e, GuidanceScales(1.5, 7.5 + d)) - combine(*e, GuidanceScales(1.5, 7.5))
    assert np.allclose(dv, d * (e[1] - e[0]), atol=1e-12)
    assert np.allclose(dt, d * (e[2] - e[1]), atol=1e-12)


def test_combine_matches_nested_form():
    e0, ev, ef = (Rng(i).normal(100).astype(np.float64) for i in range(3))
    s = GuidanceScales(1.3, 4.2)
    nested = e0 + s.s_video * (ev - e0) + s.s_text * (ef - ev)
    assert np.allclose(combine(e0, ev, ef, s), nested, atol=1e-12)


def test_combine_shape_mismatch():
    with pytest.raises(DimensionError):
        combine(np.zeros(3), np.zeros(3), np.zeros(4), GuidanceScales())


def test_scales_must_be_finite():
    with pytest.raises(ValueError):
        GuidanceScales(float("inf"), 1.0)


@pytest.fixture(scope="module")
def setup():
    model = init_params(ArchConfig(**TINY), Rng(0))
    table = make_embedding_table(23, TINY["text_dim"])
    rng = Rng(1)
    pixels = VideoTensor(rng.integers(0, 255, size=(3, 3, 8, 8)).astype(np.float32), Domain.PIXEL)
    return model, table, pixels, VideoTensor(rng.normal((3, 3, 8, 8)))


def test_guided_noise_telescopes(setup):
    model, table, pixels, z = setup
    c_t, c_v = encode_instruction([1, 4, 9], table), encode_video(pixels)
    full = forward(model, z, 321, c_t, c_v)
    unit = guided_noise(model, z, 321, c_t, c_v, GuidanceScales(1.0, 1.0))
    assert np.abs(unit.data - full.data).max() < 1e-6
    zero = guided_noise(model, z, 321, c_t, c_v, GuidanceScales(0.0, 0.0))
    none = forward(model, z, 321, null_text(table.shape[1]), null_video(c_v.shape))
    assert np.abs(zero.data - none.data).max() < 1e-6


def test_guided_noise_shape_mismatch(setup):
    model, table, pixels, z = setup
    with pytest.raises(DimensionError):
        guided_noise(model, VideoTensor(np.zeros((2, 3, 8, 8), np.float32)), 5,
                     encode_instruction([1], table), encode_video(pixels), GuidanceScales())


def test_sampling_timesteps():
    assert sampling_timesteps(1000, 1) == [1000]
    ts = sampling_timesteps(1000, 50)
    assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 50
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert sampling_timesteps(5, 5) == [5, 4, 3, 2, 1]
    with pytest.raises(ConfigError):
        sampling_timesteps(10, 11)
    with pytest.raises(ConfigError):
        sampling_timesteps(10, 0)


def test_sample_edit_deterministic_and_shaped(setup):
    model, table, pixels, _ = setup
    sched = make_schedule()
    a = sample_edit(model, pixels, [1, 2], table, sched, Rng(3), steps=4)
    b = sample_edit(model, pixels, [1, 2], table, sched, Rng(3), steps=4)
    c = sample_edit(model, pixels, [1, 2], table, sched, Rng(4), steps=4)
    assert a.bit_equal(b)
    assert a.shape == pixels.shape and a.domain is Domain.PIXEL
    assert not np.array_equal(a.data, c.data)


def test_sample_edit_unit_scales_equal_unguided(setup):
    model, table, pixels, _ = setup
    sched = make_schedule()
    a = sample_edit(model, pixels, [3], table, sched, Rng(3), steps=3, scales=GuidanceScales(1.0, 1.0))
    b = sample_edit(model, pixels, [3], table, sched, Rng(3), steps=3, scales=None)
    assert a.bit_equal(b)


def test_sample_edit_too_many_steps(setup):
    model, table, pixels, _ = setup
    with pytest.raises(ConfigError):
        sample_edit(model, pixels, [1], table, make_schedule(20), Rng(0), steps=21)


def test_sample_edit_pooled_latent():
    model = init_params(ArchConfig(**TINY), Rng(0))
    table = make_embedding_table(23, TINY["text_dim"])
    tr = gen_triplets(1, 3)[0]
    small = VideoTensor(tr.input.data[:2, :, :16, :16], Domain.PIXEL)
    out = sample_edit(model, small, tr.token_ids, table, make_schedule(), Rng(0), steps=2, latent_scale=2)
    assert out.shape == small.shape


def test_three_evaluations_run_in_eval_mode(setup):
    model, table, pixels, z = setup
    model.train()
    guided_noise(model, z, 10, encode_instruction([1], table), encode_video(pixels), GuidanceScales())
    assert not model.training
    assert torch.is_grad_enabled()
