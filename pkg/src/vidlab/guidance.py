"""Two-condition classifier-free guidance and the editing sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .codec import (InstructionEmbedding, LatentVideo, decode_video, encode_instruction, encode_video,
                    null_text)
from .core import DimensionError, Rng, VideoTensor
from .denoiser import Denoiser, text_batch
from .diffusion import ConfigError, NoiseSchedule


@dataclass(frozen=True)
class GuidanceScales:
    s_video: float = 1.5
    s_text: float = 7.5

    def __post_init__(self):
        if not (math.isfinite(self.s_video) and math.isfinite(self.s_text)):
            raise ValueError("guidance scales must be finite")


def combine(e_none, e_video, e_full, scales: GuidanceScales):
    """Guided noise from the three condition evaluations.

    ``e_none + s_V (e_video - e_none) + s_T (e_full - e_video)``, expanded as
    a weighted sum so that unit scales return ``e_full`` exactly and zero
    scales return ``e_none`` exactly.
    """
    if not e_none.shape == e_video.shape == e_full.shape:
        raise DimensionError("guidance evaluations disagree in shape")
    s_v, s_t = scales.s_video, scales.s_text
    return (1.0 - s_v) * e_none + (s_v - s_t) * e_video + s_t * e_full


class Conditioning:
    """Batched conditioned and null inputs for one editing request."""

    def __init__(self, c_text: InstructionEmbedding, c_video: LatentVideo, dtype=torch.float32):
        self.dtype = dtype
        self.text, self.mask = text_batch([c_text], dtype)
        self.null_text, self.null_mask = text_batch([null_text(c_text.dim)], dtype)
        self.video = torch.from_numpy(c_video.tensor.numpy()).to(dtype)[None]
        self.null_video = torch.zeros_like(self.video)


@torch.no_grad()
def guided_eps(model: Denoiser, z_t, t, cond: Conditioning, scales: GuidanceScales | None):
    """Guided prediction on a ``(1, f, c, h, w)`` tensor; ``scales=None`` is the plain conditional model."""
    tt = torch.tensor([int(t)])
    e_full = model(z_t, tt, cond.text, cond.mask, cond.video)
    if scales is None:
        return e_full
    e_none = model(z_t, tt, cond.null_text, cond.null_mask, cond.null_video)
    e_video = model(z_t, tt, cond.null_text, cond.null_mask, cond.video)
    return combine(e_none, e_video, e_full, scales)


def guided_noise(model: Denoiser, z_t: VideoTensor, t: int, c_text: InstructionEmbedding,
                 c_video: LatentVideo, scales: GuidanceScales) -> VideoTensor:
    if z_t.shape != c_video.shape:
        raise DimensionError(f"z_t {z_t.shape} and c_V {c_video.shape} differ")
    model.eval()
    dtype = next(model.parameters()).dtype
    cond = Conditioning(c_text, c_video, dtype)
    z = torch.from_numpy(z_t.numpy()).to(dtype)[None]
    return VideoTensor(guided_eps(model, z, t, cond, scales)[0].to(torch.float32).numpy())


def sampling_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1:
        raise ConfigError("need at least one sampling step")
    if steps > T:
        raise ConfigError(f"{steps} sampling steps exceed the {T} schedule steps")
    return [int(v) for v in np.floor(np.linspace(T, 1, steps) + 0.5)]


@torch.no_grad()
def sample_edit(model: Denoiser, input_video: VideoTensor, token_ids, table: np.ndarray,
                schedule: NoiseSchedule, rng: Rng, steps: int = 50,
                scales: GuidanceScales | None = GuidanceScales(), latent_scale: int = 1) -> VideoTensor:
    """Deterministic DDIM edit of ``input_video`` following ``token_ids``.

    Starts from Gaussian noise drawn from ``rng``; predicted clean latents are
    clipped to [-1, 1] at every step. ``scales=None`` samples from the
    conditional model without guidance.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    c_video = encode_video(input_video, latent_scale)
    cond = Conditioning(encode_instruction(token_ids, table), c_video, dtype)
    ts = sampling_timesteps(schedule.T, steps)
    z = torch.from_numpy(rng.normal(c_video.shape)).to(dtype)[None]
    x0 = z
    for k, t in enumerate(ts):
        eps = guided_eps(model, z, t, cond, scales)
        ab = schedule.alpha_bars[t - 1]
        x0 = ((z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)).clamp(-1.0, 1.0)
        ab_prev = schedule.alpha_bars[ts[k + 1] - 1] if k + 1 < len(ts) else 1.0
        z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    latent = LatentVideo(VideoTensor(x0[0].to(torch.float32).numpy()), latent_scale)
    return decode_video(latent)
