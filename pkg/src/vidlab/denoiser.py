"""Pseudo-3D noise-prediction network.

Every convolution is a space-only ``(1, 3, 3)`` kernel followed by a temporal
``(3, 1, 1)`` kernel; attention blocks run spatial self-attention per frame,
then temporal self-attention per pixel, then cross-attention to instruction
tokens. Inside the network activations are kept frame-batched as
``(batch * frames, channels, h, w)``; the boundary is frame-major
``(batch, frames, channels, h, w)``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import InstructionEmbedding, LatentVideo
from .core import DimensionError, Domain, FormatError, Rng, VideoTensor, read_tensor, write_tensor


@dataclass
class ArchConfig:
    channels: int = 3  # latent channels; the network input is 2x this (z_t ++ c_V)
    base_channels: int = 16
    levels: int = 2
    attn_levels: tuple[int, ...] = ()  # extra attention blocks; the middle block always has one
    text_dim: int = 32
    time_dim: int = 64
    groups: int = 8
    temporal_init: str = "random"

    def __post_init__(self):
        self.attn_levels = tuple(int(a) for a in self.attn_levels)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.temporal_init not in ("random", "identity"):
            raise ValueError(f"unknown temporal_init {self.temporal_init!r}")
        if any(not 0 <= a < self.levels for a in self.attn_levels):
            raise ValueError("attn_levels out of range")

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attn_levels"] = list(self.attn_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        return cls(**d)


def inflate2d(kernel2d) -> torch.Tensor:
    """(out, in, 3, 3) spatial kernel -> (out, in, 1, 3, 3) space-only 3D kernel."""
    k = torch.as_tensor(kernel2d)
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"expected an (out, in, 3, 3) kernel, got {tuple(k.shape)}")
    return k.unsqueeze(2).clone()


def _group_count(channels: int, groups: int) -> int:
    return math.gcd(channels, groups)


class FrameGroupNorm(nn.GroupNorm):
    """GroupNorm over frame-batched input, so statistics never mix frames."""

    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        super().__init__(_group_count(channels, groups), channels, eps)


def temporal_conv(x, weight, bias, frames: int):
    """Apply a ``(out, in, 3, 1, 1)`` kernel along time with zero padding."""
    bf, c, h, w = x.shape
    y = x.reshape(bf // frames, frames, c, h * w).transpose(1, 2)
    y = F.conv2d(y, weight[..., 0], bias, padding=(1, 0))
    return y.transpose(1, 2).reshape(bf, weight.shape[0], h, w)


class PseudoConv3d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.spatial_weight = nn.Parameter(torch.empty(cout, cin, 1, 3, 3))
        self.spatial_bias = nn.Parameter(torch.zeros(cout))
        self.temporal_weight = nn.Parameter(torch.empty(cout, cout, 3, 1, 1))
        self.temporal_bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x, frames: int):
        x = F.conv2d(x, self.spatial_weight[:, :, 0], self.spatial_bias, stride=self.stride, padding=1)
        return temporal_conv(x, self.temporal_weight, self.temporal_bias, frames)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = FrameGroupNorm(cin, groups)
        self.conv1 = PseudoConv3d(cin, cout)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = FrameGroupNorm(cout, groups)
        self.conv2 = PseudoConv3d(cout, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, temb, frames: int):
        h = self.conv1(F.silu(self.norm1(x)), frames)
        h = h + self.time_proj(temb).repeat_interleave(frames, dim=0)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)), frames)
        return (x if self.skip is None else self.skip(x)) + h


def _attend(q, k, v, mask=None):
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None = None):
        super().__init__()
        context_dim = dim if context_dim is None else context_dim
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(context_dim, dim, bias=False)
        self.v = nn.Linear(context_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        return self.out(_attend(self.q(x), self.k(context), self.v(context), mask))


class AttnBlock(nn.Module):
    """Spatial self-attention, temporal self-attention, optional text cross-attention."""

    def __init__(self, channels: int, groups: int, text_dim: int | None):
        super().__init__()
        self.spatial_norm = FrameGroupNorm(channels, groups)
        self.spatial = Attention(channels)
        self.temporal_norm = nn.LayerNorm(channels)
        self.temporal = Attention(channels)
        if text_dim is not None:
            self.cross_norm = nn.LayerNorm(channels)
            self.cross = Attention(channels, text_dim)
        else:
            self.cross = None

    def forward(self, x, text, text_mask, frames: int):
        bf, c, h, w = x.shape
        b = bf // frames
        s = self.spatial_norm(x).reshape(bf, c, h * w).transpose(1, 2)
        tokens = x.reshape(bf, c, h * w).transpose(1, 2) + self.spatial(s)  # (bf, hw, c)

        tt = tokens.reshape(b, frames, h * w, c).transpose(1, 2).reshape(b * h * w, frames, c)
        tt = tt + self.temporal(self.temporal_norm(tt))
        tokens = tt.reshape(b, h * w, frames, c).transpose(1, 2).reshape(b, frames * h * w, c)

        if self.cross is not None:
            tokens = tokens + self.cross(self.cross_norm(tokens), text, text_mask[:, None, :])
        return tokens.reshape(bf, h * w, c).transpose(1, 2).reshape(bf, c, h, w)


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """Noise predictor e(z_t, t, c_T, c_V) on ``(batch, frames, channels, h, w)`` input."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = cfg = config
        g, td = cfg.groups, cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        ch = cfg.level_channels(0)
        self.conv_in = PseudoConv3d(2 * cfg.channels, ch)
        top = cfg.levels - 1

        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = []
        for level in range(cfg.levels):
            out = cfg.level_channels(level)
            self.down.append(ResBlock(ch, out, td, g))
            self.down_attn.append(self._maybe_attn(level, out))
            skips.append(out)
            ch = out
            if level < top:
                self.downsample.append(PseudoConv3d(ch, ch, stride=2))

        self.mid1 = ResBlock(ch, ch, td, g)
        self.mid_attn = AttnBlock(ch, g, cfg.text_dim)
        self.mid2 = ResBlock(ch, ch, td, g)

        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level in reversed(range(cfg.levels)):
            out = cfg.level_channels(level)
            self.up.append(ResBlock(ch + skips[level], out, td, g))
            self.up_attn.append(self._maybe_attn(level, out))
            ch = out
            if level > 0:
                self.upsample.append(PseudoConv3d(ch, ch))

        self.norm_out = FrameGroupNorm(ch, g)
        self.conv_out = PseudoConv3d(ch, cfg.channels)

    def _maybe_attn(self, level, channels):
        if level not in self.config.attn_levels:
            return nn.Identity()
        text_dim = self.config.text_dim if level == self.config.levels - 1 else None
        return AttnBlock(channels, self.config.groups, text_dim)

    def forward(self, z_t, t, text, text_mask, c_v):
        if z_t.shape != c_v.shape:
            raise DimensionError(f"z_t {tuple(z_t.shape)} and c_V {tuple(c_v.shape)} differ")
        if z_t.ndim != 5:
            raise DimensionError("expected (batch, frames, channels, h, w)")
        b, f, c, h, w = z_t.shape
        scale = 2 ** (self.config.levels - 1)
        if h % scale or w % scale:
            raise DimensionError(f"frame size {h}x{w} not divisible by {scale}")
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim).to(z_t.dtype))

        x = torch.cat([z_t, c_v], dim=2).reshape(b * f, 2 * c, h, w)
        x = self.conv_in(x, f)
        skips = []
        for level, block in enumerate(self.down):
            x = block(x, temb, f)
            x = self._apply_attn(self.down_attn[level], x, text, text_mask, f)
            skips.append(x)
            if level < len(self.downsample):
                x = self.downsample[level](x, f)

        x = self.mid1(x, temb, f)
        x = self.mid_attn(x, text, text_mask, f)
        x = self.mid2(x, temb, f)

        for i, block in enumerate(self.up):
            x = block(torch.cat([x, skips.pop()], dim=1), temb, f)
            x = self._apply_attn(self.up_attn[i], x, text, text_mask, f)
            if i < len(self.upsample):
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = self.upsample[i](x, f)

        x = self.conv_out(F.silu(self.norm_out(x)), f)
        return x.reshape(b, f, c, h, w)

    @staticmethod
    def _apply_attn(block, x, text, text_mask, frames):
        if isinstance(block, nn.Identity):
            return x
        return block(x, text, text_mask, frames)


def init_params(config: ArchConfig, rng: Rng) -> Denoiser:
    """Build a network with weights drawn from ``rng``.

    Weights are N(0, 1/fan_in), biases and norm shifts zero, norm scales one.
    With ``temporal_init="identity"`` every temporal kernel is a Dirac delta
    on its centre tap and the temporal-attention output projections are zero,
    so the network acts on each frame independently.
    """
    model = Denoiser(config)
    identity = config.temporal_init == "identity"
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            is_norm = ".norm" in name or name.startswith("norm") or "_norm" in name
            if is_norm:
                p.copy_(torch.ones_like(p) if leaf == "weight" else torch.zeros_like(p))
            elif leaf.endswith("bias") or leaf == "bias":
                p.zero_()
            elif identity and leaf == "temporal_weight":
                p.zero_()
                idx = torch.arange(p.shape[0])
                p[idx, idx, 1, 0, 0] = 1.0
            elif identity and ".temporal.out." in name:
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:])) if p.ndim > 1 else p.shape[0]
                w = rng.normal(tuple(p.shape)) / np.float32(math.sqrt(fan_in))
                p.copy_(torch.from_numpy(w))
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def flatten(model: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def unflatten(model: nn.Module, vector) -> nn.Module:
    vec = torch.as_tensor(vector)
    if vec.numel() != param_count(model):
        raise DimensionError(f"vector has {vec.numel()} entries, model has {param_count(model)}")
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec.to(next(model.parameters()).dtype), model.parameters())
    return model


def text_batch(embeddings: list[InstructionEmbedding], dtype=torch.float32):
    """Pad instruction embeddings into ``(B, n, d)`` plus a ``(B, n)`` key mask."""
    n = max(e.embeddings.shape[0] for e in embeddings)
    d = embeddings[0].dim
    text = torch.zeros(len(embeddings), n, d, dtype=dtype)
    mask = torch.zeros(len(embeddings), n, dtype=torch.bool)
    for i, e in enumerate(embeddings):
        k = e.embeddings.shape[0]
        text[i, :k] = torch.tensor(np.asarray(e.embeddings), dtype=dtype)
        mask[i, :k] = True
    return text, mask


def forward(model: Denoiser, z_t: LatentVideo | VideoTensor, t: int,
            c_text: InstructionEmbedding, c_video: LatentVideo) -> VideoTensor:
    """Single-video evaluation returning the predicted noise."""
    zt = z_t.tensor if isinstance(z_t, LatentVideo) else z_t
    if zt.shape != c_video.shape:
        raise DimensionError(f"z_t {zt.shape} and c_V {c_video.shape} differ")
    dtype = next(model.parameters()).dtype
    text, mask = text_batch([c_text], dtype)
    with torch.no_grad():
        out = model(
            torch.from_numpy(zt.numpy()).to(dtype)[None],
            torch.tensor([t]),
            text,
            mask,
            torch.from_numpy(c_video.tensor.numpy()).to(dtype)[None],
        )
    return VideoTensor(out[0].to(torch.float32).numpy(), Domain.UNCONSTRAINED)


# Checkpoint: magic, u32 group count, then per group (u32 name length, name,
# u32 ndim, ndim x u64 dims, .vten block holding the flat values). The
# architecture lives in a JSON sidecar next to the checkpoint.
CKPT_MAGIC = b"VCKPT\x00\x01\n"


def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def save_checkpoint(model: Denoiser, path, extra: dict | None = None) -> None:
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(state)))
        for name, value in state.items():
            raw = name.encode()
            arr = value.detach().to(torch.float32).numpy()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            write_tensor(fh, VideoTensor(arr.reshape(1, 1, 1, -1)))
    meta = {"arch": model.config.to_dict(), **(extra or {})}
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    with open(sidecar_path(path)) as fh:
        meta = json.load(fh)
    model = Denoiser(ArchConfig.from_dict(meta["arch"]))
    state = {}
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            flat = read_tensor(fh).data.reshape(-1)
            state[name] = torch.from_numpy(flat.copy().reshape(shape))
    model.load_state_dict(state)
    return model, meta
