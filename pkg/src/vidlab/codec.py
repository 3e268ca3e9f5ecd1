"""Frozen stand-in encoders: a pixel/latent video codec and a token embedder."""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import DimensionError, Domain, Rng, VideoTensor


class VocabError(KeyError):
    pass


@dataclass(frozen=True)
class LatentVideo:
    tensor: VideoTensor
    scale: int = 1  # 1: identity codec, 2: 2x2 mean-pooled
    null: bool = False

    def __post_init__(self):
        if self.scale not in (1, 2):
            raise ValueError("latent scale must be 1 or 2")

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


def encode_video(pixels: VideoTensor, scale: int = 1) -> LatentVideo:
    if pixels.domain is not Domain.PIXEL:
        raise ValueError("encode_video expects a pixel-range tensor")
    x = pixels.data / np.float32(127.5) - np.float32(1.0)
    if scale == 2:
        f, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"pooled codec needs even frame dims, got {h}x{w}")
        x = x.reshape(f, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    elif scale != 1:
        raise ValueError("latent scale must be 1 or 2")
    return LatentVideo(VideoTensor(x, Domain.MODEL), scale)


# float32 round-off of the affine pair stays far below this
_SNAP_TOL = 1e-3


def decode_video(latent: LatentVideo) -> VideoTensor:
    """Inverse affine map with clamping; values within 1e-3 of an integer snap to it."""
    x = latent.data.astype(np.float64)
    if latent.scale == 2:
        x = x.repeat(2, axis=2).repeat(2, axis=3)
    pixels = np.clip((x + 1.0) * 127.5, 0, 255)
    nearest = np.rint(pixels)
    pixels = np.where(np.abs(pixels - nearest) < _SNAP_TOL, nearest, pixels)
    return VideoTensor(pixels.astype(np.float32), Domain.PIXEL)


def load_vocab(path: str | os.PathLike | None = None) -> list[str]:
    """One token per line; the line number is the token id."""
    if path is None:
        text = resources.files("vidlab").joinpath("vocab.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    tokens = [line.strip() for line in text.splitlines() if line.strip()]
    if len(set(tokens)) != len(tokens):
        raise ValueError("duplicate tokens in vocabulary")
    return tokens


def save_vocab(tokens: list[str], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(tokens) + "\n")


def tokenize(text: str, vocab: list[str]) -> list[int]:
    index = {tok: i for i, tok in enumerate(vocab)}
    ids = []
    for word in text.lower().split():
        if word not in index:
            raise VocabError(f"unknown token {word!r}")
        ids.append(index[word])
    return ids


def detokenize(ids, vocab: list[str]) -> str:
    return " ".join(vocab[i] for i in ids)


def make_embedding_table(vocab_size: int, dim: int, seed: int = 0) -> np.ndarray:
    """Frozen random token table, unit-variance rows scaled by 1/sqrt(dim)."""
    rng = Rng(seed)
    return rng.normal((vocab_size, dim)) / np.float32(np.sqrt(dim))


@dataclass(frozen=True, eq=False)
class InstructionEmbedding:
    token_ids: tuple[int, ...]
    embeddings: np.ndarray  # (n, d)
    null: bool = False

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def encode_instruction(token_ids, table: np.ndarray) -> InstructionEmbedding:
    ids = tuple(int(i) for i in token_ids)
    if not ids:
        raise ValueError("instruction must contain at least one token")
    bad = [i for i in ids if not 0 <= i < table.shape[0]]
    if bad:
        raise VocabError(f"token ids {bad} outside vocabulary of size {table.shape[0]}")
    emb = np.asarray(table, dtype=np.float32)[list(ids)]
    emb.flags.writeable = False
    return InstructionEmbedding(ids, emb)


def null_text(dim: int) -> InstructionEmbedding:
    emb = np.zeros((1, dim), dtype=np.float32)
    emb.flags.writeable = False
    return InstructionEmbedding((), emb, null=True)


def null_video(shape, scale: int = 1) -> LatentVideo:
    return LatentVideo(VideoTensor(np.zeros(shape, np.float32), Domain.MODEL), scale, null=True)


def null_conditions(latent_shape, dim: int, scale: int = 1) -> tuple[InstructionEmbedding, LatentVideo]:
    """Dropped-condition representations: ``(c_T, c_V)``, both all-zeros."""
    return null_text(dim), null_video(latent_shape, scale)
