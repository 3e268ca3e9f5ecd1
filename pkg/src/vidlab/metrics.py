"""Temporal-consistency and frame-quality metrics for pixel-range videos."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .core import VideoTensor


class MetricError(ValueError):
    """Metric undefined for the given input (too few frames, bad sizes)."""


GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _pixels(video) -> np.ndarray:
    arr = video.data if isinstance(video, VideoTensor) else np.asarray(video)
    if arr.ndim != 4:
        raise MetricError(f"expected (f, c, h, w), got shape {arr.shape}")
    return arr.astype(np.float64)


def grayscale(video) -> np.ndarray:
    """``(f, h, w)`` luma; single-channel input is returned as is."""
    x = _pixels(video)
    if x.shape[1] == 1:
        return x[:, 0]
    if x.shape[1] != 3:
        raise MetricError("grayscale needs 1 or 3 channels")
    return np.tensordot(GRAY_WEIGHTS, x, axes=([0], [1]))


def frame_differencing(video) -> float:
    x = _pixels(video)
    if x.shape[0] < 2:
        raise MetricError("frame differencing needs at least two frames")
    return float(np.mean(np.abs(np.diff(x, axis=0))))


_HS_AVG = np.array([[1 / 12, 1 / 6, 1 / 12],
                    [1 / 6, 0.0, 1 / 6],
                    [1 / 12, 1 / 6, 1 / 12]])


def hs_derivatives(prev: np.ndarray, nxt: np.ndarray):
    """Horn-Schunck brightness derivatives averaged over the 2x2x2 cube."""
    a = np.pad(prev, ((0, 1), (0, 1)), mode="edge")
    b = np.pad(nxt, ((0, 1), (0, 1)), mode="edge")
    ex = 0.25 * (a[:-1, 1:] - a[:-1, :-1] + a[1:, 1:] - a[1:, :-1]
                 + b[:-1, 1:] - b[:-1, :-1] + b[1:, 1:] - b[1:, :-1])
    ey = 0.25 * (a[1:, :-1] - a[:-1, :-1] + a[1:, 1:] - a[:-1, 1:]
                 + b[1:, :-1] - b[:-1, :-1] + b[1:, 1:] - b[:-1, 1:])
    et = 0.25 * (b[:-1, :-1] - a[:-1, :-1] + b[1:, :-1] - a[1:, :-1]
                 + b[:-1, 1:] - a[:-1, 1:] + b[1:, 1:] - a[1:, 1:])
    return ex, ey, et


def horn_schunck(prev: np.ndarray, nxt: np.ndarray, alpha: float = 1.0, iters: int = 100):
    """Dense flow ``(u, v)`` from ``prev`` to ``nxt`` (2-D intensity arrays)."""
    ex, ey, et = hs_derivatives(np.asarray(prev, np.float64), np.asarray(nxt, np.float64))
    u = np.zeros_like(ex)
    v = np.zeros_like(ex)
    denom = alpha * alpha + ex * ex + ey * ey
    for _ in range(iters):
        ubar = ndimage.convolve(u, _HS_AVG, mode="nearest")
        vbar = ndimage.convolve(v, _HS_AVG, mode="nearest")
        common = (ex * ubar + ey * vbar + et) / denom
        u = ubar - ex * common
        v = vbar - ey * common
    return u, v


def optical_flow_metric(video, alpha: float = 1.0, iters: int = 100) -> float:
    """Mean magnitude of the change between consecutive flow fields."""
    gray = grayscale(video)
    if gray.shape[0] < 3:
        raise MetricError("optical-flow metric needs at least three frames")
    flows = [horn_schunck(gray[i - 1], gray[i], alpha, iters) for i in range(1, gray.shape[0])]
    changes = [np.mean(np.hypot(u1 - u0, v1 - v0)) for (u0, v0), (u1, v1) in zip(flows, flows[1:])]
    return float(np.mean(changes))


def block_match(prev: np.ndarray, nxt: np.ndarray, block: int = 8, radius: int = 4, eps: float = 1e-6):
    """Exhaustive NCC search of each ``block``-sized tile of ``prev`` inside ``nxt``.

    Returns the best score per tile, shape ``(rows, cols)``, and the matching
    displacement ``(dx, dy)`` per tile. Ties keep the smallest displacement.
    The score is ``(sum(a'b') + eps) / sqrt((sum(a'^2) + eps)(sum(b'^2) + eps))``
    over mean-removed tiles, so two flat tiles score 1.
    """
    prev = np.asarray(prev, np.float64)
    nxt = np.asarray(nxt, np.float64)
    h, w = prev.shape
    if block < 1 or block > min(h, w):
        raise MetricError(f"block size {block} does not fit a {h}x{w} frame")
    rows, cols = h // block, w // block
    ys = np.arange(rows)[:, None] * block
    xs = np.arange(cols)[None, :] * block
    # tiles and candidates go through identical gathers so equal content gives equal sums
    tiles = sliding_window_view(prev, (block, block))[ys, xs]
    tiles = tiles - tiles.mean(axis=(2, 3), keepdims=True)
    tile_energy = np.sum(tiles * tiles, axis=(2, 3))

    windows = sliding_window_view(nxt, (block, block))  # (h-B+1, w-B+1, B, B)
    best = np.full((rows, cols), -np.inf)
    vectors = np.zeros((rows, cols, 2), dtype=np.int64)
    offsets = sorted(((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
                     key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    for dy, dx in offsets:
        y, x = ys + dy, xs + dx
        valid = (y >= 0) & (y <= h - block) & (x >= 0) & (x <= w - block)
        if not valid.any():
            continue
        cand = windows[np.clip(y, 0, h - block), np.clip(x, 0, w - block)]
        cand = cand - cand.mean(axis=(2, 3), keepdims=True)
        num = np.sum(tiles * cand, axis=(2, 3)) + eps
        den = np.sqrt((tile_energy + eps) * (np.sum(cand * cand, axis=(2, 3)) + eps))
        score = np.where(valid, num / den, -np.inf)
        better = score > best
        best = np.where(better, score, best)
        vectors[better] = (dx, dy)
    return np.clip(best, -1.0, 1.0), vectors


def block_matching(video, block: int = 8, radius: int = 4) -> float:
    gray = grayscale(video)
    if gray.shape[0] < 2:
        raise MetricError("block matching needs at least two frames")
    scores = [block_match(gray[i - 1], gray[i], block, radius)[0] for i in range(1, gray.shape[0])]
    return float(np.mean(scores))


LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])
# E|N(0, 20 s^2)| = sqrt(2/pi) sqrt(20) s, and sum(LAPLACIAN**2) == 20
NOISE_CALIBRATION = math.sqrt(math.pi / 2) / math.sqrt(20.0)
PSNR_CAP_DB = 100.0


def noise_sigma(frame: np.ndarray) -> float:
    """Noise std estimate from the mean absolute 4-neighbour Laplacian response."""
    img = np.asarray(frame, np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise MetricError("noise estimation needs a 2-D frame of at least 3x3")
    resp = (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:] - 4.0 * img[1:-1, 1:-1])
    return NOISE_CALIBRATION * float(np.mean(np.abs(resp)))


def psnr_from_sigma(sigma: float, peak: float = 255.0) -> float:
    if sigma < peak * 1e-5:
        return PSNR_CAP_DB
    return 20.0 * math.log10(peak / sigma)


def nr_psnr(video) -> float:
    gray = grayscale(video)
    if min(gray.shape[1:]) < 3:
        raise MetricError("NR-PSNR needs frames of at least 3x3")
    return float(np.mean([psnr_from_sigma(noise_sigma(g)) for g in gray]))


def frame_features(frames) -> np.ndarray:
    """Handcrafted 32-d descriptor per frame.

    R, G, B and luma means and stds (8), 4x4 block-mean luma (16) and an
    8-bin magnitude-weighted gradient-orientation histogram (8), all on
    intensities scaled to [0, 1].
    """
    x = _pixels(frames) / 255.0
    if x.shape[1] == 1:
        x = np.repeat(x, 3, axis=1)
    gray = np.tensordot(GRAY_WEIGHTS, x, axes=([0], [1]))
    chans = np.concatenate([x, gray[:, None]], axis=1)
    stats = [chans.mean(axis=(2, 3)), chans.std(axis=(2, 3))]

    pooled = np.stack([blk.mean(axis=(1, 2)) for rows in np.array_split(gray, 4, axis=1)
                       for blk in np.array_split(rows, 4, axis=2)], axis=1)

    gy, gx = np.gradient(gray, axis=(1, 2))
    mag = np.hypot(gx, gy)
    bins = np.floor((np.arctan2(gy, gx) + np.pi) / (2 * np.pi) * 8).astype(np.int64) % 8
    hist = np.stack([np.bincount(b.ravel(), weights=m.ravel(), minlength=8) for b, m in zip(bins, mag)])
    hist = hist / np.maximum(hist.sum(axis=1, keepdims=True), 1e-12)
    return np.concatenate(stats + [pooled, hist], axis=1)


def _frame_stack(frames) -> np.ndarray:
    if isinstance(frames, VideoTensor):
        return frames.data
    if isinstance(frames, (list, tuple)):
        return np.concatenate([_frame_stack(f) for f in frames], axis=0)
    return np.asarray(frames)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_stats(mu1, sigma1, mu2, sigma2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`` via eigen-decompositions."""
    root1 = sqrtm_psd(sigma1)
    inner = root1 @ sigma2 @ root1
    eig = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)
    diff = np.asarray(mu1) - np.asarray(mu2)
    value = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.sum(np.sqrt(eig))
    return max(float(value), 0.0)


def gaussian_stats(features: np.ndarray, eps: float = 1e-6):
    feats = np.asarray(features, np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise MetricError("Frechet statistics need at least two feature vectors")
    cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
    return feats.mean(axis=0), cov + eps * np.eye(feats.shape[1])


def frechet_distance(frames_a, frames_b, feature_extractor: Callable = frame_features, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to per-frame features.

    ``frames_*`` may be a VideoTensor, an ``(n, c, h, w)`` array or a list of
    either; all frames are pooled into one set.
    """
    fa, fb = _frame_stack(frames_a), _frame_stack(frames_b)
    if len(fa) < 2 or len(fb) < 2:
        raise MetricError("Frechet distance needs at least two frames per set")
    feats_a, feats_b = feature_extractor(fa), feature_extractor(fb)
    if feats_a.shape[1] != feats_b.shape[1]:
        raise MetricError("feature dimensions differ between the two sets")
    return frechet_from_stats(*gaussian_stats(feats_a, eps), *gaussian_stats(feats_b, eps))


DIRECTIONS = {"fd": "lower", "of": "lower", "bm": "higher", "nr_psnr": "higher", "frechet": "lower"}
GROUPS = {"consistency": ("fd", "of", "bm"), "quality": ("nr_psnr", "frechet")}


@dataclass(frozen=True)
class MetricsConfig:
    hs_alpha: float = 1.0
    hs_iters: int = 100
    block: int = 8
    radius: int = 4


@dataclass(frozen=True)
class MetricsReport:
    fd: float | None
    of: float | None
    bm: float | None
    nr_psnr: float
    frechet: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {group: {k: getattr(self, k) for k in keys} for group, keys in GROUPS.items()}
        out["directions"] = dict(DIRECTIONS)
        out["config"] = dict(self.config)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        vals = {k: d[g][k] for g, keys in GROUPS.items() for k in keys}
        return cls(**vals, config=d.get("config", {}))

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        return cls.from_dict(json.loads(text))


def report(video, reference_frames=None, config: MetricsConfig = MetricsConfig(),
           feature_extractor: Callable = frame_features) -> MetricsReport:
    f = _pixels(video).shape[0]
    return MetricsReport(
        fd=frame_differencing(video) if f >= 2 else None,
        of=optical_flow_metric(video, config.hs_alpha, config.hs_iters) if f >= 3 else None,
        bm=block_matching(video, config.block, config.radius) if f >= 2 else None,
        nr_psnr=nr_psnr(video),
        frechet=None if reference_frames is None else frechet_distance(video, reference_frames, feature_extractor),
        config=asdict(config),
    )
