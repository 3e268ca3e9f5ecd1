"""Noise schedule, training losses and the optimisation step.

The training objective is the noise-prediction MSE plus a weighted
inter-frame consistency penalty. With ``v_i = z_t[i] - n_p[i]`` (noisy input
frame minus predicted noise for that frame) the penalty is the mean squared
difference between adjacent ``v_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import encode_instruction, encode_video, null_text, null_video
from .core import DimensionError, Rng, VideoTensor
from .denoiser import Denoiser, flatten, text_batch
from .triplets import Triplet


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at 1-based timestep ``t``."""
        check_timestep(t, self.T)
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def check_timestep(t, T: int) -> None:
    tt = np.asarray(t)
    if tt.size == 0 or tt.min() < 1 or tt.max() > T:
        raise IndexError(f"timestep {t} outside [1, {T}]")


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """Forward noising ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    Works elementwise on numpy arrays, torch tensors and VideoTensors. For
    batched torch input ``t`` may be a ``(B,)`` tensor.
    """
    check_timestep(t.numpy() if torch.is_tensor(t) else t, schedule.T)
    if isinstance(z0, VideoTensor):
        return z0.with_data(q_sample(z0.data, t, eps.data, schedule))
    if torch.is_tensor(z0):
        ab = torch.as_tensor(schedule.alpha_bars, dtype=z0.dtype)[torch.as_tensor(t) - 1]
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    z0 = np.asarray(z0)
    ab = schedule.alpha_bars[t - 1]
    out = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * np.asarray(eps)
    return out.astype(z0.dtype, copy=False) if isinstance(z0, np.ndarray) else out


def _as_torch(x):
    if isinstance(x, VideoTensor):
        x = x.data
    if torch.is_tensor(x):
        return x
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def _check_same(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_sd(n_p, n_gt):
    """Mean squared error between predicted and true noise."""
    n_p, n_gt = _as_torch(n_p), _as_torch(n_gt)
    _check_same(n_p, n_gt)
    return torch.mean((n_p - n_gt) ** 2)


def frame_feature(n_in, n_p, i: int):
    """Frame ``i`` of the noisy input minus frame ``i`` of the predicted noise."""
    n_in, n_p = _as_torch(n_in), _as_torch(n_p)
    _check_same(n_in, n_p)
    f = n_in.shape[-4]
    if not 0 <= i < f:
        raise IndexError(f"frame {i} outside [0, {f})")
    return n_in.select(-4, i) - n_p.select(-4, i)


def loss_consistency(n_in, n_p):
    """Mean over adjacent frame pairs of ``mean((v_i - v_{i-1})**2)``; 0 for one frame.

    The frame axis is the fourth from the end, so both ``(f, c, h, w)`` and
    batched ``(B, f, c, h, w)`` inputs work (batches are averaged).
    """
    n_in, n_p = _as_torch(n_in), _as_torch(n_p)
    _check_same(n_in, n_p)
    v = n_in - n_p
    if v.shape[-4] < 2:
        return v.new_zeros(())
    d = v.narrow(-4, 1, v.shape[-4] - 1) - v.narrow(-4, 0, v.shape[-4] - 1)
    return torch.mean(d * d)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-3

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError("consistency weight must be >= 0")


@dataclass(frozen=True)
class LossTerms:
    total: torch.Tensor
    sd: torch.Tensor
    fd: torch.Tensor


def loss_terms(n_p, n_gt, n_in, cfg: LossConfig) -> LossTerms:
    sd = loss_sd(n_p, n_gt)
    fd = loss_consistency(n_in, n_p)
    return LossTerms(sd + cfg.lam * fd, sd, fd)


def loss_total(n_p, n_gt, n_in, cfg: LossConfig):
    return loss_terms(n_p, n_gt, n_in, cfg).total


@dataclass(frozen=True)
class DropoutPolicy:
    p_video: float = 0.05  # only c_V dropped
    p_text: float = 0.05  # only c_T dropped
    p_both: float = 0.05

    def __post_init__(self):
        ps = (self.p_video, self.p_text, self.p_both)
        if min(ps) < 0 or sum(ps) > 1:
            raise ConfigError(f"invalid dropout probabilities {ps}")


# dropout pattern codes
KEEP, DROP_VIDEO, DROP_TEXT, DROP_BOTH = 0, 1, 2, 3


def draw_dropout(rng: Rng, n: int, policy: DropoutPolicy) -> np.ndarray:
    """One pattern code per sample, drawn independently."""
    u = rng.uniform(n)
    edges = np.cumsum([policy.p_video, policy.p_text, policy.p_both])
    codes = np.full(n, KEEP, dtype=np.int64)
    codes[u < edges[2]] = DROP_BOTH
    codes[u < edges[1]] = DROP_TEXT
    codes[u < edges[0]] = DROP_VIDEO
    return codes


@dataclass
class Batch:
    """Fully drawn training inputs: nothing random remains."""

    z0: torch.Tensor  # (B, f, c, h, w)
    t: torch.Tensor  # (B,)
    eps: torch.Tensor
    text: torch.Tensor  # (B, n, d)
    text_mask: torch.Tensor  # (B, n)
    c_v: torch.Tensor
    dropout: np.ndarray

    def to(self, dtype) -> Batch:
        return Batch(self.z0.to(dtype), self.t, self.eps.to(dtype), self.text.to(dtype),
                     self.text_mask, self.c_v.to(dtype), self.dropout)

    def __len__(self):
        return self.z0.shape[0]


def prepare_batch(triplets: list[Triplet], schedule: NoiseSchedule, policy: DropoutPolicy,
                  table: np.ndarray, rng: Rng, scale: int = 1) -> Batch:
    if not triplets:
        raise ValueError("empty batch")
    n = len(triplets)
    t = rng.integers(1, schedule.T, size=n)
    codes = draw_dropout(rng, n, policy)
    z0, cv, texts = [], [], []
    for tr, code in zip(triplets, codes):
        z0.append(encode_video(tr.edited, scale).data)
        latent = encode_video(tr.input, scale)
        if code in (DROP_VIDEO, DROP_BOTH):
            latent = null_video(latent.shape, scale)
        cv.append(latent.data)
        texts.append(null_text(table.shape[1]) if code in (DROP_TEXT, DROP_BOTH)
                     else encode_instruction(tr.token_ids, table))
    z0 = torch.from_numpy(np.stack(z0))
    eps = torch.from_numpy(rng.normal(tuple(z0.shape)))
    text, mask = text_batch(texts)
    return Batch(z0, torch.from_numpy(t), eps, text, mask, torch.from_numpy(np.stack(cv)), codes)


def batch_loss(model: Denoiser, batch: Batch, schedule: NoiseSchedule, cfg: LossConfig) -> LossTerms:
    z_t = q_sample(batch.z0, batch.t, batch.eps, schedule)
    n_p = model(z_t, batch.t, batch.text, batch.text_mask, batch.c_v)
    return loss_terms(n_p, batch.eps, z_t, cfg)


def _check_finite(terms: LossTerms) -> None:
    for name in ("sd", "fd", "total"):
        value = getattr(terms, name)
        if not torch.isfinite(value):
            raise NumericError(f"non-finite loss component loss_{name} = {value.item()}")


def param_gradients(model: Denoiser, batch: Batch, schedule: NoiseSchedule, cfg: LossConfig) -> torch.Tensor:
    """Exact gradient of the total loss w.r.t. the flattened parameters.

    Evaluated in the model's own dtype; cast the model and batch to float64
    for finite-difference comparisons.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.zero_grad(set_to_none=True)
    terms = batch_loss(model, batch, schedule, cfg)
    _check_finite(terms)
    terms.total.backward()
    return torch.cat([p.grad.reshape(-1) for p in model.parameters()]).detach().clone()


@dataclass
class TrainConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    lam: float = 1e-3
    p_video: float = 0.05
    p_text: float = 0.05
    p_both: float = 0.05
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    text_dim: int = 32
    latent_scale: int = 1
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        self.loss, self.policy, self.schedule()  # validate eagerly
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, steps >= 0 and lr > 0 required")
        if self.latent_scale not in (1, 2):
            raise ConfigError("latent_scale must be 1 or 2")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lam)

    @property
    def policy(self) -> DropoutPolicy:
        return DropoutPolicy(self.p_video, self.p_text, self.p_both)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class StepResult:
    loss_total: float
    loss_sd: float
    loss_fd: float
    dropout: np.ndarray


class Trainer:
    """Owns the model, its Adam state and the fixed training context."""

    def __init__(self, model: Denoiser, config: TrainConfig, table: np.ndarray):
        self.model = model
        self.config = config
        self.table = table
        self.schedule = config.schedule()
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)

    def train_step(self, triplets: list[Triplet], rng: Rng) -> StepResult:
        if not triplets:
            raise ValueError("empty batch")
        cfg = self.config
        batch = prepare_batch(triplets, self.schedule, cfg.policy, self.table, rng, cfg.latent_scale)
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        terms = batch_loss(self.model, batch, self.schedule, cfg.loss)
        _check_finite(terms)
        terms.total.backward()
        self.optimizer.step()
        return StepResult(terms.total.item(), terms.sd.item(), terms.fd.item(), batch.dropout)

    def params(self) -> torch.Tensor:
        return flatten(self.model)


def train(trainer: Trainer, data: list[Triplet], rng: Rng, steps: int | None = None, log=None) -> list[StepResult]:
    """Run ``steps`` updates on minibatches drawn with replacement-free shuffles."""
    steps = trainer.config.steps if steps is None else steps
    bs = trainer.config.batch_size
    history = []
    order = np.empty(0, dtype=np.int64)
    for step in range(1, steps + 1):
        if len(order) < bs:
            order = np.concatenate([order, rng.generator.permutation(len(data))])
        idx, order = order[:bs], order[bs:]
        res = trainer.train_step([data[i] for i in idx], rng)
        history.append(res)
        if log is not None:
            log(step, res)
    return history
