"""
Conditional denoising over action chunks.

Timesteps run from 1 (almost clean) to `T_train` (almost pure noise); the
schedule arrays are indexed with `t - 1` and `alpha_bar(0)` is taken as 1.
The denoiser predicts the noise that was added (epsilon prediction).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Callable, TypeAlias, Union

import numpy as np

from . import tensornet as tn
from .utils import FloatArray, IntArray


logger = logging.getLogger(__name__)

ActionChunk: TypeAlias = FloatArray     # (H_pred, A), normalized to [-1, 1]
EpsilonModel: TypeAlias = Callable[
    [FloatArray, IntArray, FloatArray], Union[tn.Tensor, FloatArray]
]

ABLATION_HORIZONS = (4, 8, 16, 32)
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: FloatArray = field(repr=False)
    alphas: FloatArray = field(repr=False)
    alpha_bars: FloatArray = field(repr=False)

    @property
    def T_train(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: Union[int, IntArray]) -> FloatArray:
        """
        Cumulative signal fraction at step `t`, with `alpha_bar(0) == 1`.
        """
        padded = np.concatenate([[1.0], self.alpha_bars])
        result: FloatArray = padded[np.asarray(t)]
        return result


def make_schedule(T_train: int = 50, kind: str = 'cosine') -> NoiseSchedule:
    """
    Build beta, alpha and alpha-bar tables.

    `linear` spaces beta evenly from 1e-4 to 0.02. `cosine` discretizes
    `cos²((t/T + s) / (1 + s) · π/2)` with s = 0.008, betas capped at 0.999.
    """
    if T_train < 2:
        raise ValueError('T_train must be at least 2')
    if kind == 'linear':
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T_train)
    elif kind == 'cosine':
        def alpha_bar_fn(t: float) -> float:
            return math.cos((t + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

        betas = np.array([
            min(1 - alpha_bar_fn((i + 1) / T_train) / alpha_bar_fn(i / T_train), MAX_BETA)
            for i in range(T_train)
        ])
    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if not (np.all(betas > 0) and np.all(betas < 1)):
        raise ValueError('schedule betas must lie in (0, 1)')
    if not np.all(np.diff(alpha_bars) < 0) or alpha_bars[-1] <= 0:
        raise ValueError('alpha_bar must decrease strictly and stay positive')
    return NoiseSchedule(kind, betas, alphas, alpha_bars)


def q_sample(
    x0: FloatArray, t: Union[int, IntArray], eps: FloatArray, s: NoiseSchedule,
) -> FloatArray:
    """
    Forward process `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.

    `t` may be a single step or one step per leading batch entry.
    """
    steps = np.asarray(t)
    if np.any(steps < 1) or np.any(steps > s.T_train):
        raise ValueError(f"t must lie in [1, {s.T_train}]")
    alpha_bar = s.alpha_bar(steps)
    if alpha_bar.ndim:
        alpha_bar = alpha_bar.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    result: FloatArray = np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps
    return result


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: tuple[int, ...] = (256, 256)
    time_dim: int = 32
    activation: str = 'mish'
    conditioning: str = 'concat'

    def __post_init__(self) -> None:
        if not self.hidden:
            raise ValueError('hidden widths must not be empty')
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError('time_dim must be an even integer ≥ 2')
        if self.conditioning != 'concat':
            raise ValueError('only concatenation conditioning is supported')


def time_embedding(t: IntArray, dim: int) -> FloatArray:
    """
    Sinusoidal features of the diffusion step, shape (B, dim).
    """
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    angles = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Denoiser(tn.Module):
    """
    MLP over the flattened noisy chunk, the step features and the condition.
    """
    def __init__(
        self,
        cfg: DenoiserConfig,
        horizon: int,
        action_dim: int,
        cond_dim: int,
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.horizon = horizon
        self.action_dim = action_dim
        self.cond_dim = cond_dim
        width = horizon * action_dim + cfg.time_dim + cond_dim
        self.hidden: list[tn.Dense] = []
        for size in cfg.hidden:
            self.hidden.append(tn.Dense(width, size, rng))
            width = size
        self.output = tn.Dense(width, horizon * action_dim, rng)

    def __call__(
        self,
        x: FloatArray,
        t: IntArray,
        cond: Union[tn.Tensor, FloatArray],
    ) -> tn.Tensor:
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[0]
        if x.shape[1:] != (self.horizon, self.action_dim):
            raise tn.ShapeError(
                f"expected chunks of shape ({self.horizon}, {self.action_dim}), got {x.shape[1:]}")
        cond = tn.as_tensor(cond)
        if cond.shape != (batch, self.cond_dim):
            raise tn.ShapeError(f"expected condition ({batch}, {self.cond_dim}), got {cond.shape}")

        steps = np.broadcast_to(np.asarray(t), (batch,))
        inputs = tn.concat([
            tn.Tensor(x.reshape(batch, -1)),
            tn.Tensor(time_embedding(steps, self.cfg.time_dim)),
            cond,
        ], axis=1)
        h = inputs
        for dense in self.hidden:
            h = tn.activation(dense(h), self.cfg.activation)
        return tn.reshape(self.output(h), (batch, self.horizon, self.action_dim))


def _predict(model: EpsilonModel, x: FloatArray, t: int, cond: FloatArray) -> FloatArray:
    steps = np.full(x.shape[0], t, dtype=np.int64)
    prediction = model(x, steps, cond)
    if isinstance(prediction, tn.Tensor):
        return prediction.data
    return np.asarray(prediction, dtype=np.float64)


def training_loss(
    x0: FloatArray,
    cond: Union[tn.Tensor, FloatArray],
    denoiser: EpsilonModel,
    s: NoiseSchedule,
    rng: np.random.Generator,
) -> tn.Tensor:
    """
    Noise-prediction objective on one batch of normalized chunks (B, H, A).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = rng.integers(1, s.T_train + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, s)
    prediction = denoiser(x_t, t, cond)         # type: ignore[arg-type]
    return tn.mse_loss(tn.as_tensor(prediction), eps)


def ddpm_sample(
    denoiser: EpsilonModel,
    cond: FloatArray,
    s: NoiseSchedule,
    shape: tuple[int, ...],
    seed: int,
    temperature: float = 1.0,
    clip_sample: bool = True,
) -> FloatArray:
    """
    Full ancestral sampling over all `T_train` steps.

    `temperature` scales the per-step noise; zero makes the path depend on
    the seed only through the initial draw.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    for t in range(s.T_train, 0, -1):
        eps = _predict(denoiser, x, t, cond)
        alpha_bar, alpha_bar_prev = s.alpha_bar(t), s.alpha_bar(t - 1)
        beta = s.betas[t - 1]
        x0_hat = (x - np.sqrt(1 - alpha_bar) * eps) / np.sqrt(alpha_bar)
        if clip_sample:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        mean = (
            np.sqrt(alpha_bar_prev) * beta / (1 - alpha_bar) * x0_hat
            + np.sqrt(s.alphas[t - 1]) * (1 - alpha_bar_prev) / (1 - alpha_bar) * x
        )
        if t > 1:
            variance = beta * (1 - alpha_bar_prev) / (1 - alpha_bar)
            x = mean + temperature * np.sqrt(variance) * rng.standard_normal(shape)
        else:
            x = mean
    result: FloatArray = x
    return result


def ddim_timesteps(T_train: int, T_infer: int) -> IntArray:
    """
    Evenly spaced descending steps from `T_train` down to 0, inclusive.
    """
    if not 1 <= T_infer <= T_train:
        raise ValueError(f"T_infer must lie in [1, {T_train}]")
    steps = np.round(np.linspace(T_train, 0, T_infer + 1)).astype(np.int64)
    if len(np.unique(steps)) != len(steps):
        raise ValueError('inference stride produced repeated steps')
    return steps


def ddim_sample(
    denoiser: EpsilonModel,
    cond: FloatArray,
    s: NoiseSchedule,
    shape: tuple[int, ...],
    T_infer: int = 10,
    eta: float = 0.0,
    seed: int = 0,
    noise: Union[FloatArray, None] = None,
    clip_sample: bool = True,
) -> FloatArray:
    """
    Deterministic DDIM sampling over a strided step subsequence.

    The only randomness is the initial noise, drawn from `seed` unless given
    explicitly through `noise`.
    """
    if eta != 0.0:
        raise ValueError('only deterministic sampling (eta = 0) is supported')
    steps = ddim_timesteps(s.T_train, T_infer)
    if noise is None:
        x = np.random.default_rng(seed).standard_normal(shape)
    else:
        x = np.array(noise, dtype=np.float64).reshape(shape)

    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps = _predict(denoiser, x, int(t), cond)
        alpha_bar, alpha_bar_prev = s.alpha_bar(t), s.alpha_bar(t_prev)
        x0_hat = (x - np.sqrt(1 - alpha_bar) * eps) / np.sqrt(alpha_bar)
        if clip_sample:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
            eps = (x - np.sqrt(alpha_bar) * x0_hat) / np.sqrt(1 - alpha_bar)
        x = np.sqrt(alpha_bar_prev) * x0_hat + np.sqrt(1 - alpha_bar_prev) * eps
    result: FloatArray = x
    return result


@dataclass(frozen=True)
class ActionStats:
    """
    Per-dimension range used to map raw actions onto [-1, 1].
    """
    minimum: FloatArray
    maximum: FloatArray

    @classmethod
    def from_actions(cls, actions: FloatArray) -> ActionStats:
        actions = np.asarray(actions, dtype=np.float64)
        flat = actions.reshape(-1, actions.shape[-1])
        return cls(flat.min(axis=0), flat.max(axis=0))

    @property
    def degenerate(self) -> FloatArray:
        result: FloatArray = self.maximum == self.minimum
        return result


def normalize_actions(raw: FloatArray, stats: ActionStats) -> FloatArray:
    """
    Min-max map to [-1, 1]; constant dimensions map to 0.
    """
    span = np.where(stats.degenerate, 1.0, stats.maximum - stats.minimum)
    scaled = 2.0 * (np.asarray(raw, dtype=np.float64) - stats.minimum) / span - 1.0
    result: FloatArray = np.where(stats.degenerate, 0.0, scaled)
    return result


def denormalize_actions(chunk: FloatArray, stats: ActionStats) -> FloatArray:
    span = stats.maximum - stats.minimum
    result: FloatArray = (np.asarray(chunk, dtype=np.float64) + 1.0) / 2.0 * span + stats.minimum
    return result
