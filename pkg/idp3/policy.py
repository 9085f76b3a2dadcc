"""
The trained artifact: encoder, denoiser and normalization stats, plus the
controllers that turn it (or the scripted expert) into per-step actions.
"""

from __future__ import annotations

from collections import deque
import logging
from pathlib import Path
from typing import Deque, Optional, Protocol, Sequence

import numpy as np

from . import tensornet as tn
from .dataset import DatasetStats
from .diffusion import (
    ActionStats, ddim_sample, Denoiser, denormalize_actions, make_schedule, NoiseSchedule,
)
from .encoders import build_encoder, Encoder, EncoderVariant, ImageEncoder
from .manifest import RunManifest
from .perception import depth_grid, Observation
from .sim import EnvState, JitterConfig, SceneConfig, ScriptedExpert
from .utils import derive_seed, FloatArray


logger = logging.getLogger(__name__)

STATS_PREFIX = 'stats.'


class Policy(tn.Module):
    """
    Observation history in, raw action chunk out.
    """
    def __init__(
        self,
        manifest: RunManifest,
        stats: DatasetStats,
        rng: np.random.Generator,
    ):
        self.manifest = manifest
        self.stats = stats
        proprio_dim = len(stats.proprio_mean)
        self.action_dim = len(stats.action_min)
        self.encoder: Encoder = build_encoder(manifest.encoder_config(proprio_dim), rng)
        self.denoiser = Denoiser(
            manifest.denoiser_config(),
            manifest.h_pred,
            self.action_dim,
            manifest.h_obs * manifest.embedding_dim,
            rng,
        )
        self.schedule: NoiseSchedule = make_schedule(manifest.t_train, manifest.schedule)
        self.obs_cfg = manifest.observation_config()

    @property
    def variant(self) -> EncoderVariant:
        return self.manifest.encoder_variant

    @property
    def action_stats(self) -> ActionStats:
        return ActionStats(self.stats.action_min, self.stats.action_max)

    def features(self, observation: Observation) -> FloatArray:
        """
        Encoder input for one observation: (N, 3) points or a depth grid.
        """
        if isinstance(self.encoder, ImageEncoder):
            return depth_grid(observation.depth, self.obs_cfg.grid, self.obs_cfg.max_depth)
        return observation.points.features()

    def condition(self, inputs: FloatArray, proprio: FloatArray) -> tn.Tensor:
        """
        Concatenated embeddings of an observation history.

        Args:
            inputs:
                (B, H_obs, ...) encoder inputs.
            proprio:
                (B, H_obs, P) normalized proprioception.

        Returns:
            Tensor of shape (B, H_obs * E).
        """
        batch, history = inputs.shape[:2]
        flat_inputs = inputs.reshape(batch * history, *inputs.shape[2:])
        flat_proprio = proprio.reshape(batch * history, -1)
        embedding = self.encoder(flat_inputs, flat_proprio)
        return tn.reshape(embedding, (batch, history * self.manifest.embedding_dim))

    def sample(self, history: Sequence[Observation], seed: int) -> FloatArray:
        """
        Denoise one action chunk (H_pred, A) in raw action units.
        """
        if len(history) != self.manifest.h_obs:
            raise ValueError(f"expected {self.manifest.h_obs} observations, given {len(history)}")
        inputs = np.stack([self.features(obs) for obs in history])[None]
        proprio = np.stack([self.stats.normalize_proprio(obs.proprio) for obs in history])[None]
        cond = self.condition(inputs, proprio).data
        chunk = ddim_sample(
            self.denoiser,
            cond,
            self.schedule,
            (1, self.manifest.h_pred, self.action_dim),
            T_infer=self.manifest.t_infer,
            seed=seed,
        )
        return denormalize_actions(chunk[0], self.action_stats)

    # Checkpoints ##############################################################

    def checkpoint_arrays(self) -> dict[str, FloatArray]:
        arrays = self.state_dict()
        arrays[f"{STATS_PREFIX}action_min"] = self.stats.action_min
        arrays[f"{STATS_PREFIX}action_max"] = self.stats.action_max
        arrays[f"{STATS_PREFIX}proprio_mean"] = self.stats.proprio_mean
        arrays[f"{STATS_PREFIX}proprio_std"] = self.stats.proprio_std
        return arrays

    def save(self, path: Path) -> None:
        tn.save_checkpoint(path, self.checkpoint_arrays(), self.manifest.to_text())

    @classmethod
    def load(cls, path: Path) -> Policy:
        metadata, arrays = tn.load_checkpoint(path)
        manifest = RunManifest.parse(metadata)
        try:
            stats = DatasetStats(
                arrays.pop(f"{STATS_PREFIX}action_min"),
                arrays.pop(f"{STATS_PREFIX}action_max"),
                arrays.pop(f"{STATS_PREFIX}proprio_mean"),
                arrays.pop(f"{STATS_PREFIX}proprio_std"),
            )
        except KeyError as e:
            raise ValueError(f"checkpoint lacks normalization stats: {e}") from None
        policy = cls(manifest, stats, np.random.default_rng(0))
        policy.load_state_dict(arrays)
        logger.debug("Loaded %s policy, %d parameters", manifest.variant, policy.parameter_count())
        return policy


# Controllers ##################################################################

class Controller(Protocol):
    sampling_calls: int

    def reset(self) -> None:
        ...

    def act(self, state: EnvState, observation: Observation) -> FloatArray:
        ...


class PolicyController:
    """
    Receding-horizon execution: sample a chunk, run its first `h_act`
    actions, then sample again from the latest observations.
    """
    def __init__(self, policy: Policy, seed: int, h_act: Optional[int] = None):
        self.policy = policy
        self.seed = seed
        self.h_act = policy.manifest.h_act if h_act is None else h_act
        if not 1 <= self.h_act <= policy.manifest.h_pred:
            raise ValueError(f"h_act must lie in [1, {policy.manifest.h_pred}]")
        self.history: Deque[Observation] = deque(maxlen=policy.manifest.h_obs)
        self.queue: Deque[FloatArray] = deque()
        self.sampling_calls = 0

    def reset(self) -> None:
        self.history.clear()
        self.queue.clear()
        self.sampling_calls = 0

    def act(self, state: EnvState, observation: Observation) -> FloatArray:
        if not self.history:
            # Start of episode: the first frame stands in for the missing past.
            self.history.extend([observation] * self.policy.manifest.h_obs)
        else:
            self.history.append(observation)
        if not self.queue:
            seed = derive_seed(self.seed, self.sampling_calls)
            chunk = self.policy.sample(list(self.history), seed)
            self.queue.extend(chunk[:self.h_act])
            self.sampling_calls += 1
        return self.queue.popleft()


class ExpertController:
    """
    The scripted expert behind the controller interface.
    """
    def __init__(self, scene: SceneConfig, jitter: Optional[JitterConfig] = None):
        self.scene = scene
        self.jitter = jitter
        self.expert = ScriptedExpert(scene, jitter)
        self.sampling_calls = 0

    def reset(self) -> None:
        self.expert = ScriptedExpert(self.scene, self.jitter)

    def act(self, state: EnvState, observation: Observation) -> FloatArray:
        return self.expert(state)
