"""
Demonstration datasets: recording with the scripted expert, the binary file
format, and windowed sampling for training.

Trajectories keep the raw (noisy) depth frames rather than sampled clouds,
so one recording serves every point count and the image baseline alike.
Clouds are regenerated on demand with per-frame sampling seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math
from pathlib import Path
import struct
import time
from typing import Optional, Sequence

import numpy as np

from .geom import DepthImage, Intrinsics
from .perception import Observation, ObservationConfig, perceive
from .sim import (
    advance, EnvState, Event, JitterConfig, render_depth, reset, SAMPLING_STREAM,
    SceneConfig, ScriptedExpert,
)
from .utils import BinaryReader, derive_seed, FloatArray, IntArray


logger = logging.getLogger(__name__)

DATASET_MAGIC = b'IDP3DATA'
DATASET_VERSION = 1
CONTROL_PERIOD = 0.1                    # simulated seconds per step
MAX_ROUND_STEPS = 200
MAX_ROUND_RETRIES = 5
MAX_FAILURE_RATE = 0.5
PROPRIO_STD_FLOOR = 1e-6

_HEADER = '<8sIIIIII'
_TRAJECTORY = '<IQddQd'


class DatasetError(ValueError):
    pass


class CollectionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    One demonstration: depth frames, proprioception and expert actions.

    Frame `i` is what the robot saw and felt before executing `actions[i]`.
    """
    depths: FloatArray = field(repr=False)          # (L, H, W)
    proprio: FloatArray = field(repr=False)         # (L, P)
    actions: FloatArray = field(repr=False)         # (L, A)
    scene_seed: int
    jitter: JitterConfig
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        length = len(self.actions)
        if length < 1:
            raise DatasetError('trajectory must not be empty')
        if len(self.depths) != length or len(self.proprio) != length:
            raise DatasetError('frame, proprio and action counts differ')
        if self.depths.ndim != 3 or self.proprio.ndim != 2 or self.actions.ndim != 2:
            raise DatasetError('bad trajectory array dimensions')
        if not np.all(np.isfinite(self.actions)):
            raise DatasetError('actions must be finite')

    def __len__(self) -> int:
        return len(self.actions)

    def depth(self, index: int) -> DepthImage:
        height, width = self.depths.shape[1:]
        return DepthImage(width, height, self.depths[index])

    def sampling_seed(self, index: int) -> int:
        return derive_seed(self.scene_seed, SAMPLING_STREAM, index)

    def observation(self, index: int, k: Intrinsics, cfg: ObservationConfig) -> Observation:
        return perceive(self.depth(index), self.proprio[index], k, cfg, self.sampling_seed(index))


@dataclass(frozen=True, eq=False)
class DatasetStats:
    """
    Normalization statistics over every frame of a dataset.
    """
    action_min: FloatArray
    action_max: FloatArray
    proprio_mean: FloatArray
    proprio_std: FloatArray

    @classmethod
    def compute(cls, trajectories: Sequence[Trajectory]) -> DatasetStats:
        actions = np.concatenate([t.actions for t in trajectories])
        proprio = np.concatenate([t.proprio for t in trajectories])
        return cls(
            actions.min(axis=0), actions.max(axis=0), proprio.mean(axis=0), proprio.std(axis=0),
        )

    def normalize_proprio(self, proprio: FloatArray) -> FloatArray:
        std = np.where(self.proprio_std < PROPRIO_STD_FLOOR, 1.0, self.proprio_std)
        result: FloatArray = (np.asarray(proprio, dtype=np.float64) - self.proprio_mean) / std
        return result


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: list[Trajectory]
    intrinsics: Intrinsics
    stats: DatasetStats

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise DatasetError('dataset must hold at least one trajectory')
        first = self.trajectories[0]
        for trajectory in self.trajectories:
            if (trajectory.depths.shape[1:] != first.depths.shape[1:]
                    or trajectory.proprio.shape[1] != first.proprio.shape[1]
                    or trajectory.actions.shape[1] != first.actions.shape[1]):
                raise DatasetError('trajectories have differing dimensions')

    @classmethod
    def from_trajectories(cls, trajectories: list[Trajectory], k: Intrinsics) -> Dataset:
        return cls(trajectories, k, DatasetStats.compute(trajectories))

    @property
    def frame_shape(self) -> tuple[int, int]:
        height, width = self.trajectories[0].depths.shape[1:]
        return height, width

    @property
    def proprio_dim(self) -> int:
        return int(self.trajectories[0].proprio.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.trajectories[0].actions.shape[1])

    @property
    def frame_count(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def check_horizon(self, h_obs: int, h_pred: int) -> None:
        """
        Every trajectory must cover at least one full observation and action window.
        """
        shortest = min(len(t) for t in self.trajectories)
        if shortest < h_obs + h_pred:
            raise DatasetError(
                f"shortest trajectory has {shortest} steps, windows need {h_obs + h_pred}")

    def summary(self) -> str:
        height, width = self.frame_shape
        lengths = [len(t) for t in self.trajectories]
        return (
            f"{len(lengths)} trajectories, {sum(lengths):,} frames "
            f"(length {min(lengths)}-{max(lengths)}), depth {height}x{width}, "
            f"proprio {self.proprio_dim}, action {self.action_dim}"
        )


# File format ##################################################################

def to_bytes(dataset: Dataset) -> bytes:
    """
    Little-endian binary encoding: header, intrinsics, stats, trajectories.
    """
    height, width = dataset.frame_shape
    k, stats = dataset.intrinsics, dataset.stats
    chunks = [
        struct.pack(
            _HEADER, DATASET_MAGIC, DATASET_VERSION, len(dataset.trajectories),
            height, width, dataset.proprio_dim, dataset.action_dim),
        struct.pack('<4d', k.fx, k.fy, k.cx, k.cy),
    ]
    for array in (stats.action_min, stats.action_max, stats.proprio_mean, stats.proprio_std):
        chunks.append(np.asarray(array, dtype='<f8').tobytes())
    for t in dataset.trajectories:
        chunks.append(struct.pack(
            _TRAJECTORY, len(t), t.scene_seed, t.jitter.theta, t.jitter.sigma, t.jitter.seed,
            t.timestamp))
        for array in (t.depths, t.proprio, t.actions):
            chunks.append(np.ascontiguousarray(array, dtype='<f8').tobytes())
    return b''.join(chunks)


def from_bytes(data: bytes) -> Dataset:
    reader = BinaryReader(data)
    try:
        magic, version, count, height, width, p_dim, a_dim = reader.unpack(_HEADER)
        if magic != DATASET_MAGIC:
            raise DatasetError('not a dataset file')
        if version != DATASET_VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        fx, fy, cx, cy = reader.unpack('<4d')
        stats = DatasetStats(
            reader.floats(a_dim), reader.floats(a_dim), reader.floats(p_dim), reader.floats(p_dim))
        trajectories = []
        for _ in range(count):
            length, seed, theta, sigma, jitter_seed, timestamp = reader.unpack(_TRAJECTORY)
            depths = reader.floats(length * height * width).reshape(length, height, width)
            proprio = reader.floats(length * p_dim).reshape(length, p_dim)
            actions = reader.floats(length * a_dim).reshape(length, a_dim)
            jitter = JitterConfig(theta, sigma, jitter_seed)
            trajectories.append(Trajectory(depths, proprio, actions, seed, jitter, timestamp))
    except (struct.error, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"corrupt dataset: {e}") from None
    if not reader.exhausted:
        raise DatasetError('trailing bytes after last trajectory')
    k = Intrinsics(fx, fy, cx, cy, width, height)
    return Dataset(trajectories, k, stats)


def save(dataset: Dataset, path: Path) -> None:
    path.write_bytes(to_bytes(dataset))
    logger.info("Saved dataset to %s: %s", path, dataset.summary())


def load(path: Path) -> Dataset:
    dataset = from_bytes(path.read_bytes())
    logger.debug("Loaded dataset from %s: %s", path, dataset.summary())
    return dataset


# Collection ###################################################################

@dataclass
class _Frames:
    depths: list[FloatArray] = field(default_factory=list)
    proprio: list[FloatArray] = field(default_factory=list)
    actions: list[FloatArray] = field(default_factory=list)

    def extend(self, other: _Frames) -> None:
        self.depths.extend(other.depths)
        self.proprio.extend(other.proprio)
        self.actions.extend(other.actions)


def _run_round(
    state: EnvState, scene: SceneConfig, expert: ScriptedExpert,
) -> tuple[_Frames, EnvState, bool]:
    """
    Drive the expert until the object is placed or the step budget runs out.

    A round counts as clean when it places the object with a single closure.
    """
    frames = _Frames()
    attempts = 0
    for _ in range(MAX_ROUND_STEPS):
        action = expert(state)
        frames.depths.append(render_depth(state, scene).depth)
        frames.proprio.append(state.proprio)
        frames.actions.append(action)
        state, events = advance(state, action, scene)
        attempts += Event.ATTEMPT in events
        if Event.SUCCESS_PLACE in events:
            return frames, state, attempts == 1
    return frames, state, False


def demo_seeds(data_seed: int, n_demos: int) -> list[int]:
    """
    Scene seeds for a collection, derived from one data seed.
    """
    return [derive_seed(data_seed, index) for index in range(n_demos)]


def collect_demos(
    n_demos: int,
    rounds_per_demo: int,
    jitter: JitterConfig,
    seeds: Sequence[int],
    scene: Optional[SceneConfig] = None,
) -> Dataset:
    """
    Record `n_demos` expert trajectories of `rounds_per_demo` rounds each.

    A failed round is rolled back to its starting state and replayed with the
    expert's jitter process left running, so the retry takes another path.
    Only clean rounds are kept.

    Args:
        jitter:
            Expert perturbation; each demo derives its own seed from it.
        seeds:
            One scene seed per demonstration.
        scene:
            Template scene; its seed and round count are replaced.

    Raises:
        CollectionError:
            If more than half of all rounds failed, or one round kept failing.
    """
    if n_demos < 1 or rounds_per_demo < 1:
        raise ValueError('n_demos and rounds_per_demo must be positive')
    if len(seeds) != n_demos:
        raise ValueError(f"expected {n_demos} seeds, given {len(seeds)}")
    template = SceneConfig() if scene is None else scene

    started = time.perf_counter()
    trajectories: list[Trajectory] = []
    clean = failed = 0
    clock = 0.0
    for index, seed in enumerate(seeds):
        cfg = replace(template, seed=int(seed), rounds=rounds_per_demo)
        demo_jitter = replace(jitter, seed=derive_seed(jitter.seed, index))
        expert = ScriptedExpert(cfg, demo_jitter)
        state, _ = reset(cfg)
        frames = _Frames()
        for round_index in range(rounds_per_demo):
            for retry in range(MAX_ROUND_RETRIES + 1):
                attempt_frames, end_state, ok = _run_round(state, cfg, expert)
                if ok:
                    break
                failed += 1
                logger.debug("Demo %d round %d failed, retry %d", index, round_index, retry + 1)
            else:
                raise CollectionError(
                    f"demo {index} (seed {seed}) round {round_index} failed "
                    f"{MAX_ROUND_RETRIES + 1} times in a row")
            clean += 1
            frames.extend(attempt_frames)
            state = end_state

        trajectory = Trajectory(
            np.stack(frames.depths),
            np.stack(frames.proprio),
            np.stack(frames.actions),
            int(seed),
            demo_jitter,
            clock,
        )
        clock = round(clock + len(trajectory) * CONTROL_PERIOD, 6)
        trajectories.append(trajectory)
        logger.info("Demo %d: %d steps, %d rounds", index, len(trajectory), rounds_per_demo)

    rate = failed / (clean + failed)
    if rate > MAX_FAILURE_RATE:
        raise CollectionError(
            f"expert failed {failed} of {clean + failed} rounds ({rate:.0%}); "
            f"check the scene and jitter settings (theta={jitter.theta}, sigma={jitter.sigma})")
    if failed:
        logger.warning("Expert re-rolled %d of %d rounds", failed, clean + failed)
    logger.info(
        "Collected %d demos in %.2f seconds", n_demos, time.perf_counter() - started)
    return Dataset.from_trajectories(trajectories, template.intrinsics)


# Windows ######################################################################

@dataclass(frozen=True, eq=False)
class Window:
    """
    Frame indices of one training sample within a trajectory.

    Observation indices before the first frame repeat frame 0; action
    indices past the end repeat the final action.
    """
    trajectory: int
    start: int
    obs_indices: IntArray
    action_indices: IntArray

    def actions(self, dataset: Dataset) -> FloatArray:
        result: FloatArray = dataset.trajectories[self.trajectory].actions[self.action_indices]
        return result

    def observations(self, dataset: Dataset, cfg: ObservationConfig) -> list[Observation]:
        trajectory = dataset.trajectories[self.trajectory]
        return [
            trajectory.observation(int(i), dataset.intrinsics, cfg) for i in self.obs_indices
        ]


def window_at(length: int, trajectory: int, start: int, h_obs: int, h_pred: int) -> Window:
    if not 0 <= start < length:
        raise IndexError(f"start {start} outside trajectory of length {length}")
    obs = np.clip(np.arange(start - h_obs + 1, start + 1), 0, length - 1)
    actions = np.clip(np.arange(start, start + h_pred), 0, length - 1)
    return Window(trajectory, start, obs.astype(np.int64), actions.astype(np.int64))


def sample_window(
    dataset: Dataset, rng: np.random.Generator, h_obs: int = 2, h_pred: int = 16,
) -> Window:
    """
    Uniform trajectory, then a uniform start index within it.
    """
    index = int(rng.integers(len(dataset.trajectories)))
    length = len(dataset.trajectories[index])
    return window_at(length, index, int(rng.integers(length)), h_obs, h_pred)


def all_windows(dataset: Dataset, h_obs: int, h_pred: int) -> list[Window]:
    """
    Every (trajectory, start) window, in order.
    """
    return [
        window_at(len(t), index, start, h_obs, h_pred)
        for index, t in enumerate(dataset.trajectories)
        for start in range(len(t))
    ]


def batch_count(dataset: Dataset, batch_size: int) -> int:
    return math.ceil(dataset.frame_count / batch_size)
