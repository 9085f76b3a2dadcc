"""
Closed-loop evaluation of a policy (or the scripted expert) in the scene.

An episode runs until its step budget is spent or the grasp-attempt cap is
reached with the gripper empty. Reports count grasp attempts and successful
grasps as the simulator logs them, and merge by summation, so episodes can
be fanned out over worker processes in any grouping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import functools
import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
from tqdm.contrib.concurrent import process_map

from .manifest import ManifestError, RunManifest
from .perception import ObservationConfig
from .policy import Controller, ExpertController, Policy, PolicyController
from .sim import (
    EpisodeLog, Event, JitterConfig, perturb_view, reset, SceneConfig, step, vary_scene,
)
from .utils import derive_seed


logger = logging.getLogger(__name__)

SCENE_STREAM = 11
POLICY_STREAM = 12
CSV_HEADER = ('manifest_hash', 'variant', 'points', 'h_pred', 'successes', 'attempts', 'episodes')


@dataclass(frozen=True)
class ViewPerturbation:
    """
    Camera yaw about the vertical axis and lateral (y) shift at test time.
    """
    yaw_deg: float = 0.0
    shift_m: float = 0.0

    @property
    def identity(self) -> bool:
        return self.yaw_deg == 0.0 and self.shift_m == 0.0

    def apply(self, cfg: SceneConfig) -> SceneConfig:
        if self.identity:
            return cfg
        return perturb_view(cfg, self.yaw_deg, np.array([0.0, self.shift_m, 0.0]))


@dataclass(frozen=True)
class SceneVariation:
    table_height: Optional[float] = None
    distractors: Optional[int] = None
    object_size: Optional[float] = None

    def apply(self, cfg: SceneConfig) -> SceneConfig:
        return vary_scene(cfg, self.table_height, self.distractors, self.object_size)


@dataclass(frozen=True)
class EpisodeResult:
    index: int
    seed: int
    successes: int
    attempts: int
    placements: int
    steps: int
    sampling_calls: int
    log: EpisodeLog = field(repr=False, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            'index': self.index,
            'seed': self.seed,
            'successes': self.successes,
            'attempts': self.attempts,
            'placements': self.placements,
            'steps': self.steps,
            'sampling_calls': self.sampling_calls,
            'events': self.log.to_dict()['steps'],
        }


@dataclass(frozen=True)
class EvalReport:
    """
    Totals over a set of episodes, plus the episodes themselves.
    """
    episodes: tuple[EpisodeResult, ...] = ()

    @property
    def successes(self) -> int:
        return sum(e.successes for e in self.episodes)

    @property
    def attempts(self) -> int:
        return sum(e.attempts for e in self.episodes)

    @property
    def placements(self) -> int:
        return sum(e.placements for e in self.episodes)

    @property
    def episode_count(self) -> int:
        return len(self.episodes)

    @property
    def successful_episodes(self) -> int:
        return sum(e.successes > 0 for e in self.episodes)

    @property
    def success_rate(self) -> float:
        if not self.episodes:
            return 0.0
        return self.successful_episodes / len(self.episodes)

    @property
    def sampling_calls(self) -> int:
        return sum(e.sampling_calls for e in self.episodes)

    def __str__(self) -> str:
        return f"{self.successes}/{self.attempts}"

    def csv_row(self, manifest: RunManifest) -> list[str]:
        return [
            manifest.content_hash(),
            manifest.variant,
            str(manifest.target_points),
            str(manifest.h_pred),
            str(self.successes),
            str(self.attempts),
            str(self.episode_count),
        ]

    def to_json(self) -> str:
        document = {
            'successes': self.successes,
            'attempts': self.attempts,
            'episodes': self.episode_count,
            'placements': self.placements,
            'successful_episodes': self.successful_episodes,
            'success_rate': self.success_rate,
            'episode_logs': [e.to_dict() for e in self.episodes],
        }
        return json.dumps(document, indent=1, sort_keys=True) + '\n'

    def write_episode_logs(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        for episode in self.episodes:
            episode.log.write_jsonl(directory / f"episode-{episode.index:04d}.jsonl")


@dataclass(frozen=True)
class EpisodeTask:
    index: int
    scene: SceneConfig
    obs_cfg: ObservationConfig
    steps: int
    rounds_cap: int
    sampling_seed: int


def run_episode(
    task: EpisodeTask,
    policy: Optional[Policy] = None,
    jitter: Optional[JitterConfig] = None,
) -> EpisodeResult:
    """
    Roll one episode out. Without a policy the scripted expert drives.
    """
    controller: Controller
    if policy is None:
        controller = ExpertController(task.scene, jitter)
    else:
        controller = PolicyController(policy, task.sampling_seed)
    controller.reset()

    state, observation = reset(task.scene, task.obs_cfg)
    log = EpisodeLog(task.scene.seed)
    successes = attempts = placements = executed = 0
    for _ in range(task.steps):
        action = controller.act(state, observation)
        result, state = step(state, action, task.scene, task.obs_cfg)
        observation = result.observation
        executed += 1
        log.record(state, action, result.events)
        attempts += Event.ATTEMPT in result.events
        successes += Event.SUCCESS_GRASP in result.events
        placements += Event.SUCCESS_PLACE in result.events
        if attempts >= task.rounds_cap and not state.held:
            break

    logger.debug(
        "Episode %d: %d/%d in %d steps, %d sampling calls",
        task.index, successes, attempts, executed, controller.sampling_calls)
    return EpisodeResult(
        task.index, task.scene.seed, successes, attempts, placements, executed,
        controller.sampling_calls, log)


def episode_tasks(
    manifest: RunManifest,
    n_episodes: int,
    steps_per_episode: int,
    view: ViewPerturbation = ViewPerturbation(),
    variation: SceneVariation = SceneVariation(),
    obs_cfg: Optional[ObservationConfig] = None,
) -> list[EpisodeTask]:
    obs_cfg = manifest.observation_config() if obs_cfg is None else obs_cfg
    tasks = []
    for index in range(n_episodes):
        seed = derive_seed(manifest.eval_seed, SCENE_STREAM, index)
        scene = manifest.scene(seed, rounds=manifest.eval_rounds)
        scene = view.apply(variation.apply(scene))
        tasks.append(EpisodeTask(
            index, scene, obs_cfg, steps_per_episode, manifest.eval_rounds,
            derive_seed(manifest.eval_seed, POLICY_STREAM, index)))
    return tasks


def evaluate(
    checkpoint: Union[Path, Policy, None],
    n_episodes: int,
    steps_per_episode: int,
    view: ViewPerturbation = ViewPerturbation(),
    variation: SceneVariation = SceneVariation(),
    manifest: Optional[RunManifest] = None,
    workers: int = 1,
    jitter: Optional[JitterConfig] = None,
    progress: bool = False,
) -> EvalReport:
    """
    Run `n_episodes` seeded episodes and total their events.

    Args:
        checkpoint:
            Checkpoint file, a loaded policy, or None to replay the scripted
            expert (which then needs `manifest`).
        manifest:
            If given alongside a checkpoint, it must be the checkpoint's own.
        workers:
            Processes to fan episodes out over; results do not depend on it.
        jitter:
            Expert perturbation when replaying the expert.
    """
    if n_episodes < 1 or steps_per_episode < 1:
        raise ValueError('n_episodes and steps_per_episode must be positive')
    policy = Policy.load(checkpoint) if isinstance(checkpoint, Path) else checkpoint
    if policy is not None:
        if manifest is not None and manifest.content_hash() != policy.manifest.content_hash():
            raise ManifestError(
                f"manifest {manifest.content_hash()} does not match "
                f"checkpoint {policy.manifest.content_hash()}")
        manifest = policy.manifest
    elif manifest is None:
        raise ValueError('replaying the expert needs a manifest')

    obs_cfg = policy.obs_cfg if policy is not None else manifest.observation_config()
    tasks = episode_tasks(manifest, n_episodes, steps_per_episode, view, variation, obs_cfg)
    episodes = _run_tasks(tasks, policy, jitter, workers, progress)
    report = EvalReport(tuple(episodes))
    logger.info(
        "Evaluated %s over %d episodes: %s, success rate %.0f%%",
        manifest.content_hash(), n_episodes, report, 100 * report.success_rate)
    return report


def _run_tasks(
    tasks: Sequence[EpisodeTask],
    policy: Optional[Policy],
    jitter: Optional[JitterConfig],
    workers: int,
    progress: bool,
) -> list[EpisodeResult]:
    run = functools.partial(run_episode, policy=policy, jitter=jitter)
    if workers <= 1:
        return [run(task) for task in tasks]
    results: list[EpisodeResult] = process_map(
        run, tasks, max_workers=workers, chunksize=1, disable=not progress, unit='episode')
    return results


def expert_report(
    manifest: RunManifest,
    n_episodes: int,
    steps_per_episode: int,
    jitter: Optional[JitterConfig] = None,
) -> EvalReport:
    """
    Oracle run: the scripted expert through the evaluation loop.
    """
    return evaluate(None, n_episodes, steps_per_episode, manifest=manifest, jitter=jitter)
