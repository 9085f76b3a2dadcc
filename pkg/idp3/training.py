"""
Behaviour-cloning loop for the diffusion policy.

Everything random in a run is drawn from generators derived from the
manifest's `train_seed`, so two runs of one manifest write identical
checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import logging
from pathlib import Path
import time
from typing import Optional

import numpy as np
from tqdm import tqdm

from . import tensornet as tn
from .dataset import all_windows, batch_count, Dataset
from .diffusion import normalize_actions, training_loss
from .encoders import ImageEncoder
from .manifest import RunManifest
from .perception import depth_grid, random_shift
from .policy import Policy
from .utils import duration, FloatArray, make_rng


logger = logging.getLogger(__name__)

INIT_STREAM = 1
EPOCH_STREAM = 2
LOSS_CSV_HEADER = ('epoch', 'loss')


class TrainingAborted(RuntimeError):
    """
    Loss went non-finite; `checkpoint` holds the last good parameters.
    """
    def __init__(self, message: str, checkpoint: Path):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    loss: float
    seconds: float


@dataclass
class TrainResult:
    policy: Policy
    checkpoint: Path
    loss_csv: Path
    losses: list[EpochLoss] = field(default_factory=list)

    @property
    def seconds(self) -> float:
        return sum(epoch.seconds for epoch in self.losses)


class _Features:
    """
    Per-trajectory encoder inputs, proprioception and actions, prepared once.
    """
    def __init__(self, dataset: Dataset, policy: Policy):
        self.inputs: list[FloatArray] = []
        self.proprio: list[FloatArray] = []
        self.actions: list[FloatArray] = []
        cfg = policy.obs_cfg
        image = isinstance(policy.encoder, ImageEncoder)
        for trajectory in dataset.trajectories:
            frames = []
            for index in range(len(trajectory)):
                if image:
                    frames.append(depth_grid(trajectory.depth(index), cfg.grid, cfg.max_depth))
                else:
                    observation = trajectory.observation(index, dataset.intrinsics, cfg)
                    frames.append(observation.points.features())
            self.inputs.append(np.stack(frames))
            self.proprio.append(dataset.stats.normalize_proprio(trajectory.proprio))
            self.actions.append(normalize_actions(trajectory.actions, policy.action_stats))


def checkpoint_name(manifest: RunManifest, epoch: Optional[int] = None) -> str:
    if epoch is None:
        return f"{manifest.content_hash()}.ckpt"
    return f"{manifest.content_hash()}-epoch{epoch:04d}.ckpt"


def train(
    dataset: Dataset,
    manifest: RunManifest,
    out_dir: Path,
    progress: bool = False,
) -> TrainResult:
    """
    Train a policy and write its checkpoint and loss curve under `out_dir`.

    An epoch visits every (trajectory, start) window once, in an order
    shuffled by the epoch's own generator.

    Raises:
        TrainingAborted:
            If a forward pass or the loss becomes non-finite.
    """
    dataset.check_horizon(manifest.h_obs, manifest.h_pred)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = manifest.content_hash()
    policy = Policy(manifest, dataset.stats, make_rng(manifest.train_seed, INIT_STREAM))
    params = policy.parameters()
    optimizer = manifest.optimizer()
    features = _Features(dataset, policy)
    windows = all_windows(dataset, manifest.h_obs, manifest.h_pred)
    image = isinstance(policy.encoder, ImageEncoder)
    logger.info(
        "Training %s (%s): %d parameters, %d windows in %d batches, %d epochs",
        name, manifest.variant, policy.parameter_count(), len(windows),
        batch_count(dataset, manifest.batch_size), manifest.epochs)

    losses: list[EpochLoss] = []
    last_good = policy.checkpoint_arrays()
    epochs = tqdm(range(1, manifest.epochs + 1), disable=not progress, unit='epoch')
    for epoch in epochs:
        started = time.perf_counter()
        rng = make_rng(manifest.train_seed, EPOCH_STREAM, epoch)
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for first in range(0, len(order), manifest.batch_size):
            batch = [windows[i] for i in order[first:first + manifest.batch_size]]
            inputs = np.stack([features.inputs[w.trajectory][w.obs_indices] for w in batch])
            if image and manifest.image_random_crop > 0:
                pad = manifest.image_random_crop
                inputs = np.stack([
                    np.stack([random_shift(grid, pad, rng) for grid in history])
                    for history in inputs
                ])
            proprio = np.stack([features.proprio[w.trajectory][w.obs_indices] for w in batch])
            x0 = np.stack([features.actions[w.trajectory][w.action_indices] for w in batch])
            try:
                cond = policy.condition(inputs, proprio)
                loss = training_loss(x0, cond, policy.denoiser, policy.schedule, rng)
                tn.backward(loss, params)
            except tn.NumericalError as e:
                raise _abort(policy, last_good, out_dir, name, epoch, str(e)) from None
            value = loss.item()
            if not np.isfinite(value):
                raise _abort(policy, last_good, out_dir, name, epoch, f"loss {value}")
            tn.adamw_step(
                params, optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps,
                optimizer.weight_decay)
            total += value * len(batch)
            count += len(batch)

        if not all(np.all(np.isfinite(p.data)) for p in params):
            raise _abort(policy, last_good, out_dir, name, epoch, 'non-finite parameters')
        last_good = policy.checkpoint_arrays()
        seconds = time.perf_counter() - started
        losses.append(EpochLoss(epoch, total / count, seconds))
        logger.info("Epoch %d: loss %.6f (%s)", epoch, total / count, duration(seconds))
        if manifest.checkpoint_every and epoch % manifest.checkpoint_every == 0:
            policy.save(out_dir / checkpoint_name(manifest, epoch))

    checkpoint = out_dir / checkpoint_name(manifest)
    policy.save(checkpoint)
    loss_csv = out_dir / f"{name}-loss.csv"
    write_loss_csv(loss_csv, losses)
    result = TrainResult(policy, checkpoint, loss_csv, losses)
    logger.info("Trained %s in %s", name, duration(result.seconds))
    return result


def _abort(
    policy: Policy,
    arrays: dict[str, FloatArray],
    out_dir: Path,
    name: str,
    epoch: int,
    reason: str,
) -> TrainingAborted:
    path = out_dir / f"{name}-last-good.ckpt"
    tn.save_checkpoint(path, arrays, policy.manifest.to_text())
    logger.error("Training aborted in epoch %d: %s; last good checkpoint %s", epoch, reason, path)
    return TrainingAborted(f"non-finite value in epoch {epoch}: {reason}", path)


def write_loss_csv(path: Path, losses: list[EpochLoss]) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as fp:
        writer = csv.writer(fp, lineterminator='\n')
        writer.writerow(LOSS_CSV_HEADER)
        for epoch in losses:
            writer.writerow([epoch.epoch, repr(epoch.loss)])


def read_loss_csv(path: Path) -> list[tuple[int, float]]:
    with open(path, newline='', encoding='utf-8') as fp:
        rows = list(csv.reader(fp))
    if not rows or tuple(rows[0]) != LOSS_CSV_HEADER:
        raise ValueError(f"not a loss curve: {path}")
    return [(int(epoch), float(loss)) for epoch, loss in rows[1:]]
