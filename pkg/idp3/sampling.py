"""
Point-count reduction.

The policy consumes a fixed number of points per observation. The default
path is a voxel grid followed by seeded uniform sampling; farthest point
sampling is kept as the slower reference it replaces.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import statistics
import time
from typing import Callable

import numpy as np

from .geom import PointCloud
from .utils import IntArray


logger = logging.getLogger(__name__)

ABLATION_POINT_COUNTS = (1024, 2048, 4096, 8192)


@dataclass(frozen=True)
class SamplingConfig:
    target_points: int = 1024
    voxel_size: float = 0.02
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.target_points < 1:
            raise ValueError('target_points must be a positive integer')
        if self.voxel_size <= 0:
            raise ValueError('voxel_size must be positive')


def voxel_indices(pc: PointCloud, voxel_size: float) -> IntArray:
    """
    Index of the first point falling in each occupied voxel, ascending.
    """
    if voxel_size <= 0:
        raise ValueError('voxel_size must be positive')
    if len(pc) == 0:
        return np.zeros(0, dtype=np.int64)
    cells = np.floor(pc.positions / voxel_size).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    return np.sort(first).astype(np.int64)


def voxel_downsample(pc: PointCloud, voxel_size: float) -> PointCloud:
    """
    Keep the lowest-index point of every occupied voxel.
    """
    return pc.select(voxel_indices(pc, voxel_size))


def uniform_indices(num_points: int, n: int, seed: int) -> IntArray:
    if n < 1:
        raise ValueError('n must be a positive integer')
    if num_points == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if num_points <= n:
        padding = rng.choice(num_points, size=n - num_points, replace=True)
        return np.concatenate([np.arange(num_points), padding]).astype(np.int64)
    return rng.choice(num_points, size=n, replace=False).astype(np.int64)


def uniform_sample(pc: PointCloud, n: int, seed: int) -> PointCloud:
    """
    Exactly `n` points: drawn without replacement when there are enough,
    otherwise every point once plus repeats drawn with replacement.

    An empty cloud stays empty.
    """
    return pc.select(uniform_indices(len(pc), n, seed))


def farthest_point_indices(pc: PointCloud, n: int, start_index: int = 0) -> IntArray:
    """
    Greedy max-min selection, exact, ties going to the lowest index.
    """
    total = len(pc)
    if total < 1:
        raise ValueError('farthest point sampling needs at least one point')
    if not 0 <= start_index < total:
        raise ValueError('start_index out of range')
    if n < 1:
        raise ValueError('n must be a positive integer')
    n = min(n, total)

    points = pc.positions
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start_index
    nearest = np.sum((points - points[start_index]) ** 2, axis=1)
    nearest[start_index] = -1.0
    for i in range(1, n):
        index = int(np.argmax(nearest))
        chosen[i] = index
        distance = np.sum((points - points[index]) ** 2, axis=1)
        np.minimum(nearest, distance, out=nearest)
        nearest[chosen[:i + 1]] = -1.0
    return chosen


def farthest_point_sample(pc: PointCloud, n: int, start_index: int = 0) -> PointCloud:
    return pc.select(farthest_point_indices(pc, n, start_index))


def cascade_sample(pc: PointCloud, cfg: SamplingConfig) -> PointCloud:
    """
    Voxel grid, then uniform sampling to exactly `cfg.target_points`.
    """
    voxels = voxel_downsample(pc, cfg.voxel_size)
    logger.debug(
        "Voxel stage kept %d of %d points for target %d",
        len(voxels), len(pc), cfg.target_points,
    )
    return uniform_sample(voxels, cfg.target_points, cfg.rng_seed)


@dataclass(frozen=True)
class StrategyTiming:
    strategy: str
    input_n: int
    target_n: int
    median_ns: int
    stdev_ns: float

    def csv_row(self) -> list[str]:
        return [self.strategy, str(self.input_n), str(self.target_n), str(self.median_ns)]


@dataclass(frozen=True)
class BenchReport:
    timings: tuple[StrategyTiming, ...]

    CSV_HEADER = ('strategy', 'input_n', 'target_n', 'median_ns')

    def median(self, strategy: str) -> int:
        for timing in self.timings:
            if timing.strategy == strategy:
                return timing.median_ns
        raise KeyError(strategy)

    def winner(self) -> str:
        return min(self.timings, key=lambda timing: timing.median_ns).strategy


def bench_samplers(pc: PointCloud, cfg: SamplingConfig, repetitions: int = 21) -> BenchReport:
    """
    Median wall-clock time per call of the cascade and of FPS, same input.
    """
    if repetitions < 1:
        raise ValueError('repetitions must be at least one')

    strategies: dict[str, Callable[[], PointCloud]] = {
        'cascade': lambda: cascade_sample(pc, cfg),
        'fps': lambda: farthest_point_sample(pc, cfg.target_points),
    }
    timings = []
    for name, run in strategies.items():
        samples = []
        for _ in range(repetitions):
            start = time.perf_counter_ns()
            run()
            samples.append(time.perf_counter_ns() - start)
        stdev = statistics.stdev(samples) if len(samples) > 1 else 0.0
        timing = StrategyTiming(
            name, len(pc), cfg.target_points, int(statistics.median(samples)), stdev,
        )
        logger.info(
            f"{name}: median {timing.median_ns / 1e6:.3f}ms, "
            f"stdev {stdev / 1e6:.3f}ms over {repetitions} calls"
        )
        timings.append(timing)
    return BenchReport(tuple(timings))
