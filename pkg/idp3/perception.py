"""
Turn a depth frame into the policy's observation.

Every frame goes through the same camera-frame pipeline: unproject, crop to
a fixed box in front of the camera, then sample down to a fixed point count.
No world-frame transform and no segmentation are involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import crop_box, CropBox, DepthImage, Intrinsics, PointCloud, unproject
from .sampling import cascade_sample, SamplingConfig
from .utils import FloatArray


@dataclass(frozen=True)
class ObservationConfig:
    """
    Args:
        crop:
            Box in the camera frame; points outside are dropped.
        stride:
            Unproject every `stride`-th pixel along both image axes.
        grid:
            Side of the square depth grid fed to the image baseline.
        max_depth:
            Depth mapped to 1.0 in that grid.
    """
    crop: CropBox = field(default_factory=CropBox.in_front)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    stride: int = 1
    grid: int = 64
    max_depth: float = 2.0


@dataclass(frozen=True)
class Observation:
    """
    One timestep of policy input.
    """
    points: PointCloud
    proprio: FloatArray = field(repr=False)
    depth: DepthImage = field(repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.points == other.points
            and np.array_equal(self.proprio, other.proprio)
            and self.depth == other.depth
        )


def perceive(
    depth: DepthImage,
    proprio: FloatArray,
    k: Intrinsics,
    cfg: ObservationConfig,
    seed: int,
) -> Observation:
    """
    Unproject, crop and sample one depth frame.

    `seed` replaces the sampling seed of `cfg` so that every frame draws its
    own subset.
    """
    cloud = crop_box(unproject(depth, k, cfg.stride), cfg.crop)
    sampling = SamplingConfig(cfg.sampling.target_points, cfg.sampling.voxel_size, seed)
    points = cascade_sample(cloud, sampling)
    if len(points) == 0:
        # Nothing in view: a single point at the camera origin, repeated.
        points = PointCloud(np.zeros((sampling.target_points, 3)))
    return Observation(points, np.asarray(proprio, dtype=np.float64).copy(), depth)


def depth_grid(depth: DepthImage, size: int, max_depth: float = 2.0) -> FloatArray:
    """
    Nearest-neighbour resample to `size`×`size`, scaled to [0, 1].
    """
    rows = (np.arange(size) * depth.height // size).astype(np.int64)
    cols = (np.arange(size) * depth.width // size).astype(np.int64)
    grid = depth.depth[np.ix_(rows, cols)] / max_depth
    result: FloatArray = np.clip(grid, 0.0, 1.0)
    return result


def random_shift(grid: FloatArray, pad: int, rng: np.random.Generator) -> FloatArray:
    """
    Random-crop augmentation: edge-pad by `pad` pixels, crop back at a random offset.
    """
    if pad <= 0:
        return grid
    size_y, size_x = grid.shape
    padded = np.pad(grid, pad, mode='edge')
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    result: FloatArray = padded[dy:dy + size_y, dx:dx + size_x]
    return result
