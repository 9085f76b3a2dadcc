"""
Observation encoders.

Four point-cloud variants share one shape: a per-point transform applied in
stages, max pooling over the points, then a projection to the embedding
width. They differ in how each stage is built and where pooling happens:

    linear_dp3          dense layers, pooled after the last stage
    conv                pointwise convolution + layer norm, pooled after the last stage
    linear_pyramid      dense layers, pooled after every stage
    conv_pyramid_idp3   pointwise convolution + layer norm, pooled after every stage

The image baseline is a small strided 2-D convolution stack over a depth
grid, trained from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import enum
import logging
from typing import Optional, Union

import numpy as np

from . import tensornet as tn
from .geom import PointCloud
from .utils import FloatArray, IntArray


logger = logging.getLogger(__name__)


class EncoderError(ValueError):
    pass


class EncoderVariant(str, enum.Enum):
    LINEAR_DP3 = 'linear_dp3'
    CONV = 'conv'
    LINEAR_PYRAMID = 'linear_pyramid'
    CONV_PYRAMID_IDP3 = 'conv_pyramid_idp3'
    IMAGE_BASELINE = 'image_baseline'

    @property
    def pyramid(self) -> bool:
        return self in (EncoderVariant.LINEAR_PYRAMID, EncoderVariant.CONV_PYRAMID_IDP3)

    @property
    def convolutional(self) -> bool:
        return self in (EncoderVariant.CONV, EncoderVariant.CONV_PYRAMID_IDP3)


@dataclass(frozen=True)
class EncoderConfig:
    """
    Args:
        n_points:
            Point count every input must have, or None to accept any.
        point_channels:
            Features per point; xyz from the depth pipeline.
    """
    variant: EncoderVariant = EncoderVariant.CONV_PYRAMID_IDP3
    widths: tuple[int, ...] = (64, 128, 256)
    embedding_dim: int = 128
    activation: str = 'relu'
    n_points: Optional[int] = 1024
    point_channels: int = 3
    proprio_dim: int = 4
    image_grid: int = 64
    image_channels: tuple[int, ...] = (8, 16, 32)
    image_kernel: int = 4
    image_stride: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, 'variant', EncoderVariant(self.variant))
        if not self.widths:
            raise ValueError('widths must not be empty')
        if self.embedding_dim <= 0:
            raise ValueError('embedding_dim must be positive')
        if self.activation not in tn.ACTIVATIONS:
            raise ValueError(f"unknown activation: {self.activation!r}")

    @property
    def pyramid(self) -> bool:
        return self.variant.pyramid

    @property
    def image_feature_size(self) -> int:
        """
        Side of the feature map left after the image convolution stack.
        """
        size = self.image_grid
        for _ in self.image_channels:
            size = (size - self.image_kernel) // self.image_stride + 1
        return size


@dataclass(frozen=True)
class ObsEmbedding:
    vector: FloatArray = field(repr=False)
    provenance: EncoderVariant

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.vector)):
            raise ValueError('embedding must be finite')


class PointEncoder(tn.Module):
    """
    Shared per-point transform, max pooling and projection.
    """
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        if cfg.variant is EncoderVariant.IMAGE_BASELINE:
            raise ValueError('image_baseline is not a point encoder')
        self.cfg = cfg
        self.layers: list[Union[tn.Dense, tn.PointwiseConv]] = []
        self.norms: list[tn.LayerNorm] = []
        channels = cfg.point_channels
        for width in cfg.widths:
            if cfg.variant.convolutional:
                self.layers.append(tn.PointwiseConv(channels, width, rng))
                self.norms.append(tn.LayerNorm(width))
            else:
                self.layers.append(tn.Dense(channels, width, rng))
            channels = width
        pooled = sum(cfg.widths) if cfg.pyramid else cfg.widths[-1]
        self.projection = tn.Dense(pooled + cfg.proprio_dim, cfg.embedding_dim, rng)

    def __call__(self, points: FloatArray, proprio: FloatArray) -> tn.Tensor:
        return self.forward(points, proprio)[0]

    def forward(
        self, points: FloatArray, proprio: FloatArray,
    ) -> tuple[tn.Tensor, list[IntArray]]:
        """
        Embed a batch of clouds.

        Args:
            points:
                Array of shape (B, N, C) in the camera frame.
            proprio:
                Array of shape (B, P).

        Returns:
            Embedding tensor (B, E), and for every pooled stage the (B, C)
            indices of the points that won the max.
        """
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 3 or points.shape[2] != self.cfg.point_channels:
            raise EncoderError(
                f"expected (B, N, {self.cfg.point_channels}) points, got {points.shape}")
        batch, count, channels = points.shape
        if self.cfg.n_points is not None and count != self.cfg.n_points:
            raise EncoderError(f"expected {self.cfg.n_points} points, got {count}")

        stages: list[tn.Tensor] = []
        if self.cfg.variant.convolutional:
            h = tn.Tensor(points.transpose(0, 2, 1))
            for conv, norm in zip(self.layers, self.norms):
                h = conv(h)
                h = tn.transpose(norm(tn.transpose(h, (0, 2, 1))), (0, 2, 1))
                h = tn.activation(h, self.cfg.activation)
                stages.append(h)
        else:
            h = tn.Tensor(points.reshape(batch * count, channels))
            for dense in self.layers:
                h = tn.activation(dense(h), self.cfg.activation)
                per_point = tn.reshape(h, (batch, count, h.shape[1]))
                stages.append(tn.transpose(per_point, (0, 2, 1)))

        if not self.cfg.pyramid:
            stages = stages[-1:]
        pooled, winners = [], []
        for stage in stages:
            features, index = tn.max_pool_points(stage)
            pooled.append(features)
            winners.append(index)
        pooled.append(tn.Tensor(np.asarray(proprio, dtype=np.float64).reshape(batch, -1)))
        return self.projection(tn.concat(pooled, axis=1)), winners

    def encode_points(self, pc: PointCloud, proprio: FloatArray) -> ObsEmbedding:
        return encode_points(pc, proprio, self)


class ImageEncoder(tn.Module):
    """
    Strided convolutions over a single-channel depth grid.
    """
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        if cfg.variant is not EncoderVariant.IMAGE_BASELINE:
            raise ValueError('ImageEncoder needs the image_baseline variant')
        self.cfg = cfg
        self.convs: list[tn.Conv2d] = []
        size = cfg.image_feature_size
        if size < 1:
            raise ValueError('image grid too small for the convolution stack')
        channels = 1
        for width in cfg.image_channels:
            self.convs.append(tn.Conv2d(channels, width, cfg.image_kernel, cfg.image_stride, rng))
            channels = width
        self.flat_size = channels * size * size
        self.projection = tn.Dense(self.flat_size + cfg.proprio_dim, cfg.embedding_dim, rng)

    def __call__(self, grids: FloatArray, proprio: FloatArray) -> tn.Tensor:
        grids = np.asarray(grids, dtype=np.float64)
        grid = self.cfg.image_grid
        if grids.ndim != 3 or grids.shape[1:] != (grid, grid):
            raise EncoderError(f"expected (B, {grid}, {grid}) grids, got {grids.shape}")
        batch = grids.shape[0]
        h = tn.Tensor(grids[:, None, :, :])
        for conv in self.convs:
            h = tn.activation(conv(h), self.cfg.activation)
        flat = tn.reshape(h, (batch, self.flat_size))
        extra = tn.Tensor(np.asarray(proprio, dtype=np.float64).reshape(batch, -1))
        return self.projection(tn.concat([flat, extra], axis=1))

    def encode_image(self, grid: FloatArray, proprio: FloatArray) -> ObsEmbedding:
        return encode_image(grid, proprio, self)


Encoder = Union[PointEncoder, ImageEncoder]


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Encoder:
    if cfg.variant is EncoderVariant.IMAGE_BASELINE:
        return ImageEncoder(cfg, rng)
    return PointEncoder(cfg, rng)


def encode_points(pc: PointCloud, proprio: FloatArray, encoder: PointEncoder) -> ObsEmbedding:
    """
    Embed one sampled cloud and its proprioception vector.
    """
    points = pc.features()[None, :, :]
    vector = encoder(points, np.asarray(proprio, dtype=np.float64)[None, :])
    return ObsEmbedding(vector.data[0].copy(), encoder.cfg.variant)


def encode_image(grid: FloatArray, proprio: FloatArray, encoder: ImageEncoder) -> ObsEmbedding:
    """
    Embed one depth grid and its proprioception vector.
    """
    vector = encoder(
        np.asarray(grid, dtype=np.float64)[None, :, :],
        np.asarray(proprio, dtype=np.float64)[None, :],
    )
    return ObsEmbedding(vector.data[0].copy(), encoder.cfg.variant)
