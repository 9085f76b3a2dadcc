"""
Camera-frame 3D geometry.

Points are expressed in the pinhole camera frame: x to the right, y down,
z along the optical axis, all in metres. Depth images store the z value of
the first surface hit per pixel, with zero marking an invalid reading.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Optional

import numpy as np

from .utils import FloatArray, IntArray


logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """
    Ideal pinhole model, no distortion.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError('focal lengths must be positive')
        if not 0 <= self.cx < self.width:
            raise ValueError('principal point x must lie inside the image')
        if not 0 <= self.cy < self.height:
            raise ValueError('principal point y must lie inside the image')

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> Intrinsics:
        """
        Square-pixel camera with the given horizontal field of view.
        """
        focal = (width / 2) / math.tan(math.radians(fov_deg) / 2)
        return cls(focal, focal, width / 2, height / 2, width, height)

    def ray_directions(self) -> FloatArray:
        """
        Per-pixel ray directions with unit z, shape (height, width, 3).

        A hit at parameter `s` along the ray lies at depth exactly `s`.
        """
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (u - self.cx) / self.fx
        rays[..., 1] = (v - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays


@dataclass(frozen=True)
class DepthImage:
    width: int
    height: int
    depth: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.size != self.width * self.height:
            raise ValueError('depth array length must equal width × height')
        depth = depth.reshape(self.height, self.width)
        if not np.all(np.isfinite(depth)):
            raise ValueError('depth values must be finite')
        if np.any(depth < 0):
            raise ValueError('depth values must be non-negative')
        object.__setattr__(self, 'depth', depth)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DepthImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.depth, other.depth)
        )

    @property
    def valid_fraction(self) -> float:
        return float(np.count_nonzero(self.depth)) / self.depth.size


@dataclass(frozen=True)
class RigidTransform:
    """
    Proper rigid motion `p ↦ R·p + t`.
    """
    rotation: FloatArray = field(default_factory=lambda: np.eye(3))
    translation: FloatArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(
                rotation.T @ rotation, np.eye(3), rtol=0, atol=ORTHONORMAL_TOLERANCE):
            raise ValueError('rotation must be orthonormal')
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError('rotation must have determinant +1')
        if not np.all(np.isfinite(translation)):
            raise ValueError('translation must be finite')
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_euler(
        cls,
        yaw_deg: float = 0.0,
        pitch_deg: float = 0.0,
        roll_deg: float = 0.0,
        translation: Optional[FloatArray] = None,
    ) -> RigidTransform:
        """
        Rotation `Rz(yaw)·Ry(pitch)·Rx(roll)`, angles in degrees.
        """
        rotation = (
            _rotation_z(math.radians(yaw_deg))
            @ _rotation_y(math.radians(pitch_deg))
            @ _rotation_x(math.radians(roll_deg))
        )
        if translation is None:
            translation = np.zeros(3)
        return cls(rotation, np.asarray(translation, dtype=np.float64))

    def apply(self, points: FloatArray) -> FloatArray:
        """
        Transform an (N, 3) array of points.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        result: FloatArray = points @ self.rotation.T + self.translation
        return result

    def compose(self, other: RigidTransform) -> RigidTransform:
        """
        Transform applying `other` first, then `self`.
        """
        rotation = self.rotation @ other.rotation
        translation = self.rotation @ other.translation + self.translation
        return RigidTransform(rotation, translation)

    def inverse(self) -> RigidTransform:
        rotation = self.rotation.T
        return RigidTransform(rotation, -(rotation @ self.translation))


@dataclass(frozen=True)
class PointCloud:
    positions: FloatArray = field(repr=False)
    colors: Optional[FloatArray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(positions)):
            raise ValueError('point coordinates must be finite')
        object.__setattr__(self, 'positions', positions)
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(colors) != len(positions):
                raise ValueError('colors must have one row per point')
            if np.any(colors < 0) or np.any(colors > 1):
                raise ValueError('colors must lie in [0, 1]')
            object.__setattr__(self, 'colors', colors)

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.colors is None) != (other.colors is None):
            return False
        same_colors = (
            self.colors is None
            or np.array_equal(self.colors, other.colors)    # type: ignore[arg-type]
        )
        return bool(np.array_equal(self.positions, other.positions) and same_colors)

    @classmethod
    def empty(cls, with_colors: bool = False) -> PointCloud:
        colors = np.zeros((0, 3)) if with_colors else None
        return cls(np.zeros((0, 3)), colors)

    def select(self, indices: IntArray) -> PointCloud:
        """
        New cloud holding the given rows, in the given order.
        """
        indices = np.asarray(indices, dtype=np.int64)
        colors = None if self.colors is None else self.colors[indices]
        return PointCloud(self.positions[indices], colors)

    def features(self) -> FloatArray:
        """
        Per-point input channels: positions, then colours if present.
        """
        if self.colors is None:
            return self.positions
        return np.concatenate([self.positions, self.colors], axis=1)


@dataclass(frozen=True)
class CropBox:
    min_corner: FloatArray
    max_corner: FloatArray

    def __post_init__(self) -> None:
        lower = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        upper = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not np.all(lower < upper):
            raise ValueError('min_corner must be below max_corner on every axis')
        object.__setattr__(self, 'min_corner', lower)
        object.__setattr__(self, 'max_corner', upper)

    @classmethod
    def in_front(cls, size: float = 1.2) -> CropBox:
        """
        Cube of the given edge length directly in front of the camera.
        """
        half = size / 2
        return cls(np.array([-half, -half, 0.0]), np.array([half, half, size]))


def unproject(depth: DepthImage, k: Intrinsics, stride: int = 1) -> PointCloud:
    """
    Lift every `stride`-th pixel with valid depth into the camera frame.

    Points come out in row-major scan order; zero-depth pixels are skipped.
    """
    if stride < 1:
        raise ValueError('stride must be a positive integer')
    if (depth.width, depth.height) != (k.width, k.height):
        raise ValueError('depth image size does not match intrinsics')

    v, u = np.mgrid[0:depth.height:stride, 0:depth.width:stride]
    d = depth.depth[v, u]
    valid = d > 0
    u, v, d = u[valid].astype(np.float64), v[valid].astype(np.float64), d[valid]

    positions = np.empty((len(d), 3))
    positions[:, 0] = (u - k.cx) * d / k.fx
    positions[:, 1] = (v - k.cy) * d / k.fy
    positions[:, 2] = d
    return PointCloud(positions)


def transform_cloud(pc: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(t.apply(pc.positions), pc.colors)


def crop_box(pc: PointCloud, box: CropBox) -> PointCloud:
    """
    Keep points inside the closed box, preserving order.
    """
    inside = np.all(
        (pc.positions >= box.min_corner) & (pc.positions <= box.max_corner),
        axis=1,
    )
    return pc.select(np.flatnonzero(inside))


def _rotation_x(angle: float) -> FloatArray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rotation_y(angle: float) -> FloatArray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rotation_z(angle: float) -> FloatArray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

