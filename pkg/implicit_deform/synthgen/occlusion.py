"""
Occlusion masks for observed point clouds.
"""

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from ..geometry import PointCloud
from ..utils.error_handler import ConfigurationError, DataError, DegeneracyError

logger = logging.getLogger(__name__)

CAMERA_DIRECTION = np.array([0.2, -1.0, 0.3]) / np.linalg.norm([0.2, -1.0, 0.3])


@dataclass(frozen=True)
class BottomFraction:
    """Drop points lower than min + ratio * height along `up`"""
    ratio: float
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigurationError(f"Occlusion ratio must be in [0, 1), got {self.ratio}")
        up = np.asarray(self.up, dtype=np.float64).reshape(3)
        length = np.linalg.norm(up)
        if length == 0:
            raise ConfigurationError("Occlusion direction must be non-zero")
        object.__setattr__(self, 'up', up / length)

    def removed(self, points: np.ndarray) -> np.ndarray:
        height = points @ self.up
        lo = height.min()
        threshold = lo + self.ratio * (height.max() - lo)
        return height < threshold


@dataclass(frozen=True)
class BoxRegion:
    """Drop points inside the closed axis-aligned box [lo, hi]"""
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(hi < lo):
            raise ConfigurationError(f"Occlusion box has hi < lo ({lo} / {hi})")
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)

    def removed(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)


OcclusionMode = Union[BottomFraction, BoxRegion]


def apply_occlusion(cloud: PointCloud, mode: OcclusionMode) -> PointCloud:
    if isinstance(mode, BottomFraction) and mode.ratio == 0.0:
        return cloud
    removed = mode.removed(cloud.points)
    if removed.all():
        raise DegeneracyError(f"Occlusion {mode} removes every point of the cloud")
    if not removed.any():
        return cloud
    logger.debug(f"Occlusion removed {int(removed.sum())} of {len(cloud)} points")
    return cloud.subset(~removed)


def front_facing(cloud: PointCloud, view_direction: np.ndarray) -> PointCloud:
    """Points whose normals face a distant camera looking along -view_direction"""
    if cloud.normals is None:
        raise DataError("Visibility needs a cloud with normals")
    facing = cloud.normals @ np.asarray(view_direction, dtype=np.float64).reshape(3) > 0.0
    if not facing.any():
        raise DegeneracyError("No cloud point faces the camera")
    return cloud.subset(facing)
