"""
Extrinsic contact-line detection against a table plane.

Planes are 4-vectors (n, offset) with unit normal n; the signed distance of a
point x to the plane is n . x + offset, positive on the object side.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

import numpy as np
import pandas as pd

from .geometry import DOMAIN_HALF, farthest_pair
from .model import ImplicitDeformModel, deformed_sdf_fn
from .utils.error_handler import ConfigurationError, DataError

logger = logging.getLogger(__name__)

GRID_HALF = float(np.sqrt(3.0))


@dataclass(frozen=True)
class ContactConfig:
    grid_res: int = 128
    eps: float = 0.01

    def __post_init__(self):
        if self.grid_res < 2:
            raise ConfigurationError(f"Contact grid needs at least 2 points per side, got {self.grid_res}")
        if self.eps <= 0:
            raise ConfigurationError(f"Contact threshold must be positive, got {self.eps}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ContactConfig':
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class ContactLine:
    """Two endpoints on the plane plus the cluster they were picked from"""
    endpoints: np.ndarray
    cluster: np.ndarray

    def __post_init__(self):
        self.endpoints = np.asarray(self.endpoints, dtype=np.float64).reshape(2, 3)
        self.cluster = np.asarray(self.cluster, dtype=np.float64).reshape(-1, 3)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.endpoints[0] - self.endpoints[1]))


def split_plane(plane: np.ndarray) -> Tuple[np.ndarray, float]:
    plane = np.asarray(plane, dtype=np.float64).reshape(4)
    normal = plane[:3]
    length = np.linalg.norm(normal)
    if not np.isfinite(length) or length == 0:
        raise DataError(f"Plane normal must be non-zero, got {normal}")
    return normal / length, float(plane[3] / length)


def plane_distance(plane: np.ndarray, points: np.ndarray) -> np.ndarray:
    normal, offset = split_plane(plane)
    return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ normal + offset


def project_to_plane(plane: np.ndarray, points: np.ndarray) -> np.ndarray:
    normal, _ = split_plane(plane)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points - plane_distance(plane, points)[:, None] * normal


def plane_grid(plane: np.ndarray, grid_res: int) -> np.ndarray:
    """Regular grid on the plane over [-sqrt3, sqrt3]^2, clipped to the domain cube"""
    normal, offset = split_plane(plane)
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    origin = -offset * normal
    ticks = np.linspace(-GRID_HALF, GRID_HALF, grid_res)
    a, b = np.meshgrid(ticks, ticks, indexing='ij')
    points = origin + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v
    return points[np.all(np.abs(points) <= DOMAIN_HALF, axis=1)]


def _line_from_cluster(cluster: np.ndarray) -> ContactLine:
    first, second = farthest_pair(cluster)
    return ContactLine(np.stack([first, second]), cluster)


def detect_contact_line_sdf(sdf: Callable[[np.ndarray], np.ndarray], plane: np.ndarray,
                            config: ContactConfig = ContactConfig()) -> Optional[ContactLine]:
    """Cluster the plane grid where the field is within eps of the surface (one batched query)"""
    grid = plane_grid(plane, config.grid_res)
    if grid.shape[0] == 0:
        logger.debug("Plane does not intersect the query domain")
        return None
    values = np.asarray(sdf(grid), dtype=np.float64).reshape(-1)
    cluster = grid[values <= config.eps]
    if cluster.shape[0] == 0:
        return None
    line = _line_from_cluster(cluster)
    logger.debug(f"Contact cluster of {cluster.shape[0]} grid points, line length {line.length:.4f}")
    return line


def detect_contact_line(model: ImplicitDeformModel, alpha: np.ndarray, z: np.ndarray, plane: np.ndarray,
                        config: ContactConfig = ContactConfig()) -> Optional[ContactLine]:
    return detect_contact_line_sdf(deformed_sdf_fn(model, alpha, z), plane, config)


def contact_line_from_cloud(points: np.ndarray, plane: np.ndarray, eps: float) -> Optional[ContactLine]:
    """Contact mask on a surface cloud: points within eps of the plane, projected onto it"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    near = points[plane_distance(plane, points) <= eps]
    if near.shape[0] == 0:
        return None
    return _line_from_cluster(project_to_plane(plane, near))


def contact_error(detected: Optional[ContactLine], truth: Optional[ContactLine]) -> Optional[float]:
    """Mean endpoint distance under the better of the two pairings; None marks a detection failure"""
    if detected is None or truth is None:
        return None
    a = detected.endpoints
    b = truth.endpoints
    direct = np.linalg.norm(a[0] - b[0]) + np.linalg.norm(a[1] - b[1])
    swapped = np.linalg.norm(a[0] - b[1]) + np.linalg.norm(a[1] - b[0])
    return 0.5 * float(min(direct, swapped))


def summarize_contact_errors(errors: Iterable[Optional[float]]) -> Dict[str, float]:
    """Mean (std) over successful detections plus the failure count"""
    series = pd.Series([np.nan if e is None else e for e in errors], dtype=np.float64)
    valid = series.dropna()
    return {
        'mean': float(valid.mean()) if len(valid) else float('nan'),
        'std': float(valid.std(ddof=0)) if len(valid) else float('nan'),
        'count': int(len(valid)),
        'failures': int(series.isna().sum()),
    }
