"""
Point clouds, normalization, Chamfer distance and analytic SDFs.

All coordinates live in the normalized wrist frame unless stated otherwise.
The query domain is the cube [-1, 1]^3.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .diffcore.tape import Var, as_var, getitem, vmean, vsum
from .utils.error_handler import ConfigurationError, DataError, DegeneracyError

logger = logging.getLogger(__name__)

DOMAIN_HALF = 1.0
SURFACE_TOL = 1e-9
NORMAL_TOL = 1e-6
CHAMFER_CHUNK = 1024


@dataclass
class PointCloud:
    """Unordered on-surface points with optional unit normals"""
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise DegeneracyError("Point cloud must contain at least one point")
        if self.normals is not None:
            self.normals = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise DataError(f"Normals shape {self.normals.shape} != points shape {self.points.shape}")
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > NORMAL_TOL):
                raise DataError("Point cloud normals must have unit length")

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, mask: np.ndarray) -> 'PointCloud':
        normals = self.normals[mask] if self.normals is not None else None
        return PointCloud(self.points[mask], normals)

    def sample(self, count: int, rng: np.random.Generator) -> 'PointCloud':
        """Random subset without replacement (or everything when count >= N)"""
        if count >= len(self):
            return self
        index = np.sort(rng.choice(len(self), size=count, replace=False))
        return self.subset(index)


@dataclass(frozen=True)
class NormalizationTransform:
    """Similarity x_norm = (x_raw - center) * scale"""
    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center

    def apply_cloud(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(self.apply(cloud.points), cloud.normals)

    def invert_cloud(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(self.invert(cloud.points), cloud.normals)

    def to_dict(self) -> dict:
        return {'center': [float(c) for c in self.center], 'scale': float(self.scale)}

    @classmethod
    def from_dict(cls, data: dict) -> 'NormalizationTransform':
        return cls(np.asarray(data['center'], dtype=np.float64), float(data['scale']))


def fit_normalization(points: np.ndarray, scale_box: float = 2.0) -> NormalizationTransform:
    """Bounding-box center and a uniform scale mapping the largest extent to scale_box"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise DegeneracyError("Cannot normalize an empty cloud")
    if scale_box <= 0:
        raise ConfigurationError(f"scale_box must be positive, got {scale_box}")
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = float(np.max(hi - lo))
    if not np.isfinite(extent) or extent <= 0.0:
        raise DegeneracyError(f"Cloud has zero extent (max extent {extent})")
    return NormalizationTransform(center=(lo + hi) / 2.0, scale=scale_box / extent)


def normalize_cloud(raw: PointCloud, scale_box: float = 2.0) -> Tuple[PointCloud, NormalizationTransform]:
    transform = fit_normalization(raw.points, scale_box)
    return transform.apply_cloud(raw), transform


# ---------------------------------------------------------------------------
# Chamfer distance
# ---------------------------------------------------------------------------

def _as_points(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return points.reshape(-1, 3)


def nearest_neighbors(a: np.ndarray, b: np.ndarray, chunk: int = CHAMFER_CHUNK) -> Tuple[np.ndarray, np.ndarray]:
    """For each row of a: index of the nearest row of b and the squared distance to it"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DegeneracyError("Nearest-neighbour query on an empty point set")
    index = np.empty(a.shape[0], dtype=np.int64)
    dist = np.empty(a.shape[0])
    for start in range(0, a.shape[0], chunk):
        block = a[start:start + chunk]
        d2 = np.sum((block[:, None, :] - b[None, :, :]) ** 2, axis=2)
        nearest = np.argmin(d2, axis=1)
        index[start:start + chunk] = nearest
        dist[start:start + chunk] = d2[np.arange(block.shape[0]), nearest]
    return index, dist


def chamfer(a: Union[PointCloud, np.ndarray], b: Union[PointCloud, np.ndarray]) -> float:
    """mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2"""
    pa, pb = _as_points(a), _as_points(b)
    _, d_ab = nearest_neighbors(pa, pb)
    _, d_ba = nearest_neighbors(pb, pa)
    return float(d_ab.mean() + d_ba.mean())


def chamfer_x1e3(a: Union[PointCloud, np.ndarray], b: Union[PointCloud, np.ndarray]) -> float:
    return 1e3 * chamfer(a, b)


def farthest_pair(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """The two points at maximum mutual distance (a single point pairs with itself)"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise DegeneracyError("Farthest pair of an empty point set")
    best, pair = -1.0, (0, 0)
    for start in range(0, points.shape[0], CHAMFER_CHUNK):
        block = points[start:start + CHAMFER_CHUNK]
        d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=-1)
        i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
        if d2[i, j] > best:
            best, pair = float(d2[i, j]), (start + int(i), int(j))
    return points[pair[0]].copy(), points[pair[1]].copy()


def chamfer_var(pred: Var, target: np.ndarray) -> Var:
    """Chamfer distance differentiable in `pred`; the matching itself is held constant"""
    pred = as_var(pred)
    target = _as_points(target)
    fwd_index, _ = nearest_neighbors(pred.value, target)
    bwd_index, _ = nearest_neighbors(target, pred.value)
    forward = vmean(vsum((pred - target[fwd_index]) * (pred - target[fwd_index]), axis=1))
    matched = getitem(pred, bwd_index)
    backward = vmean(vsum((matched - target) * (matched - target), axis=1))
    return forward + backward


# ---------------------------------------------------------------------------
# Analytic shapes
# ---------------------------------------------------------------------------

class AnalyticShape(Protocol):
    def sdf_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...

    def sample_surface(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


@dataclass(frozen=True)
class RoundedBox:
    """Box with outer half-extents and rounded edges of the given radius, in a local frame"""
    center: np.ndarray
    half_extents: np.ndarray
    radius: float = 0.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, 'center', np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, 'half_extents', np.asarray(self.half_extents, dtype=np.float64).reshape(3))
        object.__setattr__(self, 'rotation', np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        if np.any(self.half_extents <= 0):
            raise ConfigurationError(f"Half-extents must be positive, got {self.half_extents}")
        if self.radius < 0 or self.radius > self.half_extents.min():
            raise ConfigurationError(f"Corner radius {self.radius} must lie in [0, min half-extent]")

    def scaled(self, factor: float, about: np.ndarray) -> 'RoundedBox':
        return RoundedBox((self.center - about) * factor, self.half_extents * factor,
                          self.radius * factor, self.rotation)

    def sdf_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        local = (x - self.center) @ self.rotation
        inner = self.half_extents - self.radius
        q = np.abs(local) - inner
        q_pos = np.maximum(q, 0.0)
        outside = np.linalg.norm(q_pos, axis=1)
        q_max = q.max(axis=1)
        sd = outside + np.minimum(q_max, 0.0) - self.radius

        signs = np.where(local >= 0, 1.0, -1.0)
        grad_local = np.zeros_like(local)
        out_rows = outside > 0
        grad_local[out_rows] = signs[out_rows] * q_pos[out_rows] / outside[out_rows, None]
        in_rows = ~out_rows
        axis = np.argmax(q[in_rows], axis=1)
        grad_local[np.flatnonzero(in_rows), axis] = signs[in_rows, axis]
        return sd, grad_local @ self.rotation.T

    def face_area(self) -> float:
        h = self.half_extents
        return 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])

    def sample_surface(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Area-weighted points on the outer box faces, projected onto the rounded surface"""
        h = self.half_extents
        areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=count, p=areas / areas.sum())
        local = rng.uniform(-1.0, 1.0, size=(count, 3)) * h
        axis = face // 2
        side = np.where(face % 2 == 0, 1.0, -1.0)
        local[np.arange(count), axis] = side * h[axis]
        world = local @ self.rotation.T + self.center
        sd, grad = self.sdf_and_grad(world)
        projected = world - sd[:, None] * grad
        _, normals = self.sdf_and_grad(projected)
        return projected, normals


@dataclass(frozen=True)
class PrimitiveShape:
    """Union of rounded boxes"""
    primitives: Tuple[RoundedBox, ...]

    def __post_init__(self):
        object.__setattr__(self, 'primitives', tuple(self.primitives))
        if not self.primitives:
            raise ConfigurationError("A primitive shape needs at least one primitive")

    def sdf_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        results = [p.sdf_and_grad(x) for p in self.primitives]
        sds = np.stack([r[0] for r in results], axis=0)
        which = np.argmin(sds, axis=0)
        grads = np.stack([r[1] for r in results], axis=0)
        rows = np.arange(x.shape[0])
        return sds[which, rows], grads[which, rows]

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return self.sdf_and_grad(x)[0]

    def scaled(self, factor: float, about: np.ndarray) -> 'PrimitiveShape':
        return PrimitiveShape(tuple(p.scaled(factor, about) for p in self.primitives))

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounds of the union (corners of every rotated box)"""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        corners = np.concatenate([(signs * p.half_extents) @ p.rotation.T + p.center for p in self.primitives])
        return corners.min(axis=0), corners.max(axis=0)

    def normalized(self, transform: NormalizationTransform) -> 'PrimitiveShape':
        return self.scaled(transform.scale, transform.center)

    def sample_surface(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Area-weighted surface points of the union; points buried in other primitives are rejected"""
        areas = np.array([p.face_area() for p in self.primitives])
        points, normals = [], []
        collected = 0
        for _ in range(64):
            batch = max(2 * (count - collected), 16)
            owner = rng.choice(len(self.primitives), size=batch, p=areas / areas.sum())
            for index, primitive in enumerate(self.primitives):
                n_here = int(np.sum(owner == index))
                if n_here == 0:
                    continue
                candidates, _ = primitive.sample_surface(n_here, rng)
                sd, grad = self.sdf_and_grad(candidates)
                keep = np.abs(sd) <= SURFACE_TOL
                points.append(candidates[keep])
                normals.append(grad[keep])
                collected += int(keep.sum())
            if collected >= count:
                break
        if collected < count:
            raise DegeneracyError(f"Could only place {collected} of {count} surface samples")
        return np.concatenate(points)[:count], _unit(np.concatenate(normals)[:count])


def _segment_closest(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ab = b - a
    denom = max(float(ab @ ab), 1e-300)
    t = np.clip(((x - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return closest, np.linalg.norm(x - closest, axis=1)


@dataclass(frozen=True)
class TubeShape:
    """Swept sphere of constant radius along a polyline (capped at both ends)"""
    vertices: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, 'vertices', np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        if self.vertices.shape[0] < 2:
            raise ConfigurationError("A tube needs at least two vertices")
        if self.radius <= 0:
            raise ConfigurationError(f"Tube radius must be positive, got {self.radius}")

    def scaled(self, factor: float, about: np.ndarray) -> 'TubeShape':
        return TubeShape((self.vertices - about) * factor, self.radius * factor)

    def normalized(self, transform: NormalizationTransform) -> 'TubeShape':
        return self.scaled(transform.scale, transform.center)

    def closest_points(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closest polyline point, its distance, and the segment index"""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        best = np.full(x.shape[0], np.inf)
        closest = np.zeros_like(x)
        segment = np.zeros(x.shape[0], dtype=np.int64)
        for i in range(self.vertices.shape[0] - 1):
            c, d = _segment_closest(x, self.vertices[i], self.vertices[i + 1])
            better = d < best
            best[better] = d[better]
            closest[better] = c[better]
            segment[better] = i
        return closest, best, segment

    def sdf_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        closest, dist, _ = self.closest_points(x)
        offset = x - closest
        grad = np.where(dist[:, None] > 0, offset / np.where(dist > 0, dist, 1.0)[:, None], np.array([0.0, 0.0, 1.0]))
        return dist - self.radius, grad

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return self.sdf_and_grad(x)[0]

    def sample_surface(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        seg = np.diff(self.vertices, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        body_area = 2.0 * np.pi * self.radius * lengths
        cap_area = 2.0 * np.pi * self.radius ** 2
        weights = np.concatenate([body_area, [cap_area, cap_area]])
        points, normals = [], []
        collected = 0
        for _ in range(64):
            batch = max(2 * (count - collected), 16)
            owner = rng.choice(weights.size, size=batch, p=weights / weights.sum())
            directions = rng.normal(size=(batch, 3))
            centers = np.zeros((batch, 3))
            n_seg = lengths.size
            for i in range(n_seg):
                rows = owner == i
                if not rows.any():
                    continue
                axis = seg[i] / max(lengths[i], 1e-300)
                t = rng.uniform(0.0, 1.0, size=int(rows.sum()))
                centers[rows] = self.vertices[i] + t[:, None] * seg[i]
                d = directions[rows]
                directions[rows] = d - (d @ axis)[:, None] * axis
            for cap, (end, inward) in enumerate(((self.vertices[0], seg[0]), (self.vertices[-1], -seg[-1]))):
                rows = owner == n_seg + cap
                if not rows.any():
                    continue
                d = directions[rows]
                flip = (d @ inward) > 0
                d[flip] = -d[flip]
                directions[rows] = d
                centers[rows] = end
            directions = _unit(directions)
            candidates = centers + self.radius * directions
            sd, grad = self.sdf_and_grad(candidates)
            keep = np.abs(sd) <= SURFACE_TOL
            points.append(candidates[keep])
            normals.append(grad[keep])
            collected += int(keep.sum())
            if collected >= count:
                break
        if collected < count:
            raise DegeneracyError(f"Could only place {collected} of {count} tube surface samples")
        return np.concatenate(points)[:count], _unit(np.concatenate(normals)[:count])


def primitive_sdf(shape: AnalyticShape, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Signed distance and its spatial gradient; a single point gives scalar/3-vector results"""
    x = np.asarray(x, dtype=np.float64)
    sd, grad = shape.sdf_and_grad(x.reshape(-1, 3))
    if x.ndim == 1:
        return float(sd[0]), grad[0]
    return sd, grad


def dense_surface(shape: AnalyticShape, count: int, seed: int = 0) -> PointCloud:
    points, normals = shape.sample_surface(count, np.random.default_rng(seed))
    return PointCloud(points, normals)


# ---------------------------------------------------------------------------
# SDF training samples
# ---------------------------------------------------------------------------

@dataclass
class SdfSampleSet:
    """Query points with target signed distances; surface rows (Ω₀) also carry normals"""
    queries: np.ndarray
    target_sd: np.ndarray
    surface_mask: np.ndarray
    target_normals: np.ndarray

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64).reshape(-1, 3)
        self.target_sd = np.asarray(self.target_sd, dtype=np.float64).reshape(-1)
        self.surface_mask = np.asarray(self.surface_mask, dtype=bool).reshape(-1)
        self.target_normals = np.asarray(self.target_normals, dtype=np.float64).reshape(-1, 3)
        m = self.queries.shape[0]
        if self.target_sd.shape[0] != m or self.surface_mask.shape[0] != m:
            raise DataError("Sample set arrays disagree in length")
        if self.target_normals.shape[0] != int(self.surface_mask.sum()):
            raise DataError(f"Expected {int(self.surface_mask.sum())} surface normals, "
                            f"got {self.target_normals.shape[0]}")
        if np.any(np.abs(self.queries) > DOMAIN_HALF + 1e-12):
            raise DataError("Sample queries must lie inside [-1, 1]^3")
        if np.any(np.abs(self.target_sd[self.surface_mask]) > SURFACE_TOL):
            raise DataError("Surface rows must carry a zero target distance")

    def __len__(self) -> int:
        return self.queries.shape[0]

    @property
    def surface_points(self) -> np.ndarray:
        return self.queries[self.surface_mask]

    def subsample(self, n_surface: Optional[int], n_query: Optional[int],
                  rng: np.random.Generator) -> 'SdfSampleSet':
        """Random mini-batch keeping the surface/off-surface proportions requested"""
        surface_rows = np.flatnonzero(self.surface_mask)
        other_rows = np.flatnonzero(~self.surface_mask)
        pick_s = np.arange(surface_rows.size)
        if n_surface is not None and n_surface < surface_rows.size:
            pick_s = np.sort(rng.choice(surface_rows.size, size=n_surface, replace=False))
        pick_o = other_rows
        if n_query is not None and n_query < other_rows.size:
            pick_o = np.sort(rng.choice(other_rows, size=n_query, replace=False))
        rows = np.concatenate([surface_rows[pick_s], pick_o])
        return SdfSampleSet(self.queries[rows], self.target_sd[rows],
                            np.concatenate([np.ones(pick_s.size, bool), np.zeros(pick_o.size, bool)]),
                            self.target_normals[pick_s])


def sample_training_points(shape: AnalyticShape, n_surface: int, n_query: int, seed,
                           noise_std: float = 0.05, uniform_fraction: float = 0.5) -> SdfSampleSet:
    """Surface rows (s*=0, analytic normals) followed by off-surface rows.

    Off-surface rows mix uniform draws in the domain with surface points
    perturbed by isotropic Gaussian noise (clipped back into the domain).
    """
    if n_surface <= 0 or n_query <= 0:
        raise ConfigurationError(f"Sample counts must be positive (surface={n_surface}, query={n_query})")
    rng = np.random.default_rng(seed)
    surface, normals = shape.sample_surface(n_surface, rng)
    if np.any(np.abs(surface) > DOMAIN_HALF):
        raise DegeneracyError("Shape surface leaves the [-1, 1]^3 domain; normalize it first")

    n_uniform = int(round(uniform_fraction * n_query))
    uniform = rng.uniform(-DOMAIN_HALF, DOMAIN_HALF, size=(n_uniform, 3))
    anchors, _ = shape.sample_surface(n_query - n_uniform, rng)
    near = np.clip(anchors + rng.normal(0.0, noise_std, size=anchors.shape), -DOMAIN_HALF, DOMAIN_HALF)
    off_surface = np.concatenate([uniform, near])
    off_sd, _ = shape.sdf_and_grad(off_surface)

    return SdfSampleSet(
        queries=np.concatenate([surface, off_surface]),
        target_sd=np.concatenate([np.zeros(n_surface), off_sd]),
        surface_mask=np.concatenate([np.ones(n_surface, bool), np.zeros(off_surface.shape[0], bool)]),
        target_normals=normals,
    )
