"""
Hanging chain held between a fixed anchor and a moving grip.

The chain hangs in the vertical plane through both ends as a catenary
z = a cosh((x - x0) / a) + c. When the free catenary would dip through the
table the lowest part rests on it: two half-catenaries with a shared
parameter and a straight run at tube-radius height in between.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np

from ..contact import contact_line_from_cloud
from ..geometry import (SURFACE_TOL, NormalizationTransform, TubeShape, dense_surface, fit_normalization,
                        sample_training_points)
from ..utils.error_handler import ConfigurationError, DegeneracyError, GenerationError
from .dataset import ChainGeneratorConfig, GeneratorConfig, ObjectRecord, Trajectory, Transition, seed_sequence
from .occlusion import CAMERA_DIRECTION, BottomFraction, apply_occlusion, front_facing

logger = logging.getLogger(__name__)

UP = np.array([0.0, 0.0, 1.0])
NORMALIZATION_MARGIN = 0.9


@dataclass(frozen=True)
class ChainSpec:
    object_id: str
    length: float
    tube_radius: float
    weight_per_length: float
    fixed_end: Tuple[float, float, float] = (0.0, 0.0, 0.4)

    def __post_init__(self):
        for name in ('length', 'tube_radius', 'weight_per_length'):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigurationError(f"Chain '{self.object_id}': {name} must be positive, got {value}")
        object.__setattr__(self, 'fixed_end', tuple(float(v) for v in self.fixed_end))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['fixed_end'] = list(self.fixed_end)
        return data


@dataclass
class ChainState:
    """Solved chain shape for one grip position (world frame)"""
    points: np.ndarray
    parameter: float
    resting: Optional[Tuple[float, float]]
    force: np.ndarray
    binormal: np.ndarray


def _bisect(fn: Callable[[float], float], lo: float, hi: float, tol: float = 1e-15,
            iterations: int = 500) -> float:
    """Root of fn on [lo, hi] given fn(lo) > 0 >= fn(hi)"""
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if fn(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _grow(fn: Callable[[float], float], start: float, what: str) -> float:
    """Double start until fn turns non-positive"""
    hi = start
    for _ in range(200):
        if fn(hi) <= 0.0:
            return hi
        hi *= 2.0
    raise GenerationError(f"Could not bracket the {what}")


def solve_catenary_parameter(span: float, rise: float, length: float) -> float:
    """Catenary parameter a with 2a sinh(span / 2a) = sqrt(length^2 - rise^2)"""
    if span <= 1e-9:
        raise GenerationError(f"Chain ends are vertically aligned (horizontal span {span})")
    if length <= np.hypot(span, rise) + 1e-12:
        raise GenerationError(f"Chain of length {length} cannot span separation {np.hypot(span, rise):.6f}")
    chord = np.sqrt(length ** 2 - rise ** 2)

    def excess(a: float) -> float:
        return 2.0 * a * np.sinh(span / (2.0 * a)) - chord

    lo = span / 1000.0
    hi = _grow(excess, span, 'catenary parameter (chain nearly taut)')
    return _bisect(excess, lo, hi)


def _half_drop(a: float, drop: float) -> Tuple[float, float]:
    """Horizontal extent and arclength of a half-catenary falling `drop` to its vertex"""
    return a * np.arccosh(1.0 + drop / a), np.sqrt(drop * drop + 2.0 * a * drop)


def _direction(anchor: np.ndarray, grip: np.ndarray) -> Tuple[np.ndarray, float, float]:
    delta = grip - anchor
    span = float(np.hypot(delta[0], delta[1]))
    if span <= 1e-9:
        raise GenerationError("Chain ends are vertically aligned")
    return np.array([delta[0] / span, delta[1] / span, 0.0]), span, float(delta[2])


def solve_chain(spec: ChainSpec, grip: np.ndarray, count: int = 200) -> ChainState:
    """Chain polyline with `count` vertices equally spaced in arclength"""
    anchor = np.asarray(spec.fixed_end, dtype=np.float64)
    grip = np.asarray(grip, dtype=np.float64).reshape(3)
    z_table = spec.tube_radius
    if min(anchor[2], grip[2]) < z_table:
        raise GenerationError(f"Chain end below the table (anchor z={anchor[2]}, grip z={grip[2]})")
    direction, span, rise = _direction(anchor, grip)
    sigma = np.linspace(0.0, spec.length, count)
    w = spec.weight_per_length

    a = solve_catenary_parameter(span, rise, spec.length)
    x0 = span / 2.0 - a * np.arcsinh(rise / (2.0 * a * np.sinh(span / (2.0 * a))))
    c = anchor[2] - a * np.cosh(x0 / a)
    lowest = c + a if 0.0 <= x0 <= span else min(anchor[2], grip[2])

    if lowest >= z_table:
        s_anchor = a * np.sinh(-x0 / a)
        x = x0 + a * np.arcsinh((s_anchor + sigma) / a)
        z = c + a * np.cosh((x - x0) / a)
        slope = np.sinh((span - x0) / a)
        resting = None
    else:
        a, x, z, slope, resting = _solve_resting(spec, anchor[2] - z_table, grip[2] - z_table, span, sigma)
        z = z + z_table

    points = anchor + x[:, None] * direction + (z - anchor[2])[:, None] * UP
    force = -w * a * (direction + slope * UP)
    binormal = np.cross(UP, direction)
    return ChainState(points, float(a), resting, force, binormal / np.linalg.norm(binormal))


def _solve_resting(spec: ChainSpec, drop_a: float, drop_b: float, span: float, sigma: np.ndarray):
    """Two half-catenaries around a straight run on the table; heights relative to the run"""
    def spread(a: float) -> float:
        return span - _half_drop(a, drop_a)[0] - _half_drop(a, drop_b)[0]

    a_max = _bisect(spread, 1e-12, _grow(spread, span, 'touchdown parameter'))
    pile_up = drop_a + drop_b + span
    if spec.length >= pile_up:
        raise GenerationError(f"Chain of length {spec.length} would pile up on the table (limit {pile_up:.6f})")

    def slack(a: float) -> float:
        d1, l1 = _half_drop(a, drop_a)
        d2, l2 = _half_drop(a, drop_b)
        return l1 + l2 + (span - d1 - d2) - spec.length

    a = _bisect(slack, 1e-12, a_max) if slack(a_max) < 0.0 else a_max
    d1, l1 = _half_drop(a, drop_a)
    d2, l2 = _half_drop(a, drop_b)
    run = max(span - d1 - d2, 0.0)
    x2 = span - d2

    x = np.empty_like(sigma)
    left = sigma <= l1
    flat = (sigma > l1) & (sigma <= l1 + run)
    right = sigma > l1 + run
    x[left] = d1 - a * np.arcsinh((l1 - sigma[left]) / a)
    x[flat] = d1 + (sigma[flat] - l1)
    x[right] = x2 + a * np.arcsinh(np.minimum(sigma[right] - l1 - run, l2) / a)
    z = np.zeros_like(sigma)
    z[left] = a * (np.cosh((x[left] - d1) / a) - 1.0)
    z[right] = a * (np.cosh((x[right] - x2) / a) - 1.0)
    return a, x, z, np.sinh(d2 / a), (float(d1), float(x2))


def random_chain_spec(object_id: str, rng: np.random.Generator, base: ChainGeneratorConfig,
                      unseen: bool = False) -> ChainSpec:
    stretch = rng.uniform(0.85, 0.92) if unseen else rng.uniform(0.95, 1.05)
    return ChainSpec(object_id=object_id, length=float(base.length * stretch),
                     tube_radius=float(base.tube_radius * rng.uniform(0.8, 1.2)),
                     weight_per_length=float(base.weight_per_length * rng.uniform(0.8, 1.2)),
                     fixed_end=base.fixed_end)


# ---------------------------------------------------------------------------
# Grip motion
# ---------------------------------------------------------------------------

def grip_grid(base: ChainGeneratorConfig) -> np.ndarray:
    """Vertices of the equally spaced grid inside the grip box, shape (n, n, n, 3)"""
    center, size = np.asarray(base.grip_box_center), np.asarray(base.grip_box_size)
    ticks = [np.linspace(center[i] - size[i] / 2, center[i] + size[i] / 2, base.grid_vertices) for i in range(3)]
    return np.stack(np.meshgrid(*ticks, indexing='ij'), axis=-1)


def grid_walk(base: ChainGeneratorConfig, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Random walk over neighbouring grid vertices; steps + 1 grip positions"""
    grid = grip_grid(base)
    n = base.grid_vertices
    index = rng.integers(0, n, size=3)
    path = [grid[tuple(index)]]
    for _ in range(steps):
        while True:
            axis = int(rng.integers(0, 3))
            candidate = index.copy()
            candidate[axis] += int(rng.choice((-1, 1)))
            if 0 <= candidate[axis] < n:
                break
        index = candidate
        path.append(grid[tuple(index)])
    return np.stack(path)


def uniform_grips(base: ChainGeneratorConfig, steps: int, rng: np.random.Generator) -> np.ndarray:
    center, size = np.asarray(base.grip_box_center), np.asarray(base.grip_box_size)
    return center + rng.uniform(-0.5, 0.5, size=(steps + 1, 3)) * size


# ---------------------------------------------------------------------------
# Deformation between two chain states
# ---------------------------------------------------------------------------

def _segment_frames(vertices: np.ndarray, binormal: np.ndarray) -> np.ndarray:
    """Per-segment orthonormal (tangent, normal, binormal) rows, shape (n-1, 3, 3)"""
    tangent = np.diff(vertices, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.cross(binormal, tangent)
    return np.stack([tangent, normal, np.broadcast_to(binormal, tangent.shape)], axis=1)


@dataclass(frozen=True)
class DeformedChainShape:
    """Deformed tube with an arclength-and-frame correspondence to the nominal tube"""
    deformed: TubeShape
    nominal: TubeShape
    deformed_binormal: np.ndarray
    nominal_binormal: np.ndarray

    def __post_init__(self):
        if self.deformed.vertices.shape != self.nominal.vertices.shape:
            raise ConfigurationError("Deformed and nominal chains need the same vertex count")

    def to_nominal(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
        closest, _, segment = self.deformed.closest_points(y)
        dv, nv = self.deformed.vertices, self.nominal.vertices
        seg = dv[segment + 1] - dv[segment]
        t = np.einsum('ij,ij->i', closest - dv[segment], seg) / np.einsum('ij,ij->i', seg, seg)
        frames = _segment_frames(dv, self.deformed_binormal)[segment]
        nominal_frames = _segment_frames(nv, self.nominal_binormal)[segment]
        local = np.einsum('ikj,ij->ik', frames, y - closest)
        anchor = nv[segment] + t[:, None] * (nv[segment + 1] - nv[segment])
        return anchor + np.einsum('ikj,ik->ij', nominal_frames, local)

    def deformation(self, y: np.ndarray) -> np.ndarray:
        return self.to_nominal(y) - np.asarray(y, dtype=np.float64).reshape(-1, 3)

    def sdf_and_grad(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.deformed.sdf_and_grad(y)

    def sample_surface(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Deformed surface points whose nominal preimage is also on the nominal surface"""
        points, normals = [], []
        collected = 0
        for _ in range(64):
            candidates, candidate_normals = self.deformed.sample_surface(max(2 * (count - collected), 16), rng)
            keep = np.abs(self.nominal.sdf(self.to_nominal(candidates))) <= SURFACE_TOL
            points.append(candidates[keep])
            normals.append(candidate_normals[keep])
            collected += int(keep.sum())
            if collected >= count:
                break
        if collected < count:
            raise DegeneracyError(f"Could only place {collected} of {count} chain surface samples")
        return np.concatenate(points)[:count], np.concatenate(normals)[:count]


# ---------------------------------------------------------------------------
# Objects and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainObject:
    spec: ChainSpec
    reference_grip: np.ndarray
    reference: ChainState
    transform: NormalizationTransform
    curve_points: int

    def tube(self, state: ChainState, grip: np.ndarray) -> TubeShape:
        """Normalized tube in the grip (wrist) frame"""
        return TubeShape(self.transform.apply(state.points - grip), self.spec.tube_radius * self.transform.scale)

    @property
    def nominal(self) -> TubeShape:
        return self.tube(self.reference, self.reference_grip)


def build_chain_object(spec: ChainSpec, base: ChainGeneratorConfig, scale_box: float = 2.0) -> ChainObject:
    """Nominal shape at the grip-box center; normalization covers the box corners and center"""
    grid = grip_grid(base)
    corners = [grid[i, j, k] for i in (0, -1) for j in (0, -1) for k in (0, -1)]
    reference_grip = np.asarray(base.grip_box_center, dtype=np.float64)
    extent = []
    for grip in corners + [reference_grip]:
        points = solve_chain(spec, grip, base.curve_points).points - grip
        extent.append(points - spec.tube_radius)
        extent.append(points + spec.tube_radius)
    transform = fit_normalization(np.concatenate(extent), scale_box * NORMALIZATION_MARGIN)
    reference = solve_chain(spec, reference_grip, base.curve_points)
    return ChainObject(spec, reference_grip, reference, transform, base.curve_points)


def chain_plane(obj: ChainObject, grip: np.ndarray) -> np.ndarray:
    """Table z = 0 in the normalized grip frame"""
    offset = obj.transform.scale * (obj.transform.center[2] + float(grip[2]))
    return np.array([0.0, 0.0, 1.0, offset])


def chain_object_record(obj: ChainObject, split: str, config: GeneratorConfig, seed) -> ObjectRecord:
    cloud_seq, sample_seq = seed_sequence(seed).spawn(2)
    nominal = obj.nominal
    spec = obj.spec.to_dict()
    spec['kind'] = 'chain'
    return ObjectRecord(obj.spec.object_id, 'chain', split, dense_surface(nominal, config.n_cloud, seed=cloud_seq),
                        sample_training_points(nominal, config.n_surface, config.n_query, sample_seq,
                                               noise_std=config.sample_noise_std),
                        obj.transform, spec, length=float(obj.spec.length * obj.transform.scale))


def gen_chain_trajectory(spec: Union[ChainSpec, ChainObject], seed, steps: int,
                         config: Optional[GeneratorConfig] = None, trajectory_id: Optional[str] = None,
                         split: str = 'train', occlusion_ratio: float = 0.0, mode: str = 'grid',
                         grips: Optional[np.ndarray] = None) -> Trajectory:
    """Grip moves through grid vertices (mode 'grid') or uniform box samples ('uniform').

    Orientation stays fixed, so poses and actions carry the grip position in
    their first three entries and zeros elsewhere.
    """
    if steps < 2:
        raise ConfigurationError(f"A trajectory needs at least 2 steps, got {steps}")
    config = config or GeneratorConfig(object_type='chain')
    base = config.chain
    obj = spec if isinstance(spec, ChainObject) else build_chain_object(spec, base, config.scale_box)
    motion_seq, noise_seq, *step_seqs = seed_sequence(seed).spawn(steps + 2)
    rng = np.random.default_rng(motion_seq)
    noise_rng = np.random.default_rng(noise_seq)
    if grips is None:
        if mode == 'grid':
            grips = grid_walk(base, steps, rng)
        elif mode == 'uniform':
            grips = uniform_grips(base, steps, rng)
        else:
            raise ConfigurationError(f"Unknown grip mode '{mode}'")
    grips = np.asarray(grips, dtype=np.float64).reshape(-1, 3)
    if grips.shape[0] < steps + 1:
        raise ConfigurationError(f"Need {steps + 1} grip positions, got {grips.shape[0]}")

    nominal = obj.nominal
    transitions = []
    for step in range(steps):
        grip = grips[step]
        state = solve_chain(obj.spec, grip, obj.curve_points)
        shape = DeformedChainShape(obj.tube(state, grip), nominal, state.binormal, obj.reference.binormal)
        cloud_seq, sample_seq = step_seqs[step].spawn(2)
        full = dense_surface(shape, config.n_cloud, seed=cloud_seq)
        samples = sample_training_points(shape, config.n_surface, config.n_query, sample_seq,
                                         noise_std=config.sample_noise_std)
        observed = front_facing(full, CAMERA_DIRECTION)
        if occlusion_ratio > 0:
            observed = apply_occlusion(observed, BottomFraction(occlusion_ratio))
        plane = chain_plane(obj, grip)
        line = None
        if state.resting is not None:
            found = contact_line_from_cloud(full.points, plane, config.contact_eps)
            line = None if found is None else found.endpoints

        wrench = np.concatenate([state.force, np.zeros(3)])
        if config.wrench_noise > 0:
            wrench = wrench + noise_rng.normal(0.0, config.wrench_noise, size=6)
        pose = np.concatenate([grip, np.zeros(3)])
        action = np.concatenate([grips[step + 1] - grip, np.zeros(3)])
        transitions.append(Transition(
            pose=pose, wrench=wrench, observed=observed, action=action, full_cloud=full, samples=samples,
            deformation=shape.deformation(samples.queries), contact_line=line, plane=plane,
            depth=0.0 if state.resting is None else float(state.resting[1] - state.resting[0]),
        ))

    identifier = trajectory_id or f"{obj.spec.object_id}-traj"
    logger.debug(f"Generated chain trajectory {identifier} with {steps} steps")
    return Trajectory(identifier, obj.spec.object_id, split, transitions)
