"""
Paddle objects bent as quasi-static cantilevers against a table.

Tool frame: the wrist sits at the origin, the handle runs along +x and the
blade root starts at x = handle_length. Poses are (x, y, z, roll, pitch, yaw)
of the wrist in a world frame whose table is the plane z = 0. Bending moves
blade points perpendicular to the tool axis, away from the table:

    Phi(x) = x + d * g(u) * e,   g(u) = u^2 (3L - u) / (2 L^3)

with u the distance past the blade root and d the tip deflection. Since the
displacement has no x component, Phi^-1(y) = y - d * g(u(y)) * e exactly.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from ..contact import contact_line_from_cloud
from ..geometry import (NormalizationTransform, PrimitiveShape, RoundedBox, dense_surface,
                        fit_normalization, sample_training_points)
from ..utils.error_handler import BoundsError, ConfigurationError
from .dataset import DEFAULT_ACTION_BOX, GeneratorConfig, ObjectRecord, Trajectory, Transition, seed_sequence
from .occlusion import CAMERA_DIRECTION, BottomFraction, apply_occlusion, front_facing

logger = logging.getLogger(__name__)

BASE_PITCH = 0.35
ROLL_LIMIT = 0.3
PITCH_LIMITS = (0.15, 0.7)
HANDLE_OVERLAP = 0.005
PROBE_POINTS = 4096
START_BOX = np.array([0.05, 0.12, 0.0, 0.15, 0.1])


@dataclass(frozen=True)
class PaddleSpec:
    """Paddle dimensions in metres and blade bending stiffness EI in N m^2"""
    object_id: str
    blade_length: float
    blade_width: float
    blade_thickness: float
    handle_length: float
    handle_width: float
    handle_thickness: float
    stiffness_ei: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != 'object_id' and not (np.isfinite(value) and value > 0):
                raise ConfigurationError(f"Paddle '{self.object_id}': {name} must be positive, got {value}")

    @property
    def tip_stiffness(self) -> float:
        """k = 3EI / L^3"""
        return 3.0 * self.stiffness_ei / self.blade_length ** 3

    @property
    def root_x(self) -> float:
        return self.handle_length

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PaddleSpec':
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


def beam_deflection(spec: PaddleSpec, tip_force: float, u: float) -> float:
    """Euler-Bernoulli cantilever under a tip load: F u^2 (3L - u) / (6 EI)"""
    length = spec.blade_length
    if not 0.0 <= u <= length:
        raise BoundsError(f"Arclength {u} outside the blade [0, {length}]")
    return tip_force * u * u * (3.0 * length - u) / (6.0 * spec.stiffness_ei)


def bending_profile(u: np.ndarray, length: float) -> np.ndarray:
    return u * u * (3.0 * length - u) / (2.0 * length ** 3)


def bending_slope(u: np.ndarray, length: float) -> np.ndarray:
    return 3.0 * u * (2.0 * length - u) / (2.0 * length ** 3)


def random_paddle_spec(object_id: str, rng: np.random.Generator, unseen: bool = False) -> PaddleSpec:
    """Training paddles share one aspect family; unseen ones get wider, shorter blades"""
    if unseen:
        length, width = rng.uniform(0.10, 0.12), rng.uniform(0.075, 0.09)
    else:
        length, width = rng.uniform(0.12, 0.16), rng.uniform(0.05, 0.07)
    tip_stiffness = rng.uniform(120.0, 200.0)
    return PaddleSpec(
        object_id=object_id,
        blade_length=float(length), blade_width=float(width),
        blade_thickness=float(rng.uniform(0.004, 0.006)),
        handle_length=float(rng.uniform(0.10, 0.13)),
        handle_width=float(rng.uniform(0.018, 0.024)),
        handle_thickness=float(rng.uniform(0.008, 0.012)),
        stiffness_ei=float(tip_stiffness * length ** 3 / 3.0),
    )


def paddle_primitives(spec: PaddleSpec) -> PrimitiveShape:
    """Handle and blade as rounded boxes in the tool frame (handle tucked slightly into the blade)"""
    handle_half = np.array([(spec.handle_length + HANDLE_OVERLAP) / 2.0, spec.handle_width / 2.0,
                            spec.handle_thickness / 2.0])
    blade_half = np.array([spec.blade_length / 2.0, spec.blade_width / 2.0, spec.blade_thickness / 2.0])
    handle = RoundedBox(np.array([handle_half[0], 0.0, 0.0]), handle_half, 0.4 * handle_half[2])
    blade = RoundedBox(np.array([spec.root_x + blade_half[0], 0.0, 0.0]), blade_half, 0.4 * blade_half[2])
    return PrimitiveShape((handle, blade))


def wrist_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """R = Rz(yaw) Ry(pitch) Rx(roll); positive pitch tips the tool axis down"""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def bending_direction(rotation: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Table normal in the tool frame and the unit bending direction perpendicular to the tool axis"""
    up = rotation[2, :].copy()
    e = up.copy()
    e[0] = 0.0
    length = np.linalg.norm(e)
    if length < 1e-9:
        return up, np.array([0.0, 0.0, 1.0])
    return up, e / length


@dataclass(frozen=True)
class BentPaddleShape:
    """Bent paddle in the normalized tool frame; implements the analytic shape protocol"""
    nominal: PrimitiveShape
    transform: NormalizationTransform
    root_x: float
    blade_length: float
    depth: float
    direction: np.ndarray

    def _arclength(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        tool_x = y[:, 0] / self.transform.scale + self.transform.center[0]
        raw = tool_x - self.root_x
        return np.clip(raw, 0.0, self.blade_length), (raw > 0.0) & (raw < self.blade_length)

    def displacement(self, y: np.ndarray) -> np.ndarray:
        """Phi(x) - x at x (equal to -(Phi^-1(y) - y) at y = Phi(x))"""
        y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
        u, _ = self._arclength(y)
        amount = self.transform.scale * self.depth * bending_profile(u, self.blade_length)
        return amount[:, None] * self.direction

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return x + self.displacement(x)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
        return y - self.displacement(y)

    def _bent_normals(self, x: np.ndarray, normals: np.ndarray) -> np.ndarray:
        u, interior = self._arclength(x)
        slope = np.where(interior, self.depth * bending_slope(u, self.blade_length), 0.0)
        bent = normals - (slope * (normals @ self.direction))[:, None] * np.array([1.0, 0.0, 0.0])
        return bent / np.linalg.norm(bent, axis=1, keepdims=True)

    def sdf_and_grad(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = self.inverse(y)
        sd, normals = self.nominal.sdf_and_grad(x)
        return sd, self._bent_normals(x, normals)

    def sdf(self, y: np.ndarray) -> np.ndarray:
        return self.sdf_and_grad(y)[0]

    def sample_surface(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        points, normals = self.nominal.sample_surface(count, rng)
        return self.forward(points), self._bent_normals(points, normals)


@dataclass(frozen=True)
class PaddleObject:
    spec: PaddleSpec
    shape: PrimitiveShape
    transform: NormalizationTransform
    nominal: PrimitiveShape
    probe: np.ndarray

    def bent(self, depth: float, direction: np.ndarray) -> BentPaddleShape:
        return BentPaddleShape(self.nominal, self.transform, self.spec.root_x, self.spec.blade_length,
                               float(depth), direction)

    def tool_deformed(self, points: np.ndarray, depth: float, direction: np.ndarray) -> np.ndarray:
        u = np.clip(points[:, 0] - self.spec.root_x, 0.0, self.spec.blade_length)
        return points + (depth * bending_profile(u, self.spec.blade_length))[:, None] * direction


def build_paddle_object(spec: PaddleSpec, scale_box: float = 2.0, seed: int = 0) -> PaddleObject:
    shape = paddle_primitives(spec)
    lo, hi = shape.bounds()
    transform = fit_normalization(np.stack([lo, hi]), scale_box)
    nominal = shape.normalized(transform)
    probe, _ = shape.sample_surface(PROBE_POINTS, np.random.default_rng(seed))
    return PaddleObject(spec, shape, transform, nominal, probe)


def solve_tip_deflection(obj: PaddleObject, rotation: np.ndarray, height: float,
                         max_ratio: float = 0.15, tol: float = 1e-12) -> Tuple[float, bool]:
    """Tip deflection that rests the bent paddle on the table; (d, clamped)"""
    up, e = bending_direction(rotation)
    base = obj.probe @ up + height
    lift = bending_profile(np.clip(obj.probe[:, 0] - obj.spec.root_x, 0.0, obj.spec.blade_length),
                           obj.spec.blade_length) * float(up @ e)
    def lowest(d: float) -> float:
        return float(np.min(base + d * lift))

    if lowest(0.0) >= 0.0:
        return 0.0, False
    d_max = max_ratio * obj.spec.blade_length
    if lowest(d_max) < 0.0:
        return d_max, True
    lo, hi = 0.0, d_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if lowest(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return hi, False


def resting_height(obj: PaddleObject, rotation: np.ndarray, depth: float) -> float:
    """Wrist height at which the paddle bent by `depth` (negative: clearance) just touches the table"""
    up, e = bending_direction(rotation)
    bent = obj.tool_deformed(obj.probe, max(depth, 0.0), e)
    return -float(np.min(bent @ up)) + max(-depth, 0.0)


def paddle_wrench(spec: PaddleSpec, depth: float, contact_point: np.ndarray, wrist_position: np.ndarray) -> np.ndarray:
    """Table reaction (0, 0, k d) and its moment about the wrist, world frame"""
    force = np.array([0.0, 0.0, spec.tip_stiffness * depth])
    torque = np.cross(np.asarray(contact_point, dtype=np.float64) - np.asarray(wrist_position, dtype=np.float64), force)
    return np.concatenate([force, torque])


def table_plane(obj: PaddleObject, rotation: np.ndarray, height: float) -> np.ndarray:
    """Table plane in the normalized tool frame"""
    up, _ = bending_direction(rotation)
    offset = obj.transform.scale * (float(up @ obj.transform.center) + height)
    return np.concatenate([up, [offset]])


def paddle_object_record(obj: PaddleObject, split: str, config: GeneratorConfig, seed) -> ObjectRecord:
    ss = seed_sequence(seed)
    cloud_seq, sample_seq = ss.spawn(2)
    cloud = dense_surface(obj.nominal, config.n_cloud, seed=cloud_seq)
    samples = sample_training_points(obj.nominal, config.n_surface, config.n_query, sample_seq,
                                     noise_std=config.sample_noise_std)
    lo, hi = obj.shape.bounds()
    spec = obj.spec.to_dict()
    spec['kind'] = 'paddle'
    return ObjectRecord(obj.spec.object_id, 'paddle', split, cloud, samples, obj.transform, spec,
                        length=float((hi - lo).max() * obj.transform.scale))


def _reflect(value: float, step: float, lo: float, hi: float) -> float:
    return -step if not lo <= value + step <= hi else step


def gen_paddle_trajectory(spec: Union[PaddleSpec, PaddleObject], seed, steps: int,
                          action_box: Sequence[float] = DEFAULT_ACTION_BOX,
                          config: Optional[GeneratorConfig] = None, trajectory_id: Optional[str] = None,
                          split: str = 'train', occlusion_ratio: float = 0.0,
                          start_depth: Optional[float] = None, keep_contact: bool = True) -> Trajectory:
    """Random-action paddle trajectory; the tool is kept on the table unless keep_contact is off.

    start_depth is the initial tip deflection in metres (negative: clearance above
    the table); by default it is drawn from [0.2, 0.7] of the admissible range.
    """
    if steps < 2:
        raise ConfigurationError(f"A trajectory needs at least 2 steps, got {steps}")
    config = config or GeneratorConfig()
    obj = spec if isinstance(spec, PaddleObject) else build_paddle_object(spec, config.scale_box)
    paddle = obj.spec
    box = np.asarray(action_box, dtype=np.float64).reshape(5)
    d_max = config.max_deflection_ratio * paddle.blade_length

    motion_seq, noise_seq, *step_seqs = seed_sequence(seed).spawn(steps + 2)
    rng = np.random.default_rng(motion_seq)
    noise_rng = np.random.default_rng(noise_seq)

    start = rng.uniform(-START_BOX, START_BOX)
    roll, pitch = float(start[3]), float(BASE_PITCH + start[4])
    if start_depth is None:
        start_depth = float(rng.uniform(0.2, 0.7) * d_max)
    rotation = wrist_rotation(roll, pitch, 0.0)
    pose = np.array([start[0], start[1], resting_height(obj, rotation, start_depth), roll, pitch, 0.0])

    transitions = []
    clamped_frames = 0
    for step in range(steps):
        rotation = wrist_rotation(*pose[3:])
        depth, clamped = solve_tip_deflection(obj, rotation, pose[2], config.max_deflection_ratio)
        clamped_frames += int(clamped)
        up, e = bending_direction(rotation)

        wrench = np.zeros(6)
        if depth > 0.0:
            bent_tool = obj.tool_deformed(obj.probe, depth, e)
            heights = bent_tool @ up + pose[2]
            touching = bent_tool[heights <= heights.min() + config.contact_eps / obj.transform.scale]
            contact_world = touching.mean(axis=0) @ rotation.T + pose[:3]
            wrench = paddle_wrench(paddle, depth, contact_world, pose[:3])
        if config.wrench_noise > 0:
            wrench = wrench + noise_rng.normal(0.0, config.wrench_noise, size=6)

        bent = obj.bent(depth, e)
        cloud_seq, sample_seq, view_seq = step_seqs[step].spawn(3)
        full = dense_surface(bent, config.n_cloud, seed=cloud_seq)
        samples = sample_training_points(bent, config.n_surface, config.n_query, sample_seq,
                                         noise_std=config.sample_noise_std)
        observed = front_facing(full, rotation.T @ CAMERA_DIRECTION)
        if occlusion_ratio > 0:
            observed = apply_occlusion(observed, BottomFraction(occlusion_ratio, up))
        plane = table_plane(obj, rotation, pose[2])
        line = contact_line_from_cloud(full.points, plane, config.contact_eps) if depth > 0.0 else None

        action = np.zeros(6)
        action[:5] = rng.uniform(-box, box)
        action[3] = _reflect(pose[3], action[3], -ROLL_LIMIT, ROLL_LIMIT)
        action[4] = _reflect(pose[4], action[4], *PITCH_LIMITS)
        if keep_contact:
            action[2] = _keep_contact(obj, pose, action, config.max_deflection_ratio)

        transitions.append(Transition(
            pose=pose.copy(), wrench=wrench, observed=observed, action=action, full_cloud=full,
            samples=samples, deformation=-bent.displacement(samples.queries),
            contact_line=None if line is None else line.endpoints, plane=plane, depth=depth,
        ))
        pose = pose + action

    if clamped_frames:
        logger.warning(f"Paddle '{paddle.object_id}': tip deflection clamped in {clamped_frames} frame(s)")
    identifier = trajectory_id or f"{paddle.object_id}-traj"
    logger.debug(f"Generated paddle trajectory {identifier} with {steps} steps")
    return Trajectory(identifier, paddle.object_id, split, transitions)


def _keep_contact(obj: PaddleObject, pose: np.ndarray, action: np.ndarray, max_ratio: float) -> float:
    """Flip the vertical step when it would lift off or over-bend"""
    dz = float(action[2])
    nxt = pose + action
    depth, clamped = solve_tip_deflection(obj, wrist_rotation(*nxt[3:]), nxt[2], max_ratio)
    if depth == 0.0:
        return -abs(dz)
    if clamped:
        return abs(dz)
    return dz
