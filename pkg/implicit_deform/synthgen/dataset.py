"""
Dataset containers, generator configuration and the on-disk dataset format.

Layout on disk:
    <dir>/manifest.json            human-readable index with checksums
    <dir>/objects/<id>.bin         nominal cloud and nominal SDF samples
    <dir>/trajectories/<id>.bin    every transition of one trajectory

Blobs: magic, u32 version, u32 array count, then per array
u16 name length, name, u8 ndim, u64 dims, little-endian float64 data.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..geometry import NormalizationTransform, PointCloud, SdfSampleSet
from ..utils.artifacts import atomic_directory, canonical_json, sha256_bytes
from ..utils.error_handler import ArtifactIOError, ConfigurationError, DataError, FormatError

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
BLOB_MAGIC = b'IDBLOB01'
_BLOB_HEADER = struct.Struct('<8sII')
OBJECT_SPLITS = ('train', 'unseen')
TRAJECTORY_SPLITS = ('train', 'test', 'unseen')
DEFAULT_ACTION_BOX = (0.02, 0.02, 0.01, 0.05, 0.04)


def seed_sequence(seed) -> np.random.SeedSequence:
    """Fresh SeedSequence for an int seed or a copy of a spawned child"""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(int(seed))


@dataclass(frozen=True)
class ChainGeneratorConfig:
    length: float = 0.75
    tube_radius: float = 0.008
    weight_per_length: float = 2.0
    fixed_end: Tuple[float, float, float] = (0.0, 0.0, 0.4)
    grip_box_center: Tuple[float, float, float] = (0.35, 0.0, 0.25)
    grip_box_size: Tuple[float, float, float] = (0.1, 0.18, 0.2)
    grid_vertices: int = 6
    curve_points: int = 200


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic dataset settings (desk-scale defaults)"""
    object_type: str = 'paddle'
    n_train_objects: int = 4
    n_unseen_objects: int = 2
    trajectories_per_object: int = 8
    test_trajectories_per_object: int = 1
    unseen_trajectories_per_object: int = 2
    steps: int = 12
    n_surface: int = 512
    n_query: int = 2048
    n_cloud: int = 1024
    scale_box: float = 2.0
    sample_noise_std: float = 0.05
    occlusion_ratio: float = 0.15
    wrench_noise: float = 0.0
    contact_eps: float = 0.01
    action_box: Tuple[float, ...] = DEFAULT_ACTION_BOX
    max_deflection_ratio: float = 0.15
    workers: int = 4
    chain: ChainGeneratorConfig = field(default_factory=ChainGeneratorConfig)

    def __post_init__(self):
        if self.object_type not in ('paddle', 'chain'):
            raise ConfigurationError(f"Unknown object type '{self.object_type}'")
        if self.steps < 2:
            raise ConfigurationError(f"Trajectories need at least 2 steps, got {self.steps}")
        if not 0 <= self.occlusion_ratio < 1:
            raise ConfigurationError(f"Occlusion ratio must be in [0, 1), got {self.occlusion_ratio}")
        if self.test_trajectories_per_object > self.trajectories_per_object:
            raise ConfigurationError("More test trajectories than trajectories per object")
        if len(self.action_box) != 5:
            raise ConfigurationError("action_box holds (x, y, z, roll, pitch) half-ranges")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GeneratorConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if isinstance(known.get('chain'), dict):
            chain = known['chain']
            known['chain'] = ChainGeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v
                                                     for k, v in chain.items()
                                                     if k in ChainGeneratorConfig.__dataclass_fields__})
        if 'action_box' in known:
            known['action_box'] = tuple(known['action_box'])
        return cls(**known)

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(canonical_json(asdict(self)))


@dataclass
class ObjectRecord:
    """One object's nominal geometry in its normalized frame"""
    object_id: str
    kind: str
    split: str
    nominal_cloud: PointCloud
    samples: SdfSampleSet
    transform: NormalizationTransform
    spec: Dict[str, Any]
    length: float

    def __post_init__(self):
        if self.split not in OBJECT_SPLITS:
            raise DataError(f"Object '{self.object_id}' has unknown split '{self.split}'")


@dataclass
class Transition:
    """(p_t, f_t, P_t, a_t) plus synthetic ground truth"""
    pose: np.ndarray
    wrench: np.ndarray
    observed: Optional[PointCloud]
    action: np.ndarray
    full_cloud: PointCloud
    samples: SdfSampleSet
    deformation: np.ndarray
    contact_line: Optional[np.ndarray]
    plane: np.ndarray
    depth: float = 0.0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(6)
        self.wrench = np.asarray(self.wrench, dtype=np.float64).reshape(6)
        self.action = np.asarray(self.action, dtype=np.float64).reshape(6)
        self.deformation = np.asarray(self.deformation, dtype=np.float64).reshape(-1, 3)
        self.plane = np.asarray(self.plane, dtype=np.float64).reshape(4)
        if self.contact_line is not None:
            self.contact_line = np.asarray(self.contact_line, dtype=np.float64).reshape(2, 3)
        if self.deformation.shape[0] != len(self.samples):
            raise DataError("Ground-truth deformation must have one row per sample query")

    @property
    def in_contact(self) -> bool:
        return self.depth > 0.0


@dataclass
class Trajectory:
    trajectory_id: str
    object_id: str
    split: str
    transitions: List[Transition]

    def __post_init__(self):
        if self.split not in TRAJECTORY_SPLITS:
            raise DataError(f"Trajectory '{self.trajectory_id}' has unknown split '{self.split}'")

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass
class Dataset:
    objects: Dict[str, ObjectRecord] = field(default_factory=dict)
    trajectories: List[Trajectory] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        seen = set()
        for trajectory in self.trajectories:
            if trajectory.object_id not in self.objects:
                raise DataError(f"Trajectory '{trajectory.trajectory_id}' references unknown object "
                                f"'{trajectory.object_id}'")
            if trajectory.trajectory_id in seen:
                raise DataError(f"Duplicate trajectory id '{trajectory.trajectory_id}'")
            seen.add(trajectory.trajectory_id)
            object_split = self.objects[trajectory.object_id].split
            if (object_split == 'unseen') != (trajectory.split == 'unseen'):
                raise DataError(f"Trajectory '{trajectory.trajectory_id}' split '{trajectory.split}' "
                                f"conflicts with its object's split '{object_split}'")

    def objects_in(self, split: str) -> List[ObjectRecord]:
        return [self.objects[k] for k in sorted(self.objects) if self.objects[k].split == split]

    def trajectories_in(self, split: str, object_id: Optional[str] = None) -> List[Trajectory]:
        return [t for t in self.trajectories
                if t.split == split and (object_id is None or t.object_id == object_id)]

    def trajectory(self, trajectory_id: str) -> Trajectory:
        for trajectory in self.trajectories:
            if trajectory.trajectory_id == trajectory_id:
                return trajectory
        raise ConfigurationError(f"Unknown trajectory id '{trajectory_id}'")


# ---------------------------------------------------------------------------
# Blob encoding
# ---------------------------------------------------------------------------

def encode_blob(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [_BLOB_HEADER.pack(BLOB_MAGIC, DATASET_VERSION, len(arrays))]
    for name, array in arrays.items():
        array = np.asarray(array, dtype=np.float64)
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack('<B', array.ndim) + struct.pack(f'<{array.ndim}Q', *array.shape))
        parts.append(array.astype('<f8').tobytes())
    return b''.join(parts)


def decode_blob(payload: bytes, source: str = '<bytes>') -> Dict[str, np.ndarray]:
    def need(offset: int, size: int, what: str):
        if offset + size > len(payload):
            raise FormatError(f"Truncated blob while reading {what}", location=f"{source}:{offset}")

    need(0, _BLOB_HEADER.size, 'header')
    magic, version, count = _BLOB_HEADER.unpack_from(payload, 0)
    if magic != BLOB_MAGIC:
        raise FormatError("Bad blob magic", location=f"{source}:0")
    if version != DATASET_VERSION:
        raise FormatError(f"Unsupported blob version {version}", location=f"{source}:8")
    offset = _BLOB_HEADER.size
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        need(offset, 2, 'name length')
        (name_len,) = struct.unpack_from('<H', payload, offset)
        offset += 2
        need(offset, name_len, 'name')
        try:
            name = payload[offset:offset + name_len].decode('utf-8')
        except UnicodeDecodeError as exc:
            raise FormatError("Array name is not UTF-8", location=f"{source}:{offset}") from exc
        offset += name_len
        need(offset, 1, f"'{name}' rank")
        (ndim,) = struct.unpack_from('<B', payload, offset)
        offset += 1
        need(offset, 8 * ndim, f"'{name}' shape")
        shape = struct.unpack_from(f'<{ndim}Q', payload, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) * 8
        need(offset, size, f"'{name}' data")
        arrays[name] = np.frombuffer(payload, dtype='<f8', count=size // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += size
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after last array", location=f"{source}:{offset}")
    return arrays


def _cloud_arrays(prefix: str, cloud: Optional[PointCloud]) -> Dict[str, np.ndarray]:
    if cloud is None:
        return {f"{prefix}.points": np.zeros((0, 3))}
    arrays = {f"{prefix}.points": cloud.points}
    if cloud.normals is not None:
        arrays[f"{prefix}.normals"] = cloud.normals
    return arrays


def _cloud_from(arrays: Dict[str, np.ndarray], prefix: str) -> Optional[PointCloud]:
    points = arrays[f"{prefix}.points"]
    if points.shape[0] == 0:
        return None
    return PointCloud(points, arrays.get(f"{prefix}.normals"))


def _samples_arrays(prefix: str, samples: SdfSampleSet) -> Dict[str, np.ndarray]:
    return {f"{prefix}.queries": samples.queries, f"{prefix}.target_sd": samples.target_sd,
            f"{prefix}.surface_mask": samples.surface_mask.astype(np.float64),
            f"{prefix}.target_normals": samples.target_normals}


def _samples_from(arrays: Dict[str, np.ndarray], prefix: str) -> SdfSampleSet:
    return SdfSampleSet(arrays[f"{prefix}.queries"], arrays[f"{prefix}.target_sd"],
                        arrays[f"{prefix}.surface_mask"] > 0.5, arrays[f"{prefix}.target_normals"])


def object_arrays(record: ObjectRecord) -> Dict[str, np.ndarray]:
    arrays = _cloud_arrays('nominal', record.nominal_cloud)
    arrays.update(_samples_arrays('samples', record.samples))
    return arrays


def trajectory_arrays(trajectory: Trajectory) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for i, tr in enumerate(trajectory.transitions):
        p = f"t{i:04d}"
        arrays.update({f"{p}.pose": tr.pose, f"{p}.wrench": tr.wrench, f"{p}.action": tr.action,
                       f"{p}.deformation": tr.deformation, f"{p}.plane": tr.plane,
                       f"{p}.depth": np.array([tr.depth]),
                       f"{p}.contact_line": tr.contact_line if tr.contact_line is not None else np.zeros((0, 3))})
        arrays.update(_cloud_arrays(f"{p}.observed", tr.observed))
        arrays.update(_cloud_arrays(f"{p}.full", tr.full_cloud))
        arrays.update(_samples_arrays(f"{p}.samples", tr.samples))
    return arrays


def _transition_from(arrays: Dict[str, np.ndarray], i: int) -> Transition:
    p = f"t{i:04d}"
    line = arrays[f"{p}.contact_line"]
    return Transition(
        pose=arrays[f"{p}.pose"], wrench=arrays[f"{p}.wrench"],
        observed=_cloud_from(arrays, f"{p}.observed"), action=arrays[f"{p}.action"],
        full_cloud=_cloud_from(arrays, f"{p}.full"), samples=_samples_from(arrays, f"{p}.samples"),
        deformation=arrays[f"{p}.deformation"], contact_line=line if line.shape[0] else None,
        plane=arrays[f"{p}.plane"], depth=float(arrays[f"{p}.depth"][0]),
    )


# ---------------------------------------------------------------------------
# Dataset IO
# ---------------------------------------------------------------------------

def write_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Assemble the directory under a temp name and rename it into place"""
    path = Path(path)
    manifest: Dict[str, Any] = {'format_version': DATASET_VERSION, 'seed': dataset.seed,
                                'config': dataset.config, 'objects': [], 'trajectories': []}
    with atomic_directory(path) as staging:
        (staging / 'objects').mkdir()
        (staging / 'trajectories').mkdir()
        for object_id in sorted(dataset.objects):
            record = dataset.objects[object_id]
            payload = encode_blob(object_arrays(record))
            relative = f"objects/{object_id}.bin"
            (staging / relative).write_bytes(payload)
            manifest['objects'].append({
                'id': object_id, 'kind': record.kind, 'split': record.split, 'spec': record.spec,
                'transform': record.transform.to_dict(), 'length': record.length,
                'file': relative, 'sha256': sha256_bytes(payload),
            })
        for trajectory in dataset.trajectories:
            payload = encode_blob(trajectory_arrays(trajectory))
            relative = f"trajectories/{trajectory.trajectory_id}.bin"
            (staging / relative).write_bytes(payload)
            manifest['trajectories'].append({
                'id': trajectory.trajectory_id, 'object': trajectory.object_id, 'split': trajectory.split,
                'steps': len(trajectory), 'file': relative, 'sha256': sha256_bytes(payload),
            })
        (staging / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    logger.info(f"Wrote dataset with {len(dataset.objects)} objects and "
                f"{len(dataset.trajectories)} trajectories to {path}")
    return path


def _field(container: Any, key: str, location: str, kind: type = object) -> Any:
    """Manifest lookup that reports a missing or mistyped key as a FormatError"""
    if not isinstance(container, dict) or key not in container:
        raise FormatError(f"Manifest is missing '{key}'", location=f"{location}:{key}")
    value = container[key]
    if kind is not object and not isinstance(value, kind):
        raise FormatError(f"Manifest field '{key}' has type {type(value).__name__}", location=f"{location}:{key}")
    return value


def _blob_part(reader: Callable, arrays: Dict[str, np.ndarray], key: Any, location: str):
    try:
        return reader(arrays, key)
    except KeyError as exc:
        raise FormatError(f"Blob is missing array {exc}", location=location) from exc


def _read_blob(root: Path, entry: Dict[str, Any], location: str) -> Dict[str, np.ndarray]:
    blob_path = root / _field(entry, 'file', location, str)
    try:
        payload = blob_path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"Cannot read {blob_path}: {exc}") from exc
    if sha256_bytes(payload) != entry.get('sha256'):
        raise FormatError("Checksum mismatch", location=f"{blob_path}:0")
    return decode_blob(payload, source=str(blob_path))


def read_dataset(path: Union[str, Path]) -> Dataset:
    root = Path(path)
    manifest_path = root / 'manifest.json'
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise ArtifactIOError(f"Cannot read dataset manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"Manifest is not valid JSON: {exc.msg}", location=f"{manifest_path}:{exc.pos}") from exc
    if not isinstance(manifest, dict):
        raise FormatError("Manifest is not a JSON object", location=f"{manifest_path}:0")
    if manifest.get('format_version') != DATASET_VERSION:
        raise FormatError(f"Unsupported dataset version {manifest.get('format_version')}",
                          location=f"{manifest_path}:format_version")

    objects: Dict[str, ObjectRecord] = {}
    for i, entry in enumerate(_field(manifest, 'objects', str(manifest_path), list)):
        where = f"{manifest_path}:objects[{i}]"
        arrays = _read_blob(root, entry, where)
        try:
            transform = NormalizationTransform.from_dict(_field(entry, 'transform', where, dict))
            length = float(_field(entry, 'length', where))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"Malformed object entry: {exc}", location=where) from exc
        object_id = _field(entry, 'id', where, str)
        objects[object_id] = ObjectRecord(
            object_id=object_id, kind=_field(entry, 'kind', where, str), split=_field(entry, 'split', where, str),
            nominal_cloud=_blob_part(_cloud_from, arrays, 'nominal', where),
            samples=_blob_part(_samples_from, arrays, 'samples', where),
            transform=transform, spec=_field(entry, 'spec', where, dict), length=length,
        )
    trajectories = []
    for i, entry in enumerate(_field(manifest, 'trajectories', str(manifest_path), list)):
        where = f"{manifest_path}:trajectories[{i}]"
        arrays = _read_blob(root, entry, where)
        steps = _field(entry, 'steps', where, int)
        transitions = [_blob_part(_transition_from, arrays, t, where) for t in range(steps)]
        trajectories.append(Trajectory(_field(entry, 'id', where, str), _field(entry, 'object', where, str),
                                       _field(entry, 'split', where, str), transitions))
    logger.info(f"Loaded dataset from {root}: {len(objects)} objects, {len(trajectories)} trajectories")
    return Dataset(objects, trajectories, manifest.get('config', {}), int(manifest.get('seed', 0)))


def structurally_equal(a: Dataset, b: Dataset) -> bool:
    """Same ids, splits, metadata and bit-identical arrays"""
    if sorted(a.objects) != sorted(b.objects) or len(a.trajectories) != len(b.trajectories):
        return False
    if canonical_json(a.config) != canonical_json(b.config) or a.seed != b.seed:
        return False
    for object_id in a.objects:
        ra, rb = a.objects[object_id], b.objects[object_id]
        meta_a = (ra.kind, ra.split, canonical_json(ra.spec), canonical_json(ra.transform.to_dict()), ra.length)
        meta_b = (rb.kind, rb.split, canonical_json(rb.spec), canonical_json(rb.transform.to_dict()), rb.length)
        if meta_a != meta_b or not _arrays_equal(object_arrays(ra), object_arrays(rb)):
            return False
    for ta, tb in zip(a.trajectories, b.trajectories):
        if (ta.trajectory_id, ta.object_id, ta.split) != (tb.trajectory_id, tb.object_id, tb.split):
            return False
        if not _arrays_equal(trajectory_arrays(ta), trajectory_arrays(tb)):
            return False
    return True


def _arrays_equal(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(
        np.asarray(a[k]).shape == np.asarray(b[k]).shape and np.array_equal(a[k], b[k]) for k in a)
