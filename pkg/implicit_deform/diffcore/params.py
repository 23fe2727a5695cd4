"""
Flat parameter vectors, seeded initialisation and the binary checkpoint format.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.artifacts import atomic_write_bytes, sha256_bytes
from ..utils.error_handler import ArtifactIOError, ConfigurationError, FormatError, NumericError
from .tape import fingerprint_array

logger = logging.getLogger(__name__)

Layout = List[Tuple[str, Tuple[int, ...]]]

CHECKPOINT_MAGIC = b'IDPARAMS'
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct('<8sIQ')


def _normalize_layout(layout: Sequence[Tuple[str, Sequence[int]]]) -> Layout:
    normalized = []
    seen = set()
    for name, shape in layout:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ConfigurationError(f"Layout entry '{name}' has non-positive dimension {shape}")
        if name in seen:
            raise ConfigurationError(f"Duplicate layout entry '{name}'")
        seen.add(name)
        normalized.append((str(name), shape))
    return normalized


def layout_size(layout: Sequence[Tuple[str, Sequence[int]]]) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in layout))


class ParamVector:
    """Flat float64 values plus an ordered (name, shape) layout"""

    def __init__(self, values: np.ndarray, layout: Sequence[Tuple[str, Sequence[int]]], check_finite: bool = True):
        self.layout = _normalize_layout(layout)
        values = np.array(values, dtype=np.float64).reshape(-1)
        expected = layout_size(self.layout)
        if values.size != expected:
            raise ConfigurationError(f"Parameter vector has {values.size} values, layout expects {expected}")
        if check_finite and not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise NumericError("Non-finite parameter value", parameter=self.parameter_at(bad))
        self.values = values
        self.offsets: Dict[str, Tuple[int, int, Tuple[int, ...]]] = {}
        start = 0
        for name, shape in self.layout:
            stop = start + int(np.prod(shape))
            self.offsets[name] = (start, stop, shape)
            start = stop

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"ParamVector({len(self.layout)} entries, {self.values.size} values)"

    @classmethod
    def zeros(cls, layout: Sequence[Tuple[str, Sequence[int]]]) -> 'ParamVector':
        return cls(np.zeros(layout_size(layout)), layout)

    @classmethod
    def concatenate(cls, parts: Sequence['ParamVector']) -> 'ParamVector':
        layout = [entry for part in parts for entry in part.layout]
        return cls(np.concatenate([p.values for p in parts]) if parts else np.zeros(0), layout)

    def view(self, name: str) -> np.ndarray:
        start, stop, shape = self.offsets[name]
        return self.values[start:stop].reshape(shape)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {name: self.view(name).copy() for name, _ in self.layout}

    def replace(self, values: np.ndarray) -> 'ParamVector':
        return ParamVector(values, self.layout)

    def copy(self) -> 'ParamVector':
        return ParamVector(self.values.copy(), self.layout)

    def fingerprint(self) -> str:
        return fingerprint_array(self.values)

    def parameter_at(self, index: int) -> str:
        start = 0
        for name, shape in self.layout:
            stop = start + int(np.prod(shape))
            if start <= index < stop:
                return name
            start = stop
        return f"index {index}"

    def subset(self, names: Sequence[str]) -> 'ParamVector':
        names = list(names)
        return ParamVector(np.concatenate([self.view(n).reshape(-1) for n in names]),
                           [(n, self.offsets[n][2]) for n in names])


def dense_layout(in_dim: int, layer_spec: Sequence[Tuple[int, Optional[str]]], prefix: str = '') -> Layout:
    """Weight (out, in) and bias (out,) entries for each dense layer"""
    if in_dim <= 0:
        raise ConfigurationError(f"Input dimension must be positive, got {in_dim}")
    layout: Layout = []
    fan_in = int(in_dim)
    for i, (width, _activation) in enumerate(layer_spec):
        if int(width) <= 0:
            raise ConfigurationError(f"Layer {i} width must be positive, got {width}")
        layout.append((f"{prefix}layer{i}.weight", (int(width), fan_in)))
        layout.append((f"{prefix}layer{i}.bias", (int(width),)))
        fan_in = int(width)
    return layout


def seeded_init(layout: Sequence[Tuple[str, Sequence[int]]], seed: int, scheme: str = 'kaiming-uniform',
                sigma: float = 0.0) -> ParamVector:
    """Reproducible initial values.

    kaiming-uniform: weights ~ U(±sqrt(6/fan_in)), biases ~ U(±1/sqrt(fan_in)) where
    a bias takes the fan-in of the weight preceding it.
    gaussian: every value ~ N(0, sigma).
    """
    layout = _normalize_layout(layout)
    rng = np.random.default_rng(seed)
    chunks = []
    if scheme == 'gaussian':
        if sigma < 0:
            raise ConfigurationError(f"Gaussian init requires sigma >= 0, got {sigma}")
        for _, shape in layout:
            size = int(np.prod(shape))
            chunks.append(rng.normal(0.0, sigma, size) if sigma > 0 else np.zeros(size))
    elif scheme == 'kaiming-uniform':
        last_fan_in = None
        for name, shape in layout:
            size = int(np.prod(shape))
            if name.endswith('.bias') and last_fan_in is not None:
                bound = 1.0 / np.sqrt(last_fan_in)
            else:
                fan_in = shape[-1]
                last_fan_in = fan_in
                bound = np.sqrt(6.0 / fan_in)
            chunks.append(rng.uniform(-bound, bound, size))
    else:
        raise ConfigurationError(f"Unknown init scheme '{scheme}'")
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values, layout)


# ---------------------------------------------------------------------------
# Checkpoint file: header | JSON manifest | little-endian float64 blob
# ---------------------------------------------------------------------------

def encode_params(groups: Dict[str, ParamVector], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    manifest: Dict[str, Any] = {'version': CHECKPOINT_VERSION, 'metadata': metadata or {}, 'groups': {}}
    blobs = []
    offset = 0
    for group_name, params in groups.items():
        entries = []
        for name, shape in params.layout:
            entries.append({'name': name, 'shape': list(shape), 'offset': offset})
            offset += int(np.prod(shape))
        manifest['groups'][group_name] = entries
        blobs.append(params.values.astype('<f8').tobytes())
    blob = b''.join(blobs)
    manifest['count'] = offset
    manifest['blob_sha256'] = sha256_bytes(blob)
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode('utf-8')
    return _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest_bytes)) + manifest_bytes + blob


def decode_params(payload: bytes, source: str = '<bytes>') -> Tuple[Dict[str, ParamVector], Dict[str, Any]]:
    if len(payload) < _HEADER.size:
        raise FormatError("Checkpoint shorter than its header", location=f"{source}:0")
    magic, version, manifest_len = _HEADER.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError("Bad checkpoint magic", location=f"{source}:0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", location=f"{source}:8")
    start = _HEADER.size
    if len(payload) < start + manifest_len:
        raise FormatError("Truncated checkpoint manifest", location=f"{source}:{start}")
    try:
        manifest = json.loads(payload[start:start + manifest_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"Unreadable checkpoint manifest: {exc}", location=f"{source}:{start}") from exc

    blob_start = start + manifest_len
    blob = payload[blob_start:]
    count = int(manifest.get('count', 0))
    if len(blob) != count * 8:
        raise FormatError(f"Checkpoint blob has {len(blob)} bytes, expected {count * 8}",
                          location=f"{source}:{blob_start}")
    if sha256_bytes(blob) != manifest.get('blob_sha256'):
        raise FormatError("Checkpoint blob checksum mismatch", location=f"{source}:{blob_start}")

    flat = np.frombuffer(blob, dtype='<f8').astype(np.float64)
    groups: Dict[str, ParamVector] = {}
    for group_name, entries in manifest['groups'].items():
        layout = [(e['name'], tuple(e['shape'])) for e in entries]
        if entries:
            first = entries[0]['offset']
            values = flat[first:first + layout_size(layout)].copy()
        else:
            values = np.zeros(0)
        groups[group_name] = ParamVector(values, layout)
    return groups, manifest.get('metadata', {})


def save_params(path: Union[str, Path], groups: Dict[str, ParamVector],
                metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = atomic_write_bytes(path, encode_params(groups, metadata))
    logger.debug(f"Saved {sum(len(g) for g in groups.values())} parameters in {len(groups)} groups to {path}")
    return path


def load_params(path: Union[str, Path]) -> Tuple[Dict[str, ParamVector], Dict[str, Any]]:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"Cannot read checkpoint {path}: {exc}") from exc
    return decode_params(payload, source=str(path))
