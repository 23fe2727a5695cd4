"""
Atomic artifact writers and configuration fingerprints.
Nothing is ever left half-written: files go through a temp name and os.replace.
"""

import hashlib
import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Optional, Union

import pandas as pd

from .error_handler import ArtifactIOError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Fields that distinguish variants of one experiment; excluded from the experiment hash
VARIANT_KEYS = (('train', 'ablation'), ('filter', 'beta'), ('filter', 'particles'))


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form"""
    return hashlib.sha256(canonical_json(config).encode('utf-8')).hexdigest()


def experiment_hash(config: Dict[str, Any]) -> str:
    """Hash of the config with variant fields removed, used to merge ablation/beta runs"""
    stripped = json.loads(canonical_json(config))
    for section, key in VARIANT_KEYS:
        if isinstance(stripped.get(section), dict):
            stripped[section].pop(key, None)
    return config_hash(stripped)


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', suffix='.tmp', dir=path.parent)
        try:
            with os.fdopen(fd, 'wb') as handle:
                handle.write(payload)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
    except OSError as e:
        raise ArtifactIOError(f"Could not write {path}: {e}") from e
    logger.debug(f"Wrote {len(payload):,} bytes to {path}")
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def atomic_write_json(path: PathLike, data: Any) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, default=str) + '\n')


def atomic_write_csv(path: PathLike, frame: pd.DataFrame, config_digest: Optional[str] = None,
                     seed: Optional[int] = None) -> Path:
    """Write a metrics table; every row carries the config hash and seed"""
    frame = frame.copy()
    if config_digest is not None:
        frame['config_hash'] = config_digest
    if seed is not None:
        frame['seed'] = seed
    return atomic_write_text(path, frame.to_csv(index=False))


def read_csv(path: PathLike) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.EmptyDataError) as e:
        raise ArtifactIOError(f"Could not read {path}: {e}") from e


def read_json(path: PathLike) -> Any:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            return json.load(handle)
    except OSError as e:
        raise ArtifactIOError(f"Could not read {path}: {e}") from e


@contextmanager
def atomic_directory(path: PathLike):
    """Build a directory under a temp name; rename into place only on success"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f'.{path.name}.', dir=path.parent))
    except OSError as e:
        raise ArtifactIOError(f"Could not create staging directory for {path}: {e}") from e
    try:
        yield staging
        if path.exists():
            shutil.rmtree(path)
        os.replace(staging, path)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
