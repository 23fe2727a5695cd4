"""
Run configuration loading: JSON defaults + user file + flag overrides,
validated against config_schema.json before any work starts.
"""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import jsonschema

from .error_handler import ConfigurationError

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parents[2]
DEFAULT_CONFIG_PATH = REPO_ROOT / 'config.json'
DEFAULT_SCHEMA_PATH = REPO_ROOT / 'config_schema.json'


def _read_json(path: Path, what: str) -> Dict[str, Any]:
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"{what} not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} {path} is not valid JSON: {exc}") from exc


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively overlay `override` on a copy of `base`"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_config(config: Dict[str, Any], schema_path: Union[str, Path] = DEFAULT_SCHEMA_PATH):
    schema = _read_json(Path(schema_path), "Config schema")
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        details = "; ".join(
            f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors[:10]
        )
        raise ConfigurationError(f"Configuration failed schema validation ({len(errors)} errors): {details}")
    logger.debug("Configuration validated against schema successfully")


def parse_override(assignment: str) -> Dict[str, Any]:
    """'train.lr=0.001' -> {'train': {'lr': 0.001}}; values parsed as JSON when possible"""
    if '=' not in assignment:
        raise ConfigurationError(f"Override '{assignment}' must look like section.key=value")
    dotted, raw = assignment.split('=', 1)
    keys = [k for k in dotted.strip().split('.') if k]
    if not keys:
        raise ConfigurationError(f"Override '{assignment}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: Dict[str, Any] = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        nested = {key: nested}
    return nested


def load_config(config_path: Optional[Union[str, Path]] = None,
                overrides: Optional[Iterable[str]] = None,
                seed: Optional[int] = None,
                ablation: Optional[str] = None,
                beta: Optional[float] = None,
                particles: Optional[int] = None,
                schema_path: Union[str, Path] = DEFAULT_SCHEMA_PATH) -> Dict[str, Any]:
    """Defaults, then the user file, then --set overrides, then dedicated flags"""
    config = _read_json(DEFAULT_CONFIG_PATH, "Default config")
    if config_path is not None:
        config = deep_merge(config, _read_json(Path(config_path), "Config file"))
        logger.info(f"Loaded configuration from {config_path}")

    for assignment in overrides or ():
        config = deep_merge(config, parse_override(assignment))

    flag_values = {
        ('seed',): seed,
        ('train', 'ablation'): ablation,
        ('filter', 'beta'): beta,
        ('filter', 'particles'): particles,
    }
    for keys, value in flag_values.items():
        if value is None:
            continue
        target = config
        for key in keys[:-1]:
            target = target.setdefault(key, {})
        target[keys[-1]] = value

    validate_config(config, schema_path)
    return config
