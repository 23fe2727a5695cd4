"""
Error types and logging setup for the implicit deformation pipeline.
Every expected failure maps to a distinct CLI exit code.
"""

import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

LOG_LEVEL_ENV = "IMPLICIT_DEFORM_LOG_LEVEL"
VALID_LOG_LEVELS = {'DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'}


class ImplicitDeformError(Exception):
    """Base class for all expected pipeline failures"""
    exit_code = 1


class ConfigurationError(ImplicitDeformError):
    """Invalid configuration, layout/shape mismatch or unknown ids"""
    exit_code = EXIT_CONFIG


class DataError(ImplicitDeformError):
    """Input data is missing, empty or inconsistent"""
    exit_code = EXIT_DATA


class FormatError(DataError):
    """On-disk artifact is corrupted, truncated or has the wrong version"""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{message} (at {location})" if location else message)


class DegeneracyError(DataError):
    """Geometry collapsed: zero extent, everything masked out"""


class BoundsError(DataError):
    """Index/horizon exceeds the available data"""


class GenerationError(DataError):
    """Synthetic generator was asked for an infeasible configuration"""


class NumericError(ImplicitDeformError):
    """Non-finite values encountered"""
    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(f"{message} [parameter: {parameter}]" if parameter else message)


class InvalidTapeError(NumericError):
    """Tape replayed/back-propagated after its parameters were mutated"""


class ReconstructionError(NumericError):
    """Level set is empty at the requested resolution"""


class TrainingDivergedError(NumericError):
    """Loss became non-finite; carries the last good state for recovery"""

    def __init__(self, message: str, last_good_state: Any = None, epoch: int = -1):
        self.last_good_state = last_good_state
        self.epoch = epoch
        super().__init__(message)


class ArtifactIOError(ImplicitDeformError):
    """Artifact path unreadable or unwritable"""
    exit_code = EXIT_IO


def resolve_log_level(explicit: Optional[str] = None) -> str:
    """Flag, then environment (.env honoured), then INFO"""
    load_dotenv()
    level = (explicit or os.environ.get(LOG_LEVEL_ENV, 'INFO')).upper()
    if level not in VALID_LOG_LEVELS:
        level = 'INFO'
    return level


def setup_logging(log_dir: Optional[Union[str, Path]] = None, log_level: Optional[str] = None) -> logging.Logger:
    """Configure production-grade logging on the package logger"""
    level = resolve_log_level(log_level)

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s'
    )
    simple_formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

    logger = logging.getLogger('implicit_deform')
    logger.setLevel(getattr(logging, level))
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now().strftime("%Y%m%d")

        file_handler = logging.FileHandler(log_dir / f'run_{stamp}.log')
        file_handler.setFormatter(detailed_formatter)
        logger.addHandler(file_handler)

        error_handler = logging.FileHandler(log_dir / f'errors_{stamp}.log')
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(detailed_formatter)
        logger.addHandler(error_handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(simple_formatter)
    logger.addHandler(console_handler)
    logger.propagate = False

    logger.debug(f"Logging initialized with level {level}" + (f" to {log_dir}" if log_dir else ""))
    return logger


def create_error_report(error: BaseException) -> Dict[str, Any]:
    """Summarize an exception for logs and run manifests"""
    return {
        'type': type(error).__name__,
        'message': str(error),
        'exit_code': getattr(error, 'exit_code', 1),
        'location': getattr(error, 'location', None),
        'parameter': getattr(error, 'parameter', None),
        'timestamp': datetime.now().isoformat(),
    }
