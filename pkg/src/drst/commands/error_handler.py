#!/usr/bin/env python3
"""
Standardized Error Handling Library

This module provides a standardized way to handle errors across drst.
It defines the error hierarchy raised by every pipeline stage, plus helpers for
logging errors, formatting error messages for the CLI, and converting low-level
exceptions into domain errors.
"""

import os
import sys
import json
import logging
import traceback
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, TypeVar

logger = logging.getLogger("drst.error_handler")

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

# Type variable for generic function return type
T = TypeVar('T')


class DrstError(Exception):
    """Base class for all drst errors."""

    code = "DRST_ERROR"

    def __init__(self, message: str, error_code: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        """
        Initialize the error.

        Args:
            message (str): The error message
            error_code (Optional[str]): An optional error code, defaults to the class code
            details (Optional[Dict[str, Any]]): Additional details about the error
        """
        self.message = message
        self.error_code = error_code or self.code
        self.details = details or {}
        self.timestamp = datetime.now().isoformat()

        super().__init__(f"[{self.error_code}] {message}")


class ValidationError(DrstError):
    """Error raised when validation fails."""
    code = "VALIDATION_ERROR"


class UsageError(ValidationError):
    """Bad command line: unknown command, flag or flag value."""
    code = "USAGE_ERROR"


class ConfigurationError(DrstError):
    """Error raised when there is a configuration issue."""
    code = "CONFIGURATION_ERROR"


class ParseError(ConfigurationError):
    """The configuration document is not valid TOML."""
    code = "PARSE_ERROR"


class UnknownKey(ConfigurationError):
    code = "UNKNOWN_KEY"


class FileSystemError(DrstError):
    """Error raised when there is a file system issue."""
    code = "FILE_SYSTEM_ERROR"


# Ingest

class IngestError(DrstError):
    """Error raised while parsing, normalizing or replaying traces."""
    code = "INGEST_ERROR"


class MalformedRecord(IngestError):
    code = "MALFORMED_RECORD"


class NonFiniteValue(IngestError):
    code = "NON_FINITE_VALUE"


class InconsistentFeatureSet(IngestError):
    code = "INCONSISTENT_FEATURE_SET"


class DegenerateFeature(IngestError):
    code = "DEGENERATE_FEATURE"


class MissingFeature(IngestError):
    code = "MISSING_FEATURE"


class NonMonotonicTimestamp(IngestError):
    code = "NON_MONOTONIC_TIMESTAMP"


class StreamClosed(DrstError):
    """The record stream ended; used for clean shutdown."""
    code = "STREAM_CLOSED"


# Workload generation

class SpecError(DrstError):
    code = "SPEC_ERROR"


class InvalidSpec(SpecError):
    code = "INVALID_SPEC"


# Feature selection

class SelectionError(DrstError):
    code = "SELECTION_ERROR"


class ConstantInput(SelectionError):
    code = "CONSTANT_INPUT"


class LengthMismatch(SelectionError):
    code = "LENGTH_MISMATCH"


class MissingKpi(SelectionError):
    code = "MISSING_KPI"


# Models

class ModelError(DrstError):
    """Error raised by model construction, training or inference."""
    code = "MODEL_ERROR"


class ArityMismatch(ModelError):
    code = "ARITY_MISMATCH"


class NonFiniteParameter(ModelError):
    code = "NON_FINITE_PARAMETER"


class EmptyData(ModelError):
    code = "EMPTY_DATA"


class DivergedTraining(ModelError):
    code = "DIVERGED_TRAINING"


class EmptyGrid(ModelError):
    code = "EMPTY_GRID"


class WindowLengthMismatch(ModelError):
    code = "WINDOW_LENGTH_MISMATCH"


class ChainArityMismatch(ModelError):
    code = "CHAIN_ARITY_MISMATCH"


# Drift

class DriftError(DrstError):
    code = "DRIFT_ERROR"


class WindowNotFull(DriftError):
    code = "WINDOW_NOT_FULL"


class InsufficientData(DriftError):
    code = "INSUFFICIENT_DATA"


class TrainingFailed(DriftError):
    """Retraining failed; the serving model is retained."""
    code = "TRAINING_FAILED"


# Explanations

class ExplainError(DrstError):
    code = "EXPLAIN_ERROR"


class TooManyFeatures(ExplainError):
    code = "TOO_MANY_FEATURES"


class EmptyBackground(ExplainError):
    code = "EMPTY_BACKGROUND"


# Registry

class RegistryError(DrstError):
    """Error raised when there is an issue with the model registry."""
    code = "REGISTRY_ERROR"


class StorageFailure(RegistryError):
    code = "STORAGE_FAILURE"


class EmptyRegistry(RegistryError):
    code = "EMPTY_REGISTRY"


class UnknownVersion(RegistryError):
    code = "UNKNOWN_VERSION"


# Metrics

class MetricError(DrstError):
    code = "METRIC_ERROR"


class ConstantTruth(MetricError):
    code = "CONSTANT_TRUTH"


class NonPositiveValue(MetricError):
    code = "NON_POSITIVE_VALUE"


class ZeroTruth(MetricError):
    code = "ZERO_TRUTH"


class HorizonOutOfRange(MetricError):
    code = "HORIZON_OUT_OF_RANGE"


class AlignmentGap(MetricError):
    code = "ALIGNMENT_GAP"


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Install the drst log handlers.

    Log lines always go to stderr so that data written to stdout stays
    machine-readable. An optional file handler is added when log_file is set.

    Args:
        level (str): The logging level name
        log_file (Optional[str]): Path of an additional log file
    """
    root = logging.getLogger("drst")
    for handler in list(root.handlers):
        root.removeHandler(handler)

    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(stream_handler)

    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(os.path.expanduser(log_file))), exist_ok=True)
        file_handler = logging.FileHandler(os.path.expanduser(log_file), mode='a')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)

    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    root.propagate = False


def log_error(error: Exception, level: int = logging.ERROR, include_traceback: bool = True) -> None:
    """
    Log an error with optional traceback.

    Args:
        error (Exception): The error to log
        level (int): The logging level (default: logging.ERROR)
        include_traceback (bool): Whether to include the traceback in the log
    """
    error_message = str(error)

    if isinstance(error, DrstError):
        # For DrstError, include error code and details
        error_data = {
            "message": error.message,
            "error_code": error.error_code,
            "details": error.details,
            "timestamp": error.timestamp
        }
        error_message = json.dumps(error_data, default=str)

    if include_traceback:
        logger.log(level, f"Error: {error_message}\nTraceback: {traceback.format_exc()}")
    else:
        logger.log(level, f"Error: {error_message}")


def format_error_message(error: Exception) -> str:
    """
    Format an error message for display.

    Args:
        error (Exception): The error to format

    Returns:
        str: The formatted error message
    """
    if isinstance(error, DrstError):
        message = f"[{error.error_code}] {error.message}"
        if error.details:
            message = f"{message}\nDetails: {json.dumps(error.details, indent=2, default=str)}"
        return message
    return str(error)


def validate_path(path: str, must_exist: bool = False, must_be_file: bool = False,
                  must_be_dir: bool = False, create_parents: bool = False) -> bool:
    """
    Validate a file or directory path.

    Args:
        path (str): The path to validate
        must_exist (bool): Whether the path must exist
        must_be_file (bool): Whether the path must be a file
        must_be_dir (bool): Whether the path must be a directory
        create_parents (bool): Whether to create parent directories if they don't exist

    Returns:
        bool: True if the path is valid

    Raises:
        ValidationError: If the path is invalid
    """
    try:
        path_obj = Path(os.path.expanduser(path))

        if must_exist and not path_obj.exists():
            raise ValidationError(f"Path does not exist: {path}", "PATH_NOT_FOUND")

        if must_be_file and path_obj.exists() and not path_obj.is_file():
            raise ValidationError(f"Path is not a file: {path}", "NOT_A_FILE")

        if must_be_dir and path_obj.exists() and not path_obj.is_dir():
            raise ValidationError(f"Path is not a directory: {path}", "NOT_A_DIRECTORY")

        if create_parents and not path_obj.parent.exists():
            path_obj.parent.mkdir(parents=True, exist_ok=True)

        return True
    except ValidationError:
        raise
    except Exception as e:
        raise ValidationError(f"Invalid path: {path}", "INVALID_PATH", {"original_error": str(e)})


def validate_config(config: Dict[str, Any], required_keys: List[str],
                    optional_keys: Optional[List[str]] = None, section: str = "") -> bool:
    """
    Validate a configuration dictionary.

    Args:
        config (Dict[str, Any]): The configuration to validate
        required_keys (List[str]): Keys that must be present in the configuration
        optional_keys (Optional[List[str]]): Keys that may be present in the configuration
        section (str): Dotted prefix used in error messages

    Returns:
        bool: True if the configuration is valid

    Raises:
        ConfigurationError: If a required key is missing
        UnknownKey: If a key is neither required nor optional
    """
    prefix = f"{section}." if section else ""

    missing_keys = [key for key in required_keys if key not in config]
    if missing_keys:
        raise ConfigurationError(
            f"Missing required configuration keys: {', '.join(prefix + k for k in missing_keys)}",
            "MISSING_CONFIG_KEYS",
            {"missing_keys": missing_keys}
        )

    if optional_keys is not None:
        allowed_keys = list(required_keys) + list(optional_keys)
        unknown_keys = [key for key in config if key not in allowed_keys]
        if unknown_keys:
            raise UnknownKey(
                f"Unknown configuration keys: {', '.join(prefix + k for k in unknown_keys)}",
                details={"unknown_keys": [prefix + k for k in unknown_keys]}
            )

    return True


def handle_file_system_error(error: Exception, path: str) -> FileSystemError:
    """
    Convert a file system-related exception to a FileSystemError.

    Args:
        error (Exception): The original error
        path (str): The path that caused the error

    Returns:
        FileSystemError: A FileSystemError with details from the original error
    """
    return FileSystemError(
        f"File system error: {error}",
        details={
            "error_type": type(error).__name__,
            "original_error": str(error),
            "path": path
        }
    )


def with_error_handling(error_type: type = DrstError, reraise: bool = True,
                        default_value: Optional[Any] = None) -> Callable:
    """
    Decorator for converting unexpected exceptions into a domain error.

    Exceptions that already are DrstError instances pass through untouched.

    Args:
        error_type (type): The type of error to convert exceptions to
        reraise (bool): Whether to reraise the converted error
        default_value (Optional[Any]): Default value to return if an exception occurs

    Returns:
        Callable: Decorated function
    """
    def decorator(func: Callable[..., T]) -> Callable[..., Optional[T]]:
        @wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Optional[T]:
            try:
                return func(*args, **kwargs)
            except DrstError:
                raise
            except Exception as e:
                converted_error = error_type(
                    f"{func.__name__} failed: {e}",
                    type(e).__name__.upper(),
                    {"original_error": str(e)}
                )
                log_error(converted_error, include_traceback=False)

                if reraise:
                    raise converted_error from e

                return default_value

        return wrapper

    return decorator
