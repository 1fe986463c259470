#!/usr/bin/env python3
"""
Centralized Configuration System

This module provides the run configuration for drst. Every key has a default;
a TOML document may override any of them and command-line flags override the
document. Unknown sections or keys are rejected before any module starts.

Precedence (lowest to highest):
  1. DEFAULT_CONFIG
  2. the --config TOML file
  3. command-line flag overrides (dotted keys such as 'drift.delta')
"""

import re
import copy
import json
import logging
import tomllib
from typing import Any, Dict, List, Mapping, Optional

from drst.commands.error_handler import (
    ConfigurationError,
    ParseError,
    UnknownKey,
    validate_config,
)

logger = logging.getLogger("drst.config")

# Default configuration values
DEFAULT_CONFIG = {
    "ingest": {
        "method": "minmax",
        "speed": 0.0,
        "queue_size": 1024,
        "jitter_tolerance_ms": 10,
    },
    "select": {
        "kpi": "throughput_mbps",
        "threshold": 0.5,
        "bins": 16,
    },
    "mlp": {
        "hidden_layers": 2,
        "hidden_width": 32,
        "activation": "relu",
        "l2_alpha": 0.0001,
        "learning_rate": 0.003,
        "batch_size": 32,
        "epochs": 150,
        "seed": 0,
        "optimizer": "adam",
    },
    # Axes of the retraining lattice; severity tiers pick a subset of axes
    "grid": {
        "learning_rate": [0.001, 0.003, 0.01],
        "batch_size": [16, 32],
        "hidden_layers": [1, 2],
        "hidden_width": [32],
        "activation": ["relu", "tanh"],
        "optimizer": ["adam", "sgd"],
        "l2_alpha": [0.0001],
        "workers": 1,
    },
    "lstm": {
        "layers": 1,
        "hidden_dim": 32,
        "window": 10,
        "horizon": 5,
        "learning_rate": 0.01,
        "batch_size": 32,
        "epochs": 40,
        "seed": 0,
    },
    "drift": {
        "window_size": 100,
        "bins": 32,
        "delta": 0.05,
        # Empty derives (delta, 2*delta, 4*delta)
        "severity_cuts": [],
        "check_every_s": 10,
        "check_every_samples": 0,
        "retrain_multiplier": 5,
    },
    "forecast": {
        "enabled": True,
        "every_s": 30,
    },
    "explain": {
        "samples": 100,
        "topk": 10,
        "permutations": 200,
        "seed": 0,
    },
    "registry": {
        "path": "registry",
    },
    "serve": {
        "kpi": "throughput_mbps",
        "metrics_port": 0,
        "event_queue_size": 1024,
    },
    "logging": {
        "log_level": "INFO",
        "log_file": "",
    },
}

_POSITION = re.compile(r"at line (\d+), column (\d+)")


class RunConfig:
    """Validated run configuration for all drst modules."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        """
        Initialize the configuration.

        Args:
            values (Optional[Dict[str, Any]]): Fully merged configuration; defaults when omitted
        """
        self._config = copy.deepcopy(values if values is not None else DEFAULT_CONFIG)

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        Get a configuration value by its key path.

        Args:
            key_path (str): The key path in dot notation (e.g., 'drift.delta')
            default (Any, optional): The default value to return if the key is not found

        Returns:
            The configuration value, or the default value if the key is not found
        """
        value: Any = self._config
        try:
            for key in key_path.split('.'):
                value = value[key]
            return copy.deepcopy(value)
        except (KeyError, TypeError):
            return default

    def section(self, name: str) -> Dict[str, Any]:
        """Return a copy of one configuration section."""
        if name not in self._config:
            raise UnknownKey(f"Unknown configuration section: {name}")
        return copy.deepcopy(self._config[name])

    def get_all(self) -> Dict[str, Any]:
        """Get the entire configuration."""
        return copy.deepcopy(self._config)

    def validate(self) -> "RunConfig":
        """
        Build every module configuration so that bad values fail early.

        Returns:
            RunConfig: self, for chaining

        Raises:
            ConfigurationError: If a module rejects its section
        """
        # Imported here: the module configs import this module for defaults.
        from drst.commands.drift_engine import DriftConfig
        from drst.commands.forecaster import LstmConfig
        from drst.commands.nn_core import ConfigLattice, MlpConfig
        from drst.commands.trace_ingest import NormalizationMethod

        try:
            NormalizationMethod(self.get("ingest.method"))
            MlpConfig.from_dict(self.section("mlp"))
            ConfigLattice.from_sections(self.section("mlp"), self.section("grid"))
            LstmConfig.from_dict(self.section("lstm"))
            DriftConfig.from_dict(self.section("drift"))
        except ConfigurationError:
            raise
        except Exception as e:
            raise ConfigurationError(f"Invalid configuration: {e}", details={"original_error": str(e)}) from e

        if self.get("ingest.speed") < 0:
            raise ConfigurationError("ingest.speed must be >= 0")
        if self.get("forecast.every_s") < 1:
            raise ConfigurationError("forecast.every_s must be >= 1")
        return self


def _merge_configs(default: Dict[str, Any], custom: Mapping[str, Any]) -> Dict[str, Any]:
    """Merge the custom configuration with the default configuration."""
    result = copy.deepcopy(default)

    for key, value in custom.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _merge_configs(result[key], value)
        else:
            result[key] = value

    return result


def _check_keys(custom: Mapping[str, Any]) -> None:
    """Reject sections and keys that DEFAULT_CONFIG does not declare."""
    validate_config(dict(custom), [], list(DEFAULT_CONFIG))
    for section, values in custom.items():
        if not isinstance(values, dict):
            raise ConfigurationError(f"Section '{section}' must be a table")
        validate_config(values, [], list(DEFAULT_CONFIG[section]), section=section)


def _coerce(key_path: str, default: Any, value: Any) -> Any:
    """Check a value against the type of its default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    raise ConfigurationError(
        f"Invalid type for {key_path}: expected {type(default).__name__}, got {type(value).__name__}",
        "INVALID_TYPE",
        {"key": key_path, "value": value},
    )


def _coerce_all(custom: Mapping[str, Any]) -> Dict[str, Any]:
    return {
        section: {
            key: _coerce(f"{section}.{key}", DEFAULT_CONFIG[section][key], value)
            for key, value in values.items()
        }
        for section, values in custom.items()
    }


def parse_document(text: str) -> Dict[str, Any]:
    """
    Parse a TOML configuration document.

    Args:
        text (str): The document text

    Returns:
        Dict[str, Any]: The parsed sections

    Raises:
        ParseError: If the document is malformed; details carry line and column
    """
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        details: Dict[str, Any] = {"original_error": str(e)}
        match = _POSITION.search(str(e))
        if match:
            details["line"] = int(match.group(1))
            details["column"] = int(match.group(2))
        raise ParseError(f"Malformed configuration document: {e}", details=details) from e


def overrides_to_sections(overrides: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Turn {'drift.delta': 0.2} into {'drift': {'delta': 0.2}}, skipping None values."""
    sections: Dict[str, Dict[str, Any]] = {}
    for key_path, value in overrides.items():
        if value is None:
            continue
        if key_path.count('.') != 1:
            raise UnknownKey(f"Override keys must be 'section.key': {key_path}")
        section, key = key_path.split('.')
        sections.setdefault(section, {})[key] = value
    return sections


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Load the run configuration.

    Args:
        path (Optional[str]): TOML document to apply over the defaults
        overrides (Optional[Mapping[str, Any]]): Dotted-key flag overrides, applied last

    Returns:
        RunConfig: The validated configuration

    Raises:
        ParseError: If the document is malformed
        UnknownKey: If the document or overrides name an unknown key
        ConfigurationError: If a value has the wrong type or fails module validation
    """
    merged = copy.deepcopy(DEFAULT_CONFIG)

    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ConfigurationError(f"Cannot read configuration file {path}: {e}", "CONFIG_NOT_FOUND") from e
        document = parse_document(text)
        _check_keys(document)
        merged = _merge_configs(merged, _coerce_all(document))
        logger.info(f"Configuration loaded from {path}")

    if overrides:
        sections = overrides_to_sections(overrides)
        _check_keys(sections)
        merged = _merge_configs(merged, _coerce_all(sections))

    return RunConfig(merged).validate()


# Functions for the drst CLI

def show_config(args: List[str]) -> int:
    """
    Print the effective configuration as JSON, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser

    parser = build_parser("drst config show", "Print the effective configuration")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--section", help="Only print this section (e.g., 'drift')")
    options = parser.parse_args(args)

    run_config = load_config(options.config)
    if options.section:
        print(json.dumps(run_config.section(options.section), indent=2))
    else:
        print(json.dumps(run_config.get_all(), indent=2))
    return 0
