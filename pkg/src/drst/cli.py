"""
drst CLI - Main Command Line Interface

A git-style command interface over the drst modules. Leaf commands run
directly; grouped commands take a subcommand.

Usage:
  drst <command> [<subcommand>] [<args>]

Examples:
  drst gen --preset chain3-load_A -o trace.jsonl     # Generate a synthetic trace
  drst select --trace trace.jsonl -o report.json     # Rank features against a KPI
  drst train --trace trace.jsonl --model-dir reg     # Train and publish an MLP
  drst serve --trace live.jsonl --model-dir reg      # Serve with drift detection
  drst registry ls --model-dir reg                   # List published versions
  drst config show --config run.toml                 # Print the effective configuration

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

import sys
import argparse
import importlib
import logging
from typing import Callable, List, NoReturn, Optional

from drst.commands.error_handler import (
    ConfigurationError,
    DrstError,
    UsageError,
    configure_logging,
    format_error_message,
    log_error,
)

# Define the command structure
COMMAND_STRUCTURE = {
    "gen": {
        "description": "Generate a synthetic trace from a scenario",
        "module": "drst.commands.synth_workload",
        "function": "gen_cli"
    },
    "select": {
        "description": "Rank features by relevance to a KPI",
        "module": "drst.commands.feature_select",
        "function": "select_cli"
    },
    "train": {
        "description": "Train a model and publish it to the registry",
        "module": "drst.commands.model_registry",
        "function": "train_cli"
    },
    "serve": {
        "description": "Online inference with drift detection and retraining",
        "module": "drst.commands.drift_engine",
        "function": "serve_cli"
    },
    "forecast": {
        "description": "Rolling KPI forecasts over a trace",
        "module": "drst.commands.forecaster",
        "function": "forecast_cli"
    },
    "explain": {
        "description": "Attribute predictions to features",
        "module": "drst.commands.explainer",
        "function": "explain_cli"
    },
    "bench": {
        "description": "Benchmark model kinds on synthetic traces",
        "module": "drst.commands.eval_metrics",
        "function": "bench_cli"
    },
    "registry": {
        "description": "Model registry commands",
        "subcommands": {
            "ls": {
                "description": "List committed model versions",
                "module": "drst.commands.model_registry",
                "function": "list_versions"
            },
            "rollback": {
                "description": "Make a committed version active",
                "module": "drst.commands.model_registry",
                "function": "rollback_version"
            }
        }
    },
    "config": {
        "description": "Configuration commands",
        "subcommands": {
            "show": {
                "description": "Print the effective configuration",
                "module": "drst.commands.config",
                "function": "show_config"
            }
        }
    }
}


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def build_parser(prog: str, description: str) -> argparse.ArgumentParser:
    """
    Create the argument parser of one command.

    Every parser accepts --verbose; main() has already applied it.
    """
    parser = _Parser(prog=prog, description=description)
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    return parser


def _resolve(argv: List[str]) -> Callable[[List[str]], int]:
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError(_command_help())
    command = argv[0]
    if command not in COMMAND_STRUCTURE:
        raise UsageError(f"Unknown command: {command}\n{_command_help()}")

    info = COMMAND_STRUCTURE[command]
    if "subcommands" in info:
        if len(argv) < 2 or argv[1] not in info["subcommands"]:
            given = f"Unknown subcommand: {argv[1]}\n" if len(argv) > 1 else ""
            raise UsageError(given + _subcommand_help(command))
        info = info["subcommands"][argv[1]]

    module = importlib.import_module(info["module"])
    return getattr(module, info["function"])


def _command_help() -> str:
    lines = ["usage: drst <command> [<subcommand>] [<args>]", "", "Available commands:"]
    for command, info in COMMAND_STRUCTURE.items():
        lines.append(f"  {command:<10} {info['description']}")
    lines.append("\nRun 'drst <command> --help' for more information on a command.")
    return "\n".join(lines)


def _subcommand_help(command: str) -> str:
    lines = [f"usage: drst {command} <subcommand> [<args>]", "", f"Available subcommands for '{command}':"]
    for subcommand, info in COMMAND_STRUCTURE[command]["subcommands"].items():
        lines.append(f"  {subcommand:<10} {info['description']}")
    return "\n".join(lines)


def _setup_logging(argv: List[str]) -> None:
    """Apply [logging] from --config, with --verbose forcing DEBUG."""
    from drst.commands.config import load_config

    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("-v", "--verbose", action="store_true")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    config = load_config(known.config)
    level = "DEBUG" if known.verbose else config.get("logging.log_level")
    configure_logging(level, config.get("logging.log_file") or None)


def main(argv: Optional[List[str]] = None) -> int:
    """Main function."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _setup_logging(argv)
        function = _resolve(argv)
        skip = 2 if "subcommands" in COMMAND_STRUCTURE[argv[0]] else 1
        return function(argv[skip:])
    except SystemExit as e:
        # --help inside a command
        return e.code if isinstance(e.code, int) else 0
    except (UsageError, ConfigurationError) as e:
        print(format_error_message(e), file=sys.stderr)
        return 1
    except DrstError as e:
        log_error(e, logging.DEBUG)
        print(format_error_message(e), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        log_error(e)
        print(format_error_message(e), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
