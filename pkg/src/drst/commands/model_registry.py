#!/usr/bin/env python3
"""
Model Registry

File-based, versioned storage of trained models. Layout:

  <root>/
    ACTIVE                  JSON alias map {kind: version} written by rollback
    v000001/
      payload               JSON {kind, model, schema, kpi}
      manifest.json         written last; its presence commits the version

A version directory without a manifest, or whose payload digest does not match
the manifest, is ignored by readers.
"""

import os
import sys
import json
import hashlib
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from drst.commands.error_handler import (
    EmptyRegistry,
    MetricError,
    RegistryError,
    StorageFailure,
    UnknownVersion,
    UsageError,
    ValidationError,
    validate_path,
    with_error_handling,
)
from drst.commands.forecaster import DirRecChain, LstmModel
from drst.commands.nn_core import MlpModel
from drst.commands.trace_ingest import FeatureSchema

logger = logging.getLogger("drst.model_registry")

MODEL_KINDS = ("mlp", "lstm", "dirrec")
PAYLOAD_FILE = "payload"
MANIFEST_FILE = "manifest.json"
ALIAS_FILE = "ACTIVE"

_MODEL_TYPES = {"mlp": MlpModel, "lstm": LstmModel, "dirrec": DirRecChain}

Model = Union[MlpModel, LstmModel, DirRecChain]


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _version_dir(version: int) -> str:
    return f"v{version:06d}"


@dataclass
class Artifact:
    """A model together with the schema its inputs follow and the KPI it predicts."""

    kind: str
    model: Model
    schema: FeatureSchema
    kpi: str

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"Unknown model kind '{self.kind}'")
        if not isinstance(self.model, _MODEL_TYPES[self.kind]):
            raise ValidationError(f"Model is not a {self.kind} model")

    def to_bytes(self) -> bytes:
        document = {
            "kind": self.kind,
            "model": self.model.to_dict(),
            "schema": self.schema.to_dict(),
            "kpi": self.kpi,
        }
        return json.dumps(document, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Artifact":
        try:
            document = json.loads(data.decode("utf-8"))
            kind = document["kind"]
            model = _MODEL_TYPES[kind].from_dict(document["model"])
            return cls(kind, model, FeatureSchema.from_dict(document["schema"]), document["kpi"])
        except (KeyError, TypeError, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise RegistryError(f"Invalid artifact payload: {e}", "INVALID_PAYLOAD") from e


@dataclass
class ArtifactManifest:
    version: int
    kind: str
    created_at: str
    config_digest: str
    schema_hash: str
    payload_digest: str
    metrics: Dict[str, float] = field(default_factory=dict)
    parent_version: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "kind": self.kind,
            "created_at": self.created_at,
            "config_digest": self.config_digest,
            "schema_hash": self.schema_hash,
            "metrics": self.metrics,
            "parent_version": self.parent_version,
            "payload_digest": self.payload_digest,
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "ArtifactManifest":
        return cls(
            int(document["version"]),
            str(document["kind"]),
            str(document["created_at"]),
            str(document["config_digest"]),
            str(document["schema_hash"]),
            str(document["payload_digest"]),
            dict(document.get("metrics") or {}),
            document.get("parent_version"),
        )


def config_digest(model: Model) -> str:
    if isinstance(model, DirRecChain):
        config = [member.config.to_dict() if member.config else None for member in model.members]
    else:
        config = model.config.to_dict() if model.config else None
    return _sha256(json.dumps(config, sort_keys=True).encode("utf-8"))


class ModelRegistry:
    """
    Versioned model store with a single writer and any number of readers.

    Every publish step goes through _checkpoint(name) so that faults can be
    injected between writes.
    """

    def __init__(self, root: str):
        self.root = os.path.expanduser(root)

    def _checkpoint(self, name: str) -> None:
        pass

    def _write_atomic(self, path: str, data: bytes, step: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        self._checkpoint(f"{step}_written")
        os.replace(tmp, path)
        self._checkpoint(f"{step}_renamed")

    def _all_versions(self) -> List[int]:
        if not os.path.isdir(self.root):
            return []
        versions = []
        for name in os.listdir(self.root):
            if name.startswith("v") and name[1:].isdigit() and os.path.isdir(os.path.join(self.root, name)):
                versions.append(int(name[1:]))
        return sorted(versions)

    def _read_manifest(self, version: int) -> Optional[ArtifactManifest]:
        """The manifest of a committed, intact version; None otherwise."""
        directory = os.path.join(self.root, _version_dir(version))
        try:
            with open(os.path.join(directory, MANIFEST_FILE), 'r', encoding='utf-8') as f:
                manifest = ArtifactManifest.from_dict(json.load(f))
            with open(os.path.join(directory, PAYLOAD_FILE), 'rb') as f:
                payload = f.read()
        except (OSError, ValueError, KeyError, TypeError):
            return None
        if manifest.version != version or _sha256(payload) != manifest.payload_digest:
            logger.warning(f"Ignoring version {version}: manifest or payload digest mismatch")
            return None
        return manifest

    def _read_aliases(self) -> Dict[str, int]:
        try:
            with open(os.path.join(self.root, ALIAS_FILE), 'r', encoding='utf-8') as f:
                aliases = json.load(f)
            return {str(k): int(v) for k, v in aliases.items()}
        except (OSError, ValueError, AttributeError, TypeError):
            return {}

    def _write_aliases(self, aliases: Mapping[str, int]) -> None:
        path = os.path.join(self.root, ALIAS_FILE)
        if not aliases:
            if os.path.exists(path):
                os.remove(path)
            return
        self._write_atomic(path, json.dumps(dict(aliases), sort_keys=True).encode("utf-8"), "alias")

    def manifests(self, kind: Optional[str] = None) -> List[ArtifactManifest]:
        """Committed manifests in version order."""
        found = [self._read_manifest(version) for version in self._all_versions()]
        return [m for m in found if m is not None and (kind is None or m.kind == kind)]

    def active_version(self, kind: str) -> int:
        aliased = self._read_aliases().get(kind)
        if aliased is not None:
            manifest = self._read_manifest(aliased)
            if manifest is not None and manifest.kind == kind:
                return aliased
            logger.warning(f"Alias for {kind} points at unusable version {aliased}; using the newest")
        committed = self.manifests(kind)
        if not committed:
            raise EmptyRegistry(f"No committed {kind} artifact in {self.root}")
        return committed[-1].version

    @with_error_handling(StorageFailure)
    def publish(self, artifact: Artifact, metrics: Optional[Mapping[str, float]] = None,
                parent_version: Optional[int] = None) -> int:
        """
        Store an artifact as the next version and make it the active one of its kind.

        Args:
            artifact (Artifact): Model, schema and KPI
            metrics: Training metrics recorded in the manifest
            parent_version: Version the model replaces, if any

        Returns:
            int: The new version number

        Raises:
            StorageFailure: If any write fails; readers keep seeing the previous state
        """
        schema_hash = artifact.schema.digest()
        if artifact.model.input_schema_hash and artifact.model.input_schema_hash != schema_hash:
            raise ValidationError("Model was trained against a different schema",
                                  "SCHEMA_MISMATCH", {"model": artifact.model.input_schema_hash,
                                                      "schema": schema_hash})

        os.makedirs(self.root, exist_ok=True)
        existing = self._all_versions()
        version = (existing[-1] if existing else 0) + 1
        directory = os.path.join(self.root, _version_dir(version))
        os.makedirs(directory)

        payload = artifact.to_bytes()
        self._write_atomic(os.path.join(directory, PAYLOAD_FILE), payload, "payload")

        manifest = ArtifactManifest(
            version=version,
            kind=artifact.kind,
            created_at=datetime.now(timezone.utc).isoformat(),
            config_digest=config_digest(artifact.model),
            schema_hash=schema_hash,
            payload_digest=_sha256(payload),
            metrics={k: float(v) for k, v in (metrics or {}).items()},
            parent_version=parent_version,
        )
        manifest_bytes = json.dumps(manifest.to_dict(), indent=2).encode("utf-8")
        self._write_atomic(os.path.join(directory, MANIFEST_FILE), manifest_bytes, "manifest")

        aliases = self._read_aliases()
        if artifact.kind in aliases:
            del aliases[artifact.kind]
            self._write_aliases(aliases)
            self._checkpoint("alias_cleared")

        logger.info(f"Published {artifact.kind} version {version} to {self.root}")
        return version

    def get(self, version: int) -> Tuple[ArtifactManifest, Artifact]:
        """
        Load one committed version.

        Raises:
            UnknownVersion: If the version is absent or not committed
        """
        manifest = self._read_manifest(version)
        if manifest is None:
            raise UnknownVersion(f"Version {version} is not a committed artifact", details={"version": version})
        with open(os.path.join(self.root, _version_dir(version), PAYLOAD_FILE), 'rb') as f:
            return manifest, Artifact.from_bytes(f.read())

    def latest(self, kind: str = "mlp") -> Tuple[int, Artifact]:
        """
        The active artifact of a kind: the rollback alias if set, else the newest committed version.

        Raises:
            EmptyRegistry: If no committed artifact of the kind exists
        """
        version = self.active_version(kind)
        _, artifact = self.get(version)
        return version, artifact

    @with_error_handling(StorageFailure)
    def rollback(self, to_version: int) -> int:
        """
        Mark a committed version active for its kind.

        Raises:
            UnknownVersion: If the version is absent or not committed
        """
        manifest = self._read_manifest(to_version)
        if manifest is None:
            raise UnknownVersion(f"Cannot roll back to version {to_version}", details={"version": to_version})
        aliases = self._read_aliases()
        aliases[manifest.kind] = to_version
        self._write_aliases(aliases)
        logger.info(f"Rolled back {manifest.kind} to version {to_version}")
        return to_version


def load_artifact(path: str, kinds: Iterable[str] = MODEL_KINDS) -> Artifact:
    """
    Load a model from a registry root (active version), a version directory or a payload file.

    Raises:
        EmptyRegistry: If a registry root holds no artifact of the requested kinds
        ValidationError: If the path does not exist
        RegistryError: If the artifact kind is not one of kinds
    """
    kinds = tuple(kinds)
    path = os.path.expanduser(path)
    validate_path(path, must_exist=True)
    if os.path.isfile(path):
        with open(path, 'rb') as f:
            artifact = Artifact.from_bytes(f.read())
    elif os.path.isfile(os.path.join(path, MANIFEST_FILE)):
        version_name = os.path.basename(os.path.normpath(path))
        registry = ModelRegistry(os.path.dirname(os.path.normpath(path)))
        _, artifact = registry.get(int(version_name.lstrip("v")))
    else:
        registry = ModelRegistry(path)
        candidates = []
        for kind in kinds:
            try:
                candidates.append(registry.latest(kind))
            except EmptyRegistry:
                continue
        if not candidates:
            raise EmptyRegistry(f"No {'/'.join(kinds)} artifact in {path}")
        artifact = max(candidates, key=lambda pair: pair[0])[1]

    if artifact.kind not in kinds:
        raise RegistryError(f"Expected a {'/'.join(kinds)} model, got {artifact.kind}", "WRONG_KIND")
    return artifact


# Functions for the drst CLI

def list_versions(args: List[str]) -> int:
    """
    Print committed manifests as JSON lines, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser
    from drst.commands.config import load_config

    parser = build_parser("drst registry ls", "List committed model versions")
    parser.add_argument("--model-dir", help="Registry root (default registry.path)")
    parser.add_argument("--kind", choices=MODEL_KINDS, help="Only list this kind")
    parser.add_argument("--config", help="TOML configuration file")
    options = parser.parse_args(args)

    config = load_config(options.config, {"registry.path": options.model_dir})
    registry = ModelRegistry(config.get("registry.path"))
    active = {}
    for kind in MODEL_KINDS:
        try:
            active[kind] = registry.active_version(kind)
        except EmptyRegistry:
            continue
    for manifest in registry.manifests(options.kind):
        document = manifest.to_dict()
        document["active"] = active.get(manifest.kind) == manifest.version
        sys.stdout.write(json.dumps(document) + "\n")
    return 0


def rollback_version(args: List[str]) -> int:
    """
    Make an earlier version active, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser
    from drst.commands.config import load_config

    parser = build_parser("drst registry rollback", "Make a committed version active")
    parser.add_argument("version", type=int, help="Version to activate")
    parser.add_argument("--model-dir", help="Registry root (default registry.path)")
    parser.add_argument("--config", help="TOML configuration file")
    options = parser.parse_args(args)

    config = load_config(options.config, {"registry.path": options.model_dir})
    ModelRegistry(config.get("registry.path")).rollback(options.version)
    print(f"Active version: {options.version}")
    return 0


def train_artifact(records: List[Any], kind: str, kpi: str, config: Any,
                   features: Optional[List[str]] = None,
                   budget: Optional[str] = None) -> Tuple[Artifact, Dict[str, float]]:
    """
    Train one model kind on labeled records.

    Args:
        records: Trace records carrying the KPI
        kind (str): 'mlp', 'lstm' or 'dirrec'
        kpi (str): Target KPI
        config (RunConfig): Effective configuration
        features: Restrict the inputs to these features
        budget: Grid-search the MLP with this budget instead of training mlp.* once

    Returns:
        Tuple[Artifact, Dict[str, float]]: The artifact and its training metrics
    """
    from drst.commands.eval_metrics import acc5log, r2
    from drst.commands.forecaster import LstmConfig, dirrec_train, lstm_train, make_windows, predict_windows
    from drst.commands.nn_core import ConfigLattice, MlpConfig, grid_search, mlp_predict, mlp_train
    from drst.commands.trace_ingest import build_dataset

    if kind not in MODEL_KINDS:
        raise ValidationError(f"Unknown model kind '{kind}'")
    dataset = build_dataset(records, kpi, config.get("ingest.method"), features)
    schema_hash = dataset.schema.digest()

    metrics: Dict[str, float] = {"samples": float(len(dataset))}
    if kind == "mlp":
        if budget:
            lattice = ConfigLattice.from_sections(config.section("mlp"), config.section("grid"))
            result = grid_search(dataset.X, dataset.y, lattice, budget, seed=config.get("mlp.seed"),
                                 schema_hash=schema_hash)
            model = result.model
            metrics["validation_mse"] = result.validation_loss
        else:
            model, report = mlp_train(dataset.X, dataset.y, MlpConfig.from_dict(config.section("mlp")), schema_hash)
            metrics["final_loss"] = report.final_loss
        pred, truth = mlp_predict(model, dataset.X), dataset.y
    else:
        lstm_config = LstmConfig.from_dict(config.section("lstm"))
        windows, targets = make_windows(dataset.X, dataset.y, lstm_config.window, lstm_config.horizon)
        if kind == "lstm":
            model, report = lstm_train(windows, targets, lstm_config, schema_hash)
            metrics["final_loss"] = report.final_loss
        else:
            model, _ = dirrec_train(windows, targets, lstm_config, schema_hash)
        pred, truth = predict_windows(model, windows)[:, 0], targets[:, 0]

    for name, metric in (("train_r2", r2), ("train_acc5log", acc5log)):
        try:
            metrics[name] = metric(pred, truth)
        except MetricError as e:
            logger.warning(f"Training metric {name} skipped: {e}")
    return Artifact(kind, model, dataset.schema, kpi), metrics


def train_cli(args: List[str]) -> int:
    """
    Train a model on a trace and publish it, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser
    from drst.commands.config import load_config
    from drst.commands.feature_select import RelevanceReport
    from drst.commands.nn_core import SearchBudget
    from drst.commands.trace_ingest import read_trace

    parser = build_parser("drst train", "Train a model and publish it to the registry")
    parser.add_argument("--trace", required=True, help="Labeled trace file (JSON lines)")
    parser.add_argument("--kind", choices=MODEL_KINDS, default="mlp", help="Model kind (default: mlp)")
    parser.add_argument("--kpi", help="Target KPI (default select.kpi)")
    parser.add_argument("--report", help="Relevance report whose selected features become the inputs")
    parser.add_argument("--budget", choices=[b.value for b in SearchBudget],
                        help="Grid-search the MLP over this budget of the grid section")
    parser.add_argument("--model-dir", help="Registry root (default registry.path)")
    parser.add_argument("--config", help="TOML configuration file")
    options = parser.parse_args(args)

    config = load_config(options.config, {"registry.path": options.model_dir, "select.kpi": options.kpi})
    if options.budget and options.kind != "mlp":
        raise UsageError("--budget applies to --kind mlp only")
    features = None
    if options.report:
        features = RelevanceReport.load(options.report).selected
        if not features:
            raise ValidationError(f"Report {options.report} selects no features")

    kpi = config.get("select.kpi")
    artifact, metrics = train_artifact(read_trace(options.trace), options.kind, kpi, config,
                                       features, options.budget)
    registry = ModelRegistry(config.get("registry.path"))
    parent = None
    try:
        parent = registry.active_version(options.kind)
    except EmptyRegistry:
        pass
    version = registry.publish(artifact, metrics, parent)
    print(json.dumps({"version": version, "kind": options.kind, "kpi": kpi, "metrics": metrics}))
    return 0
