#!/usr/bin/env python3
"""
Drift Detection and the Serving Loop

Compares a reference window of normalized feature vectors with the current
window using the Jensen-Shannon divergence, grades the drift into severity
tiers and retrains the inference model with a lattice sized by the tier.

The serving loop predicts every sample with the active model, forecasts on
its own period, checks for drift on a fixed cadence and hot-swaps the model
once a retrained version is published. Everything it does is written to an
event channel as JSON lines.
"""

import sys
import json
import math
import time
import queue
import signal
import logging
import threading
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from scipy.spatial.distance import jensenshannon
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, start_http_server

from drst.commands.error_handler import (
    ArityMismatch,
    ConfigurationError,
    DrstError,
    EmptyRegistry,
    InsufficientData,
    StreamClosed,
    TrainingFailed,
    ValidationError,
    WindowNotFull,
    log_error,
)
from drst.commands.forecaster import ForecastGap, RollingForecaster
from drst.commands.model_registry import Artifact, ModelRegistry
from drst.commands.nn_core import ConfigLattice, SearchBudget, grid_search, mlp_forward
from drst.commands.trace_ingest import (
    FeatureSchema,
    FeatureVector,
    NormalizationMethod,
    SlidingWindow,
    StreamReader,
    TraceRecord,
    build_dataset,
    normalize,
    project,
)

logger = logging.getLogger("drst.drift_engine")

# Additive mass per histogram bin so that every KL term stays finite
SMOOTHING = 1e-9
ZERO_RANGE_PAD = 0.5


@dataclass(frozen=True)
class DriftConfig:
    window_size: int = 100
    bins: int = 32
    delta: float = 0.05
    severity_cuts: Tuple[float, ...] = (0.05, 0.10, 0.20)
    check_every_s: int = 10
    check_every_samples: int = 0
    retrain_multiplier: int = 5

    def __post_init__(self):
        if self.window_size < 10:
            raise ConfigurationError(f"drift.window_size must be >= 10, got {self.window_size}")
        if self.bins < 2:
            raise ConfigurationError(f"drift.bins must be >= 2, got {self.bins}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"drift.delta must lie in (0, 1), got {self.delta}")
        cuts = self.severity_cuts
        if len(cuts) != len(SEVERITY_TIERS):
            raise ConfigurationError(f"drift.severity_cuts needs {len(SEVERITY_TIERS)} values, got {len(cuts)}")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigurationError("drift.severity_cuts must be strictly ascending")
        if cuts[0] != self.delta:
            raise ConfigurationError(f"The first severity cut ({cuts[0]}) must equal drift.delta ({self.delta})")
        if self.check_every_s < 1 or self.check_every_samples < 0:
            raise ConfigurationError("Drift check cadence must be positive")
        if self.retrain_multiplier < 1:
            raise ConfigurationError("drift.retrain_multiplier must be >= 1")

    @property
    def retrain_size(self) -> int:
        return self.retrain_multiplier * self.window_size

    @property
    def replay_fast(self) -> bool:
        return self.check_every_samples > 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window_size": self.window_size,
            "bins": self.bins,
            "delta": self.delta,
            "severity_cuts": list(self.severity_cuts),
            "check_every_s": self.check_every_s,
            "check_every_samples": self.check_every_samples,
            "retrain_multiplier": self.retrain_multiplier,
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "DriftConfig":
        values = dict(document)
        if values.get("severity_cuts"):
            values["severity_cuts"] = tuple(float(c) for c in values["severity_cuts"])
        else:
            delta = float(values.get("delta", cls.delta))
            values["severity_cuts"] = (delta, 2 * delta, 4 * delta)
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationError(f"Invalid drift section: {e}") from e


class Severity(str, Enum):
    NONE = "None"
    S1 = "S1"
    S2 = "S2"
    SK = "SK"

    @property
    def budget(self) -> SearchBudget:
        if self == Severity.NONE:
            raise ValidationError("No retraining budget for severity None")
        return SearchBudget(self.value)


SEVERITY_TIERS = (Severity.S1, Severity.S2, Severity.SK)


def estimator_floor(bins: int, window_size: int) -> float:
    """Expected plug-in JS between two i.i.d. windows, in bits."""
    return (bins - 1) / (4.0 * window_size * math.log(2))


def classify_severity(score: float, config: DriftConfig) -> Severity:
    """None below delta, otherwise the tier of the highest cut not above score."""
    severity = Severity.NONE
    for cut, tier in zip(config.severity_cuts, SEVERITY_TIERS):
        if score >= cut:
            severity = tier
    return severity


def js_from_histograms(p: Sequence[float], q: Sequence[float]) -> float:
    """
    Jensen-Shannon divergence of two histograms, in bits.

    Masses are normalized first; empty bins are allowed.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ArityMismatch(f"Histogram shapes differ: {p.shape} vs {q.shape}")
    if p.sum() <= 0 or q.sum() <= 0 or (p < 0).any() or (q < 0).any():
        raise ValidationError("Histograms need non-negative mass")
    # jensenshannon returns the distance, the square root of the divergence
    value = float(jensenshannon(p, q, base=2.0)) ** 2
    return min(1.0, max(0.0, value))


def _window_matrix(window: Union[SlidingWindow, Sequence[FeatureVector], np.ndarray]) -> np.ndarray:
    if isinstance(window, SlidingWindow):
        if not window.is_full:
            raise WindowNotFull(f"Window holds {len(window)} of {window.capacity} samples")
        return window.as_array()
    if isinstance(window, np.ndarray):
        return np.atleast_2d(np.asarray(window, dtype=np.float64))
    return np.array([v.values if isinstance(v, FeatureVector) else v for v in window], dtype=np.float64)


def js_divergence(p_window: Any, q_window: Any, bins: int = 32) -> float:
    """
    Mean per-feature Jensen-Shannon divergence between two windows.

    Each feature is binned into equal-width histograms over the union of both
    windows' ranges; a zero-width range is padded by 0.5 on each side.

    Args:
        p_window: SlidingWindow, FeatureVector sequence or (M, d) array
        q_window: Same shape as p_window
        bins (int): Histogram bins per feature

    Returns:
        float: Divergence in [0, 1]

    Raises:
        WindowNotFull: If a window is not full or the windows differ in length
        ArityMismatch: If the windows differ in feature count
    """
    if bins < 2:
        raise ValidationError(f"bins must be >= 2, got {bins}")
    p = _window_matrix(p_window)
    q = _window_matrix(q_window)
    if p.size == 0 or q.size == 0 or p.shape[0] != q.shape[0]:
        raise WindowNotFull(f"Windows must be full and equally long, got {p.shape[0]} and {q.shape[0]}")
    if p.shape[1] != q.shape[1]:
        raise ArityMismatch(f"Window arity differs: {p.shape[1]} vs {q.shape[1]}")

    scores = []
    for column in range(p.shape[1]):
        lo = min(p[:, column].min(), q[:, column].min())
        hi = max(p[:, column].max(), q[:, column].max())
        if hi - lo <= 0.0:
            lo, hi = lo - ZERO_RANGE_PAD, hi + ZERO_RANGE_PAD
        hp, _ = np.histogram(p[:, column], bins=bins, range=(lo, hi))
        hq, _ = np.histogram(q[:, column], bins=bins, range=(lo, hi))
        scores.append(js_from_histograms(hp + SMOOTHING, hq + SMOOTHING))
    return min(1.0, max(0.0, math.fsum(scores) / len(scores)))


@dataclass
class DriftState:
    reference: SlidingWindow
    current: SlidingWindow
    last_score: Optional[float] = None
    severity: Severity = Severity.NONE

    @classmethod
    def empty(cls, window_size: int) -> "DriftState":
        return cls(SlidingWindow(window_size), SlidingWindow(window_size))

    def rebase(self, vectors: Optional[Sequence[FeatureVector]] = None) -> None:
        """W_ref <- W_curr, or both windows <- vectors when given."""
        if vectors is None:
            self.reference.replace(self.current.snapshot())
            return
        self.reference.replace(vectors)
        self.current.replace(vectors)


@dataclass
class UpdateDecision:
    severity: Severity
    budget: SearchBudget
    triggered_at: int
    score: float
    status: str = "published"
    version: Optional[int] = None
    parent_version: Optional[int] = None
    validation_loss: Optional[float] = None
    samples: int = 0
    axes: Tuple[str, ...] = ()
    error: Optional[str] = None
    artifact: Optional[Artifact] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "severity": self.severity.value,
            "budget": self.budget.value,
            "axes": list(self.axes),
            "triggered_at": self.triggered_at,
            "score": self.score,
            "status": self.status,
            "version": self.version,
            "parent_version": self.parent_version,
            "validation_loss": self.validation_loss,
            "samples": self.samples,
            "error": self.error,
        }


def dispatch_update(severity: Severity, recent_data: Sequence[TraceRecord], registry: ModelRegistry,
                    lattice: ConfigLattice, kpi: str, feature_names: Sequence[str],
                    method: Union[str, NormalizationMethod] = NormalizationMethod.MINMAX,
                    parent_version: Optional[int] = None, triggered_at: int = 0, score: float = 0.0,
                    min_samples: int = 10, seed: int = 0) -> UpdateDecision:
    """
    Retrain on recent labeled records with the tier's lattice and publish the winner.

    The schema is refitted on the retraining records; the caller keeps serving
    its current model until this returns.

    Args:
        severity (Severity): S1, S2 or SK
        recent_data: Most recent records, oldest first
        registry (ModelRegistry): Where the winner is published
        lattice (ConfigLattice): Base config and axis values
        kpi (str): Target KPI
        feature_names: Features of the serving schema
        method: Normalization method for the refitted schema
        parent_version: Version being replaced
        triggered_at (int): Timestamp of the triggering check
        score (float): The drift score that triggered the update
        min_samples (int): Fewest labeled records worth retraining on
        seed (int): Validation split seed

    Returns:
        UpdateDecision: With the published version and its artifact

    Raises:
        InsufficientData: If fewer than min_samples records carry the KPI
        TrainingFailed: If fitting, training or publishing fails
    """
    severity = Severity(severity)
    budget = severity.budget
    labeled = [project(r, feature_names) for r in recent_data if r.kpi(kpi) is not None]
    if len(labeled) < max(2, min_samples):
        raise InsufficientData(f"{len(labeled)} labeled records, need {min_samples}",
                               details={"labeled": len(labeled), "needed": min_samples})

    started = time.monotonic()
    try:
        dataset = build_dataset(labeled, kpi, method)
        schema_hash = dataset.schema.digest()
        result = grid_search(dataset.X, dataset.y, lattice, budget, seed=seed, schema_hash=schema_hash)
        artifact = Artifact("mlp", result.model, dataset.schema, kpi)
        version = registry.publish(artifact, {
            "validation_mse": result.validation_loss,
            "samples": float(len(dataset)),
            "js_divergence": score,
        }, parent_version)
    except DrstError as e:
        raise TrainingFailed(f"Retraining for {severity.value} failed: {e.message}",
                             details={"cause": e.error_code}) from e

    logger.info(f"{severity.value} update published as version {version} "
                f"({len(dataset)} samples, {time.monotonic() - started:.2f} s)")
    return UpdateDecision(severity, budget, triggered_at, score, "published", version, parent_version,
                          result.validation_loss, len(dataset), budget.axes, artifact=artifact)


class ServingMetrics:
    """Prometheus metrics of one serving loop, on a private registry."""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.samples = Counter("drst_samples_total", "Samples received", registry=self.registry)
        self.predictions = Counter("drst_predictions_total", "Predictions emitted", registry=self.registry)
        self.errors = Counter("drst_errors_total", "Samples that failed", registry=self.registry)
        self.checks = Counter("drst_drift_checks_total", "Drift checks run", registry=self.registry)
        self.updates = Counter("drst_updates_total", "Model updates by outcome", ["status"], registry=self.registry)
        self.divergence = Gauge("drst_js_divergence", "Latest drift score", registry=self.registry)
        self.version = Gauge("drst_model_version", "Serving model version", registry=self.registry)
        self.latency = Histogram("drst_prediction_latency_seconds", "Per-sample inference time",
                                 buckets=(0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1),
                                 registry=self.registry)

    def serve(self, port: int) -> None:
        start_http_server(port, registry=self.registry)
        logger.info(f"Metrics exposed on port {port}")

    def value(self, name: str, labels: Optional[Mapping[str, str]] = None) -> float:
        found = self.registry.get_sample_value(name, dict(labels) if labels else None)
        return 0.0 if found is None else found


class EventChannel:
    """
    Bounded queue of events drained to a text stream by one writer thread.

    Each event is one JSON line {ts, kind, payload}. emit blocks while the
    queue is full, so no event is dropped.
    """

    KINDS = ("prediction", "forecast", "drift", "update")
    _END = object()

    def __init__(self, stream: TextIO, queue_size: int = 1024):
        self.stream = stream
        self.counts: Dict[str, int] = {kind: 0 for kind in self.KINDS}
        self._queue: "queue.Queue[Any]" = queue.Queue(maxsize=queue_size)
        self._thread = threading.Thread(target=self._drain, name="drst-events", daemon=True)
        self._closed = False
        self._thread.start()

    def emit(self, kind: str, payload: Mapping[str, Any], ts: int) -> None:
        if kind not in self.KINDS:
            raise ValidationError(f"Unknown event kind '{kind}'")
        if self._closed:
            raise StreamClosed("Event channel is closed")
        self.counts[kind] += 1
        self._queue.put({"ts": ts, "kind": kind, "payload": dict(payload)})

    def _drain(self) -> None:
        while True:
            event = self._queue.get()
            if event is self._END:
                break
            try:
                self.stream.write(json.dumps(event, sort_keys=True) + "\n")
            except (OSError, TypeError, ValueError) as e:
                log_error(e)
        try:
            self.stream.flush()
        except OSError as e:
            log_error(e)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._queue.put(self._END)
        self._thread.join()


@dataclass
class ServingSummary:
    samples: int = 0
    predictions: int = 0
    errors: int = 0
    checks: int = 0
    forecasts: int = 0
    gaps: int = 0
    updates: List[UpdateDecision] = field(default_factory=list)
    final_version: Optional[int] = None
    stopped: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "samples": self.samples,
            "predictions": self.predictions,
            "errors": self.errors,
            "checks": self.checks,
            "forecasts": self.forecasts,
            "gaps": self.gaps,
            "updates": [u.to_dict() for u in self.updates],
            "final_version": self.final_version,
            "stopped": self.stopped,
        }


class ServingLoop:
    """
    Online inference with drift-triggered retraining.

    One thread owns the windows and the model reference. In replay-fast mode
    (check_every_samples > 0) checks run every N samples, retraining is
    synchronous and event timestamps are record timestamps. Otherwise checks
    run every check_every_s wall-clock seconds, retraining runs on a single
    worker and checks pause until the new model is swapped in.
    """

    def __init__(self, registry: ModelRegistry, drift: DriftConfig, lattice: ConfigLattice,
                 events: EventChannel, kpi: str = "throughput_mbps",
                 metrics: Optional[ServingMetrics] = None, forecast_every_s: Optional[int] = None,
                 seed: int = 0, clock=time.monotonic, wall_time=time.time):
        self.registry = registry
        self.drift = drift
        self.lattice = lattice
        self.events = events
        self.kpi = kpi
        self.metrics = metrics or ServingMetrics()
        self.seed = seed
        self._clock = clock
        self._wall_time = wall_time
        self._stop = threading.Event()
        self._reader: Optional[StreamReader] = None

        self.version, artifact = registry.latest("mlp")
        self.model = artifact.model
        self.schema: FeatureSchema = artifact.schema
        if artifact.kpi != kpi:
            logger.warning(f"Serving model predicts '{artifact.kpi}', labels are read from '{kpi}'")
        self.metrics.version.set(self.version)

        self.forecaster: Optional[RollingForecaster] = None
        self.forecast_schema: Optional[FeatureSchema] = None
        if forecast_every_s:
            self._load_forecaster(forecast_every_s)

        self.state = DriftState.empty(drift.window_size)
        self.history: deque = deque(maxlen=drift.window_size)
        # Retraining set: the last retrain_size records that carry the KPI
        self.labeled: deque = deque(maxlen=drift.retrain_size)
        self.summary = ServingSummary(final_version=self.version)
        self._since_check = 0
        self._last_check = clock()
        self._executor: Optional[ThreadPoolExecutor] = None
        self._pending: Optional[Future] = None
        self._pending_meta: Optional[Tuple[Severity, int, float]] = None
        logger.info(f"Serving model version {self.version} ({self.schema.arity} features)")

    def _load_forecaster(self, every_s: int) -> None:
        candidates = []
        for kind in ("lstm", "dirrec"):
            try:
                candidates.append(self.registry.latest(kind))
            except EmptyRegistry:
                continue
        if not candidates:
            logger.info("No forecaster published; forecasts disabled")
            return
        version, artifact = max(candidates, key=lambda item: item[0])
        self.forecaster = RollingForecaster(artifact.model, every_s)
        self.forecast_schema = artifact.schema
        logger.info(f"Forecasting with {artifact.kind} version {version} every {every_s} s")

    def _ts(self, record: TraceRecord) -> int:
        if self.drift.replay_fast:
            return record.timestamp_ms
        return int(self._wall_time() * 1000)

    def stop(self) -> None:
        """Ask the loop to finish after the current sample."""
        self._stop.set()
        if self._reader is not None:
            self._reader.stop()

    @property
    def stopped(self) -> bool:
        return self._stop.is_set()

    def process(self, record: TraceRecord) -> None:
        """Handle one sample; per-sample errors are logged and counted."""
        self.summary.samples += 1
        self.metrics.samples.inc()
        self._apply_finished_update(record)
        try:
            vector = normalize(record, self.schema)
            started = time.perf_counter()
            value = mlp_forward(self.model, vector)
            self.metrics.latency.observe(time.perf_counter() - started)
        except DrstError as e:
            self.summary.errors += 1
            self.metrics.errors.inc()
            logger.warning(f"Sample at {record.timestamp_ms} skipped: {e}")
            return

        payload: Dict[str, Any] = {"timestamp_ms": record.timestamp_ms, "value": value, "version": self.version}
        truth = record.kpi(self.kpi)
        if truth is not None:
            payload["truth"] = truth
        self.events.emit("prediction", payload, self._ts(record))
        self.summary.predictions += 1
        self.metrics.predictions.inc()

        self.state.current.push(vector)
        self.history.append(record)
        if truth is not None:
            self.labeled.append(record)
        self._forecast(record)
        if self._check_due():
            self._check(record)

    def _forecast(self, record: TraceRecord) -> None:
        if self.forecaster is None:
            return
        try:
            emitted = self.forecaster.push(normalize(record, self.forecast_schema))
        except DrstError as e:
            logger.warning(f"Forecast input at {record.timestamp_ms} skipped: {e}")
            return
        if emitted is None:
            return
        self._emit_forecast(emitted, self._ts(record))

    def _emit_forecast(self, emitted: Any, ts: int) -> None:
        if isinstance(emitted, ForecastGap):
            self.summary.gaps += 1
        else:
            self.summary.forecasts += 1
        payload = emitted.to_dict()
        payload["version"] = self.version
        self.events.emit("forecast", payload, ts)

    def _check_due(self) -> bool:
        self._since_check += 1
        if self._pending is not None:
            return False
        if self.drift.replay_fast:
            if self._since_check < self.drift.check_every_samples:
                return False
        elif self._clock() - self._last_check < self.drift.check_every_s:
            return False
        self._since_check = 0
        self._last_check = self._clock()
        return True

    def _check(self, record: TraceRecord) -> None:
        if not self.state.current.is_full:
            return
        if not self.state.reference.is_full:
            self.state.rebase()
            logger.info(f"Reference window set at {record.timestamp_ms}")
            return

        score = js_divergence(self.state.reference, self.state.current, self.drift.bins)
        severity = classify_severity(score, self.drift) if score > self.drift.delta else Severity.NONE
        self.state.last_score = score
        self.state.severity = severity
        self.summary.checks += 1
        self.metrics.checks.inc()
        self.metrics.divergence.set(score)
        self.events.emit("drift", {"timestamp_ms": record.timestamp_ms, "score": score,
                                   "severity": severity.value, "version": self.version}, self._ts(record))
        if severity == Severity.NONE:
            logger.debug(f"Drift check at {record.timestamp_ms}: {score:.4f}")
            return

        logger.info(f"Drift {score:.4f} at {record.timestamp_ms}: severity {severity.value}")
        recent = list(self.labeled)
        if self.drift.replay_fast:
            decision = self._retrain(severity, recent, record.timestamp_ms, score)
            self._finish_update(severity, record.timestamp_ms, score, decision, record)
            return
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="drst-retrain")
        self._pending = self._executor.submit(self._retrain, severity, recent, record.timestamp_ms, score)
        self._pending_meta = (severity, record.timestamp_ms, score)

    def _retrain(self, severity: Severity, recent: List[TraceRecord], triggered_at: int,
                 score: float) -> UpdateDecision:
        lattice = replace(self.lattice, base=self.model.config) if self.model.config else self.lattice
        try:
            return dispatch_update(severity, recent, self.registry, lattice, self.kpi, self.schema.names,
                                   self.schema.method, self.version, triggered_at, score,
                                   self.drift.window_size, self.seed)
        except InsufficientData as e:
            logger.warning(f"Update BLOCKED: {e.message}")
            return UpdateDecision(severity, severity.budget, triggered_at, score, "blocked",
                                  parent_version=self.version, axes=severity.budget.axes, error=e.error_code)
        except TrainingFailed as e:
            log_error(e, logging.WARNING, include_traceback=False)
            return UpdateDecision(severity, severity.budget, triggered_at, score, "failed",
                                  parent_version=self.version, axes=severity.budget.axes, error=e.error_code)

    def _apply_finished_update(self, record: TraceRecord) -> None:
        if self._pending is None or not self._pending.done():
            return
        future, self._pending = self._pending, None
        severity, triggered_at, score = self._pending_meta
        try:
            decision = future.result()
        except Exception as e:
            log_error(e)
            decision = UpdateDecision(severity, severity.budget, triggered_at, score, "failed",
                                      parent_version=self.version, axes=severity.budget.axes,
                                      error=TrainingFailed.code)
        self._finish_update(severity, triggered_at, score, decision, record)

    def _finish_update(self, severity: Severity, triggered_at: int, score: float,
                       decision: UpdateDecision, record: TraceRecord) -> None:
        window = list(self.history)
        if decision.status == "published" and decision.artifact is not None:
            self.model = decision.artifact.model
            self.schema = decision.artifact.schema
            self.version = decision.version
            self.metrics.version.set(self.version)
            self.summary.final_version = self.version
            # Windows are re-expressed in the refitted schema
            self.state.rebase([normalize(r, self.schema) for r in window])
        else:
            self.state.rebase()
        self.summary.updates.append(decision)
        self.metrics.updates.labels(status=decision.status).inc()
        self.events.emit("update", decision.to_dict(), self._ts(record))

    def run(self, source: Union[StreamReader, Iterable[TraceRecord]]) -> ServingSummary:
        """
        Serve until the source ends or stop() is called.

        Returns:
            ServingSummary: Counts, update decisions and the final model version
        """
        if isinstance(source, StreamReader):
            self._reader = source
            records = self._drain_reader(source)
        else:
            records = iter(source)
        try:
            for record in records:
                if self.stopped:
                    break
                self.process(record)
        finally:
            self._shutdown()
        return self.summary

    def _drain_reader(self, reader: StreamReader) -> Iterable[TraceRecord]:
        while not self.stopped:
            try:
                yield reader.next_record(timeout=0.2)
            except queue.Empty:
                continue
            except StreamClosed:
                return

    def _shutdown(self) -> None:
        if self._executor is not None:
            # A running publish completes before the process exits
            self._executor.shutdown(wait=True)
            if self._pending is not None and self.history:
                self._apply_finished_update(self.history[-1])
        if self.forecaster is not None:
            gap = self.forecaster.finish()
            if gap is not None:
                self._emit_forecast(gap, gap.timestamp_ms)
        self.summary.stopped = self.stopped
        logger.info(f"Served {self.summary.samples} samples, {self.summary.predictions} predictions, "
                    f"{len(self.summary.updates)} updates; final version {self.summary.final_version}")


def run_loop(source: Union[StreamReader, Iterable[TraceRecord]], registry: ModelRegistry, config: Any,
             events: EventChannel, metrics: Optional[ServingMetrics] = None) -> ServingSummary:
    """
    Build a serving loop from a run configuration and serve a source to the end.

    Args:
        source: Records or a started StreamReader
        registry (ModelRegistry): Holds the initial model and receives updates
        config (RunConfig): Effective configuration
        events (EventChannel): Output channel
        metrics (Optional[ServingMetrics]): Metrics to update

    Returns:
        ServingSummary: What the loop did
    """
    drift = DriftConfig.from_dict(config.section("drift"))
    lattice = ConfigLattice.from_sections(config.section("mlp"), config.section("grid"))
    every = config.get("forecast.every_s") if config.get("forecast.enabled") else None
    loop = ServingLoop(registry, drift, lattice, events, config.get("serve.kpi"), metrics, every,
                       config.get("mlp.seed"))
    return loop.run(source)


# Functions for the drst CLI

def serve_cli(args: List[str]) -> int:
    """
    Serve a trace or a live stream with drift-triggered retraining, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser
    from drst.commands.config import load_config
    from drst.commands.trace_ingest import listen, replay

    parser = build_parser("drst serve", "Online inference with drift detection and retraining")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--trace", help="Trace file to replay (JSON lines)")
    source.add_argument("--listen", help="host:port to accept a record stream on")
    parser.add_argument("--model-dir", help="Model registry root (default registry.path)")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--speed", type=float, help="Replay speed; 0 replays as fast as possible")
    parser.add_argument("--check-every-samples", type=int,
                        help="Check drift every N samples with synchronous retraining")
    parser.add_argument("--metrics-port", type=int, help="Expose Prometheus metrics on this port")
    parser.add_argument("--events", help="Event log path (default: stdout)")
    parser.add_argument("--kpi", help="KPI carried as ground truth")
    parser.add_argument("--delta", type=float, help="Drift threshold")
    parser.add_argument("--window-size", type=int, help="Drift window size M")
    parser.add_argument("--bins", type=int, help="Histogram bins per feature")
    options = parser.parse_args(args)

    overrides = {
        "registry.path": options.model_dir,
        "ingest.speed": options.speed,
        "drift.check_every_samples": options.check_every_samples,
        "drift.window_size": options.window_size,
        "drift.bins": options.bins,
        "serve.metrics_port": options.metrics_port,
        "serve.kpi": options.kpi,
    }
    if options.delta is not None:
        overrides["drift.delta"] = options.delta
        overrides["drift.severity_cuts"] = [options.delta, 2 * options.delta, 4 * options.delta]
    config = load_config(options.config, overrides)
    drift = DriftConfig.from_dict(config.section("drift"))

    floor = estimator_floor(drift.bins, drift.window_size)
    if floor > drift.delta / 2:
        logger.warning(f"JS estimator floor {floor:.4f} exceeds half of delta ({drift.delta}); "
                       f"raise drift.window_size or lower drift.bins")

    metrics = ServingMetrics()
    if config.get("serve.metrics_port"):
        metrics.serve(config.get("serve.metrics_port"))

    if options.trace:
        speed = config.get("ingest.speed")
        jitter = config.get("ingest.jitter_tolerance_ms")
        reader = StreamReader(lambda sink: replay(options.trace, speed, sink, jitter), config.get("ingest.queue_size"))
    else:
        reader = StreamReader(lambda sink: listen(options.listen, sink), config.get("ingest.queue_size"))

    stream = open(options.events, 'w', encoding='utf-8') if options.events else sys.stdout
    events = EventChannel(stream, config.get("serve.event_queue_size"))
    try:
        lattice = ConfigLattice.from_sections(config.section("mlp"), config.section("grid"))
        every = config.get("forecast.every_s") if config.get("forecast.enabled") else None
        loop = ServingLoop(ModelRegistry(config.get("registry.path")), drift, lattice, events,
                           config.get("serve.kpi"), metrics, every, config.get("mlp.seed"))

        def handle_signal(signum, frame):
            logger.info(f"Received signal {signum}; draining")
            loop.stop()

        signal.signal(signal.SIGINT, handle_signal)
        signal.signal(signal.SIGTERM, handle_signal)
        summary = loop.run(reader.start())
    finally:
        events.close()
        if options.events:
            stream.close()

    if options.events:
        json.dump(summary.to_dict(), sys.stdout, indent=2)
        sys.stdout.write("\n")
    return 0
