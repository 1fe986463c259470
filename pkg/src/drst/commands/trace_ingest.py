#!/usr/bin/env python3
"""
Trace Ingest

This module parses newline-delimited JSON counter traces, fits and applies the
feature schema that fixes vector order and normalization, keeps sliding windows
of feature vectors, and replays traces with their original pacing.

Wire format, one record per line (blank lines ignored):
  {"ts": 1000, "f": {"llc_load": 0.5}, "kpi": {"throughput_mbps": 900}}
"""

import json
import math
import time
import queue
import socket
import hashlib
import logging
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from types import MappingProxyType
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from drst.commands.error_handler import (
    DegenerateFeature,
    InconsistentFeatureSet,
    MalformedRecord,
    MissingFeature,
    MissingKpi,
    NonFiniteValue,
    NonMonotonicTimestamp,
    StreamClosed,
    ValidationError,
    handle_file_system_error,
)

logger = logging.getLogger("drst.trace_ingest")

DEFAULT_JITTER_TOLERANCE_MS = 10


class NormalizationMethod(str, Enum):
    MINMAX = "minmax"
    ZSCORE = "zscore"


@dataclass(frozen=True)
class TraceRecord:
    """One timestamped sample: counter features and optional ground-truth KPIs."""

    timestamp_ms: int
    features: Mapping[str, float]
    kpis: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "features", MappingProxyType(dict(self.features)))
        if self.kpis is not None:
            object.__setattr__(self, "kpis", MappingProxyType(dict(self.kpis)))

    def kpi(self, name: str) -> Optional[float]:
        if self.kpis is None:
            return None
        return self.kpis.get(name)


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-order, normalized vector matching a FeatureSchema."""

    values: Tuple[float, ...]
    timestamp_ms: int

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names with per-feature normalization statistics.

    For minmax the statistic pair is (min, max); for zscore it is (mean, std).
    """

    names: Tuple[str, ...]
    method: NormalizationMethod
    stats: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError("Schema feature names must be unique")
        if len(self.stats) != len(self.names):
            raise ValidationError("Schema needs statistics for every feature")
        for name, (a, b) in zip(self.names, self.stats):
            if self.method == NormalizationMethod.MINMAX and not b > a:
                raise DegenerateFeature(f"Feature '{name}' has max <= min", details={"feature": name})
            if self.method == NormalizationMethod.ZSCORE and not b > 0:
                raise DegenerateFeature(f"Feature '{name}' has zero std", details={"feature": name})

    @property
    def arity(self) -> int:
        return len(self.names)

    @cached_property
    def _offsets(self) -> np.ndarray:
        return np.array([a for a, _ in self.stats], dtype=np.float64)

    @cached_property
    def _scales(self) -> np.ndarray:
        if self.method == NormalizationMethod.MINMAX:
            return np.array([b - a for a, b in self.stats], dtype=np.float64)
        return np.array([b for _, b in self.stats], dtype=np.float64)

    def to_dict(self) -> Dict[str, Any]:
        if self.method == NormalizationMethod.MINMAX:
            features = [{"name": n, "min": a, "max": b} for n, (a, b) in zip(self.names, self.stats)]
        else:
            features = [{"name": n, "mean": a, "std": b} for n, (a, b) in zip(self.names, self.stats)]
        return {"method": self.method.value, "features": features}

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "FeatureSchema":
        try:
            method = NormalizationMethod(document["method"])
            keys = ("min", "max") if method == NormalizationMethod.MINMAX else ("mean", "std")
            names = tuple(str(item["name"]) for item in document["features"])
            stats = tuple((float(item[keys[0]]), float(item[keys[1]])) for item in document["features"])
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Invalid schema document: {e}", "INVALID_SCHEMA") from e
        return cls(names, method, stats)

    def digest(self) -> str:
        """SHA-256 of the canonical schema document; stored with every model."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "FeatureSchema":
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def _numeric(value: Any, name: str, where: Dict[str, Any]) -> float:
    if isinstance(value, bool):
        raise MalformedRecord(f"Value of '{name}' is not a number", details={**where, "key": name})
    if isinstance(value, (int, float)):
        try:
            number = float(value)
        except OverflowError:
            number = math.inf
    elif isinstance(value, str):
        try:
            number = float(value)
        except ValueError:
            raise MalformedRecord(f"Value of '{name}' is not a number: {value!r}", details={**where, "key": name})
    else:
        raise MalformedRecord(f"Value of '{name}' is not a number", details={**where, "key": name})

    if not math.isfinite(number):
        raise NonFiniteValue(f"Non-finite value for '{name}'", details={**where, "key": name})
    return number


def _numeric_map(document: Any, field: str, where: Dict[str, Any]) -> Dict[str, float]:
    if not isinstance(document, dict):
        raise MalformedRecord(f"Field '{field}' must be an object", details=where)
    return {str(k): _numeric(v, str(k), where) for k, v in document.items()}


def parse_record(line: str, position: Optional[int] = None) -> TraceRecord:
    """
    Parse one wire-format line.

    Args:
        line (str): One complete JSON record
        position (Optional[int]): 1-based line number, reported in errors

    Returns:
        TraceRecord: The parsed record; unknown keys are ignored

    Raises:
        MalformedRecord: If the line is not a valid record
        NonFiniteValue: If a feature or KPI is NaN or infinite
    """
    where: Dict[str, Any] = {"position": position} if position is not None else {}
    try:
        document = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedRecord(f"Invalid JSON: {e.msg}", details={**where, "column": e.colno}) from e

    if not isinstance(document, dict):
        raise MalformedRecord("Record must be a JSON object", details=where)

    ts = document.get("ts")
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise MalformedRecord("Field 'ts' must be an integer", details=where)

    features = _numeric_map(document.get("f"), "f", where)
    kpis = document.get("kpi")
    return TraceRecord(ts, features, _numeric_map(kpis, "kpi", where) if kpis is not None else None)


def format_record(record: TraceRecord) -> str:
    """Serialize a record as one wire-format line (no trailing newline)."""
    document: Dict[str, Any] = {"ts": record.timestamp_ms, "f": dict(record.features)}
    if record.kpis is not None:
        document["kpi"] = dict(record.kpis)
    return json.dumps(document, separators=(",", ":"))


def iter_lines(stream: Iterable[Union[str, bytes]]) -> Iterator[TraceRecord]:
    """Parse records from an iterable of text or UTF-8 byte lines, skipping blank lines."""
    for position, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as e:
                raise MalformedRecord(f"Line is not valid UTF-8: {e.reason}",
                                      details={"position": position, "offset": e.start}) from e
        if not line.strip():
            continue
        yield parse_record(line, position)


def iter_trace(path: str) -> Iterator[TraceRecord]:
    """Lazily parse a trace file."""
    try:
        with open(path, 'rb') as f:
            yield from iter_lines(f)
    except OSError as e:
        raise handle_file_system_error(e, path) from e


def read_trace(path: str) -> List[TraceRecord]:
    """Read a whole trace file into memory."""
    return list(iter_trace(path))


def write_trace(target: Union[str, TextIO], records: Iterable[TraceRecord]) -> int:
    """
    Write records in the wire format.

    Args:
        target: A path or an open text stream
        records: The records to write

    Returns:
        int: Number of records written
    """
    if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
        with open(target, 'w', encoding='utf-8') as f:
            return write_trace(f, records)
    count = 0
    for record in records:
        target.write(format_record(record) + "\n")
        count += 1
    return count


def project(record: TraceRecord, names: Iterable[str]) -> TraceRecord:
    """Keep only the named features of a record."""
    keep = set(names)
    return TraceRecord(record.timestamp_ms, {k: v for k, v in record.features.items() if k in keep}, record.kpis)


def fit_schema(records: Sequence[TraceRecord],
               method: Union[str, NormalizationMethod] = NormalizationMethod.MINMAX) -> FeatureSchema:
    """
    Fit normalization statistics over a set of records.

    Feature order is lexicographic and the statistics are computed over sorted
    values, so any permutation of the records yields the same schema.

    Args:
        records: At least two records sharing one feature-name set
        method: 'minmax' or 'zscore'

    Returns:
        FeatureSchema: The fitted schema

    Raises:
        InconsistentFeatureSet: If records carry different feature names
        DegenerateFeature: If a feature is constant
    """
    method = NormalizationMethod(method)
    if len(records) < 2:
        raise ValidationError("At least two records are needed to fit a schema", "INSUFFICIENT_RECORDS")

    expected = set(records[0].features)
    for index, record in enumerate(records):
        if set(record.features) != expected:
            diff = sorted(expected.symmetric_difference(record.features))
            raise InconsistentFeatureSet(
                f"Record {index} has a different feature set",
                details={"index": index, "differing": diff[:10]}
            )

    names = tuple(sorted(expected))
    stats = []
    for name in names:
        column = np.sort(np.array([record.features[name] for record in records], dtype=np.float64))
        if method == NormalizationMethod.MINMAX:
            stats.append((float(column[0]), float(column[-1])))
        else:
            stats.append((float(np.mean(column)), float(np.std(column))))

    schema = FeatureSchema(names, method, tuple(stats))
    logger.debug(f"Fitted {method.value} schema over {len(records)} records, {schema.arity} features")
    return schema


def _ordered_values(record: TraceRecord, schema: FeatureSchema) -> np.ndarray:
    try:
        return np.array([record.features[name] for name in schema.names], dtype=np.float64)
    except KeyError as e:
        raise MissingFeature(f"Record is missing feature {e.args[0]}",
                             details={"feature": e.args[0], "timestamp_ms": record.timestamp_ms}) from e


def _scale(raw: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    scaled = (raw - schema._offsets) / schema._scales
    if schema.method == NormalizationMethod.MINMAX:
        # Live data may leave the training range; drift detection reacts, not the normalizer.
        scaled = np.clip(scaled, 0.0, 1.0)
    return scaled


def normalize(record: TraceRecord, schema: FeatureSchema) -> FeatureVector:
    """
    Map a record onto the schema's fixed-order, normalized vector.

    Raises:
        MissingFeature: If the record lacks a schema feature
    """
    scaled = _scale(_ordered_values(record, schema), schema)
    return FeatureVector(tuple(float(v) for v in scaled), record.timestamp_ms)


def denormalize(vector: FeatureVector, schema: FeatureSchema) -> Dict[str, float]:
    """Invert normalize for values that were not clamped."""
    raw = vector.as_array() * schema._scales + schema._offsets
    return {name: float(v) for name, v in zip(schema.names, raw)}


def to_matrix(records: Sequence[TraceRecord], schema: FeatureSchema) -> np.ndarray:
    """Normalize many records into an (n, arity) matrix."""
    if not records:
        return np.zeros((0, schema.arity))
    raw = np.vstack([_ordered_values(record, schema) for record in records])
    return _scale(raw, schema)


def kpi_series(records: Sequence[TraceRecord], kpi: str) -> np.ndarray:
    """Extract one KPI as an array; every record must carry it."""
    values = []
    for record in records:
        value = record.kpi(kpi)
        if value is None:
            raise MissingKpi(f"Record at {record.timestamp_ms} has no '{kpi}'", details={"kpi": kpi})
        values.append(value)
    return np.asarray(values, dtype=np.float64)


class SlidingWindow:
    """Ring of the most recent feature vectors, in arrival order."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValidationError(f"Window capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def is_full(self) -> bool:
        return len(self._entries) == self.capacity

    def push(self, vector: FeatureVector) -> Optional[Tuple[FeatureVector, ...]]:
        """Append a vector; returns the window contents once the window is full."""
        self._entries.append(vector)
        return self.snapshot() if self.is_full else None

    def snapshot(self) -> Tuple[FeatureVector, ...]:
        return tuple(self._entries)

    def as_array(self) -> np.ndarray:
        return np.array([vector.values for vector in self._entries], dtype=np.float64)

    def replace(self, vectors: Iterable[FeatureVector]) -> None:
        self._entries.clear()
        self._entries.extend(vectors)

    def clear(self) -> None:
        self._entries.clear()


@dataclass
class ReplaySummary:
    count: int
    duration_ms: float
    max_jitter_ms: float

    def within_tolerance(self, tolerance_ms: float = DEFAULT_JITTER_TOLERANCE_MS) -> bool:
        return self.max_jitter_ms <= tolerance_ms


def replay(source: Union[str, Iterable[TraceRecord]], speed: float, sink: Callable[[TraceRecord], Any],
           jitter_tolerance_ms: float = DEFAULT_JITTER_TOLERANCE_MS,
           clock: Callable[[], float] = time.monotonic,
           sleep: Callable[[float], None] = time.sleep) -> ReplaySummary:
    """
    Deliver trace records to a sink, reproducing their timing.

    Args:
        source: A trace file path or an iterable of records
        speed (float): 1.0 replays the original gaps, 2.0 twice as fast, 0 as fast as possible
        sink: Called with each record in timestamp order
        jitter_tolerance_ms (float): Per-gap lateness above which a warning is logged
        clock: Monotonic clock in seconds
        sleep: Sleep function in seconds

    Returns:
        ReplaySummary: Count, wall-clock duration and worst lateness

    Raises:
        MalformedRecord: If a line does not parse (position in details)
        NonMonotonicTimestamp: If a timestamp does not increase
    """
    if speed < 0:
        raise ValidationError(f"Replay speed must be >= 0, got {speed}")

    records = iter_trace(source) if isinstance(source, str) else iter(source)
    start = clock()
    first_ts: Optional[int] = None
    previous_ts: Optional[int] = None
    count = 0
    max_jitter = 0.0
    elapsed_ms = 0.0

    for record in records:
        if previous_ts is not None and record.timestamp_ms <= previous_ts:
            raise NonMonotonicTimestamp(
                f"Timestamp {record.timestamp_ms} does not follow {previous_ts}",
                details={"index": count, "timestamp_ms": record.timestamp_ms, "previous_ms": previous_ts}
            )
        if first_ts is None:
            first_ts = record.timestamp_ms
        previous_ts = record.timestamp_ms

        if speed > 0:
            target_ms = (record.timestamp_ms - first_ts) / speed
            now_ms = (clock() - start) * 1000.0
            if target_ms > now_ms:
                sleep((target_ms - now_ms) / 1000.0)
            elapsed_ms = (clock() - start) * 1000.0
            jitter = max(0.0, elapsed_ms - target_ms)
            if jitter > jitter_tolerance_ms:
                logger.warning(f"Replay late by {jitter:.1f} ms at ts={record.timestamp_ms}")
            max_jitter = max(max_jitter, jitter)
        else:
            elapsed_ms = (clock() - start) * 1000.0

        sink(record)
        count += 1

    summary = ReplaySummary(count, elapsed_ms, max_jitter)
    logger.info(f"Replayed {count} records in {elapsed_ms:.1f} ms (max jitter {max_jitter:.1f} ms)")
    return summary


def parse_address(address: str) -> Tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValidationError(f"Address must be host:port, got {address!r}", "INVALID_ADDRESS")
    return host, int(port)


def listen(address: str, sink: Callable[[TraceRecord], Any]) -> int:
    """
    Accept one TCP connection and deliver its wire-format lines to a sink.

    Returns:
        int: Number of records delivered before the peer closed the connection
    """
    host, port = parse_address(address)
    count = 0
    previous_ts: Optional[int] = None
    with socket.create_server((host, port)) as server:
        logger.info(f"Listening for records on {host}:{port}")
        connection, peer = server.accept()
        logger.info(f"Stream connected from {peer[0]}:{peer[1]}")
        with connection, connection.makefile('rb') as stream:
            for record in iter_lines(stream):
                if previous_ts is not None and record.timestamp_ms <= previous_ts:
                    raise NonMonotonicTimestamp(f"Timestamp {record.timestamp_ms} does not follow {previous_ts}")
                previous_ts = record.timestamp_ms
                sink(record)
                count += 1
    return count


class _Stopped(Exception):
    pass


class StreamReader:
    """
    Bounded single-producer queue between a record source and the serving loop.

    The producer is any callable taking a sink, such as
    ``lambda sink: replay(path, speed, sink)``.
    """

    _END = object()

    def __init__(self, producer: Callable[[Callable[[TraceRecord], Any]], Any], queue_size: int = 1024):
        self._producer = producer
        self._queue: "queue.Queue[Any]" = queue.Queue(maxsize=queue_size)
        self._stop = threading.Event()
        self._error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._run, name="drst-producer", daemon=True)

    @classmethod
    def from_records(cls, records: Iterable[TraceRecord], queue_size: int = 1024) -> "StreamReader":
        def produce(sink: Callable[[TraceRecord], Any]) -> None:
            for record in records:
                sink(record)
        return cls(produce, queue_size)

    def start(self) -> "StreamReader":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()

    def _put(self, item: Any) -> None:
        while True:
            if self._stop.is_set():
                raise _Stopped()
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def _run(self) -> None:
        try:
            self._producer(self._put)
        except _Stopped:
            return
        except BaseException as e:
            self._error = e
        try:
            self._put(self._END)
        except _Stopped:
            pass

    def next_record(self, timeout: Optional[float] = None) -> TraceRecord:
        """
        Take the next record.

        Raises:
            StreamClosed: When the producer finished
            queue.Empty: When timeout elapses without a record
        """
        item = self._queue.get(timeout=timeout)
        if item is self._END:
            if self._error is not None:
                raise self._error
            raise StreamClosed("Record stream ended")
        return item

    def __iter__(self) -> Iterator[TraceRecord]:
        while True:
            try:
                yield self.next_record()
            except StreamClosed:
                return

    def join(self, timeout: Optional[float] = None) -> None:
        self._thread.join(timeout)


@dataclass
class Dataset:
    """Normalized inputs, KPI targets and timestamps under one schema."""

    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return int(self.y.size)


def build_dataset(records: Sequence[TraceRecord], kpi: str,
                  method: Union[str, NormalizationMethod] = NormalizationMethod.MINMAX,
                  features: Optional[Sequence[str]] = None,
                  schema: Optional[FeatureSchema] = None) -> Dataset:
    """
    Turn labeled records into a training matrix.

    Args:
        records: Records carrying the KPI
        kpi (str): Target KPI name
        method: Normalization method when a schema has to be fitted
        features: Restrict the schema to these feature names
        schema: Use this schema instead of fitting one

    Returns:
        Dataset: Inputs (n, arity), targets (n,) and timestamps (n,)
    """
    if schema is None:
        fitted_on = [project(record, features) for record in records] if features else list(records)
        schema = fit_schema(fitted_on, method)
    return Dataset(
        schema,
        to_matrix(records, schema),
        kpi_series(records, kpi),
        np.array([record.timestamp_ms for record in records], dtype=np.int64),
    )
