#!/usr/bin/env python3
"""
Evaluation Metrics

Accuracy metrics for KPI inference and forecasting, and the benchmark harness
that trains each model kind on a chronological split and scores it on the
held-out tail and on unseen traces.

Benchmark CSV columns (fixed):
  model, trace, split, n, r2, mae, mape, acc5log, acc_t1 .. acc_tH, latency_ms_per_sample
"""

import os
import csv
import sys
import json
import math
import time
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from drst.commands.error_handler import (
    AlignmentGap,
    ConstantTruth,
    EmptyData,
    HorizonOutOfRange,
    LengthMismatch,
    NonPositiveValue,
    ValidationError,
    ZeroTruth,
    handle_file_system_error,
)
from drst.commands.forecaster import (
    LstmConfig,
    dirrec_train,
    forecast,
    lstm_train,
    make_windows,
    predict_windows,
)
from drst.commands.nn_core import MlpConfig, mlp_forward, mlp_predict, mlp_train
from drst.commands.trace_ingest import build_dataset, read_trace

logger = logging.getLogger("drst.eval_metrics")

DEFAULT_TOLERANCE = 0.05


def _pair(pred: Sequence[float], truth: Sequence[float], minimum: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise LengthMismatch(f"Predictions and truth differ in length ({p.size} vs {t.size})")
    if p.size < minimum:
        raise LengthMismatch(f"Need at least {minimum} samples, got {p.size}")
    return p, t


def r2(pred: Sequence[float], truth: Sequence[float]) -> float:
    """
    Coefficient of determination, 1 - SS_res / SS_tot.

    Raises:
        ConstantTruth: If truth has zero variance
    """
    p, t = _pair(pred, truth, 2)
    ss_tot = math.fsum((t - np.mean(t)) ** 2)
    if ss_tot == 0.0:
        raise ConstantTruth("R2 is undefined for constant truth")
    return 1.0 - math.fsum((t - p) ** 2) / ss_tot


def acc5log(pred: Sequence[float], truth: Sequence[float], tol: float = DEFAULT_TOLERANCE) -> float:
    """
    Fraction of samples with |ln(pred) - ln(truth)| <= ln(1 + tol).

    Raises:
        NonPositiveValue: If any prediction or truth is <= 0
    """
    p, t = _pair(pred, truth)
    if np.any(p <= 0) or np.any(t <= 0):
        raise NonPositiveValue("Log accuracy needs strictly positive values")
    hits = np.abs(np.log(p) - np.log(t)) <= math.log1p(tol)
    return float(np.count_nonzero(hits)) / p.size


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _pair(pred, truth)
    return math.fsum(np.abs(p - t)) / p.size


def mape_with_exclusions(pred: Sequence[float], truth: Sequence[float]) -> Tuple[float, int]:
    """
    Mean absolute percentage error as a fraction, skipping zero truths.

    Returns:
        Tuple[float, int]: The error and the number of excluded samples

    Raises:
        ZeroTruth: If every truth is zero
    """
    p, t = _pair(pred, truth)
    keep = t != 0
    excluded = int(p.size - np.count_nonzero(keep))
    if excluded == p.size:
        raise ZeroTruth("MAPE is undefined when every truth is zero")
    if excluded:
        logger.debug(f"MAPE excluded {excluded} zero-truth samples")
    return math.fsum(np.abs((p[keep] - t[keep]) / t[keep])) / (p.size - excluded), excluded


def mape(pred: Sequence[float], truth: Sequence[float]) -> float:
    return mape_with_exclusions(pred, truth)[0]


def acc_at_horizon(forecasts: Sequence[Any], truth: Mapping[int, float], k: int, interval_ms: int,
                   tol: float = DEFAULT_TOLERANCE) -> float:
    """
    Log accuracy of the k-th forecast step.

    Args:
        forecasts: ForecastResult objects
        truth: KPI value by timestamp
        k (int): 1-based horizon step
        interval_ms (int): Sampling interval; step k of a forecast made at t
            targets t + k * interval_ms
        tol (float): Relative tolerance

    Raises:
        HorizonOutOfRange: If k is outside 1..H of some forecast
        AlignmentGap: If a target timestamp has no truth
    """
    if not forecasts:
        raise EmptyData("No forecasts to score")
    predicted, actual = [], []
    for result in forecasts:
        if not 1 <= k <= len(result.values):
            raise HorizonOutOfRange(f"Step {k} is outside horizon 1..{len(result.values)}")
        ts = result.base_timestamp_ms + k * interval_ms
        if ts not in truth:
            raise AlignmentGap(f"No truth at {ts} for step {k}", details={"timestamp_ms": ts})
        predicted.append(result.values[k - 1])
        actual.append(truth[ts])
    return acc5log(predicted, actual, tol)


def horizon_accuracy(pred: np.ndarray, truth: np.ndarray, tol: float = DEFAULT_TOLERANCE) -> List[float]:
    """acc5log per column of aligned (m, H) forecast and truth matrices."""
    if pred.shape != truth.shape or pred.ndim != 2:
        raise LengthMismatch("Forecast and truth matrices must share an (m, H) shape")
    return [acc5log(pred[:, h], truth[:, h], tol) for h in range(pred.shape[1])]


@dataclass
class EvalReport:
    n: int
    r2: Optional[float]
    mae: float
    mape: Optional[float]
    acc5log: Optional[float]
    acc_at: List[float] = field(default_factory=list)
    latency_ms_per_sample: float = 0.0
    mape_excluded: int = 0


def evaluate(pred: Sequence[float], truth: Sequence[float], latency_ms_per_sample: float = 0.0,
             acc_at: Optional[List[float]] = None, tol: float = DEFAULT_TOLERANCE) -> EvalReport:
    """Score predictions; metrics undefined for the data are reported as None."""
    p, t = _pair(pred, truth)
    try:
        r2_value: Optional[float] = r2(p, t)
    except (ConstantTruth, LengthMismatch):
        r2_value = None
    try:
        mape_value, excluded = mape_with_exclusions(p, t)
    except ZeroTruth:
        mape_value, excluded = None, p.size
    try:
        acc: Optional[float] = acc5log(p, t, tol)
    except NonPositiveValue:
        acc = None
    return EvalReport(p.size, r2_value, mae(p, t), mape_value, acc, list(acc_at or []),
                      latency_ms_per_sample, excluded)


# Benchmark harness

@dataclass
class BenchSuite:
    """Which models to train on which trace, and which unseen traces to score."""

    train: str
    models: Tuple[str, ...] = ("mlp", "lstm")
    unseen: Tuple[str, ...] = ()
    kpi: str = "throughput_mbps"
    train_fraction: float = 0.8
    features: Optional[Tuple[str, ...]] = None

    @classmethod
    def from_dict(cls, document: Mapping[str, Any], base_dir: str = ".") -> "BenchSuite":
        def resolve(path: str) -> str:
            return path if os.path.isabs(path) else os.path.join(base_dir, path)
        try:
            suite = cls(
                resolve(document["train"]),
                tuple(document.get("models", ("mlp", "lstm"))),
                tuple(resolve(p) for p in document.get("unseen", ())),
                str(document.get("kpi", "throughput_mbps")),
                float(document.get("train_fraction", 0.8)),
                tuple(document["features"]) if document.get("features") else None,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Invalid bench suite: {e}", "INVALID_SUITE") from e
        unknown = [m for m in suite.models if m not in ("mlp", "lstm", "dirrec")]
        if unknown:
            raise ValidationError(f"Unknown bench models: {', '.join(unknown)}", "INVALID_SUITE")
        if not 0 < suite.train_fraction < 1:
            raise ValidationError("train_fraction must lie in (0, 1)", "INVALID_SUITE")
        return suite


@dataclass
class BenchRow:
    model: str
    trace: str
    split: str
    report: EvalReport

    def as_row(self, horizon: int) -> Dict[str, Any]:
        def fmt(value: Optional[float]) -> str:
            return "" if value is None else f"{value:.6f}"
        row = {
            "model": self.model,
            "trace": self.trace,
            "split": self.split,
            "n": self.report.n,
            "r2": fmt(self.report.r2),
            "mae": fmt(self.report.mae),
            "mape": fmt(self.report.mape),
            "acc5log": fmt(self.report.acc5log),
        }
        for k in range(1, horizon + 1):
            row[f"acc_t{k}"] = fmt(self.report.acc_at[k - 1]) if k <= len(self.report.acc_at) else ""
        row["latency_ms_per_sample"] = fmt(self.report.latency_ms_per_sample)
        return row


def table_columns(horizon: int) -> List[str]:
    return (["model", "trace", "split", "n", "r2", "mae", "mape", "acc5log"]
            + [f"acc_t{k}" for k in range(1, horizon + 1)] + ["latency_ms_per_sample"])


def write_table(rows: Sequence[BenchRow], target: Union[str, TextIO], horizon: int) -> None:
    if isinstance(target, str):
        try:
            with open(target, 'w', encoding='utf-8', newline='') as f:
                write_table(rows, f, horizon)
        except OSError as e:
            raise handle_file_system_error(e, target) from e
        return
    writer = csv.DictWriter(target, fieldnames=table_columns(horizon))
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_row(horizon))


def _dump(dump_dir: Optional[str], name: str, timestamps: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> None:
    if not dump_dir:
        return
    os.makedirs(dump_dir, exist_ok=True)
    truth = truth.reshape(len(timestamps), -1)
    pred = pred.reshape(len(timestamps), -1)
    steps = truth.shape[1]
    header = ["ts"] + ([f"truth_t{k}" for k in range(1, steps + 1)] + [f"pred_t{k}" for k in range(1, steps + 1)]
                       if steps > 1 else ["truth", "pred"])
    with open(os.path.join(dump_dir, f"{name}.csv"), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for ts, t_row, p_row in zip(timestamps, truth, pred):
            writer.writerow([int(ts)] + [repr(float(v)) for v in t_row] + [repr(float(v)) for v in p_row])


def _timed_per_sample(fn, items: Sequence[Any], limit: int = 500) -> float:
    subset = items[:limit]
    if not len(subset):
        return 0.0
    started = time.perf_counter()
    for item in subset:
        fn(item)
    return (time.perf_counter() - started) * 1000.0 / len(subset)


def bench(suite: BenchSuite, config: Any, dump_dir: Optional[str] = None) -> List[BenchRow]:
    """
    Train every suite model on the head of the training trace and score it.

    The training trace is split chronologically at train_fraction; rows are
    produced for the held-out tail ('test') and for each unseen trace
    ('unseen'). Forecasters are scored per horizon step, with step 1 feeding
    the point metrics.

    Args:
        suite (BenchSuite): Traces and model kinds
        config: RunConfig supplying mlp, lstm and ingest settings
        dump_dir: Directory for per-sample prediction CSVs

    Returns:
        List[BenchRow]: One row per (model, trace, split)
    """
    records = read_trace(suite.train)
    cut = int(len(records) * suite.train_fraction)
    head, tail = records[:cut], records[cut:]
    if len(head) < 2 or len(tail) < 2:
        raise EmptyData(f"{suite.train} is too short for a {suite.train_fraction:.0%} split")

    train_set = build_dataset(head, suite.kpi, config.get("ingest.method"), suite.features)
    schema = train_set.schema
    evaluations = [(os.path.basename(suite.train), "test", build_dataset(tail, suite.kpi, schema=schema))]
    for path in suite.unseen:
        evaluations.append((os.path.basename(path), "unseen", build_dataset(read_trace(path), suite.kpi, schema=schema)))

    rows: List[BenchRow] = []
    for kind in suite.models:
        if kind == "mlp":
            model, _ = mlp_train(train_set.X, train_set.y, MlpConfig.from_dict(config.section("mlp")), schema.digest())
            for trace_name, split, data in evaluations:
                pred = mlp_predict(model, data.X)
                latency = _timed_per_sample(lambda x: mlp_forward(model, x), data.X)
                rows.append(BenchRow(kind, trace_name, split, evaluate(pred, data.y, latency)))
                _dump(dump_dir, f"{kind}_{trace_name}_{split}", data.timestamps, data.y, pred)
            continue

        lstm_config = LstmConfig.from_dict(config.section("lstm"))
        windows, targets = make_windows(train_set.X, train_set.y, lstm_config.window, lstm_config.horizon)
        if kind == "lstm":
            model, _ = lstm_train(windows, targets, lstm_config, schema.digest())
        else:
            model, _ = dirrec_train(windows, targets, lstm_config, schema.digest())
        for trace_name, split, data in evaluations:
            eval_windows, eval_targets = make_windows(data.X, data.y, lstm_config.window, lstm_config.horizon)
            pred = predict_windows(model, eval_windows)
            latency = _timed_per_sample(lambda w: forecast(model, w), eval_windows)
            steps = horizon_accuracy(pred, eval_targets)
            rows.append(BenchRow(kind, trace_name, split,
                                 evaluate(pred[:, 0], eval_targets[:, 0], latency, steps)))
            base_ts = data.timestamps[lstm_config.window - 1:lstm_config.window - 1 + len(eval_windows)]
            _dump(dump_dir, f"{kind}_{trace_name}_{split}", base_ts, eval_targets, pred)

    logger.info(f"Benchmark produced {len(rows)} rows")
    return rows


# Functions for the drst CLI

def bench_cli(args: List[str]) -> int:
    """
    Run a benchmark suite and write the comparison table, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser
    from drst.commands.config import load_config

    parser = build_parser("drst bench", "Benchmark model kinds on synthetic traces")
    parser.add_argument("--suite", required=True, help="Suite JSON document")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--dump-dir", help="Write per-sample prediction CSVs here")
    parser.add_argument("-o", "--output", help="CSV table path (default: stdout)")
    options = parser.parse_args(args)

    config = load_config(options.config)
    try:
        with open(options.suite, 'r', encoding='utf-8') as f:
            document = json.load(f)
    except OSError as e:
        raise handle_file_system_error(e, options.suite) from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"{options.suite} is not valid JSON: {e.msg}", "INVALID_SUITE") from e

    suite = BenchSuite.from_dict(document, os.path.dirname(os.path.abspath(options.suite)))
    rows = bench(suite, config, options.dump_dir)
    horizon = config.get("lstm.horizon") if any(m != "mlp" for m in suite.models) else 0
    write_table(rows, options.output or sys.stdout, horizon)
    return 0
