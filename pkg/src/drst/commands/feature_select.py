#!/usr/bin/env python3
"""
Feature Relevance

Ranks counter features against a KPI by Pearson correlation and binned mutual
information, and retains those whose |r| exceeds the threshold. The retained
names fix the model input schema.
"""

import sys
import json
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from drst.commands.error_handler import (
    ConstantInput,
    LengthMismatch,
    MissingFeature,
    SelectionError,
    ValidationError,
    handle_file_system_error,
)
from drst.commands.trace_ingest import TraceRecord, kpi_series, read_trace

logger = logging.getLogger("drst.feature_select")

DEFAULT_THRESHOLD = 0.5
DEFAULT_BINS = 16


def _as_pair(x: Sequence[float], y: Sequence[float], minimum: int):
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise LengthMismatch(f"Sequences differ in length ({xa.size} vs {ya.size})")
    if xa.size < minimum:
        raise LengthMismatch(f"Need at least {minimum} samples, got {xa.size}")
    return xa, ya


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Sample Pearson correlation coefficient.

    Sums are exact (math.fsum), so pearson(x, y) == pearson(y, x) bit for bit.

    Raises:
        LengthMismatch: If lengths differ or fewer than 2 samples
        ConstantInput: If either sequence is constant
    """
    xa, ya = _as_pair(x, y, 2)
    dx = xa - math.fsum(xa) / xa.size
    dy = ya - math.fsum(ya) / ya.size
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantInput("Correlation is undefined for a constant sequence")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        return np.zeros(values.size, dtype=np.intp)
    index = np.floor((values - lo) / (hi - lo) * bins).astype(np.intp)
    return np.clip(index, 0, bins - 1)


def mutual_info(x: Sequence[float], y: Sequence[float], bins: int = DEFAULT_BINS) -> float:
    """
    Plug-in mutual information estimate in bits.

    Each variable is cut into equal-width bins over its own range; the result is
    sum p(i,j) log2[p(i,j) / (p(i) p(j))] over occupied cells.

    Args:
        x, y: Equal-length samples, at least `bins` long
        bins (int): Bins per variable, >= 2

    Returns:
        float: Mutual information, >= 0
    """
    if bins < 2:
        raise ValidationError(f"bins must be >= 2, got {bins}")
    xa, ya = _as_pair(x, y, bins)
    n = xa.size
    joint = np.zeros((bins, bins), dtype=np.float64)
    np.add.at(joint, (_bin_indices(xa, bins), _bin_indices(ya, bins)), 1.0)
    joint /= n
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)

    rows, cols = np.nonzero(joint)
    cells = joint[rows, cols]
    terms = cells * np.log2(cells / (px[rows] * py[cols]))
    return max(0.0, math.fsum(terms))


@dataclass
class FeatureRelevance:
    pearson_r: Optional[float]
    mutual_info_bits: float
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        document: Dict[str, Any] = {"pearson_r": self.pearson_r, "mutual_info_bits": self.mutual_info_bits}
        if self.error:
            document["error"] = self.error
        return document


@dataclass
class RelevanceReport:
    """Both statistics for every feature plus the retained, ranked names."""

    kpi: str
    threshold: float
    features: Dict[str, FeatureRelevance] = field(default_factory=dict)
    selected: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kpi": self.kpi,
            "threshold": self.threshold,
            "features": {name: stats.to_dict() for name, stats in sorted(self.features.items())},
            "selected": list(self.selected),
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "RelevanceReport":
        features = {
            name: FeatureRelevance(stats.get("pearson_r"), float(stats.get("mutual_info_bits", 0.0)), stats.get("error"))
            for name, stats in document.get("features", {}).items()
        }
        return cls(document["kpi"], float(document["threshold"]), features, list(document.get("selected", [])))

    def save(self, path: str) -> None:
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(self.to_dict(), f, indent=2)
        except OSError as e:
            raise handle_file_system_error(e, path) from e

    @classmethod
    def load(cls, path: str) -> "RelevanceReport":
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return cls.from_dict(json.load(f))
        except OSError as e:
            raise handle_file_system_error(e, path) from e


def rank(features: Mapping[str, FeatureRelevance], threshold: float) -> List[str]:
    """Names with |r| > threshold, by |r| descending, ties lexicographic."""
    kept = [name for name, stats in features.items()
            if stats.pearson_r is not None and abs(stats.pearson_r) > threshold]
    return sorted(kept, key=lambda name: (-abs(features[name].pearson_r), name))


def select(records: Sequence[TraceRecord], kpi_name: str, threshold: float = DEFAULT_THRESHOLD,
           bins: int = DEFAULT_BINS) -> RelevanceReport:
    """
    Score every feature against a KPI and retain the correlated ones.

    Features for which correlation is undefined (constant input) are reported
    with pearson_r None and the error code, and never selected.

    Args:
        records: Trace records carrying kpi_name ground truth
        kpi_name (str): The KPI to rank against
        threshold (float): Retention cut on |pearson_r|
        bins (int): Bins for the mutual information estimate

    Returns:
        RelevanceReport: Statistics for all features and the selected names

    Raises:
        MissingKpi: If a record lacks the KPI
    """
    if not records:
        raise SelectionError("No records to select features from", "EMPTY_TRACE")
    target = kpi_series(records, kpi_name)
    bins = min(bins, len(records))
    names = sorted(records[0].features)

    report = RelevanceReport(kpi_name, threshold)
    for name in names:
        try:
            column = np.array([record.features[name] for record in records], dtype=np.float64)
        except KeyError as e:
            raise MissingFeature(f"Feature '{name}' missing from some records", details={"feature": name}) from e

        info = mutual_info(column, target, bins) if bins >= 2 else 0.0
        try:
            report.features[name] = FeatureRelevance(pearson(column, target), info)
        except (ConstantInput, LengthMismatch) as e:
            logger.debug(f"Feature {name}: {e}")
            report.features[name] = FeatureRelevance(None, info, e.error_code)

    report.selected = rank(report.features, threshold)
    logger.info(f"Selected {len(report.selected)} of {len(names)} features for {kpi_name} (|r| > {threshold})")
    return report


# Functions for the drst CLI

def select_cli(args: List[str]) -> int:
    """
    Write a relevance report for a trace, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser
    from drst.commands.config import load_config

    parser = build_parser("drst select", "Rank features against a KPI")
    parser.add_argument("--trace", required=True, help="Trace file (JSON lines)")
    parser.add_argument("--kpi", help="KPI name (default from select.kpi)")
    parser.add_argument("--threshold", type=float, help="Retention cut on |pearson r|")
    parser.add_argument("--bins", type=int, help="Mutual information bins")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("-o", "--output", help="Report path (default: stdout)")
    options = parser.parse_args(args)

    config = load_config(options.config, {
        "select.kpi": options.kpi,
        "select.threshold": options.threshold,
        "select.bins": options.bins,
    })
    report = select(read_trace(options.trace), config.get("select.kpi"),
                    config.get("select.threshold"), config.get("select.bins"))

    if options.output:
        report.save(options.output)
    else:
        json.dump(report.to_dict(), sys.stdout, indent=2)
        sys.stdout.write("\n")
    return 0
