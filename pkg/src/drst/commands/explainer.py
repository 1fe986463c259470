#!/usr/bin/env python3
"""
Prediction Explanations

Attributes KPI predictions to input features in two stages: input-gradient
sensitivity ranks the features and keeps the top k, then Shapley values are
computed for that subset, exactly by enumerating all coalitions or by sampling
permutations.

Value function: features outside the explained subset stay at x; explained
features absent from a coalition take their background mean.
"""

import sys
import json
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import comb

from drst.commands.error_handler import (
    ArityMismatch,
    EmptyBackground,
    TooManyFeatures,
    ValidationError,
)
from drst.commands.nn_core import MlpModel, input_gradients, mlp_predict

logger = logging.getLogger("drst.explainer")

MAX_EXACT_FEATURES = 12

Predictor = Union[MlpModel, Callable[[np.ndarray], np.ndarray]]


def _predict_fn(model: Predictor) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, MlpModel):
        return lambda X: mlp_predict(model, X)
    return lambda X: np.asarray(model(X), dtype=np.float64).reshape(-1)


def _names(names: Optional[Sequence[str]], arity: int) -> List[str]:
    if names is None:
        return [f"x{i}" for i in range(arity)]
    if len(names) != arity:
        raise ArityMismatch(f"Got {len(names)} names for {arity} features")
    return list(names)


@dataclass
class SensitivityReport:
    scores: Dict[str, float]
    top_k: List[str]
    indices: List[int] = field(default_factory=list)


def gradient_sensitivity(model: MlpModel, samples: Any, k: int,
                         names: Optional[Sequence[str]] = None) -> SensitivityReport:
    """
    Rank features by mean absolute input gradient over a sample set.

    Args:
        model (MlpModel): The model to differentiate
        samples: (n, d) normalized inputs
        k (int): Number of features to keep
        names: Feature names in input order

    Returns:
        SensitivityReport: Scores for every feature and the top k, ties broken by name

    Raises:
        ArityMismatch: If samples do not match the model input
    """
    matrix = np.asarray(samples, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ValidationError("Sensitivity needs a non-empty (n, d) sample set")
    if not 1 <= k <= model.input_arity:
        raise ValidationError(f"k must lie in [1, {model.input_arity}], got {k}")
    labels = _names(names, model.input_arity)
    scores = np.mean(np.abs(input_gradients(model, matrix)), axis=0)

    order = sorted(range(len(labels)), key=lambda i: (-scores[i], labels[i]))[:k]
    return SensitivityReport({label: float(s) for label, s in zip(labels, scores)},
                             [labels[i] for i in order], order)


@dataclass
class Attribution:
    """Shapley decomposition of one prediction: phi0 + sum(phis) = prediction."""

    phi0: float
    phis: Dict[str, float]
    prediction: float
    evaluations: int
    residual: float = 0.0

    def normalized(self) -> Dict[str, float]:
        """phis scaled by their total absolute value, for display."""
        total = math.fsum(abs(v) for v in self.phis.values())
        if total == 0.0:
            return {name: 0.0 for name in self.phis}
        return {name: value / total for name, value in self.phis.items()}

    def to_dict(self) -> Dict[str, Any]:
        return {"phi0": self.phi0, "phis": self.phis, "prediction": self.prediction,
                "residual": self.residual, "evaluations": self.evaluations}


def _prepare(model: Predictor, x: Any, background: Any, active: Optional[Sequence[int]]):
    point = np.asarray(x.values if hasattr(x, "values") and not isinstance(x, np.ndarray) else x,
                       dtype=np.float64).reshape(-1)
    reference = np.asarray(background, dtype=np.float64)
    if reference.size == 0:
        raise EmptyBackground("Shapley values need a non-empty background set")
    reference = reference.reshape(-1, point.size)
    indices = list(range(point.size)) if active is None else [int(i) for i in active]
    if len(set(indices)) != len(indices) or any(not 0 <= i < point.size for i in indices):
        raise ValidationError("Active features must be distinct input indices")
    return _predict_fn(model), point, reference.mean(axis=0), indices


def shapley_exact(model: Predictor, x: Any, background: Any, active: Optional[Sequence[int]] = None,
                  names: Optional[Sequence[str]] = None, max_features: int = MAX_EXACT_FEATURES) -> Attribution:
    """
    Exact Shapley values over every coalition of the active features.

    Args:
        model: MlpModel or a batch predictor f(X) -> y
        x: The point to explain
        background: (m, d) reference samples whose mean replaces absent features
        active: Input indices to attribute (default: all)
        names: Feature names in input order
        max_features (int): Cap on active features; the cost is 2^a model rows

    Returns:
        Attribution: phi0 = v(empty coalition) and one phi per active feature

    Raises:
        TooManyFeatures: If more than max_features features are active; use shapley_sampled
        EmptyBackground: If the background is empty
    """
    predict, point, means, indices = _prepare(model, x, background, active)
    a = len(indices)
    if a > max_features:
        raise TooManyFeatures(f"{a} features need 2^{a} evaluations; use sampled mode or pre-select "
                              f"at most {max_features}", details={"features": a})
    labels = _names(names, point.size)

    masks = np.arange(1 << a)
    rows = np.tile(point, (masks.size, 1))
    for bit, feature in enumerate(indices):
        absent = (masks >> bit) & 1 == 0
        rows[absent, feature] = means[feature]
    values = predict(rows)

    sizes = np.array([bin(m).count("1") for m in masks])
    weights = 1.0 / (a * comb(a - 1, np.arange(a), exact=False)) if a else np.zeros(0)
    phis: Dict[str, float] = {}
    for bit, feature in enumerate(indices):
        without = masks[(masks >> bit) & 1 == 0]
        gains = values[without | (1 << bit)] - values[without]
        phis[labels[feature]] = math.fsum(weights[sizes[without]] * gains)

    phi0 = float(values[0])
    prediction = float(values[-1])
    residual = prediction - phi0 - math.fsum(phis.values())
    return Attribution(phi0, phis, prediction, int(masks.size), residual)


def shapley_sampled(model: Predictor, x: Any, background: Any, active: Optional[Sequence[int]] = None,
                    permutations: int = 200, seed: int = 0,
                    names: Optional[Sequence[str]] = None) -> Attribution:
    """
    Permutation-sampling estimate of the same Shapley values.

    Each sampled ordering adds the active features to the empty coalition one
    at a time and credits each with its marginal gain.

    Raises:
        EmptyBackground: If the background is empty
    """
    if permutations < 1:
        raise ValidationError(f"permutations must be >= 1, got {permutations}")
    predict, point, means, indices = _prepare(model, x, background, active)
    labels = _names(names, point.size)
    rng = np.random.default_rng(seed)
    a = len(indices)

    start = point.copy()
    start[indices] = means[indices]
    totals = np.zeros(a)
    phi0 = float(predict(start.reshape(1, -1))[0])
    prediction = float(predict(point.reshape(1, -1))[0])
    for _ in range(permutations):
        order = rng.permutation(a)
        rows = np.tile(start, (a + 1, 1))
        for step, position in enumerate(order, start=1):
            rows[step:, indices[position]] = point[indices[position]]
        values = predict(rows)
        totals[order] += np.diff(values)

    phis = {labels[feature]: float(totals[bit] / permutations) for bit, feature in enumerate(indices)}
    residual = prediction - phi0 - math.fsum(phis.values())
    return Attribution(phi0, phis, prediction, 2 + permutations * (a + 1), residual)


@dataclass
class ExplanationSummary:
    sensitivity: SensitivityReport
    attributions: List[Attribution]
    mode: str

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        """Mean |phi|, mean phi and normalized mean |phi| per explained feature."""
        names = list(self.attributions[0].phis) if self.attributions else []
        mean_abs = {n: float(np.mean([abs(a.phis[n]) for a in self.attributions])) for n in names}
        mean = {n: float(np.mean([a.phis[n] for a in self.attributions])) for n in names}
        total = math.fsum(mean_abs.values())
        display = {n: (v / total if total else 0.0) for n, v in mean_abs.items()}
        return {n: {"mean_abs_phi": mean_abs[n], "mean_phi": mean[n], "normalized": display[n]} for n in names}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "sensitivity": {"scores": self.sensitivity.scores, "top_k": self.sensitivity.top_k},
            "features": self.aggregate(),
            "attributions": [a.to_dict() for a in self.attributions],
        }


def explain(model: MlpModel, data: Any, names: Sequence[str], samples: int = 100, topk: int = 10,
            permutations: int = 200, seed: int = 0, mode: str = "auto") -> ExplanationSummary:
    """
    Pre-select the top-k sensitive features and attribute a seeded sample of points.

    Args:
        model (MlpModel): The model to explain
        data: (n, d) normalized inputs; serves as background and as the point pool
        names: Feature names in input order
        samples (int): Number of points to explain and background size
        topk (int): Features kept by sensitivity pre-selection
        permutations (int): Orderings for sampled mode
        seed (int): Sampling seed
        mode (str): 'exact', 'sampled' or 'auto' (exact when topk <= 12)
    """
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise EmptyBackground("No samples to explain")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(matrix.shape[0], size=min(samples, matrix.shape[0]), replace=False))
    pool = matrix[chosen]

    k = min(topk, model.input_arity)
    sensitivity = gradient_sensitivity(model, pool, k, names)
    if mode == "auto":
        mode = "exact" if k <= MAX_EXACT_FEATURES else "sampled"
    if mode not in ("exact", "sampled"):
        raise ValidationError(f"Unknown explain mode '{mode}'")

    attributions = []
    for index, point in enumerate(pool):
        if mode == "exact":
            attributions.append(shapley_exact(model, point, pool, sensitivity.indices, names))
        else:
            attributions.append(shapley_sampled(model, point, pool, sensitivity.indices,
                                                permutations, seed + index, names))
    logger.info(f"Explained {len(attributions)} predictions over {k} features ({mode})")
    return ExplanationSummary(sensitivity, attributions, mode)


# Functions for the drst CLI

def explain_cli(args: List[str]) -> int:
    """
    Write Shapley attributions for a trace, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser
    from drst.commands.config import load_config
    from drst.commands.model_registry import load_artifact
    from drst.commands.trace_ingest import read_trace, to_matrix

    parser = build_parser("drst explain", "Attribute predictions to features")
    parser.add_argument("--model", required=True, help="Registry root, version directory or payload file")
    parser.add_argument("--trace", required=True, help="Trace file (JSON lines)")
    parser.add_argument("--samples", type=int, help="Points to explain (default explain.samples)")
    parser.add_argument("--topk", type=int, help="Features kept after sensitivity ranking")
    parser.add_argument("--permutations", type=int, help="Orderings per point in sampled mode")
    parser.add_argument("--mode", choices=("auto", "exact", "sampled"), default="auto")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("-o", "--output", help="Output JSON path (default: stdout)")
    options = parser.parse_args(args)

    config = load_config(options.config, {
        "explain.samples": options.samples,
        "explain.topk": options.topk,
        "explain.permutations": options.permutations,
    })
    artifact = load_artifact(options.model, kinds=("mlp",))
    data = to_matrix(read_trace(options.trace), artifact.schema)
    summary = explain(artifact.model, data, artifact.schema.names,
                      config.get("explain.samples"), config.get("explain.topk"),
                      config.get("explain.permutations"), config.get("explain.seed"), options.mode)

    if options.output:
        with open(options.output, 'w', encoding='utf-8') as f:
            json.dump(summary.to_dict(), f, indent=2)
    else:
        json.dump(summary.to_dict(), sys.stdout, indent=2)
        sys.stdout.write("\n")
    return 0
