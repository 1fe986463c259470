#!/usr/bin/env python3
"""
Dense Network Core

This module holds the multilayer perceptron used as the inference engine:
parameter storage, forward and backward passes of the L2-regularized mean
squared error objective, Adam and momentum-SGD training, and the severity
tiered grid search used when the model has to be retuned.

Targets are standardized inside the model (target_shift, target_scale), so
callers always see predictions in KPI units.
"""

import math
import time
import logging
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, fields, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from drst.commands.error_handler import (
    ArityMismatch,
    DivergedTraining,
    EmptyData,
    EmptyGrid,
    ModelError,
    NonFiniteParameter,
    ValidationError,
    validate_config,
)
from drst.commands.trace_ingest import FeatureVector

logger = logging.getLogger("drst.nn_core")

ACTIVATIONS = ("relu", "tanh")
OPTIMIZERS = ("adam", "sgd")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SGD_MOMENTUM = 0.9


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and training settings of one MLP."""

    hidden_layers: int = 2
    hidden_width: int = 32
    activation: str = "relu"
    l2_alpha: float = 1e-4
    learning_rate: float = 0.003
    batch_size: int = 32
    epochs: int = 150
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 <= self.hidden_layers <= 4:
            raise ValidationError(f"hidden_layers must lie in [0, 4], got {self.hidden_layers}")
        if not 1 <= self.hidden_width <= 64:
            raise ValidationError(f"hidden_width must lie in [1, 64], got {self.hidden_width}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.l2_alpha < 0:
            raise ValidationError(f"l2_alpha must be >= 0, got {self.l2_alpha}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "MlpConfig":
        names = [f.name for f in fields(cls)]
        validate_config(dict(document), [], names, section="mlp")
        return cls(**{k: document[k] for k in names if k in document})


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


@dataclass(frozen=True)
class MlpModel:
    """
    Trained MLP parameters.

    weights[l] has shape (fan_in, fan_out) and biases[l] shape (fan_out,); the
    last layer maps to a single linear output.
    """

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    config: MlpConfig
    input_schema_hash: str = ""
    target_shift: float = 0.0
    target_scale: float = 1.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ModelError("Model needs one bias vector per weight matrix")
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ModelError(f"Layer {index} has inconsistent shapes {w.shape} / {b.shape}")
            if index and w.shape[0] != self.weights[index - 1].shape[1]:
                raise ModelError(f"Layer {index} does not chain onto layer {index - 1}")
        if self.weights[-1].shape[1] != 1:
            raise ModelError("Output layer must be scalar")
        if not self.target_scale > 0:
            raise ModelError("target_scale must be positive")

    @property
    def input_arity(self) -> int:
        return int(self.weights[0].shape[0])

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def check_finite(self) -> None:
        for p in self.parameters():
            if not np.all(np.isfinite(p)):
                raise NonFiniteParameter("Model contains non-finite parameters")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "input_schema_hash": self.input_schema_hash,
            "target_shift": self.target_shift,
            "target_scale": self.target_scale,
            "layers": [{"weights": w.tolist(), "bias": b.tolist()} for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "MlpModel":
        try:
            layers = document["layers"]
            return cls(
                tuple(np.array(layer["weights"], dtype=np.float64) for layer in layers),
                tuple(np.array(layer["bias"], dtype=np.float64) for layer in layers),
                MlpConfig.from_dict(document["config"]),
                str(document.get("input_schema_hash", "")),
                float(document.get("target_shift", 0.0)),
                float(document.get("target_scale", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelError(f"Invalid MLP document: {e}", "INVALID_MODEL") from e


def _as_matrix(model: MlpModel, X: Any) -> np.ndarray:
    if isinstance(X, FeatureVector):
        X = X.values
    matrix = np.asarray(X, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2 or matrix.shape[1] != model.input_arity:
        raise ArityMismatch(f"Model expects {model.input_arity} inputs, got {matrix.shape[-1]}",
                            details={"expected": model.input_arity, "actual": int(matrix.shape[-1])})
    return matrix


def _forward_scaled(model: MlpModel, X: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
    """Network output in standardized target units plus per-layer inputs and pre-activations."""
    inputs, pre = [], []
    a = X
    last = len(model.weights) - 1
    for index, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = z if index == last else _activate(z, model.config.activation)
    return a[:, 0], inputs, pre


def mlp_predict(model: MlpModel, X: Any) -> np.ndarray:
    """Predict the KPI for every row of X."""
    model.check_finite()
    matrix = _as_matrix(model, X)
    out, _, _ = _forward_scaled(model, matrix)
    return model.target_shift + model.target_scale * out


def mlp_forward(model: MlpModel, x: Union[FeatureVector, Sequence[float]]) -> float:
    """
    Predict the KPI for one feature vector.

    Raises:
        ArityMismatch: If the vector length differs from the model input
        NonFiniteParameter: If the model holds NaN or Inf parameters
    """
    return float(mlp_predict(model, x)[0])


@dataclass
class ObjectiveTerms:
    data: float
    penalty: float

    @property
    def total(self) -> float:
        return self.data + self.penalty


def _scaled_targets(model: MlpModel, y: Any) -> np.ndarray:
    return (np.asarray(y, dtype=np.float64).reshape(-1) - model.target_shift) / model.target_scale


def objective(model: MlpModel, X: Any, y: Any) -> ObjectiveTerms:
    """
    Regularized objective on a batch, in standardized target units:
    mean squared error plus (alpha/2) times the squared norm of all parameters.
    """
    matrix = _as_matrix(model, X)
    out, _, _ = _forward_scaled(model, matrix)
    residual = out - _scaled_targets(model, y)
    penalty = 0.5 * model.config.l2_alpha * math.fsum(float(np.sum(p * p)) for p in model.parameters())
    return ObjectiveTerms(float(np.mean(residual * residual)), penalty)


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def flat(self) -> List[np.ndarray]:
        return [g for pair in zip(self.weights, self.biases) for g in pair]


def gradients(model: MlpModel, X: Any, y: Any) -> Gradients:
    """
    Exact backpropagation gradients of the regularized objective.

    Raises:
        ArityMismatch: If X does not match the model input
        EmptyData: If the batch is empty
    """
    matrix = _as_matrix(model, X)
    target = _scaled_targets(model, y)
    n = matrix.shape[0]
    if n == 0:
        raise EmptyData("Cannot compute gradients on an empty batch")
    if target.size != n:
        raise ArityMismatch(f"Got {n} inputs but {target.size} targets")

    out, inputs, pre = _forward_scaled(model, matrix)
    alpha = model.config.l2_alpha
    delta = (2.0 / n) * (out - target).reshape(-1, 1)

    grad_w: List[np.ndarray] = [np.empty(0)] * len(model.weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(model.weights)
    for index in range(len(model.weights) - 1, -1, -1):
        w = model.weights[index]
        grad_w[index] = inputs[index].T @ delta + alpha * w
        grad_b[index] = delta.sum(axis=0) + alpha * model.biases[index]
        if index:
            delta = (delta @ w.T) * _activation_grad(pre[index - 1], model.config.activation)
    return Gradients(grad_w, grad_b)


def input_gradients(model: MlpModel, X: Any) -> np.ndarray:
    """Derivative of the KPI prediction with respect to each input, shape (n, d)."""
    matrix = _as_matrix(model, X)
    _, _, pre = _forward_scaled(model, matrix)
    delta = np.full((matrix.shape[0], 1), model.target_scale)
    for index in range(len(model.weights) - 1, -1, -1):
        delta = delta @ model.weights[index].T
        if index:
            delta = delta * _activation_grad(pre[index - 1], model.config.activation)
    return delta


@dataclass
class TrainReport:
    final_loss: float
    loss_curve: List[float]
    wall_time_s: float
    samples_seen: int
    initial_loss: float = math.nan

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def init_model(input_arity: int, config: MlpConfig, schema_hash: str = "",
               target_shift: float = 0.0, target_scale: float = 1.0) -> MlpModel:
    """Glorot-uniform weights and zero biases from the config seed."""
    if input_arity < 1:
        raise ArityMismatch("Model needs at least one input")
    rng = np.random.default_rng(config.seed)
    sizes = [input_arity] + [config.hidden_width] * config.hidden_layers + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(weights), tuple(biases), config, schema_hash, target_shift, target_scale)


class _Adam:
    def __init__(self, params: List[np.ndarray], learning_rate: float):
        self.lr = learning_rate
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


class _Sgd:
    def __init__(self, params: List[np.ndarray], learning_rate: float):
        self.lr = learning_rate
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        for p, g, v in zip(params, grads, self.velocity):
            v *= SGD_MOMENTUM
            v -= self.lr * g
            p += v


def make_optimizer(name: str, params: List[np.ndarray], learning_rate: float):
    return _Adam(params, learning_rate) if name == "adam" else _Sgd(params, learning_rate)


def target_scaling(y: np.ndarray) -> Tuple[float, float]:
    shift = float(np.mean(y))
    scale = float(np.std(y))
    return shift, (scale if scale > 0 else 1.0)


def mlp_train(X: Any, y: Any, config: MlpConfig, schema_hash: str = "") -> Tuple[MlpModel, TrainReport]:
    """
    Train an MLP with mini-batches.

    Args:
        X: (n, d) normalized inputs
        y: (n,) KPI targets
        config (MlpConfig): Architecture and training settings
        schema_hash (str): Digest of the feature schema the inputs follow

    Returns:
        Tuple[MlpModel, TrainReport]: The model and its per-epoch objective curve

    Raises:
        EmptyData: If there are no samples
        DivergedTraining: If the objective becomes non-finite
    """
    matrix = np.asarray(X, dtype=np.float64)
    target = np.asarray(y, dtype=np.float64).reshape(-1)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise EmptyData("Training needs a non-empty (n, d) input matrix")
    if target.size != matrix.shape[0]:
        raise ArityMismatch(f"Got {matrix.shape[0]} inputs but {target.size} targets")
    if not np.all(np.isfinite(target)) or not np.all(np.isfinite(matrix)):
        raise EmptyData("Training data contains non-finite values", "NON_FINITE_DATA")

    n = matrix.shape[0]
    batch_size = min(config.batch_size, n)
    if batch_size < config.batch_size:
        logger.debug(f"Only {n} samples; batch size reduced to {batch_size}")

    shift, scale = target_scaling(target)
    model = init_model(matrix.shape[1], config, schema_hash, shift, scale)
    params = model.parameters()
    optimizer = make_optimizer(config.optimizer, params, config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)

    started = time.perf_counter()
    curve: List[float] = []
    seen = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        initial = objective(model, matrix, target).total
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = order[start:start + batch_size]
                optimizer.step(params, gradients(model, matrix[batch], target[batch]).flat())
                seen += batch.size
            loss = objective(model, matrix, target).total
            if not math.isfinite(loss):
                raise DivergedTraining(f"Objective became non-finite at epoch {epoch + 1}",
                                       details={"epoch": epoch + 1, "learning_rate": config.learning_rate})
            curve.append(loss)

    report = TrainReport(curve[-1], curve, time.perf_counter() - started, seen, initial)
    logger.debug(f"Trained MLP {config.hidden_layers}x{config.hidden_width} {config.activation}/{config.optimizer}: "
                 f"loss {initial:.4g} -> {report.final_loss:.4g} in {report.wall_time_s:.2f}s")
    return model, report


# Grid search

AXIS_ORDER = ("learning_rate", "batch_size", "hidden_layers", "hidden_width", "activation", "optimizer", "l2_alpha")


class SearchBudget(str, Enum):
    """Severity tiers of the retraining search."""

    S1 = "S1"
    S2 = "S2"
    SK = "SK"

    @property
    def axes(self) -> Tuple[str, ...]:
        if self == SearchBudget.S1:
            return ("learning_rate", "batch_size")
        if self == SearchBudget.S2:
            return ("hidden_layers", "activation", "optimizer")
        return AXIS_ORDER


@dataclass(frozen=True)
class ConfigLattice:
    """A base config plus candidate values per axis."""

    base: MlpConfig
    axes: Mapping[str, Tuple[Any, ...]] = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        unknown = sorted(set(self.axes) - set(AXIS_ORDER))
        if unknown:
            raise ValidationError(f"Unknown lattice axes: {', '.join(unknown)}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    @classmethod
    def from_sections(cls, mlp: Mapping[str, Any], grid: Mapping[str, Any]) -> "ConfigLattice":
        grid = dict(grid)
        workers = int(grid.pop("workers", 1))
        lattice = cls(MlpConfig.from_dict(mlp), {k: tuple(v) for k, v in grid.items()}, workers)
        for budget in SearchBudget:
            lattice.candidates(budget)
        return lattice

    def candidates(self, budget: SearchBudget) -> List[MlpConfig]:
        """
        Configs to evaluate for a budget, in lattice order.

        Axes outside the budget stay at the base value.

        Raises:
            EmptyGrid: If an axis in the budget has no values
        """
        active = [axis for axis in AXIS_ORDER if axis in budget.axes and axis in self.axes]
        for axis in active:
            if not self.axes[axis]:
                raise EmptyGrid(f"Lattice axis '{axis}' is empty")
        combos = itertools.product(*(self.axes[axis] for axis in active))
        return [replace(self.base, **dict(zip(active, values))) for values in combos]


@dataclass
class CandidateResult:
    config: MlpConfig
    validation_loss: float
    error: Optional[str] = None


@dataclass
class SearchResult:
    config: MlpConfig
    model: MlpModel
    validation_loss: float
    budget: SearchBudget
    evaluated: List[CandidateResult] = field(default_factory=list)


def split_indices(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split; returns (train, validation) indices."""
    if n < 2:
        raise EmptyData(f"Need at least 2 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(n * fraction))))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def grid_search(X: Any, y: Any, lattice: ConfigLattice, budget: SearchBudget = SearchBudget.SK,
                validation_fraction: float = 0.2, seed: int = 0, schema_hash: str = "") -> SearchResult:
    """
    Train every candidate of the budget and keep the best on a validation split.

    Candidates run on lattice.workers threads; results are compared in lattice
    order, so the first of equally good candidates wins.

    Args:
        X, y: Training data
        lattice (ConfigLattice): Base config and axis values
        budget (SearchBudget): Which axes to search
        validation_fraction (float): Share of samples held out
        seed (int): Split seed
        schema_hash (str): Stored on every candidate model

    Returns:
        SearchResult: The winning config and model with the loss of every candidate

    Raises:
        EmptyGrid: If the lattice yields no candidates
        DivergedTraining: If every candidate diverges
    """
    budget = SearchBudget(budget)
    candidates = lattice.candidates(budget)
    if not candidates:
        raise EmptyGrid("Lattice yields no candidates")

    matrix = np.asarray(X, dtype=np.float64)
    target = np.asarray(y, dtype=np.float64).reshape(-1)
    train, val = split_indices(matrix.shape[0], validation_fraction, seed)

    def evaluate(config: MlpConfig) -> Tuple[CandidateResult, Optional[MlpModel]]:
        try:
            model, _ = mlp_train(matrix[train], target[train], config, schema_hash)
            with np.errstate(over="ignore", invalid="ignore"):
                residual = mlp_predict(model, matrix[val]) - target[val]
                loss = float(np.mean(residual * residual))
        except ModelError as e:
            logger.debug(f"Candidate {config} failed: {e}")
            return CandidateResult(config, math.inf, e.error_code), None
        if not math.isfinite(loss):
            return CandidateResult(config, math.inf, DivergedTraining.code), None
        return CandidateResult(config, loss), model

    if lattice.workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=lattice.workers, thread_name_prefix="drst-grid") as pool:
            outcomes = list(pool.map(evaluate, candidates))
    else:
        outcomes = [evaluate(config) for config in candidates]

    best_index = None
    for index, (result, model) in enumerate(outcomes):
        if model is not None and (best_index is None or result.validation_loss < outcomes[best_index][0].validation_loss):
            best_index = index
    if best_index is None:
        raise DivergedTraining(f"All {len(candidates)} candidates diverged", details={"budget": budget.value})

    best, model = outcomes[best_index]
    logger.info(f"Grid search {budget.value}: {len(candidates)} candidates, best validation MSE "
                f"{best.validation_loss:.4g} (lr={best.config.learning_rate}, batch={best.config.batch_size}, "
                f"layers={best.config.hidden_layers}, {best.config.activation}, {best.config.optimizer})")
    return SearchResult(best.config, model, best.validation_loss, budget, [result for result, _ in outcomes])
