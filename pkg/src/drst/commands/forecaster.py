#!/usr/bin/env python3
"""
KPI Forecasting

Multi-step forecasting over a window of N feature vectors:
  - LstmModel: stacked standard LSTM whose final hidden state feeds one linear
    readout of width H, so all H steps come from a single pass.
  - DirRecChain: H single-output LSTMs; member h sees the window plus the h-1
    predictions of the members before it, appended as constant columns.

Gate order inside the stacked parameter matrices is input, forget, output,
candidate.
"""

import sys
import json
import math
import time
import logging
from dataclasses import dataclass, fields, replace, asdict
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from drst.commands.error_handler import (
    ArityMismatch,
    ChainArityMismatch,
    DivergedTraining,
    EmptyData,
    ModelError,
    UsageError,
    ValidationError,
    WindowLengthMismatch,
    validate_config,
)
from drst.commands.nn_core import TrainReport, make_optimizer, target_scaling
from drst.commands.trace_ingest import FeatureVector, SlidingWindow

logger = logging.getLogger("drst.forecaster")


@dataclass(frozen=True)
class LstmConfig:
    layers: int = 1
    hidden_dim: int = 32
    window: int = 10
    horizon: int = 5
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 40
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.layers <= 3:
            raise ValidationError(f"layers must lie in [1, 3], got {self.layers}")
        if not 32 <= self.hidden_dim <= 128:
            raise ValidationError(f"hidden_dim must lie in [32, 128], got {self.hidden_dim}")
        if self.window < 1 or self.horizon < 1:
            raise ValidationError("window and horizon must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "LstmConfig":
        names = [f.name for f in fields(cls)]
        validate_config(dict(document), [], names, section="lstm")
        return cls(**{k: document[k] for k in names if k in document})


@dataclass(frozen=True)
class LstmLayer:
    W: np.ndarray  # (input, 4*hidden)
    U: np.ndarray  # (hidden, 4*hidden)
    b: np.ndarray  # (4*hidden,)

    @property
    def hidden(self) -> int:
        return int(self.U.shape[0])

    def parameters(self) -> List[np.ndarray]:
        return [self.W, self.U, self.b]


@dataclass(frozen=True)
class LstmModel:
    """Stacked LSTM with a linear multi-step readout."""

    layers: Tuple[LstmLayer, ...]
    readout_w: np.ndarray  # (hidden, H)
    readout_b: np.ndarray  # (H,)
    window: int
    config: Optional[LstmConfig] = None
    input_schema_hash: str = ""
    target_shift: float = 0.0
    target_scale: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise ModelError("LSTM needs at least one layer")
        for index, layer in enumerate(self.layers):
            h = layer.hidden
            if layer.U.shape != (h, 4 * h) or layer.W.shape[1] != 4 * h or layer.b.shape != (4 * h,):
                raise ModelError(f"LSTM layer {index} has inconsistent shapes")
            if index and layer.W.shape[0] != self.layers[index - 1].hidden:
                raise ModelError(f"LSTM layer {index} does not chain onto layer {index - 1}")
        if self.readout_w.shape != (self.layers[-1].hidden, self.readout_b.size):
            raise ModelError("Readout does not match the last hidden size")
        if self.window < 1:
            raise ModelError("window must be >= 1")
        if not self.target_scale > 0:
            raise ModelError("target_scale must be positive")

    @property
    def input_arity(self) -> int:
        return int(self.layers[0].W.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.readout_b.size)

    def parameters(self) -> List[np.ndarray]:
        params = [p for layer in self.layers for p in layer.parameters()]
        return params + [self.readout_w, self.readout_b]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict() if self.config else None,
            "window": self.window,
            "input_schema_hash": self.input_schema_hash,
            "target_shift": self.target_shift,
            "target_scale": self.target_scale,
            "layers": [{"W": l.W.tolist(), "U": l.U.tolist(), "b": l.b.tolist()} for l in self.layers],
            "readout": {"weights": self.readout_w.tolist(), "bias": self.readout_b.tolist()},
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "LstmModel":
        try:
            config = document.get("config")
            hidden = [len(layer["U"]) for layer in document["layers"]]
            return cls(
                tuple(LstmLayer(np.array(l["W"], dtype=np.float64).reshape(-1, 4 * h),
                                np.array(l["U"], dtype=np.float64).reshape(h, 4 * h),
                                np.array(l["b"], dtype=np.float64))
                      for l, h in zip(document["layers"], hidden)),
                np.array(document["readout"]["weights"], dtype=np.float64).reshape(hidden[-1], -1),
                np.array(document["readout"]["bias"], dtype=np.float64),
                int(document["window"]),
                LstmConfig.from_dict(config) if config else None,
                str(document.get("input_schema_hash", "")),
                float(document.get("target_shift", 0.0)),
                float(document.get("target_scale", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelError(f"Invalid LSTM document: {e}", "INVALID_MODEL") from e


@dataclass(frozen=True)
class DirRecChain:
    """H single-step members; member h takes the base window plus h-1 earlier predictions."""

    members: Tuple[LstmModel, ...]

    def __post_init__(self):
        if not self.members:
            raise ChainArityMismatch("Chain needs at least one member")
        base = self.members[0].input_arity
        for h, member in enumerate(self.members, start=1):
            if member.horizon != 1:
                raise ChainArityMismatch(f"Chain member {h} must produce one step")
            if member.input_arity != base + h - 1:
                raise ChainArityMismatch(f"Chain member {h} expects {member.input_arity} inputs, "
                                         f"needs {base + h - 1}")
            if member.window != self.members[0].window:
                raise ChainArityMismatch("Chain members must share the window length")
            if (member.target_shift, member.target_scale) != (self.members[0].target_shift,
                                                              self.members[0].target_scale):
                raise ChainArityMismatch("Chain members must share target scaling")

    @property
    def horizon(self) -> int:
        return len(self.members)

    @property
    def window(self) -> int:
        return self.members[0].window

    @property
    def input_arity(self) -> int:
        return self.members[0].input_arity

    @property
    def input_schema_hash(self) -> str:
        return self.members[0].input_schema_hash

    def to_dict(self) -> Dict[str, Any]:
        return {"members": [member.to_dict() for member in self.members]}

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "DirRecChain":
        try:
            return cls(tuple(LstmModel.from_dict(member) for member in document["members"]))
        except (KeyError, TypeError) as e:
            raise ModelError(f"Invalid DirREC document: {e}", "INVALID_MODEL") from e


ForecastModel = Union[LstmModel, DirRecChain]


@dataclass(frozen=True)
class ForecastResult:
    base_timestamp_ms: int
    values: Tuple[float, ...]

    @property
    def horizon(self) -> Tuple[int, ...]:
        return tuple(range(1, len(self.values) + 1))

    def to_dict(self) -> Dict[str, Any]:
        return {"base_ts": self.base_timestamp_ms, "horizon": list(self.horizon), "values": list(self.values)}


@dataclass(frozen=True)
class ForecastGap:
    """A scheduled forecast skipped because the input window was not full."""

    timestamp_ms: int
    filled: int
    needed: int

    def to_dict(self) -> Dict[str, Any]:
        return {"gap": True, "ts": self.timestamp_ms, "filled": self.filled, "needed": self.needed}


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _window_tensor(window: Any, arity: int, length: int) -> np.ndarray:
    if isinstance(window, np.ndarray):
        tensor = np.asarray(window, dtype=np.float64)
    else:
        tensor = np.array([v.values if isinstance(v, FeatureVector) else v for v in window], dtype=np.float64)
    if tensor.ndim == 2:
        tensor = tensor[np.newaxis]
    if tensor.ndim != 3 or tensor.shape[1] != length:
        raise WindowLengthMismatch(f"Window must hold {length} vectors, got "
                                   f"{tensor.shape[1] if tensor.ndim == 3 else tensor.shape}")
    if tensor.shape[2] != arity:
        raise ArityMismatch(f"Model expects {arity} inputs, got {tensor.shape[2]}")
    return tensor


def _run(model: LstmModel, X: np.ndarray, keep: bool = False):
    """Forward pass over X (B, N, d); returns scaled outputs (B, H) and the step cache."""
    cache = []
    seq = X
    for layer in model.layers:
        batch, steps = seq.shape[0], seq.shape[1]
        h_dim = layer.hidden
        h = np.zeros((batch, h_dim))
        c = np.zeros((batch, h_dim))
        outputs = np.empty((batch, steps, h_dim))
        layer_cache = []
        for t in range(steps):
            z = seq[:, t] @ layer.W + h @ layer.U + layer.b
            i = _sigmoid(z[:, :h_dim])
            f = _sigmoid(z[:, h_dim:2 * h_dim])
            o = _sigmoid(z[:, 2 * h_dim:3 * h_dim])
            g = np.tanh(z[:, 3 * h_dim:])
            c_prev, h_prev = c, h
            c = f * c + i * g
            tanh_c = np.tanh(c)
            h = o * tanh_c
            outputs[:, t] = h
            if keep:
                layer_cache.append((seq[:, t], h_prev, c_prev, i, f, o, g, tanh_c))
        cache.append(layer_cache)
        seq = outputs
    return seq[:, -1] @ model.readout_w + model.readout_b, seq[:, -1], cache


def lstm_predict(model: LstmModel, windows: Any) -> np.ndarray:
    """Forecasts in KPI units for a batch of windows, shape (B, H)."""
    tensor = _window_tensor(windows, model.input_arity, model.window)
    out, _, _ = _run(model, tensor)
    return model.target_shift + model.target_scale * out


def lstm_forward(model: LstmModel, window: Sequence[Any], base_timestamp_ms: Optional[int] = None) -> ForecastResult:
    """
    Forecast H steps from one window in a single pass.

    Raises:
        WindowLengthMismatch: If the window does not hold exactly N vectors
        ArityMismatch: If the vectors do not match the model input
    """
    values = lstm_predict(model, window)[0]
    if base_timestamp_ms is None:
        last = window[-1] if not isinstance(window, np.ndarray) else None
        base_timestamp_ms = last.timestamp_ms if isinstance(last, FeatureVector) else 0
    return ForecastResult(base_timestamp_ms, tuple(float(v) for v in values))


def _augment(tensor: np.ndarray, scaled_predictions: np.ndarray) -> np.ndarray:
    """Append predictions (B, k) as k constant columns across every step of the window."""
    batch, steps, _ = tensor.shape
    extra = np.broadcast_to(scaled_predictions[:, np.newaxis, :], (batch, steps, scaled_predictions.shape[1]))
    return np.concatenate([tensor, extra], axis=2)


def dirrec_predict(chain: DirRecChain, windows: Any) -> np.ndarray:
    """Forecasts in KPI units for a batch of windows, shape (B, H)."""
    base = chain.members[0]
    try:
        tensor = _window_tensor(windows, chain.input_arity, chain.window)
    except ArityMismatch as e:
        raise ChainArityMismatch(str(e.message)) from e
    scaled = np.zeros((tensor.shape[0], 0))
    for member in chain.members:
        out, _, _ = _run(member, _augment(tensor, scaled))
        scaled = np.concatenate([scaled, out], axis=1)
    return base.target_shift + base.target_scale * scaled


def dirrec_forecast(chain: DirRecChain, window: Sequence[Any], base_timestamp_ms: Optional[int] = None) -> ForecastResult:
    """
    Forecast H steps with H sequential member evaluations.

    Raises:
        WindowLengthMismatch: If the window does not hold exactly N vectors
        ChainArityMismatch: If the vectors do not match the chain input
    """
    values = dirrec_predict(chain, window)[0]
    if base_timestamp_ms is None:
        last = window[-1] if not isinstance(window, np.ndarray) else None
        base_timestamp_ms = last.timestamp_ms if isinstance(last, FeatureVector) else 0
    return ForecastResult(base_timestamp_ms, tuple(float(v) for v in values))


def forecast(model: ForecastModel, window: Sequence[Any], base_timestamp_ms: Optional[int] = None) -> ForecastResult:
    if isinstance(model, DirRecChain):
        return dirrec_forecast(model, window, base_timestamp_ms)
    return lstm_forward(model, window, base_timestamp_ms)


def predict_windows(model: ForecastModel, windows: Any) -> np.ndarray:
    if isinstance(model, DirRecChain):
        return dirrec_predict(model, windows)
    return lstm_predict(model, windows)


@dataclass
class LstmGradients:
    layers: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]
    readout_w: np.ndarray
    readout_b: np.ndarray

    def flat(self) -> List[np.ndarray]:
        return [g for triple in self.layers for g in triple] + [self.readout_w, self.readout_b]


def lstm_loss(model: LstmModel, windows: Any, targets: Any) -> float:
    """Mean over the batch and the H heads of the squared error, in standardized target units."""
    tensor = _window_tensor(windows, model.input_arity, model.window)
    out, _, _ = _run(model, tensor)
    scaled = (np.asarray(targets, dtype=np.float64).reshape(out.shape) - model.target_shift) / model.target_scale
    return float(np.mean((out - scaled) ** 2))


def lstm_gradients(model: LstmModel, windows: Any, targets: Any) -> LstmGradients:
    """Backpropagation through time for lstm_loss."""
    tensor = _window_tensor(windows, model.input_arity, model.window)
    if tensor.shape[0] == 0:
        raise EmptyData("Cannot compute gradients on an empty batch")
    out, last_hidden, cache = _run(model, tensor, keep=True)
    scaled = (np.asarray(targets, dtype=np.float64).reshape(out.shape) - model.target_shift) / model.target_scale
    d_out = 2.0 * (out - scaled) / out.size

    grad_rw = last_hidden.T @ d_out
    grad_rb = d_out.sum(axis=0)
    batch, steps = tensor.shape[0], tensor.shape[1]

    # Gradient flowing into each layer's hidden outputs, per step
    d_seq = np.zeros((batch, steps, model.layers[-1].hidden))
    d_seq[:, -1] = d_out @ model.readout_w.T

    grads: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore
    for index in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[index]
        h_dim = layer.hidden
        gW = np.zeros_like(layer.W)
        gU = np.zeros_like(layer.U)
        gb = np.zeros_like(layer.b)
        d_input = np.zeros((batch, steps, layer.W.shape[0]))
        dh_next = np.zeros((batch, h_dim))
        dc_next = np.zeros((batch, h_dim))
        for t in range(steps - 1, -1, -1):
            x_t, h_prev, c_prev, i, f, o, g, tanh_c = cache[index][t]
            dh = d_seq[:, t] + dh_next
            d_o = dh * tanh_c
            dc = dc_next + dh * o * (1.0 - tanh_c * tanh_c)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                d_o * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ], axis=1)
            gW += x_t.T @ dz
            gU += h_prev.T @ dz
            gb += dz.sum(axis=0)
            d_input[:, t] = dz @ layer.W.T
            dh_next = dz @ layer.U.T
            dc_next = dc * f
        grads[index] = (gW, gU, gb)
        d_seq = d_input
    return LstmGradients(grads, grad_rw, grad_rb)


def init_lstm(input_arity: int, config: LstmConfig, horizon: Optional[int] = None, seed: Optional[int] = None,
              schema_hash: str = "", target_shift: float = 0.0, target_scale: float = 1.0) -> LstmModel:
    """Uniform(+-1/sqrt(hidden)) weights, zero biases except a forget-gate bias of 1."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    h_dim = config.hidden_dim
    bound = 1.0 / math.sqrt(h_dim)
    layers = []
    fan_in = input_arity
    for _ in range(config.layers):
        b = np.zeros(4 * h_dim)
        b[h_dim:2 * h_dim] = 1.0
        layers.append(LstmLayer(rng.uniform(-bound, bound, (fan_in, 4 * h_dim)),
                                rng.uniform(-bound, bound, (h_dim, 4 * h_dim)), b))
        fan_in = h_dim
    out = config.horizon if horizon is None else horizon
    return LstmModel(tuple(layers), rng.uniform(-bound, bound, (h_dim, out)), np.zeros(out),
                     config.window, config, schema_hash, target_shift, target_scale)


def make_windows(X: Any, y: Any, window: int, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cut aligned training segments.

    Returns:
        Tuple[np.ndarray, np.ndarray]: windows (m, N, d) of X[t-N+1..t] and
        targets (m, H) of y[t+1..t+H]

    Raises:
        EmptyData: If the series is shorter than N + H
    """
    matrix = np.asarray(X, dtype=np.float64)
    series = np.asarray(y, dtype=np.float64).reshape(-1)
    if matrix.ndim != 2 or matrix.shape[0] != series.size:
        raise ArityMismatch("X and y must have the same number of samples")
    m = series.size - window - horizon + 1
    if m < 1:
        raise EmptyData(f"Need at least {window + horizon} samples, got {series.size}")
    starts = np.arange(m)
    windows = matrix[starts[:, None] + np.arange(window)[None, :]]
    targets = series[(starts + window)[:, None] + np.arange(horizon)[None, :]]
    return windows, targets


def lstm_train(windows: Any, targets: Any, config: LstmConfig, schema_hash: str = "",
               target_stats: Optional[Tuple[float, float]] = None,
               seed: Optional[int] = None) -> Tuple[LstmModel, TrainReport]:
    """
    Train a multi-output LSTM with Adam.

    Args:
        windows: (m, N, d) input windows
        targets: (m, H) future KPI values
        config (LstmConfig): Architecture and training settings
        schema_hash (str): Digest of the feature schema
        target_stats: (shift, scale) to use instead of the targets' own mean/std
        seed: Overrides config.seed

    Returns:
        Tuple[LstmModel, TrainReport]: The model and its per-epoch loss curve

    Raises:
        EmptyData: If there are no windows
        DivergedTraining: If the loss becomes non-finite
    """
    tensor = np.asarray(windows, dtype=np.float64)
    target = np.asarray(targets, dtype=np.float64)
    if tensor.ndim != 3 or tensor.shape[0] == 0:
        raise EmptyData("Training needs at least one (N, d) window")
    if target.ndim == 1:
        target = target.reshape(-1, 1)
    if target.shape[0] != tensor.shape[0]:
        raise ArityMismatch(f"Got {tensor.shape[0]} windows but {target.shape[0]} targets")
    if tensor.shape[1] != config.window:
        raise WindowLengthMismatch(f"Windows hold {tensor.shape[1]} steps, config says {config.window}")

    shift, scale = target_stats if target_stats is not None else target_scaling(target)
    seed = config.seed if seed is None else seed
    model = init_lstm(tensor.shape[2], config, target.shape[1], seed, schema_hash, shift, scale)
    params = model.parameters()
    optimizer = make_optimizer("adam", params, config.learning_rate)
    rng = np.random.default_rng(seed + 1)
    n = tensor.shape[0]
    batch_size = min(config.batch_size, n)

    started = time.perf_counter()
    curve: List[float] = []
    seen = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        initial = lstm_loss(model, tensor, target)
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = order[start:start + batch_size]
                optimizer.step(params, lstm_gradients(model, tensor[batch], target[batch]).flat())
                seen += batch.size
            loss = lstm_loss(model, tensor, target)
            if not math.isfinite(loss):
                raise DivergedTraining(f"LSTM loss became non-finite at epoch {epoch + 1}",
                                       details={"epoch": epoch + 1})
            curve.append(loss)

    report = TrainReport(curve[-1], curve, time.perf_counter() - started, seen, initial)
    logger.debug(f"Trained LSTM {config.layers}x{config.hidden_dim} H={target.shape[1]}: "
                 f"loss {initial:.4g} -> {report.final_loss:.4g} in {report.wall_time_s:.2f}s")
    return model, report


def dirrec_train(windows: Any, targets: Any, config: LstmConfig,
                 schema_hash: str = "") -> Tuple[DirRecChain, List[TrainReport]]:
    """
    Train the H chain members one after another.

    Member h is trained on the window augmented with the (scaled) predictions
    of members 1..h-1 on the same training windows.
    """
    tensor = np.asarray(windows, dtype=np.float64)
    target = np.asarray(targets, dtype=np.float64)
    if target.ndim == 1:
        target = target.reshape(-1, 1)
    if tensor.ndim != 3 or tensor.shape[0] == 0:
        raise EmptyData("Training needs at least one (N, d) window")
    stats = target_scaling(target)
    single = replace(config, horizon=1)

    members: List[LstmModel] = []
    reports: List[TrainReport] = []
    scaled = np.zeros((tensor.shape[0], 0))
    for h in range(target.shape[1]):
        member, report = lstm_train(_augment(tensor, scaled), target[:, h], single, schema_hash,
                                    stats, seed=config.seed + h)
        members.append(member)
        reports.append(report)
        out, _, _ = _run(member, _augment(tensor, scaled))
        scaled = np.concatenate([scaled, out], axis=1)
    return DirRecChain(tuple(members)), reports


class RollingForecaster:
    """
    Periodic forecasts over a stream of feature vectors.

    Forecasts are due at t0 + k * every_s (k >= 1) on record time, t0 being the
    first timestamp seen. A due forecast with an unfilled window becomes a
    ForecastGap.
    """

    def __init__(self, model: ForecastModel, every_s: int):
        if every_s < 1:
            raise ValidationError(f"every_s must be >= 1, got {every_s}")
        self.model = model
        self.every_ms = every_s * 1000
        self.window = SlidingWindow(model.window)
        self.next_due: Optional[int] = None
        self.emitted = 0
        self.gaps = 0

    def swap(self, model: ForecastModel) -> None:
        if model.window != self.window.capacity:
            self.window = SlidingWindow(model.window)
        self.model = model

    def push(self, vector: FeatureVector) -> Optional[Union[ForecastResult, ForecastGap]]:
        self.window.push(vector)
        ts = vector.timestamp_ms
        if self.next_due is None:
            self.next_due = ts + self.every_ms
            return None
        if ts < self.next_due:
            return None
        while self.next_due <= ts:
            self.next_due += self.every_ms
        if not self.window.is_full:
            self.gaps += 1
            return ForecastGap(ts, len(self.window), self.window.capacity)
        self.emitted += 1
        return forecast(self.model, self.window.snapshot(), ts)

    def finish(self) -> Optional[ForecastGap]:
        """A stream that never filled the window reports one gap if none was reported."""
        if self.emitted == 0 and self.gaps == 0 and not self.window.is_full:
            self.gaps += 1
            last = self.window.snapshot()[-1].timestamp_ms if len(self.window) else 0
            return ForecastGap(last, len(self.window), self.window.capacity)
        return None


def rolling_forecast(model: ForecastModel, stream: Iterable[FeatureVector],
                     every_s: int) -> Iterator[Union[ForecastResult, ForecastGap]]:
    """Yield forecasts and gap markers for a stream of vectors."""
    roller = RollingForecaster(model, every_s)
    for vector in stream:
        emitted = roller.push(vector)
        if emitted is not None:
            yield emitted
    gap = roller.finish()
    if gap is not None:
        yield gap


# Functions for the drst CLI

def forecast_cli(args: List[str]) -> int:
    """
    Emit periodic forecasts for a trace as JSON lines, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser
    from drst.commands.config import load_config
    from drst.commands.model_registry import load_artifact
    from drst.commands.trace_ingest import iter_trace, normalize

    parser = build_parser("drst forecast", "Rolling KPI forecasts over a trace")
    parser.add_argument("--model", required=True, help="Registry root, version directory or payload file")
    parser.add_argument("--trace", required=True, help="Trace file (JSON lines)")
    parser.add_argument("--every", type=int, help="Seconds between forecasts (default forecast.every_s)")
    parser.add_argument("--horizon", type=int, help="Expected horizon; must match the model")
    parser.add_argument("--config", help="TOML configuration file")
    options = parser.parse_args(args)

    config = load_config(options.config, {"forecast.every_s": options.every})
    artifact = load_artifact(options.model, kinds=("lstm", "dirrec"))
    model = artifact.model
    if options.horizon is not None and options.horizon != model.horizon:
        raise UsageError(f"--horizon {options.horizon} does not match the model horizon {model.horizon}")

    vectors = (normalize(record, artifact.schema) for record in iter_trace(options.trace))
    for item in rolling_forecast(model, vectors, config.get("forecast.every_s")):
        sys.stdout.write(json.dumps(item.to_dict()) + "\n")
    return 0
