import io
import os
import json
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from drst.commands import forecaster
from drst.commands.error_handler import (
    ArityMismatch,
    ChainArityMismatch,
    EmptyData,
    UsageError,
    ValidationError,
    WindowLengthMismatch,
)
from drst.commands.forecaster import DirRecChain, ForecastGap, ForecastResult, LstmConfig, LstmModel, RollingForecaster
from drst.commands.model_registry import Artifact, ModelRegistry
from drst.commands.trace_ingest import FeatureVector, TraceRecord, fit_schema, write_trace


def vectors(count, arity=2, start_ms=0, step_ms=1000):
    return [FeatureVector(tuple(0.1 * (k + j) for j in range(arity)), start_ms + k * step_ms) for k in range(count)]


class TestLstmConfig(unittest.TestCase):

    def test_bounds(self):
        for bad in ({"layers": 0}, {"layers": 4}, {"hidden_dim": 16}, {"hidden_dim": 256}, {"window": 0},
                    {"horizon": 0}, {"learning_rate": -1.0}):
            with self.subTest(**bad):
                with self.assertRaises(ValidationError):
                    LstmConfig(**bad)


class TestLstmGradients(unittest.TestCase):
    """Backpropagation through time against central finite differences."""

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        config = LstmConfig(layers=2, hidden_dim=32, window=4, horizon=3)
        model = forecaster.init_lstm(2, config, target_shift=5.0, target_scale=2.0)
        windows = rng.normal(size=(3, 4, 2))
        targets = rng.normal(size=(3, 3)) * 2.0 + 5.0
        analytic = forecaster.lstm_gradients(model, windows, targets).flat()
        eps = 1e-5
        for p, g in zip(model.parameters(), analytic):
            flat_indices = rng.choice(p.size, size=min(p.size, 15), replace=False)
            for flat in flat_indices:
                index = np.unravel_index(flat, p.shape)
                saved = p[index]
                p[index] = saved + eps
                up = forecaster.lstm_loss(model, windows, targets)
                p[index] = saved - eps
                down = forecaster.lstm_loss(model, windows, targets)
                p[index] = saved
                numeric = (up - down) / (2 * eps)
                tolerance = 1e-3 * (abs(numeric) + abs(g[index])) + 1e-8
                self.assertLess(abs(numeric - g[index]), tolerance, msg=f"parameter index {index}")


class TestWindows(unittest.TestCase):

    def test_make_windows_alignment(self):
        X = np.arange(20, dtype=float).reshape(10, 2)
        y = np.arange(10, dtype=float) * 10.0
        windows, targets = forecaster.make_windows(X, y, 3, 2)
        self.assertEqual(windows.shape, (6, 3, 2))
        self.assertEqual(targets.shape, (6, 2))
        np.testing.assert_array_equal(windows[0], X[0:3])
        np.testing.assert_array_equal(targets[0], [30.0, 40.0])
        np.testing.assert_array_equal(windows[-1], X[5:8])
        np.testing.assert_array_equal(targets[-1], [80.0, 90.0])

    def test_short_series(self):
        with self.assertRaises(EmptyData):
            forecaster.make_windows(np.zeros((4, 1)), np.zeros(4), 3, 2)

    def test_window_checks(self):
        model = forecaster.init_lstm(2, LstmConfig(window=4, horizon=2))
        with self.assertRaises(WindowLengthMismatch):
            forecaster.lstm_forward(model, vectors(3))
        with self.assertRaises(ArityMismatch):
            forecaster.lstm_forward(model, vectors(4, arity=3))


class TestLstmModel(unittest.TestCase):

    def test_single_pass_forecast(self):
        model = forecaster.init_lstm(2, LstmConfig(window=4, horizon=3), target_shift=100.0, target_scale=10.0)
        window = vectors(4)
        result = forecaster.lstm_forward(model, window)
        self.assertEqual(result.base_timestamp_ms, 3000)
        self.assertEqual(result.horizon, (1, 2, 3))
        np.testing.assert_allclose(result.values, forecaster.lstm_predict(model, window)[0])

    def test_gate_activations_stay_bounded(self):
        model = forecaster.init_lstm(3, LstmConfig(layers=2, window=6, horizon=2), seed=5)
        rng = np.random.default_rng(8)
        # Saturating inputs alongside ordinary ones
        windows = np.concatenate([rng.normal(size=(4, 6, 3)), 1e3 * rng.normal(size=(4, 6, 3)),
                                  np.full((1, 6, 3), -1e6)])
        out, last, cache = forecaster._run(model, windows, keep=True)
        self.assertTrue(np.all(np.isfinite(out)))
        self.assertTrue(np.all(np.abs(last) <= 1.0))
        self.assertEqual([len(steps) for steps in cache], [6, 6])
        for steps in cache:
            for t, (_, h_prev, c_prev, i, f, o, g, tanh_c) in enumerate(steps):
                for gate in (i, f, o):
                    self.assertTrue(np.all((gate >= 0.0) & (gate <= 1.0)))
                for squashed in (g, tanh_c, h_prev):
                    self.assertTrue(np.all(np.abs(squashed) <= 1.0))
                # The cell state grows by at most one per step
                self.assertTrue(np.all(np.abs(c_prev) <= t))

    def test_document_round_trip(self):
        model = forecaster.init_lstm(2, LstmConfig(layers=2, window=4, horizon=3), schema_hash="s")
        restored = LstmModel.from_dict(json.loads(json.dumps(model.to_dict())))
        window = np.random.default_rng(3).normal(size=(4, 2))
        np.testing.assert_array_equal(forecaster.lstm_predict(restored, window), forecaster.lstm_predict(model, window))

    def test_training_reduces_loss(self):
        t = np.arange(300)
        X = np.column_stack([np.sin(2 * np.pi * t / 25), np.cos(2 * np.pi * t / 25)])
        y = 700.0 + 200.0 * np.sin(2 * np.pi * t / 25)
        windows, targets = forecaster.make_windows(X, y, 5, 2)
        config = LstmConfig(hidden_dim=32, window=5, horizon=2, epochs=15, learning_rate=0.01)
        model, report = forecaster.lstm_train(windows, targets, config)
        self.assertEqual(model.horizon, 2)
        self.assertLess(report.final_loss, 0.5 * report.initial_loss)


class TestDirRec(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(size=(60, 2))
        y = 100.0 + 50.0 * X[:, 0]
        self.windows, self.targets = forecaster.make_windows(X, y, 4, 3)
        self.config = LstmConfig(window=4, horizon=3, epochs=2)

    def test_member_arity_grows(self):
        chain, reports = forecaster.dirrec_train(self.windows, self.targets, self.config)
        self.assertEqual(chain.horizon, 3)
        self.assertEqual([m.input_arity for m in chain.members], [2, 3, 4])
        self.assertEqual(len(reports), 3)
        self.assertEqual(forecaster.predict_windows(chain, self.windows).shape, (len(self.windows), 3))
        result = forecaster.forecast(chain, self.windows[0], base_timestamp_ms=42)
        self.assertEqual(result.base_timestamp_ms, 42)
        self.assertEqual(len(result.values), 3)

    def test_chain_validation(self):
        single = LstmConfig(window=4, horizon=1)
        first = forecaster.init_lstm(2, single)
        with self.assertRaises(ChainArityMismatch):
            DirRecChain((first, forecaster.init_lstm(2, single)))
        with self.assertRaises(ChainArityMismatch):
            DirRecChain((forecaster.init_lstm(2, LstmConfig(window=4, horizon=2)),))
        chain = DirRecChain((first, forecaster.init_lstm(3, single)))
        with self.assertRaises(ChainArityMismatch):
            forecaster.dirrec_forecast(chain, vectors(4, arity=3))


class TestRollingForecaster(unittest.TestCase):
    """Test cases for the periodic schedule."""

    def test_forecasts_on_schedule(self):
        model = forecaster.init_lstm(2, LstmConfig(window=3, horizon=2))
        emitted = list(forecaster.rolling_forecast(model, vectors(9), every_s=2))
        self.assertTrue(all(isinstance(item, ForecastResult) for item in emitted))
        self.assertEqual([item.base_timestamp_ms for item in emitted], [2000, 4000, 6000, 8000])

    def test_unfilled_window_is_a_gap(self):
        model = forecaster.init_lstm(2, LstmConfig(window=5, horizon=2))
        emitted = list(forecaster.rolling_forecast(model, vectors(7), every_s=2))
        self.assertIsInstance(emitted[0], ForecastGap)
        self.assertEqual((emitted[0].timestamp_ms, emitted[0].filled, emitted[0].needed), (2000, 3, 5))
        self.assertIsInstance(emitted[-1], ForecastResult)

    def test_short_stream_reports_one_gap(self):
        model = forecaster.init_lstm(2, LstmConfig(window=5, horizon=2))
        emitted = list(forecaster.rolling_forecast(model, vectors(2), every_s=30))
        self.assertEqual(len(emitted), 1)
        self.assertEqual(emitted[0].to_dict(), {"gap": True, "ts": 1000, "filled": 2, "needed": 5})

    def test_swap_resizes_the_window(self):
        roller = RollingForecaster(forecaster.init_lstm(2, LstmConfig(window=3, horizon=2)), every_s=1)
        roller.swap(forecaster.init_lstm(2, LstmConfig(window=6, horizon=2)))
        self.assertEqual(roller.window.capacity, 6)

    def test_invalid_interval(self):
        with self.assertRaises(ValidationError):
            RollingForecaster(forecaster.init_lstm(2, LstmConfig()), every_s=0)


class TestForecastCli(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        records = [TraceRecord(k * 1000, {"a": float(k % 7), "b": float(k % 5)}, {"throughput_mbps": 10.0 + k})
                   for k in range(30)]
        self.trace = os.path.join(self.tmp.name, "trace.jsonl")
        write_trace(self.trace, records)
        schema = fit_schema(records)
        model = forecaster.init_lstm(2, LstmConfig(window=4, horizon=3), schema_hash=schema.digest())
        self.registry = os.path.join(self.tmp.name, "registry")
        ModelRegistry(self.registry).publish(Artifact("lstm", model, schema, "throughput_mbps"))

    def tearDown(self):
        self.tmp.cleanup()

    def test_writes_json_lines(self):
        with patch("sys.stdout", new_callable=io.StringIO) as out:
            code = forecaster.forecast_cli(["--model", self.registry, "--trace", self.trace, "--every", "5"])
        self.assertEqual(code, 0)
        lines = [json.loads(line) for line in out.getvalue().splitlines()]
        self.assertEqual([line["base_ts"] for line in lines], [5000, 10000, 15000, 20000, 25000])
        self.assertEqual(lines[0]["horizon"], [1, 2, 3])

    def test_horizon_mismatch(self):
        with self.assertRaises(UsageError):
            forecaster.forecast_cli(["--model", self.registry, "--trace", self.trace, "--horizon", "5"])


if __name__ == "__main__":
    unittest.main()
