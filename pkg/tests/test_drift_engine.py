import io
import os
import json
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from drst.commands import drift_engine, nn_core
from drst.commands.drift_engine import (
    DriftConfig,
    DriftState,
    EventChannel,
    ServingLoop,
    ServingMetrics,
    Severity,
)
from drst.commands.error_handler import (
    ArityMismatch,
    ConfigurationError,
    DivergedTraining,
    InsufficientData,
    StreamClosed,
    TrainingFailed,
    ValidationError,
    WindowNotFull,
)
from drst.commands.eval_metrics import acc5log
from drst.commands.model_registry import Artifact, ModelRegistry
from drst.commands.nn_core import AXIS_ORDER, ConfigLattice, MlpConfig, SearchBudget
from drst.commands.synth_workload import (
    DriftInjection,
    DriftKind,
    Pattern,
    ScenarioSpec,
    ServiceSpec,
    StimulusKind,
    StimulusSpec,
    Topology,
    generate,
)
from drst.commands.config import load_config
from drst.commands.trace_ingest import FeatureVector, SlidingWindow, TraceRecord, build_dataset, write_trace

KPI = "throughput_mbps"

SERVING_CONFIG = MlpConfig(hidden_layers=1, hidden_width=16, activation="tanh", learning_rate=0.01,
                           batch_size=16, epochs=300)


def periodic_trace(seed, duration_s, drift=None):
    spec = ScenarioSpec(ServiceSpec(("bridge", "l2fwd"), Topology.LINEAR),
                        StimulusSpec(StimulusKind.LOAD, {"period_s": 50}), Pattern.PERIODIC_A, seed, duration_s, 1000)
    return generate(spec, drift)


def drift_config(**overrides):
    values = {"window_size": 100, "bins": 8, "delta": 0.05, "severity_cuts": (0.05, 0.10, 0.20),
              "check_every_samples": 100, "retrain_multiplier": 1}
    values.update(overrides)
    return DriftConfig(**values)


def parse_events(stream):
    return [json.loads(line) for line in stream.getvalue().splitlines()]


class TestJsDivergence(unittest.TestCase):
    """Properties of the per-feature JS divergence."""

    def test_two_bin_masses(self):
        self.assertAlmostEqual(drift_engine.js_from_histograms([0.5, 0.5], [0.25, 0.75]), 0.0488, delta=1e-4)
        p = np.array([[0.0], [0.0], [1.0], [1.0]])
        q = np.array([[0.0], [1.0], [1.0], [1.0]])
        self.assertAlmostEqual(drift_engine.js_divergence(p, q, bins=2), 0.0488, delta=1e-4)

    def test_random_window_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p = rng.normal(size=(20, 2))
            q = rng.normal(loc=rng.uniform(0, 2), size=(20, 2))
            forward = drift_engine.js_divergence(p, q, bins=8)
            self.assertEqual(forward, drift_engine.js_divergence(q, p, bins=8))
            self.assertGreaterEqual(forward, 0.0)
            self.assertLessEqual(forward, 1.0)
            self.assertEqual(drift_engine.js_divergence(p, p, bins=8), 0.0)

    def test_disjoint_windows(self):
        p = np.zeros((10, 1))
        q = np.ones((10, 1))
        self.assertAlmostEqual(drift_engine.js_divergence(p, q, bins=4), 1.0, delta=1e-6)

    def test_constant_feature(self):
        p = np.full((10, 1), 3.0)
        self.assertEqual(drift_engine.js_divergence(p, p.copy()), 0.0)

    def test_window_errors(self):
        window = SlidingWindow(10)
        for k in range(5):
            window.push(FeatureVector((float(k),), k))
        with self.assertRaises(WindowNotFull):
            drift_engine.js_divergence(window, np.zeros((10, 1)))
        with self.assertRaises(WindowNotFull):
            drift_engine.js_divergence(np.zeros((10, 1)), np.zeros((9, 1)))
        with self.assertRaises(ArityMismatch):
            drift_engine.js_divergence(np.zeros((10, 2)), np.zeros((10, 3)))

    def test_estimator_floor(self):
        self.assertAlmostEqual(drift_engine.estimator_floor(32, 100), 31 / (400 * np.log(2)))


class TestSeverity(unittest.TestCase):
    """Test cases for drift grading and the drift config."""

    def test_ladder(self):
        config = DriftConfig()
        for score, expected in ((0.03, Severity.NONE), (0.05, Severity.S1), (0.06, Severity.S1),
                                (0.12, Severity.S2), (0.25, Severity.SK), (1.0, Severity.SK)):
            with self.subTest(score=score):
                self.assertEqual(drift_engine.classify_severity(score, config), expected)

    def test_budget_of_each_tier(self):
        self.assertEqual(Severity.S1.budget, SearchBudget.S1)
        self.assertEqual(Severity.SK.budget.axes, AXIS_ORDER)
        with self.assertRaises(ValidationError):
            Severity.NONE.budget

    def test_config_invariants(self):
        for bad in ({"window_size": 5}, {"bins": 1}, {"delta": 0.0}, {"delta": 1.0},
                    {"severity_cuts": (0.05, 0.2, 0.1)}, {"severity_cuts": (0.04, 0.1, 0.2)},
                    {"severity_cuts": (0.05, 0.1)}, {"check_every_s": 0}, {"retrain_multiplier": 0}):
            with self.subTest(**bad):
                with self.assertRaises(ConfigurationError):
                    DriftConfig(**bad)

    def test_cuts_follow_delta(self):
        config = DriftConfig.from_dict({"delta": 0.1})
        self.assertEqual(config.severity_cuts, (0.1, 0.2, 0.4))
        self.assertEqual(DriftConfig.from_dict(config.to_dict()), config)
        with self.assertRaises(ConfigurationError):
            DriftConfig.from_dict({"delta": 0.1, "threshold": 2})

    def test_rebase(self):
        state = DriftState.empty(10)
        for k in range(10):
            state.current.push(FeatureVector((float(k),), k))
        state.rebase()
        self.assertEqual(state.reference.snapshot(), state.current.snapshot())
        fresh = [FeatureVector((0.5,), 100 + k) for k in range(10)]
        state.rebase(fresh)
        self.assertEqual(list(state.reference.snapshot()), fresh)
        self.assertEqual(list(state.current.snapshot()), fresh)


class TestDispatchUpdate(unittest.TestCase):
    """Test cases for tiered retraining."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.registry = ModelRegistry(self.tmp.name)
        self.records = periodic_trace(3, 120)
        self.names = sorted(self.records[0].features)
        self.lattice = ConfigLattice(MlpConfig(hidden_layers=1, hidden_width=8, epochs=5),
                                     {"learning_rate": (0.01, 0.003), "batch_size": (16,), "hidden_layers": (1,),
                                      "activation": ("tanh",), "optimizer": ("adam",)})

    def tearDown(self):
        self.tmp.cleanup()

    def test_tier_decides_the_search_axes(self):
        expected = {
            Severity.S1: ("learning_rate", "batch_size"),
            Severity.S2: ("hidden_layers", "activation", "optimizer"),
            Severity.SK: AXIS_ORDER,
        }
        for index, (severity, axes) in enumerate(expected.items(), start=1):
            with patch("drst.commands.drift_engine.grid_search", wraps=nn_core.grid_search) as search:
                decision = drift_engine.dispatch_update(severity, self.records, self.registry, self.lattice, KPI,
                                                        self.names, triggered_at=5000, score=0.3)
            with self.subTest(severity=severity):
                self.assertEqual(search.call_args.args[3], SearchBudget(severity.value))
                self.assertEqual(decision.axes, axes)
                self.assertEqual(decision.status, "published")
                self.assertEqual(decision.version, index)
                self.assertEqual(decision.samples, 120)
                self.assertEqual(decision.to_dict()["budget"], severity.value)
                manifest, artifact = self.registry.get(decision.version)
                self.assertEqual(manifest.metrics["js_divergence"], 0.3)
                self.assertEqual(artifact.schema.names, tuple(self.names))

    def test_unlabeled_records_block_the_update(self):
        unlabeled = [TraceRecord(r.timestamp_ms, r.features) for r in self.records]
        with self.assertRaises(InsufficientData):
            drift_engine.dispatch_update(Severity.S1, unlabeled, self.registry, self.lattice, KPI, self.names)
        self.assertEqual(self.registry.manifests(), [])

    def test_training_failure_keeps_the_registry(self):
        with patch("drst.commands.drift_engine.grid_search", side_effect=DivergedTraining("all diverged")):
            with self.assertRaises(TrainingFailed) as ctx:
                drift_engine.dispatch_update(Severity.S2, self.records, self.registry, self.lattice, KPI, self.names)
        self.assertEqual(ctx.exception.details["cause"], DivergedTraining.code)
        self.assertEqual(self.registry.manifests(), [])


class TestEventChannel(unittest.TestCase):

    def test_lines_are_sorted_json(self):
        stream = io.StringIO()
        channel = EventChannel(stream, queue_size=2)
        for k in range(10):
            channel.emit("prediction", {"value": float(k), "timestamp_ms": k}, k)
        channel.emit("drift", {"score": 0.01}, 10)
        channel.close()
        lines = stream.getvalue().splitlines()
        self.assertEqual(len(lines), 11)
        self.assertEqual(lines[0], '{"kind": "prediction", "payload": {"timestamp_ms": 0, "value": 0.0}, "ts": 0}')
        self.assertEqual(channel.counts["prediction"], 10)
        self.assertEqual(channel.counts["drift"], 1)

    def test_rejects_unknown_kinds_and_closed_channels(self):
        channel = EventChannel(io.StringIO())
        with self.assertRaises(ValidationError):
            channel.emit("heartbeat", {}, 0)
        channel.close()
        with self.assertRaises(StreamClosed):
            channel.emit("update", {}, 0)


class TestServingLoop(unittest.TestCase):
    """End-to-end drift detection and correction on a synthetic trace."""

    @classmethod
    def setUpClass(cls):
        training = periodic_trace(11, 1000)
        dataset = build_dataset(training, KPI)
        model, _ = nn_core.mlp_train(dataset.X, dataset.y, SERVING_CONFIG, dataset.schema.digest())
        cls.artifact = Artifact("mlp", model, dataset.schema, KPI)
        cls.drifted = periodic_trace(5, 1500, DriftInjection(500, DriftKind.AFFINE_SHIFT, 2.0))
        cls.steady = periodic_trace(5, 1500)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.lattice = ConfigLattice(SERVING_CONFIG, {"learning_rate": (0.01,)})

    def tearDown(self):
        self.tmp.cleanup()

    def serve(self, records, directory="registry", drift=None, **kwargs):
        registry = ModelRegistry(f"{self.tmp.name}/{directory}")
        registry.publish(self.artifact)
        stream = io.StringIO()
        events = EventChannel(stream)
        metrics = ServingMetrics()
        loop = ServingLoop(registry, drift or drift_config(), self.lattice, events, KPI, metrics, **kwargs)
        summary = loop.run(records)
        events.close()
        return loop, summary, metrics, stream

    def test_drift_is_detected_and_corrected(self):
        _, summary, metrics, stream = self.serve(self.drifted)
        events = parse_events(stream)

        updates = [e for e in events if e["kind"] == "update"]
        alarms = [e for e in events if e["kind"] == "drift" and e["payload"]["severity"] != "None"]
        self.assertEqual(len(updates), 1)
        self.assertEqual(len(alarms), 1)
        update = updates[0]["payload"]
        self.assertEqual(update["status"], "published")
        self.assertEqual(update["severity"], "SK")
        self.assertEqual((update["version"], update["parent_version"]), (2, 1))
        # Detected within one window plus one check period of the switch
        self.assertLessEqual(update["triggered_at"], (500 + 100 + 100) * 1000)
        self.assertEqual(summary.final_version, 2)

        predictions = [e["payload"] for e in events if e["kind"] == "prediction"]
        self.assertEqual(len(predictions), 1500)
        self.assertEqual(summary.samples, summary.predictions)
        self.assertEqual(summary.errors, 0)

        def accuracy(items):
            return acc5log([p["value"] for p in items], [p["truth"] for p in items])

        before = accuracy([p for p in predictions if p["timestamp_ms"] < 500000])
        stale = accuracy([p for p in predictions if 500000 <= p["timestamp_ms"] < 600000])
        after = accuracy([p for p in predictions if p["version"] == 2])
        self.assertGreaterEqual(before - stale, 0.2)
        self.assertGreaterEqual(after, before - 0.05)

        self.assertEqual(metrics.value("drst_samples_total"), 1500)
        self.assertEqual(metrics.value("drst_predictions_total"), 1500)
        self.assertEqual(metrics.value("drst_updates_total", {"status": "published"}), 1)
        self.assertEqual(metrics.value("drst_model_version"), 2)
        self.assertEqual(metrics.value("drst_drift_checks_total"), summary.checks)

    def test_event_log_is_deterministic(self):
        _, _, _, first = self.serve(self.drifted, "first")
        _, _, _, second = self.serve(self.drifted, "second")
        self.assertEqual(first.getvalue(), second.getvalue())

    def test_steady_trace_never_retrains(self):
        _, summary, _, stream = self.serve(self.steady, drift=drift_config(window_size=200))
        self.assertEqual(summary.updates, [])
        self.assertEqual(summary.final_version, 1)
        self.assertGreater(summary.checks, 0)
        self.assertFalse(any(e["kind"] == "update" for e in parse_events(stream)))

    def test_unlabeled_drift_is_blocked(self):
        records = [TraceRecord(r.timestamp_ms, r.features) for r in self.drifted]
        loop, summary, metrics, _ = self.serve(records)
        self.assertEqual(len(loop.labeled), 0)
        self.assertEqual([u.status for u in summary.updates], ["blocked"])
        self.assertEqual(summary.updates[0].error, InsufficientData.code)
        self.assertEqual(summary.final_version, 1)
        self.assertEqual(metrics.value("drst_updates_total", {"status": "blocked"}), 1)

    def test_retraining_set_skips_unlabeled_records(self):
        records = [r if k % 2 == 0 else TraceRecord(r.timestamp_ms, r.features)
                   for k, r in enumerate(self.drifted)]
        with patch("drst.commands.drift_engine.dispatch_update", wraps=drift_engine.dispatch_update) as dispatch:
            loop, summary, _, _ = self.serve(records)
        self.assertGreaterEqual(dispatch.call_count, 1)
        recent = dispatch.call_args_list[0].args[1]
        self.assertEqual(len(recent), loop.drift.retrain_size)
        self.assertTrue(all(r.kpi(KPI) is not None for r in recent))
        # Every other record is labeled, so the set spans twice its size
        self.assertEqual(recent[-1].timestamp_ms - recent[0].timestamp_ms, 2 * 1000 * (len(recent) - 1))
        self.assertEqual(len(loop.history), loop.drift.window_size)

    def test_failed_retraining_keeps_serving(self):
        with patch("drst.commands.drift_engine.grid_search", side_effect=DivergedTraining("all diverged")):
            _, summary, _, _ = self.serve(self.drifted)
        self.assertEqual([u.status for u in summary.updates], ["failed"])
        self.assertEqual(summary.final_version, 1)
        self.assertEqual(summary.predictions, 1500)

    def test_background_retraining(self):
        now = {"s": 0.0}

        def paced(records):
            for k, record in enumerate(records):
                now["s"] = float(k)
                yield record

        drift = drift_config(check_every_samples=0, check_every_s=100)
        _, summary, _, stream = self.serve(paced(self.drifted), drift=drift,
                                           clock=lambda: now["s"], wall_time=lambda: 1.0)
        self.assertEqual([u.status for u in summary.updates], ["published"])
        self.assertEqual(summary.final_version, 2)
        self.assertEqual(summary.predictions, 1500)
        self.assertTrue(all(e["ts"] == 1000 for e in parse_events(stream)))

    def test_stop_ends_the_run(self):
        holder = {}

        def stopping(records):
            for k, record in enumerate(records):
                if k == 50:
                    holder["loop"].stop()
                yield record

        registry = ModelRegistry(f"{self.tmp.name}/stop")
        registry.publish(self.artifact)
        events = EventChannel(io.StringIO())
        loop = ServingLoop(registry, drift_config(), self.lattice, events, KPI)
        holder["loop"] = loop
        summary = loop.run(stopping(self.drifted))
        events.close()
        self.assertTrue(summary.stopped)
        self.assertEqual(summary.samples, 50)


class TestServeEntryPoints(unittest.TestCase):
    """run_loop and drst serve on a short replayed trace."""

    @classmethod
    def setUpClass(cls):
        cls.records = periodic_trace(3, 150)
        dataset = build_dataset(cls.records, KPI)
        model, _ = nn_core.mlp_train(dataset.X, dataset.y, MlpConfig(hidden_layers=1, hidden_width=8, epochs=5),
                                     dataset.schema.digest())
        cls.artifact = Artifact("mlp", model, dataset.schema, KPI)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = os.path.join(self.tmp.name, "registry")
        ModelRegistry(self.root).publish(self.artifact)

    def tearDown(self):
        self.tmp.cleanup()

    def test_run_loop_from_config(self):
        config = load_config(None, {"drift.check_every_samples": 100, "drift.bins": 8})
        stream = io.StringIO()
        events = EventChannel(stream)
        summary = drift_engine.run_loop(self.records, ModelRegistry(self.root), config, events)
        events.close()
        self.assertEqual((summary.samples, summary.predictions, summary.final_version), (150, 150, 1))
        # Fewer than two full windows: no check has run yet
        self.assertEqual(summary.checks, 0)
        timestamps = [e["ts"] for e in parse_events(stream) if e["kind"] == "prediction"]
        self.assertEqual(timestamps, [r.timestamp_ms for r in self.records])

    def test_serve_cli(self):
        trace = os.path.join(self.tmp.name, "trace.jsonl")
        write_trace(trace, self.records)
        log = os.path.join(self.tmp.name, "events.jsonl")
        with patch("drst.commands.drift_engine.signal.signal"), \
                patch("sys.stdout", new_callable=io.StringIO) as out:
            code = drift_engine.serve_cli(["--trace", trace, "--model-dir", self.root, "--events", log,
                                           "--check-every-samples", "100", "--delta", "0.1", "--bins", "8"])
        self.assertEqual(code, 0)
        summary = json.loads(out.getvalue())
        self.assertEqual(summary["samples"], 150)
        with open(log, 'r', encoding='utf-8') as f:
            kinds = [json.loads(line)["kind"] for line in f]
        self.assertEqual(kinds.count("prediction"), 150)

    def test_serve_cli_rejects_inconsistent_flags(self):
        with self.assertRaises(ConfigurationError):
            drift_engine.serve_cli(["--trace", "t.jsonl", "--model-dir", self.root, "--delta", "1.5"])


if __name__ == "__main__":
    unittest.main()
