import io
import os
import csv
import json
import tempfile
import unittest

import numpy as np

from drst.commands import eval_metrics
from drst.commands.config import RunConfig
from drst.commands.error_handler import (
    AlignmentGap,
    ConstantTruth,
    EmptyData,
    HorizonOutOfRange,
    LengthMismatch,
    NonPositiveValue,
    ValidationError,
    ZeroTruth,
)
from drst.commands.eval_metrics import BenchRow, BenchSuite
from drst.commands.forecaster import ForecastResult, LstmConfig, lstm_train, make_windows, predict_windows
from drst.commands.synth_workload import generate, preset
from drst.commands.trace_ingest import build_dataset, write_trace


class TestMetrics(unittest.TestCase):
    """Test cases for the point metrics."""

    def test_r2(self):
        truth = [1.0, 2.0, 3.0, 4.0]
        self.assertEqual(eval_metrics.r2(truth, truth), 1.0)
        self.assertAlmostEqual(eval_metrics.r2([2.5] * 4, truth), 0.0, places=12)
        self.assertAlmostEqual(eval_metrics.r2([1.0, 2.0, 3.0, 5.0], truth), 0.8, places=12)
        with self.assertRaises(ConstantTruth):
            eval_metrics.r2([1.0, 2.0], [3.0, 3.0])
        with self.assertRaises(LengthMismatch):
            eval_metrics.r2([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_acc5log(self):
        self.assertAlmostEqual(eval_metrics.acc5log([104.0, 106.0, 100.0], [100.0] * 3), 2 / 3)
        # Symmetric in log space
        self.assertEqual(eval_metrics.acc5log([100.0], [104.0]), 1.0)
        self.assertEqual(eval_metrics.acc5log([110.0], [100.0], tol=0.2), 1.0)
        with self.assertRaises(NonPositiveValue):
            eval_metrics.acc5log([0.0, 1.0], [1.0, 1.0])

    def test_mape_skips_zero_truth(self):
        value, excluded = eval_metrics.mape_with_exclusions([1.0, 2.0, 3.0], [0.0, 2.0, 4.0])
        self.assertAlmostEqual(value, 0.125)
        self.assertEqual(excluded, 1)
        with self.assertRaises(ZeroTruth):
            eval_metrics.mape([1.0], [0.0])
        self.assertAlmostEqual(eval_metrics.mae([1.0, 5.0], [2.0, 2.0]), 2.0)

    def test_evaluate_reports_undefined_metrics_as_none(self):
        report = eval_metrics.evaluate([-1.0, 2.0], [3.0, 3.0])
        self.assertIsNone(report.r2)
        self.assertIsNone(report.acc5log)
        self.assertEqual(report.n, 2)
        self.assertAlmostEqual(report.mae, 2.5)


class TestHorizonMetrics(unittest.TestCase):

    def setUp(self):
        self.forecasts = [ForecastResult(0, (100.0, 200.0)), ForecastResult(1000, (190.0, 300.0))]
        self.truth = {1000: 100.0, 2000: 190.0, 3000: 300.0}

    def test_alignment(self):
        self.assertEqual(eval_metrics.acc_at_horizon(self.forecasts, self.truth, 1, 1000), 1.0)
        # |ln(200/190)| exceeds ln(1.05)
        self.assertEqual(eval_metrics.acc_at_horizon(self.forecasts, self.truth, 2, 1000), 0.5)

    def test_errors(self):
        with self.assertRaises(HorizonOutOfRange):
            eval_metrics.acc_at_horizon(self.forecasts, self.truth, 3, 1000)
        with self.assertRaises(AlignmentGap):
            eval_metrics.acc_at_horizon(self.forecasts, {1000: 100.0}, 1, 1000)
        with self.assertRaises(EmptyData):
            eval_metrics.acc_at_horizon([], self.truth, 1, 1000)

    def test_per_column_accuracy(self):
        pred = np.array([[100.0, 100.0], [100.0, 150.0]])
        truth = np.full((2, 2), 100.0)
        self.assertEqual(eval_metrics.horizon_accuracy(pred, truth), [1.0, 0.5])
        with self.assertRaises(LengthMismatch):
            eval_metrics.horizon_accuracy(pred, truth[:, :1])


class TestBench(unittest.TestCase):
    """Test cases for the benchmark harness."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        write_trace(os.path.join(self.tmp.name, "train.jsonl"),
                    generate(preset("bridge-load_A", seed=1, duration_s=200)))
        write_trace(os.path.join(self.tmp.name, "unseen.jsonl"),
                    generate(preset("bridge-load_B", seed=2, duration_s=60)))

    def tearDown(self):
        self.tmp.cleanup()

    def test_suite_document(self):
        suite = BenchSuite.from_dict({"train": "train.jsonl", "unseen": ["/abs/unseen.jsonl"]}, "/data")
        self.assertEqual(suite.train, os.path.join("/data", "train.jsonl"))
        self.assertEqual(suite.unseen, ("/abs/unseen.jsonl",))
        self.assertEqual(suite.models, ("mlp", "lstm"))
        for bad in ({}, {"train": "t", "models": ["svm"]}, {"train": "t", "train_fraction": 1.5}):
            with self.subTest(document=bad):
                with self.assertRaises(ValidationError):
                    BenchSuite.from_dict(bad)

    def test_table_columns(self):
        report = eval_metrics.evaluate([1.0, 2.0], [1.0, 2.5], 0.25, acc_at=[0.5])
        out = io.StringIO()
        eval_metrics.write_table([BenchRow("lstm", "t.jsonl", "test", report)], out, 2)
        rows = list(csv.DictReader(io.StringIO(out.getvalue())))
        self.assertEqual(list(rows[0]), eval_metrics.table_columns(2))
        self.assertEqual(rows[0]["acc_t1"], "0.500000")
        self.assertEqual(rows[0]["acc_t2"], "")
        self.assertEqual(rows[0]["latency_ms_per_sample"], "0.250000")

    def test_bench_cli(self):
        suite_path = os.path.join(self.tmp.name, "suite.json")
        with open(suite_path, 'w', encoding='utf-8') as f:
            json.dump({"train": "train.jsonl", "models": ["mlp", "lstm"], "unseen": ["unseen.jsonl"]}, f)
        config_path = os.path.join(self.tmp.name, "run.toml")
        with open(config_path, 'w', encoding='utf-8') as f:
            f.write("[mlp]\nepochs = 5\n\n[lstm]\nwindow = 4\nhorizon = 3\nepochs = 1\n")
        out = os.path.join(self.tmp.name, "table.csv")
        dumps = os.path.join(self.tmp.name, "dumps")
        code = eval_metrics.bench_cli(["--suite", suite_path, "--config", config_path, "--dump-dir", dumps, "-o", out])
        self.assertEqual(code, 0)
        with open(out, 'r', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([(r["model"], r["split"]) for r in rows],
                         [("mlp", "test"), ("mlp", "unseen"), ("lstm", "test"), ("lstm", "unseen")])
        self.assertEqual(rows[0]["n"], "40")
        self.assertEqual(rows[0]["acc_t1"], "")
        self.assertNotEqual(rows[2]["acc_t3"], "")
        self.assertTrue(os.path.isfile(os.path.join(dumps, "lstm_train.jsonl_test.csv")))

    def test_short_trace(self):
        write_trace(os.path.join(self.tmp.name, "tiny.jsonl"), generate(preset("bridge-load_A", duration_s=2)))
        suite = BenchSuite.from_dict({"train": "tiny.jsonl", "models": ["mlp"]}, self.tmp.name)
        with self.assertRaises(EmptyData):
            eval_metrics.bench(suite, RunConfig())


class TestDeskScale(unittest.TestCase):
    """Inference and forecasting accuracy on desk-sized synthetic traces."""

    def test_mlp_generalizes_to_an_unseen_pattern(self):
        with tempfile.TemporaryDirectory() as tmp:
            train = os.path.join(tmp, "periodic.jsonl")
            unseen = os.path.join(tmp, "stages.jsonl")
            write_trace(train, generate(preset("chain3-load_A", seed=1, duration_s=5000)))
            write_trace(unseen, generate(preset("chain3-load_B", seed=2, duration_s=1000)))
            suite = BenchSuite(train, ("mlp",), (unseen,))
            rows = {row.split: row.report for row in eval_metrics.bench(suite, RunConfig())}
        self.assertGreaterEqual(rows["test"].r2, 0.95)
        self.assertGreaterEqual(rows["test"].acc5log, 0.90)
        self.assertGreaterEqual(rows["unseen"].acc5log, 0.80)
        self.assertLess(rows["test"].latency_ms_per_sample, 5.0)

    def test_lstm_accuracy_decays_with_horizon(self):
        records = generate(preset("chain3-load_A", seed=3, duration_s=1500))
        cut = 1200
        train = build_dataset(records[:cut], "throughput_mbps")
        test = build_dataset(records[cut:], "throughput_mbps", schema=train.schema)
        config = LstmConfig(window=10, horizon=5, epochs=30, learning_rate=0.01)
        windows, targets = make_windows(train.X, train.y, 10, 5)
        test_windows, test_targets = make_windows(test.X, test.y, 10, 5)

        per_seed = []
        for seed in range(20):
            model, _ = lstm_train(windows, targets, config, seed=seed)
            per_seed.append(eval_metrics.horizon_accuracy(predict_windows(model, test_windows), test_targets))
        mean = np.mean(per_seed, axis=0)
        self.assertGreaterEqual(mean[0], 0.90)
        self.assertGreaterEqual(mean[0], mean[-1])


if __name__ == "__main__":
    unittest.main()
