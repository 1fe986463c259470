import io
import os
import json
import tempfile
import unittest
from unittest.mock import MagicMock

import numpy as np

from drst.commands import trace_ingest
from drst.commands.error_handler import (
    DegenerateFeature,
    InconsistentFeatureSet,
    MalformedRecord,
    MissingFeature,
    MissingKpi,
    NonFiniteValue,
    NonMonotonicTimestamp,
    StreamClosed,
)
from drst.commands.trace_ingest import (
    FeatureSchema,
    FeatureVector,
    NormalizationMethod,
    SlidingWindow,
    StreamReader,
    TraceRecord,
)


class FakeClock:
    """Monotonic clock that only advances when sleep is called."""

    def __init__(self, late_ms=0.0):
        self.now = 0.0
        self.late = late_ms / 1000.0

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.now += seconds + self.late


class TestParsing(unittest.TestCase):
    """Test cases for the wire format."""

    def test_parse_record(self):
        """A complete line maps onto every field; unknown keys are ignored."""
        record = trace_ingest.parse_record(
            '{"ts":1000,"f":{"llc_load":0.5},"kpi":{"throughput_mbps":900},"host":"a"}')
        self.assertEqual(record.timestamp_ms, 1000)
        self.assertEqual(dict(record.features), {"llc_load": 0.5})
        self.assertEqual(record.kpi("throughput_mbps"), 900.0)
        self.assertIsNone(record.kpi("latency_us"))

    def test_parse_record_without_kpi(self):
        record = trace_ingest.parse_record('{"ts":5,"f":{"a":1}}')
        self.assertIsNone(record.kpis)

    def test_non_finite_value(self):
        with self.assertRaises(NonFiniteValue):
            trace_ingest.parse_record('{"ts":1000,"f":{"llc_load":"NaN"}}')

    def test_malformed_records(self):
        for line in ('{"ts":1000,', '[1,2]', '{"ts":"1000","f":{}}', '{"ts":1,"f":[1]}', '{"ts":1,"f":{"a":true}}'):
            with self.subTest(line=line):
                with self.assertRaises(MalformedRecord):
                    trace_ingest.parse_record(line)

    def test_malformed_position_reported(self):
        stream = io.StringIO('{"ts":1,"f":{"a":1}}\n\n{"ts":2,"f":\n')
        with self.assertRaises(MalformedRecord) as ctx:
            list(trace_ingest.iter_lines(stream))
        self.assertEqual(ctx.exception.details["position"], 3)

    def test_invalid_utf8_is_a_malformed_record(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trace.jsonl")
            with open(path, 'wb') as f:
                f.write(b'{"ts":1,"f":{"a":1}}\n{"ts":2,"f":{"\xff":1}}\n')
            with self.assertRaises(MalformedRecord) as ctx:
                list(trace_ingest.iter_trace(path))
        self.assertEqual(ctx.exception.details["position"], 2)

    def test_write_and_read_file(self):
        records = [TraceRecord(i * 100, {"a": float(i), "b": 2.0 * i}, {"throughput_mbps": 10.0 + i}) for i in range(5)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trace.jsonl")
            self.assertEqual(trace_ingest.write_trace(path, records), 5)
            loaded = trace_ingest.read_trace(path)
        self.assertEqual([r.timestamp_ms for r in loaded], [0, 100, 200, 300, 400])
        self.assertEqual(dict(loaded[3].features), {"a": 3.0, "b": 6.0})
        self.assertEqual(loaded[4].kpi("throughput_mbps"), 14.0)


class TestSchema(unittest.TestCase):
    """Test cases for schema fitting and normalization."""

    def test_fit_minmax(self):
        schema = trace_ingest.fit_schema([TraceRecord(0, {"a": 0.0}), TraceRecord(1, {"a": 10.0})])
        self.assertEqual(schema.names, ("a",))
        self.assertEqual(schema.stats, ((0.0, 10.0),))

    def test_constant_feature_rejected(self):
        with self.assertRaises(DegenerateFeature):
            trace_ingest.fit_schema([TraceRecord(0, {"a": 5.0}), TraceRecord(1, {"a": 5.0})])

    def test_inconsistent_feature_set(self):
        with self.assertRaises(InconsistentFeatureSet):
            trace_ingest.fit_schema([TraceRecord(0, {"a": 1.0}), TraceRecord(1, {"b": 2.0})])

    def test_schema_is_order_independent(self):
        rng = np.random.default_rng(3)
        records = [TraceRecord(i, {"z": float(v), "a": float(w)}) for i, (v, w) in enumerate(rng.normal(size=(50, 2)))]
        shuffled = [records[i] for i in rng.permutation(len(records))]
        for method in NormalizationMethod:
            with self.subTest(method=method):
                first = trace_ingest.fit_schema(records, method)
                second = trace_ingest.fit_schema(shuffled, method)
                self.assertEqual(first.names, ("a", "z"))
                self.assertEqual(first, second)
                self.assertEqual(first.digest(), second.digest())

    def test_normalize_minmax(self):
        schema = FeatureSchema(("a",), NormalizationMethod.MINMAX, ((0.0, 10.0),))
        self.assertEqual(trace_ingest.normalize(TraceRecord(0, {"a": 7.5}), schema).values, (0.75,))
        self.assertEqual(trace_ingest.normalize(TraceRecord(0, {"a": 0.0}), schema).values, (0.0,))
        # Values outside the fitted range are clamped
        self.assertEqual(trace_ingest.normalize(TraceRecord(0, {"a": 25.0}), schema).values, (1.0,))
        self.assertEqual(trace_ingest.normalize(TraceRecord(0, {"a": -3.0}), schema).values, (0.0,))

    def test_normalize_zscore(self):
        schema = FeatureSchema(("a",), NormalizationMethod.ZSCORE, ((4.0, 2.0),))
        self.assertEqual(trace_ingest.normalize(TraceRecord(0, {"a": 4.0}), schema).values, (0.0,))
        self.assertEqual(trace_ingest.normalize(TraceRecord(0, {"a": 8.0}), schema).values, (2.0,))

    def test_missing_feature(self):
        schema = FeatureSchema(("a", "b"), NormalizationMethod.MINMAX, ((0.0, 1.0), (0.0, 1.0)))
        with self.assertRaises(MissingFeature):
            trace_ingest.normalize(TraceRecord(0, {"a": 0.5}), schema)

    def test_denormalize_round_trip(self):
        rng = np.random.default_rng(11)
        records = [TraceRecord(i, {"a": float(v), "b": float(w)}) for i, (v, w) in enumerate(rng.uniform(-5, 5, (40, 2)))]
        for method in NormalizationMethod:
            schema = trace_ingest.fit_schema(records, method)
            for record in records:
                restored = trace_ingest.denormalize(trace_ingest.normalize(record, schema), schema)
                for name in ("a", "b"):
                    self.assertAlmostEqual(restored[name], record.features[name], delta=1e-9)

    def test_schema_save_and_load(self):
        schema = FeatureSchema(("a", "b"), NormalizationMethod.MINMAX, ((0.0, 1.0), (-2.0, 3.5)))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "schema.json")
            schema.save(path)
            with open(path, 'r', encoding='utf-8') as f:
                document = json.load(f)
            self.assertEqual(document["features"][1], {"name": "b", "min": -2.0, "max": 3.5})
            self.assertEqual(FeatureSchema.load(path), schema)

    def test_build_dataset(self):
        records = [TraceRecord(i, {"a": float(i), "b": 1.0 + (i % 2)}, {"throughput_mbps": 5.0 * i}) for i in range(6)]
        dataset = trace_ingest.build_dataset(records, "throughput_mbps", features=["a"])
        self.assertEqual(dataset.schema.names, ("a",))
        self.assertEqual(dataset.X.shape, (6, 1))
        np.testing.assert_allclose(dataset.y, [0, 5, 10, 15, 20, 25])
        self.assertEqual(len(dataset), 6)

    def test_missing_kpi(self):
        records = [TraceRecord(0, {"a": 0.0}, {"throughput_mbps": 1.0}), TraceRecord(1, {"a": 1.0})]
        with self.assertRaises(MissingKpi):
            trace_ingest.kpi_series(records, "throughput_mbps")


class TestSlidingWindow(unittest.TestCase):
    """Test cases for the sliding window."""

    def test_emits_only_when_full(self):
        window = SlidingWindow(3)
        self.assertIsNone(window.push(FeatureVector((0.0,), 0)))
        self.assertIsNone(window.push(FeatureVector((1.0,), 1)))
        full = window.push(FeatureVector((2.0,), 2))
        self.assertEqual([v.timestamp_ms for v in full], [0, 1, 2])

    def test_keeps_last_n_in_order(self):
        window = SlidingWindow(4)
        for k in range(11):
            window.push(FeatureVector((float(k),), k))
        self.assertEqual(len(window), 4)
        self.assertEqual([v.timestamp_ms for v in window.snapshot()], [7, 8, 9, 10])
        np.testing.assert_array_equal(window.as_array(), [[7.0], [8.0], [9.0], [10.0]])


class TestReplay(unittest.TestCase):
    """Test cases for paced replay."""

    def setUp(self):
        self.records = [TraceRecord(t, {"a": float(t)}) for t in (0, 100, 200)]

    def test_speed_one_paces_records(self):
        clock = FakeClock()
        delivered = []
        summary = trace_ingest.replay(self.records, 1.0, delivered.append, clock=clock, sleep=clock.sleep)
        self.assertEqual(summary.count, 3)
        self.assertGreaterEqual(summary.duration_ms, 200.0)
        self.assertLessEqual(summary.duration_ms, 220.0)
        self.assertTrue(summary.within_tolerance())
        self.assertEqual([r.timestamp_ms for r in delivered], [0, 100, 200])

    def test_speed_two_halves_duration(self):
        clock = FakeClock()
        summary = trace_ingest.replay(self.records, 2.0, lambda r: None, clock=clock, sleep=clock.sleep)
        self.assertAlmostEqual(summary.duration_ms, 100.0, delta=1e-6)

    def test_late_delivery_is_reported(self):
        clock = FakeClock(late_ms=25.0)
        with self.assertLogs("drst.trace_ingest", level="WARNING"):
            summary = trace_ingest.replay(self.records, 1.0, lambda r: None, clock=clock, sleep=clock.sleep)
        self.assertFalse(summary.within_tolerance())

    def test_speed_zero_never_sleeps(self):
        sleep = MagicMock()
        summary = trace_ingest.replay(self.records, 0, lambda r: None, sleep=sleep)
        sleep.assert_not_called()
        self.assertEqual(summary.count, 3)

    def test_out_of_order_timestamps(self):
        records = [TraceRecord(0, {"a": 0.0}), TraceRecord(200, {"a": 1.0}), TraceRecord(100, {"a": 2.0})]
        with self.assertRaises(NonMonotonicTimestamp):
            trace_ingest.replay(records, 0, lambda r: None)

    def test_replay_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trace.jsonl")
            trace_ingest.write_trace(path, self.records)
            delivered = []
            trace_ingest.replay(path, 0, delivered.append)
        self.assertEqual(len(delivered), 3)


class TestStreamReader(unittest.TestCase):
    """Test cases for the bounded record queue."""

    def test_delivers_then_closes(self):
        records = [TraceRecord(t, {"a": float(t)}) for t in range(50)]
        reader = StreamReader.from_records(records, queue_size=4).start()
        self.assertEqual([r.timestamp_ms for r in reader], list(range(50)))
        with self.assertRaises(StreamClosed):
            reader.next_record(timeout=1.0)
        reader.join(1.0)

    def test_producer_error_surfaces(self):
        def produce(sink):
            sink(TraceRecord(0, {"a": 0.0}))
            raise MalformedRecord("bad line", details={"position": 2})

        reader = StreamReader(produce).start()
        self.assertEqual(reader.next_record(timeout=1.0).timestamp_ms, 0)
        with self.assertRaises(MalformedRecord):
            reader.next_record(timeout=1.0)


if __name__ == "__main__":
    unittest.main()
