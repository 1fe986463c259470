import io
import os
import json
import tempfile
import unittest
from unittest.mock import patch

from drst.commands import config
from drst.commands.config import DEFAULT_CONFIG, RunConfig
from drst.commands.drift_engine import DriftConfig
from drst.commands.error_handler import ConfigurationError, ParseError, UnknownKey


class TestConfig(unittest.TestCase):
    """Test cases for the config module."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = os.path.join(self.tmp.name, "run.toml")
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path

    def test_defaults(self):
        run_config = config.load_config()
        self.assertEqual(run_config.get_all(), DEFAULT_CONFIG)
        self.assertEqual(run_config.get("drift.delta"), 0.05)
        self.assertIsNone(run_config.get("drift.missing"))
        self.assertEqual(run_config.get("drift.missing", 3), 3)

    def test_get_returns_copies(self):
        run_config = RunConfig()
        run_config.get("grid.batch_size").append(64)
        run_config.section("grid")["workers"] = 9
        self.assertEqual(run_config.get("grid.batch_size"), [16, 32])
        self.assertEqual(run_config.get("grid.workers"), 1)

    def test_flags_override_the_document(self):
        path = self.write("[drift]\nwindow_size = 200\n\n[mlp]\nepochs = 10\n")
        from_file = config.load_config(path)
        self.assertEqual(from_file.get("drift.window_size"), 200)
        self.assertEqual(from_file.get("mlp.epochs"), 10)
        # Unset flags leave the document value in place
        merged = config.load_config(path, {"drift.window_size": 300, "mlp.epochs": None})
        self.assertEqual(merged.get("drift.window_size"), 300)
        self.assertEqual(merged.get("mlp.epochs"), 10)
        self.assertEqual(merged.get("mlp.hidden_width"), 32)

    def test_delta_alone_sets_the_severity_ladder(self):
        run_config = config.load_config(self.write("[drift]\ndelta = 0.1\n"))
        self.assertEqual(DriftConfig.from_dict(run_config.section("drift")).severity_cuts, (0.1, 0.2, 0.4))
        run_config = config.load_config(None, {"drift.delta": 0.1})
        self.assertEqual(DriftConfig.from_dict(run_config.section("drift")).severity_cuts, (0.1, 0.2, 0.4))
        self.assertEqual(DriftConfig.from_dict(config.load_config().section("drift")).severity_cuts,
                         (0.05, 0.10, 0.20))

    def test_delta_flag_overrides_the_document(self):
        path = self.write("[drift]\ndelta = 0.1\n")
        run_config = config.load_config(path, {"drift.delta": 0.2})
        self.assertEqual(run_config.get("drift.delta"), 0.2)
        self.assertEqual(DriftConfig.from_dict(run_config.section("drift")).severity_cuts, (0.2, 0.4, 0.8))

    def test_integers_widen_to_floats(self):
        path = self.write("[ingest]\nspeed = 2\n")
        self.assertEqual(config.load_config(path).get("ingest.speed"), 2.0)

    def test_malformed_document(self):
        path = self.write("[drift]\ndelta = 0.05\nbins = \n")
        with self.assertRaises(ParseError) as caught:
            config.load_config(path)
        self.assertEqual(caught.exception.details["line"], 3)
        self.assertIn("column", caught.exception.details)

    def test_unknown_keys(self):
        with self.assertRaises(UnknownKey) as caught:
            config.load_config(self.write("[drfit]\ndelta = 0.1\n"))
        self.assertIn("drfit", caught.exception.message)
        with self.assertRaises(UnknownKey) as caught:
            config.load_config(self.write("[drift]\ndelat = 0.1\n"))
        self.assertIn("drift.delat", caught.exception.message)
        with self.assertRaises(UnknownKey):
            config.load_config(None, {"serve.port": 9000})

    def test_wrong_types(self):
        with self.assertRaises(ConfigurationError) as caught:
            config.load_config(self.write("[mlp]\nepochs = \"many\"\n"))
        self.assertEqual(caught.exception.error_code, "INVALID_TYPE")
        self.assertEqual(caught.exception.details["key"], "mlp.epochs")
        with self.assertRaises(ConfigurationError):
            config.load_config(self.write("[forecast]\nenabled = 1\n"))

    def test_module_validation(self):
        for text in ("[mlp]\nhidden_layers = 5\n", "[drift]\ndelta = 0.1\nseverity_cuts = [0.05, 0.2, 0.4]\n",
                     "[ingest]\nmethod = \"robust\"\n",
                     "[lstm]\nhidden_dim = 8\n", "[forecast]\nevery_s = 0\n"):
            with self.subTest(document=text):
                with self.assertRaises(ConfigurationError):
                    config.load_config(self.write(text))
        consistent = self.write("[drift]\ndelta = 0.1\nseverity_cuts = [0.1, 0.2, 0.3]\n")
        self.assertEqual(config.load_config(consistent).get("drift.delta"), 0.1)

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError) as caught:
            config.load_config(os.path.join(self.tmp.name, "absent.toml"))
        self.assertEqual(caught.exception.error_code, "CONFIG_NOT_FOUND")

    def test_overrides_to_sections(self):
        self.assertEqual(config.overrides_to_sections({"drift.delta": 0.2, "mlp.epochs": None}),
                         {"drift": {"delta": 0.2}})
        with self.assertRaises(UnknownKey):
            config.overrides_to_sections({"delta": 0.2})

    def test_show_config(self):
        path = self.write("[serve]\nmetrics_port = 9100\n")
        with patch("sys.stdout", new_callable=io.StringIO) as out:
            code = config.show_config(["--config", path, "--section", "serve"])
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out.getvalue())["metrics_port"], 9100)
        with patch("sys.stdout", new_callable=io.StringIO) as out:
            config.show_config([])
        self.assertEqual(set(json.loads(out.getvalue())), set(DEFAULT_CONFIG))


if __name__ == "__main__":
    unittest.main()
