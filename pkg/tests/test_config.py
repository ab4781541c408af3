#!/usr/bin/env python3
"""
Tests for configuration loading and validation.
"""

import json
import os
import shutil
import sys
import tempfile
import unittest

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ba2kit.core.config import (
    DEFAULT_BUDGETS,
    DEFAULT_IMAGE_SIZE,
    build_config,
    load_config,
)
from ba2kit.core.errors import ConfigError
from ba2kit.core.models import ConstraintMode, DatasetFormat

SYNTHETIC = {"format": "synthetic", "num_classes": 3, "size": 30}


@pytest.mark.unit
class TestLoadConfig(unittest.TestCase):
    """Tests for merging defaults, files and overrides."""

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def write(self, data, name="bench.json"):
        path = os.path.join(self.tmpdir, name)
        with open(path, "w") as f:
            if isinstance(data, str):
                f.write(data)
            else:
                json.dump(data, f)
        return path

    def test_defaults(self):
        config = load_config()
        self.assertEqual(config.budgets, DEFAULT_BUDGETS)
        self.assertEqual(config.mode, ConstraintMode.PER_LAYER)
        self.assertEqual(config.image_size, DEFAULT_IMAGE_SIZE)
        self.assertEqual(config.train.epochs, 60)
        self.assertEqual(config.domains, {})
        self.assertIsNone(config.pretrain_domain)

    def test_precedence(self):
        path = self.write({"epochs": 5, "batch_size": 4, "mode": "global"})
        config = load_config(path, {"epochs": 2, "mode": None})
        self.assertEqual(config.train.epochs, 2)
        self.assertEqual(config.train.batch_size, 4)
        self.assertEqual(config.mode, ConstraintMode.GLOBAL)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            load_config(self.write({"epoch": 3}))

    def test_bad_json(self):
        with self.assertRaises(ConfigError):
            load_config(self.write("{not json"))
        with self.assertRaises(ConfigError):
            load_config(self.write("[1, 2]"))

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.tmpdir, "absent.json"))

    def test_domain_paths_relative_to_file(self):
        path = self.write(
            {
                "domains": {
                    "digits": {
                        "format": "idx",
                        "num_classes": 10,
                        "images": "data/img.idx",
                        "labels": "/abs/lbl.idx",
                        "channels": 1,
                    }
                }
            }
        )
        spec = load_config(path).domains["digits"]
        self.assertEqual(spec.format, DatasetFormat.IDX)
        self.assertEqual(spec.images, os.path.join(self.tmpdir, "data/img.idx"))
        self.assertEqual(spec.labels, "/abs/lbl.idx")

    def test_unknown_domain_key(self):
        with self.assertRaises(ConfigError):
            build_config({"domains": {"d": dict(SYNTHETIC, colour=True)}})


@pytest.mark.unit
class TestBenchConfig(unittest.TestCase):
    """Tests for derived settings on a validated config."""

    def test_pretrain_domain_defaults_to_first(self):
        config = build_config({"domains": {"src": SYNTHETIC, "a": SYNTHETIC, "b": SYNTHETIC}})
        self.assertEqual(config.pretrain_domain, "src")
        self.assertEqual(config.target_domains, ("a", "b"))
        named = build_config({"domains": {"src": SYNTHETIC, "a": SYNTHETIC}, "pretrain_domain": "a"})
        self.assertEqual(named.target_domains, ("src",))
        with self.assertRaises(ConfigError):
            build_config({"domains": {"src": SYNTHETIC}, "pretrain_domain": "zzz"})

    def test_synthetic_domains_inherit_seed_and_image_size(self):
        config = build_config({"seed": 4, "image_size": 8, "domains": {"s": SYNTHETIC}})
        self.assertEqual(config.domains["s"].seed, 4)
        self.assertEqual(config.domains["s"].image_size, 8)

    def test_pretrain_config(self):
        config = build_config({"epochs": 3, "batch_size": 5})
        self.assertIs(config.pretrain_config, config.train)
        longer = build_config({"epochs": 3, "batch_size": 5, "pretrain_epochs": 9})
        self.assertEqual(longer.pretrain_config.epochs, 9)
        self.assertEqual(longer.pretrain_config.batch_size, 5)
        self.assertEqual(longer.train.epochs, 3)

    def test_hash_ignores_placement(self):
        base = {"epochs": 3, "budgets": [1.0, 0.5]}
        a = build_config(dict(base, registry="/tmp/a", output="/tmp/x", threads=1))
        b = build_config(dict(base, registry="/tmp/b", output="/tmp/y", threads=4))
        self.assertEqual(a.hash(), b.hash())
        self.assertNotEqual(a.hash(), build_config(dict(base, epochs=4)).hash())
        self.assertEqual(len(a.hash()), 64)

    def test_budget_validation(self):
        for budgets in ([], [0.0], [1.5], [0.5, 0.5]):
            with self.assertRaises(ConfigError):
                build_config({"budgets": budgets})

    def test_invalid_values(self):
        for values in (
            {"mode": "sideways"},
            {"lambda_lr": 0},
            {"threads": 0},
            {"runs": 0},
            {"epochs": 0},
            {"decay_epochs": [30, 10]},
            {"pretrain_epochs": 0},
            {"architecture": {"depth": 3}},
        ):
            with self.assertRaises(ConfigError):
                build_config(values)

    def test_runs(self):
        self.assertEqual(build_config({}).runs, 1)
        self.assertEqual(build_config({"runs": 5}).runs, 5)

    def test_mode_spellings(self):
        self.assertEqual(build_config({"mode": "per-layer"}).mode, ConstraintMode.PER_LAYER)
        self.assertEqual(build_config({"mode": "GLOBAL"}).mode, ConstraintMode.GLOBAL)

    def test_architecture(self):
        config = build_config(
            {"architecture": {"widths": [4, 8], "blocks_per_stage": 1}, "domains": {"s": SYNTHETIC}}
        )
        self.assertEqual(len(config.arch.convs()), 6)
        self.assertEqual(config.arch.feature_dim, 8)

    def test_channel_mismatch(self):
        gray = dict(SYNTHETIC, channels=1)
        config = build_config({"domains": {"rgb": SYNTHETIC, "gray": gray}})
        with self.assertRaises(ConfigError):
            config.arch

    def test_budget_spec(self):
        config = build_config({"mode": "global", "lambda_lr": 0.01})
        spec = config.budget_spec(0.5, 6)
        self.assertEqual(spec.beta, 0.5)
        self.assertEqual(spec.lambdas.shape, (1,))
        self.assertEqual(build_config({}).budget_spec(0.5, 6).lambdas.shape, (6,))


if __name__ == "__main__":
    unittest.main()
