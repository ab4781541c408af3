#!/usr/bin/env python3
"""
End-to-end benchmark runs on small synthetic domains.
"""

import contextlib
import csv
import io
import json
import os
import shutil
import sys
import tempfile
import unittest

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ba2kit.cli import main
from ba2kit.core.config import build_config
from ba2kit.core.engine import SWEEP_COLUMNS, BudgetBench
from ba2kit.core.errors import ConfigError
from ba2kit.core.models import DomainResult
from ba2kit.io.store import ModelRegistry
from tests.helpers import tiny_backbone

SYNTHETIC = {"format": "synthetic", "num_classes": 3, "size": 30}


def bench_values(root, budgets=(1.0,)):
    return {
        "domains": {"src": dict(SYNTHETIC, seed=11), "tgt": dict(SYNTHETIC, seed=12)},
        "image_size": 8,
        "architecture": {"widths": [4, 8], "blocks_per_stage": 1},
        "epochs": 1,
        "batch_size": 16,
        "decay_epochs": [],
        "seed": 0,
        "budgets": list(budgets),
        "registry": os.path.join(root, "registry"),
        "output": os.path.join(root, "results"),
    }


@pytest.mark.slow
@pytest.mark.integration
class TestBenchmark(unittest.TestCase):
    """Full runs: pretrain, baseline, adapters, evaluation and reports."""

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def run_bench(self, name, budgets=(1.0,)):
        root = os.path.join(self.tmpdir, name)
        return BudgetBench(build_config(bench_values(root, budgets))).run_benchmark()

    def test_run_writes_report_and_traces(self):
        result = self.run_bench("a")
        self.assertTrue(os.path.exists(result.report_path))
        with open(result.report_path) as f:
            report = json.load(f)
        totals = report["budgets"]["1"]["totals"]
        self.assertLessEqual(totals["rel_flop"], 1.0)
        self.assertGreater(totals["rel_params"], 1.0)
        self.assertEqual([r.domain for r in result.results], ["src", "tgt"])

        self.assertEqual(len(result.trace_paths), 1)
        with open(result.trace_paths[0], newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertGreater(len(rows), 0)
        self.assertTrue(all(float(row["lambda"]) == 0.0 for row in rows))

    def test_reports_identical_across_directories(self):
        first = self.run_bench("a")
        second = self.run_bench("b")
        with open(first.report_path, "rb") as f:
            a = f.read()
        with open(second.report_path, "rb") as f:
            b = f.read()
        self.assertEqual(a, b)

    def test_sweep_csv(self):
        root = os.path.join(self.tmpdir, "sweep")
        bench = BudgetBench(build_config(bench_values(root)))
        path = bench.sweep([0.5])
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            rows = list(reader)
        self.assertEqual(tuple(reader.fieldnames), SWEEP_COLUMNS)
        self.assertEqual([(r["domain"], r["budget"]) for r in rows], [("tgt", "1"), ("tgt", "0.5")])
        self.assertEqual(float(rows[0]["accuracy_drop"]), 0.0)

    def test_reduced_budget_run(self):
        result = self.run_bench("reduced", budgets=(1.0, 0.5))
        self.assertEqual(set(result.reports), {"1", "0.5"})
        self.assertEqual(len(result.trace_paths), 2)
        reduced = [r for r in result.results if r.domain == "tgt" and r.budget == 0.5]
        self.assertEqual(len(reduced), 1)
        self.assertTrue(reduced[0].compliant)
        self.assertLessEqual(max(reduced[0].theta_bars), 0.5)
        self.assertLessEqual(result.reports["0.5"].rel_flop, result.reports["1"].rel_flop)

    def test_sweep_median_over_runs(self):
        root = os.path.join(self.tmpdir, "runs")
        values = dict(bench_values(root), runs=3)
        path = BudgetBench(build_config(values)).sweep([0.5])
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([(r["domain"], r["budget"]) for r in rows], [("tgt", "1"), ("tgt", "0.5")])
        for row in rows:
            self.assertEqual(row["runs"], "3")
            self.assertEqual(float(row["compliance_rate"]), 1.0)

    def test_cli_sweep_runs(self):
        root = os.path.join(self.tmpdir, "cli-sweep")
        path = os.path.join(self.tmpdir, "sweep.json")
        with open(path, "w") as f:
            json.dump(bench_values(root), f)
        with contextlib.redirect_stdout(io.StringIO()):
            code = main(["sweep", "-c", path, "--budgets", "0.5", "--runs", "2"])
        self.assertEqual(code, 0)
        with open(os.path.join(root, "results", "sweep.csv"), newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertTrue(all(row["runs"] == "2" for row in rows))

    def test_needs_a_target_domain(self):
        values = bench_values(self.tmpdir)
        values["domains"] = {"src": SYNTHETIC}
        with self.assertRaises(ConfigError):
            BudgetBench(build_config(values))

    def test_cli_run_benchmark(self):
        root = os.path.join(self.tmpdir, "cli")
        path = os.path.join(self.tmpdir, "bench.json")
        with open(path, "w") as f:
            json.dump(bench_values(root), f)
        with contextlib.redirect_stdout(io.StringIO()) as out:
            code = main(["run-benchmark", "-c", path])
        self.assertEqual(code, 0)
        self.assertIn("beta=1:", out.getvalue())
        self.assertTrue(os.path.exists(os.path.join(root, "results", "report.json")))


def result(error, compliant, domain="tgt", budget=0.5):
    return DomainResult(
        domain=domain, budget=budget, error=error, compliant=compliant, flop_fraction=0.5, param_bits=8
    )


@pytest.mark.unit
class TestMedianResults(unittest.TestCase):
    """Folding repeated sweep runs into one point per (domain, budget)."""

    def test_median_of_compliant_runs(self):
        runs = [[result(0.3, True)], [result(0.1, True)], [result(0.05, False)], [result(0.2, True)]]
        results, rates = BudgetBench.median_results(runs)
        self.assertEqual(len(results), 1)
        self.assertAlmostEqual(results[0].error, 0.2)
        self.assertEqual(rates[("tgt", 0.5)], (4, 0.75))

    def test_even_count_averages(self):
        results, _ = BudgetBench.median_results([[result(0.1, True)], [result(0.3, True)]])
        self.assertAlmostEqual(results[0].error, 0.2)

    def test_point_dropped_without_compliant_run(self):
        runs = [
            [result(0.1, False), result(0.2, True, budget=1.0)],
            [result(0.1, False), result(0.4, True, budget=1.0)],
        ]
        results, rates = BudgetBench.median_results(runs)
        self.assertEqual([r.budget for r in results], [1.0])
        self.assertAlmostEqual(results[0].error, 0.3)
        self.assertEqual(rates[("tgt", 0.5)], (2, 0.0))

    def test_score_uses_full_network_row_for_pretrain_domain(self):
        root = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, root, True)
        config = build_config(bench_values(root, budgets=(1.0, 0.5)))
        bench = BudgetBench(config)
        bench._registry = ModelRegistry.create(config.registry, tiny_backbone())
        bench.registry.set_baseline("src", 0.2, 0.4)
        bench.registry.set_baseline("tgt", 0.3, 0.6)
        results = [
            result(0.35, True, domain="src", budget=0.5),
            result(0.1, True, domain="src", budget=1.0),
            result(0.2, True, domain="tgt", budget=1.0),
            result(0.3, True, domain="tgt", budget=0.5),
        ]
        reports, _ = bench.score(results)
        self.assertEqual(set(reports), {"1", "0.5"})
        for report in reports.values():
            self.assertEqual(report.domains[0].domain, "src")
            self.assertEqual(report.domains[0].budget, 1.0)
            self.assertAlmostEqual(report.domains[0].error, 0.1)
        self.assertEqual([d.budget for d in reports["0.5"].domains], [1.0, 0.5])

    def test_rates_reach_sweep_rows(self):
        runs = [[result(0.2, True, budget=1.0)], [result(0.2, True, budget=1.0)]]
        results, rates = BudgetBench.median_results(runs)
        rows = BudgetBench.sweep_rows(results, rates=rates)
        self.assertEqual(rows[0]["runs"], 2)
        self.assertEqual(rows[0]["compliance_rate"], 1.0)


if __name__ == "__main__":
    unittest.main()
