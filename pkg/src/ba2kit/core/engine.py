"""
ba2kit benchmark engine.

This module contains the BudgetBench class that orchestrates backbone
pretraining, per-domain adapter training, evaluation, scoring and sweeps.
"""

import concurrent.futures
import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..io.datasets import DomainData, ingest_dataset
from ..io.store import ModelRegistry
from .complexity import flop_fraction, relative_flop_from_fractions, relative_params_bits
from .config import BenchConfig
from .errors import ComplianceError, ConfigError
from .layers import Backbone, DomainAdapter, MultiDomainModel
from .models import ConstraintMode, ConstraintTrace, DomainResult, ScoreReport
from .scoring import baseline_error, decathlon_score, efficiency_scores
from .trainer import (
    check_compliance,
    evaluate,
    finetune_error,
    scope_theta_bars,
    train_backbone,
    train_domain,
)
from .utils import budget_id

# Parameter bounds
MIN_THREADS = 1
MAX_THREADS = 64

REPORT_NAME = "report.json"
SWEEP_NAME = "sweep.csv"
TRACE_DIR = "traces"
SWEEP_COLUMNS = (
    "domain",
    "budget",
    "error",
    "accuracy",
    "accuracy_drop",
    "relative_accuracy",
    "theta_bar_max",
    "compliant",
    "runs",
    "compliance_rate",
)

logger = logging.getLogger(__name__)


@dataclass
class BenchmarkResult:
    """Per-budget score reports plus the artifacts written."""

    reports: Dict[str, ScoreReport]
    results: List[DomainResult]
    excluded: Dict[str, List[Dict]] = field(default_factory=dict)
    report_path: Optional[str] = None
    sweep_path: Optional[str] = None
    trace_paths: List[str] = field(default_factory=list)


class BudgetBench:
    """Runs the multi-domain budget benchmark described by a ``BenchConfig``."""

    def __init__(self, config: BenchConfig):
        self.config = config
        self.threads = config.threads
        self._data: Dict[str, DomainData] = {}
        self._registry: Optional[ModelRegistry] = None
        self._validate_parameters()

    def _validate_parameters(self):
        """Validate run parameters."""
        if not (MIN_THREADS <= self.threads <= MAX_THREADS):
            raise ConfigError(f"Threads must be between {MIN_THREADS} and {MAX_THREADS}")
        if not self.config.domains:
            raise ConfigError("The configuration names no domains")
        if not self.config.target_domains:
            raise ConfigError("At least one domain besides the pretraining domain is required")

    # Data and registry

    def data(self, name: str) -> DomainData:
        if name not in self.config.domains:
            raise ConfigError(
                f"Unknown domain '{name}'; configured domains: {sorted(self.config.domains)}"
            )
        if name not in self._data:
            self._data[name] = ingest_dataset(self.config.domains[name])
        return self._data[name]

    @property
    def registry(self) -> ModelRegistry:
        if self._registry is None:
            self._registry = ModelRegistry(self.config.registry)
        return self._registry

    def _input_size(self, name: str) -> Tuple[int, int]:
        images = self.data(name).test.images
        return int(images.shape[1]), int(images.shape[2])

    # Training

    def train_backbone(self) -> Backbone:
        """Pretrain theta_0 on the pretraining domain and start a fresh registry."""
        start_time = time.time()
        data = self.data(self.config.pretrain_domain)
        backbone = train_backbone(self.config.arch, data, self.config.pretrain_config)
        self._registry = ModelRegistry.create(self.config.registry, backbone)
        error = evaluate(self._registry.model, backbone.base_adapter(), data.test)
        self._registry.set_baseline(data.name, error, baseline_error(error))
        logger.info(
            f"Backbone trained on '{data.name}': test error {error:.4f} "
            f"({time.time() - start_time:.2f} seconds)"
        )
        return backbone

    def compute_baseline(self, name: str) -> float:
        """E_max for ``name``, fine-tuning a full copy unless already cached."""
        cached = self.registry.baseline(name)
        if cached is not None:
            return cached["e_max"]
        error = finetune_error(self.registry.backbone, self.data(name), self.config.train)
        e_max = baseline_error(error)
        self.registry.set_baseline(name, error, e_max)
        logger.info(f"Fine-tuned baseline for '{name}': error {error:.4f}, E_max {e_max:.4f}")
        return e_max

    def train_adapter(
        self,
        name: str,
        beta: float,
        mode: Optional[ConstraintMode] = None,
    ) -> Tuple[DomainAdapter, ConstraintTrace, str]:
        """Train, register and trace one (domain, budget); returns the trace CSV path."""
        backbone = self.registry.backbone
        mode = ConstraintMode.parse(mode or self.config.mode)
        spec = self.config.budget_spec(beta, len(backbone.arch.layer_names))
        if mode is not spec.mode:
            spec = type(spec).create(beta, mode, len(backbone.arch.layer_names), spec.lambda_lr)
        adapter, trace = train_domain(self.registry.model, self.data(name), spec, self.config.train)
        self.registry.register(
            adapter,
            {
                "seed": self.config.train.seed,
                "config_hash": self.config.hash(),
                "mode": mode.value,
                "compliant": check_compliance(adapter, beta, mode),
            },
        )
        trace_path = os.path.join(self.config.output, TRACE_DIR, f"{name}__{budget_id(beta)}.csv")
        os.makedirs(os.path.dirname(trace_path), exist_ok=True)
        trace.write_csv(trace_path)
        return adapter, trace, trace_path

    def train_all(self, budgets: Optional[Sequence[float]] = None) -> List[str]:
        """Train every (target domain, budget) pair; independent runs may use threads."""
        budgets = tuple(budgets or self.config.budgets)
        jobs = [(name, beta) for name in self.config.target_domains for beta in budgets]
        for name in self.config.target_domains:
            self.data(name)

        if self.threads == 1 or len(jobs) == 1:
            return [self.train_adapter(name, beta)[2] for name, beta in jobs]

        logger.info(f"Training {len(jobs)} adapters with {self.threads} threads")
        paths: Dict[Tuple[str, float], str] = {}
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.threads) as executor:
            futures = {executor.submit(self.train_adapter, name, beta): (name, beta) for name, beta in jobs}
            for future in concurrent.futures.as_completed(futures):
                paths[futures[future]] = future.result()[2]
        return [paths[job] for job in jobs]

    # Evaluation and scoring

    def evaluate_entry(self, registry: ModelRegistry, entry: Dict) -> DomainResult:
        """
        Evaluate a stored adapter, recomputing compliance from its stored masks.

        Raises ComplianceError when the recomputed flag disagrees with the manifest.
        """
        name, beta = entry["domain"], float(entry["budget"])
        adapter = registry.resolve(name, beta)
        mode = ConstraintMode.parse(entry.get("mode", self.config.mode))
        compliant = check_compliance(adapter, beta, mode)
        if compliant != bool(entry.get("compliant")):
            raise ComplianceError(
                f"Stored compliance flag for {name}@{entry['budget']} is {entry.get('compliant')}, "
                f"recomputed masks give {compliant}"
            )
        data = self.data(name)
        return DomainResult(
            domain=name,
            budget=beta,
            error=evaluate(registry.model, adapter, data.test),
            compliant=compliant,
            flop_fraction=flop_fraction(registry.backbone.arch, adapter, self._input_size(name)),
            param_bits=adapter.param_bits(),
            theta_bars=tuple(float(t) for t in scope_theta_bars(adapter, ConstraintMode.PER_LAYER)),
        )

    def evaluate_all(self) -> List[DomainResult]:
        # Fresh registry view: every adapter is reloaded from disk.
        registry = ModelRegistry(self.config.registry)
        entries = registry.list()
        results = [self.evaluate_entry(registry, entry) for entry in entries]
        pretrain = self.config.pretrain_domain
        if any(e["domain"] == pretrain and float(e["budget"]) == 1.0 for e in entries):
            return results
        base = registry.backbone.base_adapter()
        results.insert(
            0,
            DomainResult(
                domain=pretrain,
                budget=1.0,
                error=evaluate(registry.model, base, self.data(pretrain).test),
                compliant=True,
                flop_fraction=1.0,
                param_bits=0,
            ),
        )
        return results

    def score(self, results: Sequence[DomainResult]) -> Tuple[Dict[str, ScoreReport], Dict[str, List[Dict]]]:
        """
        One ScoreReport per budget over the compliant results.

        The pretraining domain enters every budget's report with its full network.
        Non-compliant results and degenerate baselines are listed as excluded.
        """
        backbone = self.registry.backbone
        pretrain_name = self.config.pretrain_domain
        pretrain = [r for r in results if r.domain == pretrain_name and r.budget == 1.0][:1]
        reports: Dict[str, ScoreReport] = {}
        excluded: Dict[str, List[Dict]] = {}
        budgets = sorted({r.budget for r in results if r.domain != pretrain_name}, reverse=True)
        for beta in budgets:
            key = budget_id(beta)
            excluded[key] = []
            scored: List[DomainResult] = []
            e_maxes: List[float] = []
            candidates = pretrain + [r for r in results if r.budget == beta and r.domain != pretrain_name]
            for r in candidates:
                baseline = self.registry.baseline(r.domain)
                e_max = baseline["e_max"] if baseline else 0.0
                if not r.compliant:
                    excluded[key].append({"id": r.domain, "reason": "constraint_violated"})
                    continue
                if e_max <= 0.0:
                    logger.warning(
                        f"Domain '{r.domain}' has a zero baseline error; it is left out of the score",
                        extra={"event": "degenerate_baseline", "domain": r.domain},
                    )
                    excluded[key].append({"id": r.domain, "reason": "degenerate_baseline"})
                    continue
                scored.append(r)
                e_maxes.append(e_max)

            report = decathlon_score(zip([r.error for r in scored], e_maxes), scored)
            adapted = [r for r in results if r.budget == beta and r.domain != pretrain_name]
            report.rel_flop = relative_flop_from_fractions(r.flop_fraction for r in adapted)
            report.rel_params = relative_params_bits(backbone.param_bits(), (r.param_bits for r in adapted))
            reports[key] = report
        return reports, excluded

    # Reports

    def write_report(
        self, reports: Dict[str, ScoreReport], excluded: Dict[str, List[Dict]]
    ) -> str:
        """Deterministic JSON report; no timestamps or paths."""
        payload = {
            "config_hash": self.config.hash(),
            "seed": self.config.train.seed,
            "mode": self.config.mode.value,
            "budgets": {
                key: dict(report.to_dict(), excluded=excluded.get(key, []))
                for key, report in reports.items()
            },
        }
        os.makedirs(self.config.output, exist_ok=True)
        path = os.path.join(self.config.output, REPORT_NAME)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info(f"Wrote report to {path}")
        return path

    @staticmethod
    def median_results(
        runs: Sequence[Sequence[DomainResult]],
    ) -> Tuple[List[DomainResult], Dict[Tuple[str, float], Tuple[int, float]]]:
        """
        Fold repeated runs into one result per (domain, budget).

        The error is the median over the runs that met their budget; a point
        where no run did is dropped. Returns the folded results and, per key,
        the run count and the fraction of compliant runs.
        """
        grouped: Dict[Tuple[str, float], List[DomainResult]] = {}
        for run in runs:
            for r in run:
                grouped.setdefault((r.domain, r.budget), []).append(r)

        results, rates = [], {}
        for key, group in grouped.items():
            kept = [r for r in group if r.compliant]
            rates[key] = (len(group), len(kept) / len(group))
            if not kept:
                logger.warning(
                    f"Dropping {key[0]}@{budget_id(key[1])}: none of {len(group)} runs met the budget",
                    extra={"event": "sweep_point_dropped"},
                )
                continue
            errors = np.array([r.error for r in kept])
            middle = kept[int(np.argsort(errors, kind="stable")[(len(kept) - 1) // 2])]
            results.append(replace(middle, error=float(np.median(errors))))
        return results, rates

    @staticmethod
    def sweep_rows(
        results: Sequence[DomainResult],
        pretrain_domain: Optional[str] = None,
        rates: Optional[Dict[Tuple[str, float], Tuple[int, float]]] = None,
    ) -> List[Dict]:
        """Accuracy-drop rows, relative to each domain's budget-1.0 result."""
        rates = rates or {}
        reference = {r.domain: 1.0 - r.error for r in results if r.budget == 1.0}
        rows = []
        for r in sorted(results, key=lambda r: (r.domain, -r.budget)):
            if r.domain == pretrain_domain:
                continue
            accuracy = 1.0 - r.error
            ref = reference.get(r.domain)
            rows.append(
                {
                    "domain": r.domain,
                    "budget": budget_id(r.budget),
                    "error": r.error,
                    "accuracy": accuracy,
                    "accuracy_drop": (ref - accuracy) if ref is not None else "",
                    "relative_accuracy": (accuracy / ref) if ref else "",
                    "theta_bar_max": max(r.theta_bars) if r.theta_bars else "",
                    "compliant": str(r.compliant).lower(),
                    "runs": rates.get((r.domain, r.budget), (1, 0.0))[0],
                    "compliance_rate": rates.get((r.domain, r.budget), (1, float(r.compliant)))[1],
                }
            )
        return rows

    def write_sweep(
        self,
        results: Sequence[DomainResult],
        path: Optional[str] = None,
        rates: Optional[Dict[Tuple[str, float], Tuple[int, float]]] = None,
    ) -> str:
        path = path or os.path.join(self.config.output, SWEEP_NAME)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
            writer.writeheader()
            for row in self.sweep_rows(results, self.config.pretrain_domain, rates):
                writer.writerow(row)
        logger.info(f"Wrote sweep to {path}")
        return path

    # Entry points

    def extra_run(self, name: str, beta: float, seed: int) -> DomainResult:
        """Train and evaluate one unregistered adapter with its own seed."""
        model = MultiDomainModel(self.registry.backbone)
        mode = self.config.mode
        spec = self.config.budget_spec(beta, len(model.backbone.arch.layer_names))
        adapter, _ = train_domain(model, self.data(name), spec, replace(self.config.train, seed=seed))
        return DomainResult(
            domain=name,
            budget=beta,
            error=evaluate(model, adapter, self.data(name).test),
            compliant=check_compliance(adapter, beta, mode),
            flop_fraction=flop_fraction(model.backbone.arch, adapter, self._input_size(name)),
            param_bits=adapter.param_bits(),
            theta_bars=tuple(float(t) for t in scope_theta_bars(adapter, ConstraintMode.PER_LAYER)),
        )

    def sweep(self, budgets: Sequence[float], path: Optional[str] = None) -> str:
        """
        Train every target domain at each budget (plus 1.0) and write the drop curve.

        With ``runs`` above 1 each point is repeated with seeds ``seed + r``;
        only the first run is registered.
        """
        budgets = sorted(set(float(b) for b in budgets) | {1.0}, reverse=True)
        if self._registry is None and not os.path.exists(
            os.path.join(self.config.registry, "manifest.json")
        ):
            self.train_backbone()
        self.train_all(budgets)
        targets = set(self.config.target_domains)
        runs = [[r for r in self.evaluate_all() if r.budget in budgets and r.domain in targets]]
        for r in range(1, self.config.runs):
            seed = self.config.train.seed + r
            logger.info(f"Sweep run {r + 1}/{self.config.runs} (seed {seed})")
            runs.append([self.extra_run(name, beta, seed) for name in sorted(targets) for beta in budgets])
        results, rates = self.median_results(runs)
        return self.write_sweep(results, path, rates)

    def run_benchmark(self) -> BenchmarkResult:
        """Pretrain, fine-tune baselines, train adapters, evaluate, score and report."""
        start_time = time.time()
        self.train_backbone()
        for name in self.config.target_domains:
            self.compute_baseline(name)
        trace_paths = self.train_all()
        results = self.evaluate_all()
        reports, excluded = self.score(results)
        result = BenchmarkResult(
            reports=reports,
            results=results,
            excluded=excluded,
            report_path=self.write_report(reports, excluded),
            sweep_path=self.write_sweep(results),
            trace_paths=trace_paths,
        )
        for key, report in reports.items():
            s_o, s_p = efficiency_scores(report.score, report.rel_flop, report.rel_params)
            logger.info(f"beta={key}: S {report.score:.1f}  S_O {s_o:.1f}  S_P {s_p:.1f}")
        logger.info(f"Benchmark finished in {time.time() - start_time:.2f} seconds")
        return result
