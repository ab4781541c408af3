#!/usr/bin/env python3
"""
Tests for the budget penalty, multiplier updates, optimizers and training loops.
"""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ba2kit.core.errors import ConfigError, DataError
from ba2kit.core.layers import (
    ArchSpec,
    DenseHead,
    DomainAdapter,
    MultiDomainModel,
    SwitchVector,
    adapter_forward,
)
from ba2kit.core.models import BudgetSpec, ConstraintMode, ConstraintTrace, TraceRecord, TrainConfig
from ba2kit.core.optim import SGD, Adam
from ba2kit.core.tensor import Parameter, Tape
from ba2kit.core.trainer import (
    budget_penalty,
    check_compliance,
    enforce_budget,
    evaluate,
    finetune_error,
    iterate_batches,
    lambda_step,
    max_active,
    penalty_node,
    scope_sizes,
    scope_theta_bars,
    train_backbone,
    train_domain,
    train_multi_budget_joint,
)
from ba2kit.io.store import ModelRegistry
from tests.helpers import empty_domain, synthetic_domain, tiny_arch, tiny_backbone


def switch_adapter(*layers):
    """Adapter holding only switch vectors, one per entry of ``layers``."""
    switches = {
        f"l{i}": SwitchVector(np.where(np.asarray(bits) > 0, 0.001, -0.001), name=f"l{i}")
        for i, bits in enumerate(layers)
    }
    head = DenseHead.initialize(2, 2, np.random.default_rng(0), dtype=np.float64)
    return DomainAdapter("toy", 0.5, switches, {}, head)


def quick_config(**kwargs):
    values = dict(epochs=1, batch_size=8, seed=0, decay_epochs=())
    values.update(kwargs)
    return TrainConfig(**values)


@pytest.mark.unit
class TestBudgetPenalty(unittest.TestCase):
    """Tests for the Lagrangian penalty term."""

    def test_zero_multiplier(self):
        adapter = switch_adapter([1, 1, 1, 1], [1, 0])
        spec = BudgetSpec.create(0.25, ConstraintMode.PER_LAYER, 2)
        penalty, violations = budget_penalty(adapter, spec)
        self.assertEqual(penalty, 0.0)
        np.testing.assert_allclose(violations, [0.75, 0.25])

    def test_single_layer(self):
        adapter = switch_adapter([1, 1, 0, 0])
        for mode in ConstraintMode:
            spec = BudgetSpec(beta=0.25, mode=mode, lambdas=np.array([2.0]))
            penalty, violations = budget_penalty(adapter, spec)
            self.assertAlmostEqual(penalty, 0.5)
            np.testing.assert_allclose(violations, [0.25])

    def test_two_layers(self):
        adapter = switch_adapter([1, 1, 1, 0, 0], [1, 0, 0, 0, 0])
        spec = BudgetSpec(beta=0.5, mode=ConstraintMode.PER_LAYER, lambdas=np.array([1.0, 1.0]))
        penalty, violations = budget_penalty(adapter, spec)
        self.assertAlmostEqual(penalty, -0.2)
        np.testing.assert_allclose(violations, [0.1, -0.3])

    def test_multiplier_count_mismatch(self):
        adapter = switch_adapter([1, 0], [1, 1])
        spec = BudgetSpec(beta=0.5, mode=ConstraintMode.PER_LAYER, lambdas=np.zeros(3))
        with self.assertRaises(ConfigError):
            budget_penalty(adapter, spec)

    def test_penalty_gradient_per_layer(self):
        adapter = switch_adapter([1, 1, 0, 0], [1, 0, 1, 0, 1, 0, 1, 0])
        spec = BudgetSpec(beta=0.5, mode=ConstraintMode.PER_LAYER, lambdas=np.array([2.0, 0.4]))
        tape = Tape()
        node = penalty_node(tape, adapter, spec)
        tape.backward(node)
        tape.accumulate_param_grads()
        self.assertAlmostEqual(float(node.value), budget_penalty(adapter, spec)[0])
        np.testing.assert_allclose(adapter.switches["l0"].param.grad, 2.0 / 4)
        np.testing.assert_allclose(adapter.switches["l1"].param.grad, 0.4 / 8)

    def test_penalty_gradient_global(self):
        adapter = switch_adapter([1, 1, 1, 1], [0, 0, 0, 0, 1, 1, 1, 1])
        spec = BudgetSpec(beta=0.25, mode=ConstraintMode.GLOBAL, lambdas=np.array([1.2]))
        tape = Tape()
        node = penalty_node(tape, adapter, spec)
        tape.backward(node)
        tape.accumulate_param_grads()
        self.assertAlmostEqual(float(node.value), 1.2 * (8 / 12 - 0.25))
        for sv in adapter.switches.values():
            np.testing.assert_allclose(sv.param.grad, 1.2 / 12)

    def test_compliance(self):
        adapter = switch_adapter([1, 1, 0, 0], [1, 1, 1, 0])
        self.assertTrue(check_compliance(adapter, 0.75, ConstraintMode.PER_LAYER))
        self.assertFalse(check_compliance(adapter, 0.5, ConstraintMode.PER_LAYER))
        self.assertTrue(check_compliance(adapter, 0.625, ConstraintMode.GLOBAL))


@pytest.mark.unit
class TestEnforceBudget(unittest.TestCase):
    """Tests for switching off the weakest channels after training."""

    def test_max_active(self):
        self.assertEqual(max_active(0.5, 3), 1)
        self.assertEqual(max_active(0.3, 10), 3)
        self.assertEqual(max_active(1.0, 7), 7)
        self.assertEqual(max_active(0.25, 3), 0)
        for count in range(1, 40):
            for beta in (0.1, 0.25, 0.3, 0.5, 0.7, 0.75, 0.9):
                k = max_active(beta, count)
                self.assertLessEqual(k / count, beta)
                self.assertTrue(k == count or (k + 1) / count > beta)

    def test_per_layer_turns_off_lowest_values(self):
        adapter = switch_adapter([1, 1, 1])
        adapter.switches["l0"].s_tilde[...] = [0.003, 0.001, 0.002]
        removed = enforce_budget(adapter, 0.5, ConstraintMode.PER_LAYER)
        self.assertEqual(removed, 2)
        np.testing.assert_array_equal(adapter.switches["l0"].bits, [1, 0, 0])
        self.assertTrue(check_compliance(adapter, 0.5, ConstraintMode.PER_LAYER))

    def test_compliant_adapter_untouched(self):
        adapter = switch_adapter([1, 0, 0, 0], [1, 1, 0, 0])
        self.assertEqual(enforce_budget(adapter, 0.5, ConstraintMode.PER_LAYER), 0)
        self.assertEqual(enforce_budget(adapter, 0.5, ConstraintMode.GLOBAL), 0)

    def test_global_keeps_one_channel_per_layer(self):
        adapter = switch_adapter([1, 1, 1, 1, 1, 1], [1, 1])
        adapter.switches["l1"].s_tilde[...] = [0.0001, 0.0002]
        removed = enforce_budget(adapter, 0.25, ConstraintMode.GLOBAL)
        self.assertEqual(removed, 6)
        self.assertEqual(int(adapter.switches["l0"].bits.sum()), 1)
        self.assertEqual(int(adapter.switches["l1"].bits.sum()), 1)
        self.assertTrue(check_compliance(adapter, 0.25, ConstraintMode.GLOBAL))


@pytest.mark.unit
class TestLambdaStep(unittest.TestCase):
    """Tests for projected multiplier ascent."""

    def test_ascent(self):
        spec = BudgetSpec(beta=0.5, mode="global", lambdas=np.array([0.0]), lambda_lr=1.0)
        self.assertAlmostEqual(lambda_step(spec, 0.3).lambdas[0], 0.3)

    def test_projection(self):
        spec = BudgetSpec(beta=0.5, mode="global", lambdas=np.array([0.1]), lambda_lr=1.0)
        self.assertEqual(lambda_step(spec, -0.1).lambdas[0], 0.0)

    def test_stays_zero_when_satisfied(self):
        spec = BudgetSpec.create(1.0, "per-layer", 3, lambda_lr=1.0)
        for _ in range(5):
            spec = lambda_step(spec, [-0.2, 0.0, -1.0])
        np.testing.assert_array_equal(spec.lambdas, 0.0)

    def test_original_spec_unchanged(self):
        spec = BudgetSpec.create(0.5, "global", 1)
        lambda_step(spec, 1.0)
        self.assertEqual(spec.lambdas[0], 0.0)

    def test_scaled_step_per_scope(self):
        spec = BudgetSpec.create(0.5, "per-layer", 2, lambda_lr=0.01)
        stepped = lambda_step(spec, [0.5, 0.5], scale=[3, 32])
        np.testing.assert_allclose(stepped.lambdas, [0.015, 0.16])

    def test_scope_sizes(self):
        adapter = switch_adapter([1, 1, 0], [1, 0, 0, 0, 0])
        np.testing.assert_array_equal(scope_sizes(adapter, "per-layer"), [3, 5])
        np.testing.assert_array_equal(scope_sizes(adapter, "global"), [8])

    def test_invalid_specs(self):
        with self.assertRaises(ConfigError):
            BudgetSpec(beta=1.5)
        with self.assertRaises(ConfigError):
            BudgetSpec(beta=0.5, lambdas=np.array([-1.0]))
        with self.assertRaises(ConfigError):
            BudgetSpec(beta=0.5, mode="global", lambdas=np.zeros(2))
        with self.assertRaises(ConfigError):
            BudgetSpec.create(0.5, "layerwise", 2)


@pytest.mark.unit
class TestOptimizers(unittest.TestCase):
    """Tests for SGD and Adam."""

    def test_sgd_step(self):
        p = Parameter(np.array([1.0]))
        p.grad[:] = 0.5
        SGD([p], lr=0.1).step()
        self.assertAlmostEqual(p.value[0], 0.95)

    def test_sgd_momentum(self):
        p = Parameter(np.array([0.0]))
        opt = SGD([p], lr=1.0, momentum=0.5)
        for _ in range(2):
            p.grad[:] = 1.0
            opt.step()
        self.assertAlmostEqual(p.value[0], -2.5)

    def test_frozen_parameters_skipped(self):
        p = Parameter(np.array([1.0]), frozen=True)
        p.grad[:] = 1.0
        SGD([p], lr=0.1).step()
        Adam([p], lr=0.1).step()
        self.assertEqual(p.value[0], 1.0)

    def test_adam_first_step_is_learning_rate(self):
        p = Parameter(np.array([0.0, 0.0]))
        p.grad[:] = [4.0, -0.01]
        Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.value, [-0.01, 0.01], rtol=1e-4)

    def test_invalid(self):
        p = Parameter(np.array([0.0]))
        with self.assertRaises(ConfigError):
            SGD([p], lr=0.0)
        with self.assertRaises(ConfigError):
            SGD([p, p], lr=0.1)
        with self.assertRaises(ConfigError):
            SGD([p], lr=0.1, momentum=1.0)

    def test_learning_rate_schedule(self):
        cfg = TrainConfig(epochs=6, decay_epochs=(2, 4), decay_factor=0.1)
        self.assertEqual(cfg.lr_scale(0), 1.0)
        self.assertAlmostEqual(cfg.lr_scale(2), 0.1)
        self.assertAlmostEqual(cfg.lr_scale(5), 0.01)
        with self.assertRaises(ConfigError):
            TrainConfig(decay_epochs=(4, 2))

    def test_iterate_batches_covers_once(self):
        batches = list(iterate_batches(10, 4, np.random.default_rng(0)))
        self.assertEqual([len(b) for b in batches], [4, 4, 2])
        self.assertEqual(sorted(np.concatenate(batches)), list(range(10)))


@pytest.mark.unit
class TestConstraintTrace(unittest.TestCase):
    """Tests for the per-step trace."""

    def test_append_and_rows(self):
        trace = ConstraintTrace(ConstraintMode.PER_LAYER, ("a", "b"))
        trace.append(TraceRecord(0, (1.0, 0.5), (0.1, 0.0), 2.0))
        self.assertEqual(len(trace.rows()), 2)
        self.assertEqual(trace.final_lambdas, (0.1, 0.0))
        with self.assertRaises(ValueError):
            trace.append(TraceRecord(5, (1.0, 0.5), (0.1, 0.0), 2.0))
        with self.assertRaises(ValueError):
            trace.append(TraceRecord(1, (1.0,), (0.1,), 2.0))


@pytest.mark.integration
class TestTrainDomain(unittest.TestCase):
    """Tests for single-adapter training over a frozen backbone."""

    @classmethod
    def setUpClass(cls):
        cls.data = synthetic_domain("target", seed=4)

    def setUp(self):
        self.backbone = tiny_backbone()
        self.model = MultiDomainModel(self.backbone)

    def test_backbone_untouched(self):
        before = {k: p.value.copy() for k, p in self.backbone.kernels.items()}
        bn_before = self.backbone.bn["stem"].running_mean.copy()
        spec = BudgetSpec.create(0.5, "per-layer", 6)
        train_domain(self.model, self.data, spec, quick_config())
        for name, value in before.items():
            np.testing.assert_array_equal(self.backbone.kernels[name].value, value)
        np.testing.assert_array_equal(self.backbone.bn["stem"].running_mean, bn_before)

    def test_full_budget_keeps_multipliers_at_zero(self):
        spec = BudgetSpec.create(1.0, "per-layer", 6)
        adapter, trace = train_domain(self.model, self.data, spec, quick_config())
        self.assertEqual(len(trace), 3)
        self.assertFalse(trace.lambda_history().any())
        self.assertTrue(adapter.metadata["compliant"])
        self.assertIs(self.model.resolve("target", 1.0), adapter)

    def test_multipliers_grow_over_budget(self):
        spec = BudgetSpec.create(0.25, "per-layer", 6)
        adapter, trace = train_domain(self.model, self.data, spec, quick_config())
        first = trace.records[0]
        self.assertEqual(first.theta_bars, (1.0,) * 6)
        # Each layer's step is scaled by its switch count.
        sizes = scope_sizes(adapter, "per-layer")
        np.testing.assert_allclose(sizes, [3, 4, 4, 4, 8, 4])
        np.testing.assert_allclose(first.lambdas, 0.01 * 0.75 * sizes)
        self.assertTrue(check_compliance(adapter, 0.25, "per-layer"))
        self.assertTrue(adapter.metadata["compliant"])

    def test_violation_is_flagged(self):
        spec = BudgetSpec.create(0.1, "global", 6)
        with self.assertLogs("ba2kit.core.trainer", level="WARNING") as cm:
            adapter, _ = train_domain(
                self.backbone, self.data, spec, quick_config(enforce_budget=False)
            )
        self.assertFalse(adapter.metadata["compliant"])
        self.assertEqual(adapter.metadata["enforced_switches"], 0)
        self.assertEqual(cm.records[-1].event, "constraint_violated")

    def test_budget_is_enforced_after_training(self):
        spec = BudgetSpec.create(0.1, "global", 6)
        with self.assertLogs("ba2kit.core.trainer", level="INFO") as cm:
            adapter, _ = train_domain(self.model, self.data, spec, quick_config())
        self.assertTrue(adapter.metadata["compliant"])
        self.assertLessEqual(adapter.theta_bar(), 0.1)
        self.assertGreater(adapter.metadata["enforced_switches"], 0)
        events = [getattr(r, "event", None) for r in cm.records]
        self.assertIn("budget_enforced", events)
        self.assertNotIn("constraint_violated", events)
        logits = adapter_forward(self.data.test.images, self.model, adapter)
        self.assertTrue(np.isfinite(logits).all())

    def test_multiplier_count_follows_architecture(self):
        spec = BudgetSpec.create(0.5, "per-layer", 1)
        _, trace = train_domain(self.model, self.data, spec, quick_config())
        self.assertEqual(len(trace.scopes), 6)

    def test_rejected_inputs(self):
        with self.assertRaises(ConfigError):
            train_domain(self.model, self.data, BudgetSpec.create(0.0, "global", 1), quick_config())
        with self.assertRaises(DataError):
            train_domain(
                self.model, empty_domain(), BudgetSpec.create(0.5, "global", 1), quick_config()
            )
        unfrozen = tiny_backbone(frozen=False)
        with self.assertRaises(ConfigError):
            train_domain(unfrozen, self.data, BudgetSpec.create(0.5, "global", 1), quick_config())


@pytest.mark.integration
class TestJointTraining(unittest.TestCase):
    """Tests for multi-budget training with shared kernels."""

    def test_shared_kernels(self):
        backbone = tiny_backbone()
        before = {k: p.value.copy() for k, p in backbone.kernels.items()}
        data = synthetic_domain("joint", seed=2)
        specs = [BudgetSpec.create(b, "per-layer", 6) for b in (1.0, 0.5)]
        result = train_multi_budget_joint(backbone, data, specs, quick_config())

        self.assertEqual(sorted(result.adapters), ["0.5", "1"])
        full, half = result.adapters["1"], result.adapters["0.5"]
        for spec in backbone.arch.convs():
            self.assertIs(
                result.model.layer(spec, full).kernel, result.model.layer(spec, half).kernel
            )
        self.assertTrue(result.model.backbone.frozen)
        for name, value in before.items():
            np.testing.assert_array_equal(backbone.kernels[name].value, value)
        changed = any(
            not np.array_equal(result.model.backbone.kernels[n].value, v) for n, v in before.items()
        )
        self.assertTrue(changed)
        self.assertEqual(len(result.traces["0.5"]), 3)

    def test_duplicate_budgets(self):
        backbone = tiny_backbone()
        data = synthetic_domain("joint", seed=2)
        specs = [BudgetSpec.create(0.5, "global", 1), BudgetSpec.create(0.5, "global", 1)]
        with self.assertRaises(ConfigError):
            train_multi_budget_joint(backbone, data, specs, quick_config())
        with self.assertRaises(ConfigError):
            train_multi_budget_joint(backbone, data, [], quick_config())

    def test_each_budget_meets_its_own_beta(self):
        backbone = tiny_backbone()
        data = synthetic_domain("joint", seed=5, size=60)
        specs = [BudgetSpec.create(b, "per-layer", 6) for b in (1.0, 0.5)]
        result = train_multi_budget_joint(backbone, data, specs, quick_config(epochs=3))

        for key, beta in (("1", 1.0), ("0.5", 0.5)):
            adapter = result.adapters[key]
            self.assertTrue(adapter.metadata["compliant"])
            self.assertTrue(np.all(scope_theta_bars(adapter, "per-layer") <= beta))
        self.assertFalse(result.traces["1"].lambda_history().any())
        full, half = result.adapters["1"], result.adapters["0.5"]
        for spec in backbone.arch.convs():
            np.testing.assert_array_equal(
                result.model.layer(spec, full).kernel.value,
                result.model.layer(spec, half).kernel.value,
            )


@pytest.mark.integration
class TestPretrainDomainTraining(unittest.TestCase):
    """Training on the domain the backbone was pretrained on."""

    @classmethod
    def setUpClass(cls):
        cls.data = synthetic_domain("cifar", seed=7)
        cls.backbone = train_backbone(tiny_arch(), cls.data, quick_config())

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def test_joint_training_on_pretrain_domain(self):
        specs = [BudgetSpec.create(b, "per-layer", 6) for b in (1.0, 0.5)]
        result = train_multi_budget_joint(self.backbone, self.data, specs, quick_config())
        self.assertEqual(sorted(result.adapters), ["0.5", "1"])
        self.assertIs(result.model.resolve("cifar", 1.0), result.adapters["1"])
        self.assertFalse(result.model.is_base(result.adapters["1"]))

    def test_finetune_error_on_pretrain_domain(self):
        error = finetune_error(self.backbone, self.data, quick_config())
        self.assertGreaterEqual(error, 0.0)
        self.assertLessEqual(error, 1.0)

    def test_train_domain_replaces_pretrained_entry(self):
        model = MultiDomainModel(self.backbone)
        base = self.backbone.base_adapter()
        base_logits = adapter_forward(self.data.test.images, model, base)
        spec = BudgetSpec.create(1.0, "per-layer", 6)
        adapter, _ = train_domain(model, self.data, spec, quick_config())
        self.assertIs(model.resolve("cifar", 1.0), adapter)
        self.assertEqual(len(model.banks["stem"].keys()), 1)
        # The pretrained network itself is unchanged.
        np.testing.assert_array_equal(
            adapter_forward(self.data.test.images, MultiDomainModel(self.backbone), base),
            base_logits,
        )
        with self.assertRaises(ValueError):
            model.register(DomainAdapter.create(self.backbone, "cifar", 1.0, 3))

    def test_registry_reloads_trained_pretrain_adapter(self):
        registry = ModelRegistry.create(os.path.join(self.tmpdir, "reg"), self.backbone)
        spec = BudgetSpec.create(1.0, "per-layer", 6)
        adapter, _ = train_domain(registry.model, self.data, spec, quick_config())
        registry.register(adapter)

        fresh = ModelRegistry(registry.root)
        loaded = fresh.resolve("cifar", 1.0)
        self.assertFalse(fresh.model.is_base(loaded))
        np.testing.assert_array_equal(loaded.head.weight.value, adapter.head.weight.value)


@pytest.mark.integration
class TestSequentialDomains(unittest.TestCase):
    """Training a second domain never changes the first one."""

    def test_second_domain_leaves_first_untouched(self):
        backbone = tiny_backbone()
        model = MultiDomainModel(backbone)
        kernels = {name: k.value.copy() for name, k in backbone.kernels.items()}
        bn = {name: (b.gamma.value.copy(), b.running_mean.copy()) for name, b in backbone.bn.items()}
        head = backbone.head.weight.value.copy()
        first = synthetic_domain("first", seed=8)
        second = synthetic_domain("second", seed=9)
        images = np.concatenate([first.test.images, second.test.images])

        adapter_a, _ = train_domain(
            model, first, BudgetSpec.create(0.5, "per-layer", 6), quick_config(epochs=2)
        )
        before = adapter_forward(images, model, adapter_a)
        switches = {n: sv.s_tilde.copy() for n, sv in adapter_a.switches.items()}

        train_domain(model, second, BudgetSpec.create(0.5, "per-layer", 6), quick_config(epochs=2))
        train_domain(model, second, BudgetSpec.create(1.0, "global", 1), quick_config(epochs=2))

        np.testing.assert_array_equal(adapter_forward(images, model, adapter_a), before)
        for name, value in switches.items():
            np.testing.assert_array_equal(adapter_a.switches[name].s_tilde, value)
        for name, value in kernels.items():
            np.testing.assert_array_equal(backbone.kernels[name].value, value)
        for name, (gamma, mean) in bn.items():
            np.testing.assert_array_equal(backbone.bn[name].gamma.value, gamma)
            np.testing.assert_array_equal(backbone.bn[name].running_mean, mean)
        np.testing.assert_array_equal(backbone.head.weight.value, head)


@pytest.mark.slow
@pytest.mark.integration
class TestConstrainedDynamics(unittest.TestCase):
    """Two target domains at budgets 1.0, 0.75 and 0.5 in per-layer mode."""

    BUDGETS = (1.0, 0.75, 0.5)

    def test_budgets_met_without_losing_accuracy(self):
        def domain(name, seed, num_classes=2, size=400):
            return synthetic_domain(
                name, seed=seed, num_classes=num_classes, size=size, image_size=8
            )

        cfg = TrainConfig(
            epochs=10, batch_size=16, classifier_lr=0.01, decay_epochs=(8,), seed=0
        )
        arch = ArchSpec.residual(3, (8, 16), 1)
        backbone = train_backbone(arch, domain("source", 20, num_classes=8, size=800), cfg)
        model = MultiDomainModel(backbone)
        num_layers = len(arch.layer_names)

        gaps = []
        for name, seed in (("a", 21), ("b", 22)):
            data = domain(name, seed)
            errors = {}
            for beta in self.BUDGETS:
                spec = BudgetSpec.create(beta, "per-layer", num_layers)
                adapter, trace = train_domain(model, data, spec, cfg)
                theta = scope_theta_bars(adapter, "per-layer")
                self.assertTrue(np.all(theta <= beta), f"{name}@{beta}: {theta}")
                self.assertTrue(adapter.metadata["compliant"])
                if beta == 1.0:
                    self.assertFalse(trace.lambda_history().any())
                else:
                    self.assertTrue(trace.lambda_history().any())
                errors[beta] = evaluate(model, adapter, data.test)
            gaps.append(errors[0.5] - errors[1.0])
        self.assertLessEqual(float(np.mean(gaps)), 0.05, f"accuracy drops {gaps}")


if __name__ == "__main__":
    unittest.main()
