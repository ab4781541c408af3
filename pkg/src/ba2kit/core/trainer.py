"""
Budget-constrained training of domain adapters.

The objective for one (domain, budget) is the generalized Lagrangian

    L(theta_a) + sum over scopes of lambda * (theta_bar - beta)

minimized over the adapter parameters and maximized over lambda >= 0 by a
projected ascent step after every parameter update.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..io.datasets import DomainData, Split, mirror_augment
from .errors import ConfigError, DataError
from .layers import SWITCH_INIT, ArchSpec, Backbone, DomainAdapter, MultiDomainModel, error_rate
from .models import BudgetSpec, ConstraintMode, ConstraintTrace, TraceRecord, TrainConfig
from .optim import SGD, Adam, Optimizer
from .tensor import Affine, BinarizeSTE, Mean, Node, Tape, add, softmax_cross_entropy
from .utils import budget_id

logger = logging.getLogger(__name__)


def constraint_scopes(adapter: DomainAdapter, mode: ConstraintMode) -> Tuple[str, ...]:
    if ConstraintMode.parse(mode) is ConstraintMode.GLOBAL:
        return ("global",)
    return tuple(adapter.switches)


def scope_theta_bars(adapter: DomainAdapter, mode: ConstraintMode) -> np.ndarray:
    """Binarized switch means: one value in global mode, one per layer otherwise."""
    if ConstraintMode.parse(mode) is ConstraintMode.GLOBAL:
        return np.array([adapter.theta_bar()])
    return np.array([sv.mean for sv in adapter.switches.values()])


def budget_penalty(adapter: DomainAdapter, spec: BudgetSpec) -> Tuple[float, np.ndarray]:
    """Return (sum of lambda * violation, per-scope violations theta_bar - beta)."""
    theta = scope_theta_bars(adapter, spec.mode)
    if theta.shape != spec.lambdas.shape:
        raise ConfigError(
            f"{spec.lambdas.size} multipliers for {theta.size} constraint scopes"
        )
    violations = theta - spec.beta
    return float(np.dot(spec.lambdas, violations)), violations


def lambda_step(
    spec: BudgetSpec,
    violations: Union[float, Sequence[float]],
    scale: Union[float, Sequence[float]] = 1.0,
) -> BudgetSpec:
    """
    Projected ascent: lambda <- max(0, lambda + lambda_lr * scale * violation).

    ``scale`` multiplies the step per scope; the trainer passes each scope's
    switch count so that lambda / C grows at the same rate in every scope.
    """
    v = np.broadcast_to(np.asarray(violations, dtype=np.float64), spec.lambdas.shape)
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), spec.lambdas.shape)
    lambdas = np.maximum(0.0, spec.lambdas + spec.lambda_lr * scale * v)
    return dataclasses.replace(spec, lambdas=lambdas)


def scope_sizes(adapter: DomainAdapter, mode: ConstraintMode) -> np.ndarray:
    """Switch count of each constraint scope."""
    sizes = [len(sv) for sv in adapter.switches.values()]
    if ConstraintMode.parse(mode) is ConstraintMode.GLOBAL:
        return np.array([sum(sizes)], dtype=np.float64)
    return np.array(sizes, dtype=np.float64)


def check_compliance(adapter: DomainAdapter, beta: float, mode: ConstraintMode) -> bool:
    """True when every scope's binarized mean is within the budget."""
    return bool(np.all(scope_theta_bars(adapter, mode) <= beta))


def max_active(beta: float, count: int) -> int:
    """Largest k with k / count <= beta."""
    k = min(count, int(np.floor(beta * count)) + 1)
    while k > 0 and k / count > beta:
        k -= 1
    return k


def enforce_budget(adapter: DomainAdapter, beta: float, mode: ConstraintMode) -> int:
    """
    Switch off the lowest-valued active switches until every scope meets ``beta``.

    In global mode a layer keeps its last active switch while other layers
    still have switches to give. Returns the number of switches turned off.
    """
    removed = 0
    if ConstraintMode.parse(mode) is ConstraintMode.PER_LAYER:
        for sv in adapter.switches.values():
            active = np.flatnonzero(sv.bits)
            excess = active.size - max_active(beta, len(sv))
            if excess > 0:
                order = active[np.argsort(sv.s_tilde[active], kind="stable")]
                sv.s_tilde[order[:excess]] = -SWITCH_INIT
                removed += excess
        return removed

    total = sum(len(sv) for sv in adapter.switches.values())
    excess = sum(int(sv.bits.sum()) for sv in adapter.switches.values()) - max_active(beta, total)
    for _ in range(max(excess, 0)):
        candidates = [
            (int(sv.bits.sum()) == 1, float(sv.s_tilde[i]), n, int(i))
            for n, sv in enumerate(adapter.switches.values())
            for i in np.flatnonzero(sv.bits)
        ]
        _, _, layer, index = min(candidates)
        list(adapter.switches.values())[layer].s_tilde[index] = -SWITCH_INIT
        removed += 1
    return removed


def recalibrate_bn(
    model: MultiDomainModel, adapter: DomainAdapter, data: DomainData, cfg: TrainConfig
) -> None:
    """Recompute the adapter's running statistics as an average over the training split."""
    for params in adapter.bn.values():
        params.running_mean[...] = 0.0
        params.running_var[...] = 1.0
    for i, start in enumerate(range(0, data.train.size, cfg.batch_size)):
        tape = Tape()
        images = data.train.images[start : start + cfg.batch_size]
        model.forward(tape, tape.leaf(images), adapter, training=True, bn_momentum=1.0 / (i + 1))


def _finish(
    model: MultiDomainModel, data: DomainData, group: "_AdapterGroup", cfg: TrainConfig
) -> bool:
    """Optional budget enforcement, then the compliance flag stored on the adapter."""
    adapter, spec = group.adapter, group.spec
    removed = 0
    if cfg.enforce_budget and not check_compliance(adapter, spec.beta, spec.mode):
        removed = enforce_budget(adapter, spec.beta, spec.mode)
        recalibrate_bn(model, adapter, data, cfg)
        logger.info(
            f"Adapter {adapter.key}: switched off {removed} channels to meet budget "
            f"{budget_id(spec.beta)}",
            extra={"event": "budget_enforced", "domain": adapter.domain, "budget": spec.beta},
        )
    compliant = check_compliance(adapter, spec.beta, spec.mode)
    adapter.metadata.update(
        {
            "mode": spec.mode.value,
            "compliant": compliant,
            "seed": cfg.seed,
            "enforced_switches": removed,
        }
    )
    if not compliant:
        logger.warning(
            f"Adapter {adapter.key} does not satisfy its budget",
            extra={"event": "constraint_violated", "domain": adapter.domain, "budget": spec.beta},
        )
    return compliant


def penalty_node(tape: Tape, adapter: DomainAdapter, spec: BudgetSpec) -> Node:
    """
    Record the budget penalty on ``tape``.

    Each layer contributes binarize -> mean -> affine, so the gradient reaching
    a switch is lambda / C_scope.
    """
    switches = list(adapter.switches.values())
    dtype = switches[0].s_tilde.dtype
    global_mode = spec.mode is ConstraintMode.GLOBAL
    total_channels = sum(len(sv) for sv in switches)

    terms = []
    for i, sv in enumerate(switches):
        bits = tape.apply(BinarizeSTE(), tape.param(sv.param))
        mean = tape.apply(Mean(), bits)
        if global_mode:
            scale = float(spec.lambdas[0]) * len(sv) / total_channels
            terms.append(tape.apply(Affine(), mean, scale=scale, shift=0.0))
        else:
            lam = float(spec.lambdas[i])
            terms.append(tape.apply(Affine(), mean, scale=lam, shift=-spec.beta))
    total = terms[0]
    for term in terms[1:]:
        total = add(tape, total, term)
    if global_mode:
        offset = tape.leaf(np.asarray(-float(spec.lambdas[0]) * spec.beta, dtype=dtype))
        total = add(tape, total, offset)
    return total


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches covering ``n`` samples once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_data(data: DomainData) -> None:
    if data.train.size == 0:
        raise DataError(f"Dataset '{data.name}' has no training samples")


@dataclass
class _AdapterGroup:
    """An adapter being trained with its optimizers and multiplier state."""

    adapter: DomainAdapter
    spec: BudgetSpec
    trace: ConstraintTrace
    classifier_opt: SGD
    adapter_opt: Adam

    @classmethod
    def create(cls, adapter: DomainAdapter, spec: BudgetSpec, cfg: TrainConfig) -> "_AdapterGroup":
        return cls(
            adapter=adapter,
            spec=spec,
            trace=ConstraintTrace(spec.mode, constraint_scopes(adapter, spec.mode)),
            classifier_opt=SGD(adapter.head.parameters(), cfg.classifier_lr, cfg.classifier_momentum),
            adapter_opt=Adam(
                adapter.switch_parameters() + adapter.bn_parameters(),
                cfg.adapter_lr,
                cfg.adam_betas,
                cfg.adam_eps,
            ),
        )

    @property
    def optimizers(self) -> List[Optimizer]:
        return [self.classifier_opt, self.adapter_opt]


def _record_lagrangian(
    tape: Tape, model: MultiDomainModel, x: Node, labels: np.ndarray, group: _AdapterGroup
) -> Tuple[Node, np.ndarray]:
    """Cross-entropy plus penalty for one adapter; returns the node and violations."""
    logits = model.forward(tape, x, group.adapter, training=True)
    ce, _ = softmax_cross_entropy(tape, logits, labels)
    _, violations = budget_penalty(group.adapter, group.spec)
    return add(tape, ce, penalty_node(tape, group.adapter, group.spec)), violations


def _run(
    model: MultiDomainModel,
    data: DomainData,
    groups: List[_AdapterGroup],
    cfg: TrainConfig,
    extra_optimizers: Sequence[Optimizer] = (),
) -> None:
    """Shared loop: one tape per step holding every group's Lagrangian."""
    rng = np.random.default_rng(cfg.seed)
    mirror = cfg.mirror and data.mirror
    optimizers = [opt for g in groups for opt in g.optimizers] + list(extra_optimizers)
    step = 0
    for epoch in range(cfg.epochs):
        start_time = time.time()
        scale = cfg.lr_scale(epoch)
        for opt in optimizers:
            opt.scale_lr(scale)
        epoch_loss = 0.0
        batches = 0
        for idx in iterate_batches(data.train.size, cfg.batch_size, rng):
            images = data.train.images[idx]
            if mirror:
                images = mirror_augment(images, rng)
            for opt in optimizers:
                opt.zero_grad()

            tape = Tape()
            x = tape.leaf(images)
            nodes, violations, thetas = [], [], []
            for g in groups:
                thetas.append(scope_theta_bars(g.adapter, g.spec.mode))
                node, v = _record_lagrangian(tape, model, x, data.train.labels[idx], g)
                nodes.append(node)
                violations.append(v)
            total = nodes[0]
            for node in nodes[1:]:
                total = add(tape, total, node)
            tape.backward(total)
            tape.accumulate_param_grads()
            for opt in optimizers:
                opt.step()

            for g, node, v, theta in zip(groups, nodes, violations, thetas):
                g.spec = lambda_step(g.spec, v, scope_sizes(g.adapter, g.spec.mode))
                g.trace.append(
                    TraceRecord(
                        step=step,
                        theta_bars=tuple(float(t) for t in theta),
                        lambdas=tuple(float(lam) for lam in g.spec.lambdas),
                        loss=float(node.value),
                    )
                )
            logger.debug(f"step {step}: loss {float(total.value):.4f}")
            epoch_loss += float(total.value)
            batches += 1
            step += 1

        for g in groups:
            theta = scope_theta_bars(g.adapter, g.spec.mode)
            logger.info(
                f"[{g.adapter.domain} beta={budget_id(g.spec.beta)}] epoch {epoch + 1}/{cfg.epochs} "
                f"loss {epoch_loss / max(batches, 1):.4f} max theta_bar {theta.max():.3f} "
                f"max lambda {g.spec.lambdas.max():.4f} ({time.time() - start_time:.2f}s)"
            )


def train_domain(
    model: Union[MultiDomainModel, Backbone],
    data: DomainData,
    spec: BudgetSpec,
    cfg: TrainConfig,
) -> Tuple[DomainAdapter, ConstraintTrace]:
    """
    Train a new adapter for ``data`` at ``spec.beta`` over a frozen backbone.

    The adapter is registered in ``model``; only its switches, batch norm and
    head are updated. Compliance is stored in ``adapter.metadata``.
    """
    if isinstance(model, Backbone):
        model = MultiDomainModel(model)
    if not model.backbone.frozen:
        raise ConfigError("Adapter training needs a frozen backbone")
    if spec.beta <= 0.0:
        raise ConfigError("Budget 0 leaves no active channel; use a budget in (0, 1]")
    _check_data(data)
    num_layers = len(model.backbone.arch.layer_names)
    if spec.mode is ConstraintMode.PER_LAYER and spec.lambdas.size != num_layers:
        spec = BudgetSpec.create(spec.beta, spec.mode, num_layers, spec.lambda_lr)

    adapter = DomainAdapter.create(
        model.backbone, data.name, spec.beta, data.num_classes, seed=cfg.seed
    )
    model.register(adapter)
    logger.info(
        f"Training adapter for '{data.name}' at budget {budget_id(spec.beta)} "
        f"({spec.mode.value}, {data.train.size} samples, {cfg.epochs} epochs)"
    )
    group = _AdapterGroup.create(adapter, spec, cfg)
    _run(model, data, [group], cfg)
    _finish(model, data, group, cfg)
    return adapter, group.trace


@dataclass
class JointResult:
    """Adapters trained jointly over one shared, fine-tuned kernel set."""

    model: MultiDomainModel
    adapters: Dict[str, DomainAdapter]
    traces: Dict[str, ConstraintTrace]


def train_multi_budget_joint(
    backbone: Backbone,
    data: DomainData,
    specs: Sequence[BudgetSpec],
    cfg: TrainConfig,
) -> JointResult:
    """
    Train one adapter per budget while fine-tuning a copy of the kernels.

    Each step minimizes the sum of the per-budget Lagrangians. The switch sets
    of different budgets are unconstrained relative to each other. The input
    backbone is left untouched.
    """
    if not specs:
        raise ConfigError("Joint training needs at least one budget")
    keys = [budget_id(s.beta) for s in specs]
    if len(set(keys)) != len(keys):
        raise ConfigError(f"Duplicate budgets in joint training: {keys}")
    if any(s.beta <= 0.0 for s in specs):
        raise ConfigError("Budget 0 leaves no active channel; use a budget in (0, 1]")
    _check_data(data)

    shared = backbone.copy()
    shared.unfreeze()
    model = MultiDomainModel(shared)
    num_layers = len(shared.arch.layer_names)

    groups = []
    for i, spec in enumerate(specs):
        if spec.mode is ConstraintMode.PER_LAYER and spec.lambdas.size != num_layers:
            spec = BudgetSpec.create(spec.beta, spec.mode, num_layers, spec.lambda_lr)
        adapter = DomainAdapter.create(
            shared, data.name, spec.beta, data.num_classes, seed=cfg.seed + i
        )
        model.register(adapter)
        groups.append(_AdapterGroup.create(adapter, spec, cfg))

    kernel_opt = SGD(shared.kernels.values(), cfg.backbone_lr, cfg.classifier_momentum)
    logger.info(f"Joint training on '{data.name}' for budgets {keys}")
    _run(model, data, groups, cfg, extra_optimizers=[kernel_opt])
    shared.freeze()

    for g in groups:
        _finish(model, data, g, cfg)
    return JointResult(
        model=model,
        adapters={budget_id(g.spec.beta): g.adapter for g in groups},
        traces={budget_id(g.spec.beta): g.trace for g in groups},
    )


def finetune_error(backbone: Backbone, data: DomainData, cfg: TrainConfig) -> float:
    """Test error of a fully fine-tuned per-domain copy (joint mode at budget 1)."""
    result = train_multi_budget_joint(
        backbone, data, [BudgetSpec.create(1.0, ConstraintMode.GLOBAL, 1)], cfg
    )
    adapter = result.adapters[budget_id(1.0)]
    return evaluate(result.model, adapter, data.test)


def train_backbone(
    arch: ArchSpec, data: DomainData, cfg: TrainConfig, dtype=np.float32
) -> Backbone:
    """Pretrain theta_0 on ``data`` with every switch on; returns it frozen."""
    _check_data(data)
    backbone = Backbone.initialize(arch, data.num_classes, seed=cfg.seed, dtype=dtype, domain=data.name)
    model = MultiDomainModel(backbone)
    base = backbone.base_adapter()
    params = list(backbone.kernels.values()) + base.bn_parameters() + base.head.parameters()
    opt = SGD(params, cfg.backbone_lr, cfg.classifier_momentum)
    rng = np.random.default_rng(cfg.seed)
    mirror = cfg.mirror and data.mirror
    logger.info(f"Pretraining backbone on '{data.name}' ({data.train.size} samples)")

    for epoch in range(cfg.epochs):
        start_time = time.time()
        opt.scale_lr(cfg.lr_scale(epoch))
        total, batches = 0.0, 0
        for idx in iterate_batches(data.train.size, cfg.batch_size, rng):
            images = data.train.images[idx]
            if mirror:
                images = mirror_augment(images, rng)
            opt.zero_grad()
            tape = Tape()
            logits = model.forward(tape, tape.leaf(images), base, training=True)
            loss, _ = softmax_cross_entropy(tape, logits, data.train.labels[idx])
            tape.backward(loss)
            tape.accumulate_param_grads()
            opt.step()
            total += float(loss.value)
            batches += 1
        logger.info(
            f"[backbone] epoch {epoch + 1}/{cfg.epochs} loss {total / max(batches, 1):.4f} "
            f"({time.time() - start_time:.2f}s)"
        )
    backbone.freeze()
    return backbone


def evaluate(model: MultiDomainModel, adapter: DomainAdapter, split: Split) -> float:
    """Eval-mode test error of ``adapter`` on ``split``."""
    return error_rate(model, adapter, split.images, split.labels)
