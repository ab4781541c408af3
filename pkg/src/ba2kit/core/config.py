"""
Declarative benchmark configuration.

A JSON file supplies any subset of the keys below; command-line flags are
applied on top as overrides. Precedence: defaults < file < overrides.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Mapping, Optional, Tuple

from .errors import ConfigError
from .layers import DEFAULT_BLOCKS_PER_STAGE, DEFAULT_WIDTHS, ArchSpec
from .models import DEFAULT_LAMBDA_LR, BudgetSpec, ConstraintMode, DatasetSpec, TrainConfig
from .utils import config_hash

DEFAULT_BUDGETS = (1.0, 0.75, 0.5, 0.25)
DEFAULT_IMAGE_SIZE = 32
DEFAULT_THREADS = 1
DEFAULT_RUNS = 1
DEFAULT_REGISTRY = "registry"
DEFAULT_OUTPUT = "results"

TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
BENCH_KEYS = (
    "budgets",
    "mode",
    "lambda_lr",
    "architecture",
    "image_size",
    "pretrain_domain",
    "pretrain_epochs",
    "domains",
    "registry",
    "output",
    "threads",
    "runs",
)
UNHASHED_KEYS = ("registry", "output", "threads")

logger = logging.getLogger(__name__)


@dataclass
class BenchConfig:
    """Everything a benchmark run needs, validated."""

    train: TrainConfig = field(default_factory=TrainConfig)
    budgets: Tuple[float, ...] = DEFAULT_BUDGETS
    mode: ConstraintMode = ConstraintMode.PER_LAYER
    lambda_lr: float = DEFAULT_LAMBDA_LR
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    blocks_per_stage: int = DEFAULT_BLOCKS_PER_STAGE
    image_size: int = DEFAULT_IMAGE_SIZE
    pretrain_domain: Optional[str] = None
    pretrain_epochs: Optional[int] = None
    domains: Dict[str, DatasetSpec] = field(default_factory=dict)
    registry: str = DEFAULT_REGISTRY
    output: str = DEFAULT_OUTPUT
    threads: int = DEFAULT_THREADS
    runs: int = DEFAULT_RUNS
    raw: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.mode = ConstraintMode.parse(self.mode)
        self.budgets = tuple(float(b) for b in self.budgets)
        if not self.budgets:
            raise ConfigError("At least one budget is required")
        for beta in self.budgets:
            if not (0.0 < beta <= 1.0):
                raise ConfigError(f"Budgets must be in (0, 1], got {beta}")
        if len(set(self.budgets)) != len(self.budgets):
            raise ConfigError(f"Duplicate budgets: {self.budgets}")
        if self.lambda_lr <= 0:
            raise ConfigError(f"lambda_lr must be positive, got {self.lambda_lr}")
        if self.threads < 1:
            raise ConfigError(f"Threads must be at least 1, got {self.threads}")
        if self.runs < 1:
            raise ConfigError(f"runs must be at least 1, got {self.runs}")
        if self.image_size < 1:
            raise ConfigError(f"Image size must be positive, got {self.image_size}")
        if self.pretrain_epochs is not None and self.pretrain_epochs < 1:
            raise ConfigError(f"pretrain_epochs must be at least 1, got {self.pretrain_epochs}")
        if self.pretrain_domain is not None and self.domains and self.pretrain_domain not in self.domains:
            raise ConfigError(f"Pretraining domain '{self.pretrain_domain}' is not among the domains")

    @property
    def arch(self) -> ArchSpec:
        channels = {spec.channels for spec in self.domains.values()} or {3}
        if len(channels) != 1:
            raise ConfigError(f"All domains must share one channel count, got {sorted(channels)}")
        return ArchSpec.residual(channels.pop(), self.widths, self.blocks_per_stage)

    @property
    def pretrain_config(self) -> TrainConfig:
        if self.pretrain_epochs is None:
            return self.train
        values = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        values["epochs"] = self.pretrain_epochs
        return TrainConfig(**values)

    @property
    def target_domains(self) -> Tuple[str, ...]:
        """Adapted domains: every domain except the pretraining one, in file order."""
        return tuple(name for name in self.domains if name != self.pretrain_domain)

    def budget_spec(self, beta: float, num_layers: int) -> BudgetSpec:
        return BudgetSpec.create(beta, self.mode, num_layers, self.lambda_lr)

    def hash(self) -> str:
        """SHA-256 of the merged configuration, without keys that only place or schedule work."""
        return config_hash({k: v for k, v in self.raw.items() if k not in UNHASHED_KEYS})


def _dataset_spec(
    name: str, data: Mapping[str, Any], base_dir: str, seed: int, image_size: int
) -> DatasetSpec:
    if not isinstance(data, Mapping):
        raise ConfigError(f"Domain '{name}' must be a JSON object")
    values = dict(data)
    for key in ("images", "labels", "path"):
        if values.get(key) and not os.path.isabs(values[key]):
            values[key] = os.path.join(base_dir, values[key])
    values.setdefault("seed", seed)
    if str(values.get("format", "")).lower() == "synthetic":
        values.setdefault("image_size", image_size)
    for key in ("splits", "mean", "std"):
        if values.get(key) is not None:
            values[key] = tuple(values[key])
    allowed = {f.name for f in fields(DatasetSpec)} - {"name"}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"Unknown keys for domain '{name}': {sorted(unknown)}")
    try:
        return DatasetSpec(name=name, **values)
    except TypeError as e:
        raise ConfigError(f"Domain '{name}': {e}") from e


def read_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def build_config(values: Mapping[str, Any], base_dir: str = ".") -> BenchConfig:
    """Validate a merged key/value mapping into a ``BenchConfig``."""
    unknown = set(values) - set(TRAIN_KEYS) - set(BENCH_KEYS)
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")

    train_values = {k: values[k] for k in TRAIN_KEYS if k in values}
    try:
        train = TrainConfig(**train_values)
    except TypeError as e:
        raise ConfigError(str(e)) from e

    arch = values.get("architecture") or {}
    if not isinstance(arch, Mapping) or set(arch) - {"widths", "blocks_per_stage"}:
        raise ConfigError("architecture accepts only 'widths' and 'blocks_per_stage'")
    domains = {
        name: _dataset_spec(
            name, spec, base_dir, train.seed, int(values.get("image_size", DEFAULT_IMAGE_SIZE))
        )
        for name, spec in (values.get("domains") or {}).items()
    }
    pretrain_domain = values.get("pretrain_domain")
    if pretrain_domain is None and domains:
        pretrain_domain = next(iter(domains))

    return BenchConfig(
        train=train,
        budgets=tuple(values.get("budgets", DEFAULT_BUDGETS)),
        mode=values.get("mode", ConstraintMode.PER_LAYER),
        lambda_lr=float(values.get("lambda_lr", DEFAULT_LAMBDA_LR)),
        widths=tuple(arch.get("widths", DEFAULT_WIDTHS)),
        blocks_per_stage=int(arch.get("blocks_per_stage", DEFAULT_BLOCKS_PER_STAGE)),
        image_size=int(values.get("image_size", DEFAULT_IMAGE_SIZE)),
        pretrain_domain=pretrain_domain,
        pretrain_epochs=values.get("pretrain_epochs"),
        domains=domains,
        registry=values.get("registry", DEFAULT_REGISTRY),
        output=values.get("output", DEFAULT_OUTPUT),
        threads=int(values.get("threads", DEFAULT_THREADS)),
        runs=int(values.get("runs", DEFAULT_RUNS)),
        raw=dict(values),
    )


def load_config(
    path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None
) -> BenchConfig:
    """Merge defaults, the optional JSON file at ``path`` and ``overrides``."""
    values: Dict[str, Any] = {}
    base_dir = "."
    if path:
        values.update(read_config_file(path))
        base_dir = os.path.dirname(os.path.abspath(path))
        logger.info(f"Loaded configuration from {path}")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_config(values, base_dir)
