"""
Data models for ba2kit.
"""

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError

DEFAULT_LAMBDA_LR = 0.01


class ConstraintMode(Enum):
    """Scope of the budget constraint."""

    GLOBAL = "global"
    PER_LAYER = "per_layer"

    @classmethod
    def parse(cls, value: "str | ConstraintMode") -> "ConstraintMode":
        if isinstance(value, cls):
            return value
        normalized = str(value).strip().lower().replace("-", "_")
        for mode in cls:
            if mode.value == normalized:
                return mode
        raise ConfigError(f"Unknown constraint mode '{value}' (expected global or per-layer)")


@dataclass
class BudgetSpec:
    """Target budget, constraint scope and KKT multiplier state."""

    beta: float
    mode: ConstraintMode = ConstraintMode.PER_LAYER
    lambdas: np.ndarray = field(default_factory=lambda: np.zeros(1))
    lambda_lr: float = DEFAULT_LAMBDA_LR

    def __post_init__(self):
        self.mode = ConstraintMode.parse(self.mode)
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"Budget must be between 0 and 1, got {self.beta}")
        if self.lambda_lr <= 0:
            raise ConfigError(f"Multiplier learning rate must be positive, got {self.lambda_lr}")
        if np.any(self.lambdas < 0):
            raise ConfigError("KKT multipliers must be nonnegative")
        if self.mode is ConstraintMode.GLOBAL and self.lambdas.shape != (1,):
            raise ConfigError("Global mode holds exactly one multiplier")

    @classmethod
    def create(
        cls,
        beta: float,
        mode: "str | ConstraintMode",
        num_layers: int,
        lambda_lr: float = DEFAULT_LAMBDA_LR,
    ) -> "BudgetSpec":
        """Fresh spec with every multiplier at 0."""
        mode = ConstraintMode.parse(mode)
        count = 1 if mode is ConstraintMode.GLOBAL else num_layers
        return cls(beta=beta, mode=mode, lambdas=np.zeros(count), lambda_lr=lambda_lr)


@dataclass
class TrainConfig:
    """Optimizer and schedule settings for one training run."""

    epochs: int = 60
    batch_size: int = 32
    classifier_lr: float = 1e-3
    classifier_momentum: float = 0.9
    adapter_lr: float = 1e-4
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    backbone_lr: float = 0.1
    decay_epochs: Tuple[int, ...] = (45,)
    decay_factor: float = 0.1
    seed: int = 0
    mirror: bool = True
    enforce_budget: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 1:
            raise ConfigError(f"Epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"Batch size must be at least 1, got {self.batch_size}")
        for name in ("classifier_lr", "adapter_lr", "backbone_lr", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.classifier_momentum < 1):
            raise ConfigError(f"Momentum must be in [0, 1), got {self.classifier_momentum}")
        if any(not (0 <= b < 1) for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ConfigError(f"Adam betas must be two values in [0, 1), got {self.adam_betas}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"Decay epochs must be strictly increasing, got {self.decay_epochs}")
        if not (0 < self.decay_factor <= 1):
            raise ConfigError(f"Decay factor must be in (0, 1], got {self.decay_factor}")

    def lr_scale(self, epoch: int) -> float:
        """Multiplicative learning-rate factor in effect during ``epoch`` (0-based)."""
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.decay_factor**drops


@dataclass(frozen=True)
class TraceRecord:
    """State after one optimization step."""

    step: int
    theta_bars: Tuple[float, ...]
    lambdas: Tuple[float, ...]
    loss: float


@dataclass
class ConstraintTrace:
    """Append-only per-step log of switch means and multipliers."""

    mode: ConstraintMode
    scopes: Tuple[str, ...]
    records: List[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        expected = len(self.records)
        if record.step != expected:
            raise ValueError(f"Trace expects step {expected}, got {record.step}")
        if len(record.theta_bars) != len(self.scopes) or len(record.lambdas) != len(self.scopes):
            raise ValueError("Trace record does not match the constraint scopes")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final_lambdas(self) -> Tuple[float, ...]:
        return self.records[-1].lambdas if self.records else tuple(0.0 for _ in self.scopes)

    def lambda_history(self) -> np.ndarray:
        return np.array([r.lambdas for r in self.records], dtype=np.float64)

    def rows(self) -> List[Tuple[int, str, float, float, float]]:
        """(step, layer, theta_bar, lambda, loss) rows, one per scope per step."""
        out = []
        for record in self.records:
            for scope, theta, lam in zip(self.scopes, record.theta_bars, record.lambdas):
                out.append((record.step, scope, theta, lam, record.loss))
        return out

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "layer", "theta_bar", "lambda", "loss"])
            for step, scope, theta, lam, loss in self.rows():
                writer.writerow([step, scope, repr(float(theta)), repr(float(lam)), repr(loss)])


@dataclass
class LayerCost:
    """Cost of one convolution layer under a switch mask."""

    layer: str
    active_in_channels: int
    total_in_channels: int
    flops_forward: int
    param_bits: int
    activation_bytes: int

    @property
    def complexity(self) -> float:
        return self.active_in_channels / self.total_in_channels


@dataclass
class ComplexityReport:
    """Per-layer costs plus network totals."""

    layers: List[LayerCost]
    elementwise_flops: int = 0

    @property
    def complexity(self) -> float:
        """Mean of all switches in the network."""
        total = sum(c.total_in_channels for c in self.layers)
        return sum(c.active_in_channels for c in self.layers) / total if total else 0.0

    @property
    def total_flops(self) -> int:
        return sum(c.flops_forward for c in self.layers)

    @property
    def total_param_bits(self) -> int:
        return sum(c.param_bits for c in self.layers)

    @property
    def peak_activation_bytes(self) -> int:
        return max((c.activation_bytes for c in self.layers), default=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layers": [
                {
                    "layer": c.layer,
                    "active_in_channels": c.active_in_channels,
                    "total_in_channels": c.total_in_channels,
                    "complexity": c.complexity,
                    "flops": c.flops_forward,
                    "param_bits": c.param_bits,
                    "activation_bytes": c.activation_bytes,
                }
                for c in self.layers
            ],
            "totals": {
                "complexity": self.complexity,
                "flops": self.total_flops,
                "elementwise_flops": self.elementwise_flops,
                "param_bits": self.total_param_bits,
                "peak_activation_bytes": self.peak_activation_bytes,
            },
        }

    def format_table(self) -> str:
        header = f"{'layer':<16}{'active':>8}{'total':>8}{'C':>8}{'FLOPs':>14}{'bits':>12}{'act.bytes':>12}"
        lines = [header, "-" * len(header)]
        for c in self.layers:
            lines.append(
                f"{c.layer:<16}{c.active_in_channels:>8}{c.total_in_channels:>8}"
                f"{c.complexity:>8.3f}{c.flops_forward:>14}{c.param_bits:>12}{c.activation_bytes:>12}"
            )
        lines.append("-" * len(header))
        lines.append(
            f"{'total':<16}{'':>8}{'':>8}{self.complexity:>8.3f}{self.total_flops:>14}"
            f"{self.total_param_bits:>12}{self.peak_activation_bytes:>12}"
        )
        return "\n".join(lines)


@dataclass
class DomainResult:
    """Outcome of training and evaluating one (domain, budget)."""

    domain: str
    budget: float
    error: float
    compliant: bool
    flop_fraction: float
    param_bits: int
    theta_bars: Tuple[float, ...] = ()

    def __post_init__(self):
        if not (0.0 <= self.error <= 1.0):
            raise ValueError(f"Test error must be in [0, 1], got {self.error}")


@dataclass
class DomainScore:
    """Decathlon-style partial score for one domain."""

    domain: str
    budget: float
    error: float
    e_max: float
    alpha: float
    partial: float
    flop_fraction: float = 1.0
    param_bits: int = 0
    compliant: bool = True

    @property
    def baseline_flagged(self) -> bool:
        """Baselines above 1 are kept uncapped but flagged."""
        return self.e_max > 1.0


@dataclass
class ScoreReport:
    """Per-domain scores and aggregate efficiency metrics."""

    domains: List[DomainScore]
    rel_flop: float = 1.0
    rel_params: float = 1.0

    @property
    def score(self) -> float:
        return float(sum(d.partial for d in self.domains))

    @property
    def score_per_operation(self) -> float:
        return self.score / self.rel_flop

    @property
    def score_per_parameter(self) -> float:
        return self.score / self.rel_params

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domains": [
                {
                    "id": d.domain,
                    "budget": d.budget,
                    "error": d.error,
                    "e_max": d.e_max,
                    "alpha": d.alpha,
                    "partial": d.partial,
                    "flop_fraction": d.flop_fraction,
                    "param_bits": d.param_bits,
                    "compliant": d.compliant,
                    "baseline_flagged": d.baseline_flagged,
                }
                for d in self.domains
            ],
            "totals": {
                "S": self.score,
                "rel_flop": self.rel_flop,
                "rel_params": self.rel_params,
                "S_O": self.score_per_operation,
                "S_P": self.score_per_parameter,
            },
        }


class DatasetFormat(Enum):
    IDX = "idx"
    CIFAR = "cifar"
    SYNTHETIC = "synthetic"


@dataclass
class DatasetSpec:
    """Where a domain's data comes from and how it is split and normalized."""

    name: str
    format: DatasetFormat
    num_classes: int
    images: Optional[str] = None
    labels: Optional[str] = None
    path: Optional[str] = None
    seed: int = 0
    size: int = 600
    image_size: int = 16
    channels: int = 3
    splits: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    mean: Optional[Sequence[float]] = None
    std: Optional[Sequence[float]] = None
    sha256: Dict[str, str] = field(default_factory=dict)
    mirror: bool = True
    limit: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.format, str):
            try:
                self.format = DatasetFormat(self.format.lower())
            except ValueError:
                raise ConfigError(f"Unknown dataset format '{self.format}'") from None
        self.splits = tuple(float(s) for s in self.splits)
        if self.num_classes < 2:
            raise ConfigError(f"Dataset '{self.name}' needs at least 2 classes")
        if len(self.splits) != 3 or any(s < 0 for s in self.splits):
            raise ConfigError(f"Splits must be three nonnegative fractions, got {self.splits}")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ConfigError(f"Splits must sum to 1, got {self.splits}")
        if self.format is DatasetFormat.IDX and not (self.images and self.labels):
            raise ConfigError(f"IDX dataset '{self.name}' needs 'images' and 'labels' paths")
        if self.format is DatasetFormat.CIFAR and not self.path:
            raise ConfigError(f"CIFAR dataset '{self.name}' needs a 'path'")
        if self.format is DatasetFormat.SYNTHETIC and self.size < self.num_classes:
            raise ConfigError(f"Synthetic dataset '{self.name}' is smaller than its class count")
