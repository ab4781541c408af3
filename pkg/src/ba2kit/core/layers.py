"""
Budget-Aware Adapter mechanics.

A frozen backbone holds the convolution kernels. Each (domain, budget) gets a
``DomainAdapter``: one switch vector per convolution (gating input channels),
its own batch-norm parameters and its own classifier head.
"""

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ArchitectureMismatchError, ConfigError, MissingBankError, NotFoundError
from .tensor import (
    DEFAULT_BN_MOMENTUM,
    DEFAULT_DTYPE,
    MaskedConv2d,
    Node,
    Parameter,
    Tape,
    add,
    batch_norm,
    dense,
    global_avg_pool,
    relu,
)
from .utils import budget_id

SWITCH_INIT = 0.001
PRETRAIN_DOMAIN = "pretrain"
FLOAT_BITS = 32

logger = logging.getLogger(__name__)

AllocationHook = Callable[[str, int, int], None]


def binarize(s_tilde: np.ndarray) -> np.ndarray:
    """Threshold switches: 0 where s_tilde <= 0, else 1."""
    return (np.asarray(s_tilde) > 0.0).astype(np.uint8)


class SwitchVector:
    """Real-valued switches for one convolution; ``bits`` is their binarization."""

    def __init__(self, s_tilde: np.ndarray, name: str = "", frozen: bool = False):
        self.param = Parameter(np.asarray(s_tilde), name=f"{name}.switch", frozen=frozen)
        self.name = name

    @classmethod
    def initial(
        cls, size: int, name: str = "", value: float = SWITCH_INIT, dtype=DEFAULT_DTYPE
    ) -> "SwitchVector":
        return cls(np.full(size, value, dtype=dtype), name=name)

    @classmethod
    def from_bits(cls, bits: np.ndarray, name: str = "", dtype=DEFAULT_DTYPE) -> "SwitchVector":
        """Rebuild switches whose binarization reproduces ``bits``."""
        return cls((np.asarray(bits) * SWITCH_INIT).astype(dtype), name=name)

    @property
    def s_tilde(self) -> np.ndarray:
        return self.param.value

    @property
    def bits(self) -> np.ndarray:
        return binarize(self.param.value)

    @property
    def mean(self) -> float:
        return float(self.bits.mean())

    def __len__(self) -> int:
        return self.param.value.shape[0]


@dataclass
class BnParams:
    """Affine parameters and running statistics of one batch-norm layer."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, name: str = "", dtype=DEFAULT_DTYPE) -> "BnParams":
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma"),
            beta=Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def copy(self) -> "BnParams":
        return BnParams(
            gamma=Parameter(self.gamma.value.copy(), name=self.gamma.name),
            beta=Parameter(self.beta.value.copy(), name=self.beta.name),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
        )

    @property
    def channels(self) -> int:
        return self.gamma.value.shape[0]


class BnBank:
    """Batch-norm parameter sets of one convolution, keyed by (domain, budget)."""

    def __init__(self, layer: str):
        self.layer = layer
        self._entries: Dict[Tuple[str, str], BnParams] = {}

    def put(self, domain: str, budget: float, params: BnParams, replace: bool = False) -> None:
        key = (domain, budget_id(budget))
        existing = self._entries.get(key)
        if existing is not None and existing is not params and not replace:
            raise ValueError(f"Layer {self.layer} already has a bank for {key}")
        for other_key, other in self._entries.items():
            if other is params and other_key != key:
                raise ValueError(f"Bank entry for {key} aliases the entry for {other_key}")
        self._entries[key] = params

    def get(self, domain: str, budget: float) -> BnParams:
        key = (domain, budget_id(budget))
        try:
            return self._entries[key]
        except KeyError:
            raise MissingBankError(
                f"Layer {self.layer} has no batch-norm bank for domain '{domain}' "
                f"budget {key[1]}"
            ) from None

    def __contains__(self, key: Tuple[str, float]) -> bool:
        return (key[0], budget_id(key[1])) in self._entries

    def keys(self) -> List[Tuple[str, str]]:
        return sorted(self._entries)


@dataclass(frozen=True)
class ConvSpec:
    """Shape of one convolution in the backbone."""

    name: str
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ConfigError(f"Kernel size must be odd, got {self.kernel_size}")

    @property
    def kernel_shape(self) -> Tuple[int, int, int, int]:
        k = self.kernel_size
        return (k, k, self.in_channels, self.out_channels)

    def descriptor(self) -> str:
        k = self.kernel_size
        return (
            f"{self.name}:{k}x{k}:{self.in_channels}->{self.out_channels}"
            f":s{self.stride}:p{self.padding}"
        )


@dataclass(frozen=True)
class BlockSpec:
    """Basic residual block: two 3x3 convolutions plus an optional 1x1 projection."""

    conv1: ConvSpec
    conv2: ConvSpec
    shortcut: Optional[ConvSpec] = None

    def convs(self) -> List[ConvSpec]:
        return [c for c in (self.conv1, self.conv2, self.shortcut) if c is not None]


DEFAULT_WIDTHS = (16, 32, 64)
DEFAULT_BLOCKS_PER_STAGE = 1


@dataclass(frozen=True)
class ArchSpec:
    """Small residual ConvNet: a stem convolution and three stages of basic blocks."""

    image_channels: int
    widths: Tuple[int, ...]
    blocks_per_stage: int
    downsample: bool
    stem: ConvSpec
    blocks: Tuple[BlockSpec, ...]

    @classmethod
    def residual(
        cls,
        image_channels: int = 3,
        widths: Tuple[int, ...] = DEFAULT_WIDTHS,
        blocks_per_stage: int = DEFAULT_BLOCKS_PER_STAGE,
        downsample: bool = True,
    ) -> "ArchSpec":
        widths = tuple(int(w) for w in widths)
        if image_channels < 1 or not widths or any(w < 1 for w in widths):
            raise ConfigError(f"Invalid architecture widths {widths}")
        if blocks_per_stage < 1:
            raise ConfigError(f"Blocks per stage must be at least 1, got {blocks_per_stage}")

        stem = ConvSpec("stem", image_channels, widths[0])
        blocks = []
        in_ch = widths[0]
        for s, width in enumerate(widths):
            for b in range(blocks_per_stage):
                stride = 2 if (downsample and s > 0 and b == 0) else 1
                prefix = f"s{s + 1}b{b + 1}"
                shortcut = None
                if stride != 1 or in_ch != width:
                    shortcut = ConvSpec(f"{prefix}.proj", in_ch, width, 1, stride, 0)
                blocks.append(
                    BlockSpec(
                        conv1=ConvSpec(f"{prefix}.conv1", in_ch, width, 3, stride, 1),
                        conv2=ConvSpec(f"{prefix}.conv2", width, width, 3, 1, 1),
                        shortcut=shortcut,
                    )
                )
                in_ch = width
        return cls(image_channels, widths, blocks_per_stage, downsample, stem, tuple(blocks))

    def convs(self) -> List[ConvSpec]:
        """All convolutions in forward order."""
        out = [self.stem]
        for block in self.blocks:
            out.extend(block.convs())
        return out

    @property
    def layer_names(self) -> List[str]:
        return [c.name for c in self.convs()]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def descriptor(self) -> str:
        return ";".join(c.descriptor() for c in self.convs())

    def arch_hash(self) -> bytes:
        """32-byte digest of the ordered layer-shape descriptor."""
        return hashlib.sha256(self.descriptor().encode("ascii")).digest()

    def to_dict(self) -> Dict:
        return {
            "image_channels": self.image_channels,
            "widths": list(self.widths),
            "blocks_per_stage": self.blocks_per_stage,
            "downsample": self.downsample,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ArchSpec":
        return cls.residual(
            image_channels=int(data.get("image_channels", 3)),
            widths=tuple(data.get("widths", DEFAULT_WIDTHS)),
            blocks_per_stage=int(data.get("blocks_per_stage", DEFAULT_BLOCKS_PER_STAGE)),
            downsample=bool(data.get("downsample", True)),
        )


@dataclass
class DenseHead:
    """Per-domain linear classifier."""

    weight: Parameter
    bias: Parameter

    @classmethod
    def initialize(
        cls, features: int, classes: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE
    ) -> "DenseHead":
        w = rng.normal(0.0, np.sqrt(1.0 / features), size=(features, classes)).astype(dtype)
        return cls(
            weight=Parameter(w, name="head.weight"),
            bias=Parameter(np.zeros(classes, dtype=dtype), name="head.bias"),
        )

    @property
    def num_classes(self) -> int:
        return self.bias.value.shape[0]

    def copy(self) -> "DenseHead":
        return DenseHead(self.weight.copy(), self.bias.copy())

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class Backbone:
    """The shared network parameters theta_0, plus the pretraining domain's BN and head."""

    def __init__(
        self,
        arch: ArchSpec,
        kernels: Dict[str, Parameter],
        bn: Dict[str, BnParams],
        head: DenseHead,
        domain: str = PRETRAIN_DOMAIN,
    ):
        self.arch = arch
        self.kernels = kernels
        self.bn = bn
        self.head = head
        self.domain = domain
        self._base: Optional[DomainAdapter] = None
        for spec in arch.convs():
            if spec.name not in kernels or kernels[spec.name].value.shape != spec.kernel_shape:
                raise ArchitectureMismatchError(f"Kernel for {spec.name} missing or misshapen")

    @classmethod
    def initialize(
        cls,
        arch: ArchSpec,
        num_classes: int,
        seed: int = 0,
        dtype=DEFAULT_DTYPE,
        domain: str = PRETRAIN_DOMAIN,
    ) -> "Backbone":
        """He-initialized kernels, identity batch norm and a random head."""
        rng = np.random.default_rng(seed)
        kernels = {}
        bn = {}
        for spec in arch.convs():
            fan_in = spec.kernel_size * spec.kernel_size * spec.in_channels
            k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.kernel_shape).astype(dtype)
            kernels[spec.name] = Parameter(k, name=f"{spec.name}.kernel")
            bn[spec.name] = BnParams.fresh(spec.out_channels, name=spec.name, dtype=dtype)
        head = DenseHead.initialize(arch.feature_dim, num_classes, rng, dtype)
        return cls(arch, kernels, bn, head, domain=domain)

    @property
    def dtype(self) -> np.dtype:
        return self.kernels[self.arch.stem.name].value.dtype

    @property
    def frozen(self) -> bool:
        return all(k.frozen for k in self.kernels.values())

    def freeze(self) -> None:
        for k in self.kernels.values():
            k.frozen = True

    def unfreeze(self) -> None:
        for k in self.kernels.values():
            k.frozen = False

    def copy(self, domain: Optional[str] = None) -> "Backbone":
        """Independent copy of all parameters."""
        return Backbone(
            self.arch,
            {name: k.copy() for name, k in self.kernels.items()},
            {name: b.copy() for name, b in self.bn.items()},
            self.head.copy(),
            domain=domain or self.domain,
        )

    def kernel_param_count(self) -> int:
        return int(sum(k.value.size for k in self.kernels.values()))

    def param_bits(self) -> int:
        """Storage of theta_0 at 32 bits per float; the classifier is excluded."""
        bn_floats = sum(2 * b.channels for b in self.bn.values())
        return FLOAT_BITS * (self.kernel_param_count() + bn_floats)

    def base_adapter(self) -> "DomainAdapter":
        """The pretraining domain's network as an adapter with every switch on."""
        if self._base is None:
            switches = {}
            for spec in self.arch.convs():
                sv = SwitchVector.initial(spec.in_channels, spec.name, dtype=self.dtype)
                sv.param.frozen = True
                switches[spec.name] = sv
            self._base = DomainAdapter(
                domain=self.domain,
                budget=1.0,
                switches=switches,
                bn=self.bn,
                head=self.head,
                arch_hash=self.arch.arch_hash(),
            )
        return self._base


@dataclass
class DomainAdapter:
    """theta_a^d for one (domain, budget): switches, batch-norm sets and classifier head."""

    domain: str
    budget: float
    switches: Dict[str, SwitchVector]
    bn: Dict[str, BnParams]
    head: DenseHead
    arch_hash: bytes = b""
    metadata: Dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        backbone: Backbone,
        domain: str,
        budget: float,
        num_classes: int,
        seed: int = 0,
    ) -> "DomainAdapter":
        """Fresh adapter: switches at their initial value, BN copied from the backbone."""
        rng = np.random.default_rng(seed)
        dtype = backbone.dtype
        switches = {
            spec.name: SwitchVector.initial(spec.in_channels, spec.name, dtype=dtype)
            for spec in backbone.arch.convs()
        }
        bn = {name: params.copy() for name, params in backbone.bn.items()}
        head = DenseHead.initialize(backbone.arch.feature_dim, num_classes, rng, dtype)
        return cls(domain, float(budget), switches, bn, head, backbone.arch.arch_hash())

    @property
    def key(self) -> Tuple[str, str]:
        return (self.domain, budget_id(self.budget))

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def check_architecture(self, arch: ArchSpec) -> None:
        names = arch.layer_names
        if sorted(names) != sorted(self.switches) or sorted(names) != sorted(self.bn):
            raise ArchitectureMismatchError(
                f"Adapter {self.key} layers do not match the backbone architecture"
            )
        for spec in arch.convs():
            if len(self.switches[spec.name]) != spec.in_channels:
                raise ArchitectureMismatchError(
                    f"Adapter {self.key} layer {spec.name} has {len(self.switches[spec.name])} "
                    f"switches, backbone expects {spec.in_channels}"
                )
            if self.bn[spec.name].channels != spec.out_channels:
                raise ArchitectureMismatchError(
                    f"Adapter {self.key} layer {spec.name} batch norm has wrong width"
                )
        if self.head.weight.value.shape[0] != arch.feature_dim:
            raise ArchitectureMismatchError(f"Adapter {self.key} head has wrong input width")

    def theta_bars(self, order: Optional[List[str]] = None) -> Dict[str, float]:
        """Mean of the binarized switches per layer."""
        names = order or list(self.switches)
        return {name: self.switches[name].mean for name in names}

    def theta_bar(self) -> float:
        """Mean over all switches of the adapter."""
        bits = np.concatenate([sv.bits for sv in self.switches.values()])
        return float(bits.mean())

    def switch_parameters(self) -> List[Parameter]:
        return [sv.param for sv in self.switches.values()]

    def bn_parameters(self) -> List[Parameter]:
        out = []
        for params in self.bn.values():
            out.extend([params.gamma, params.beta])
        return out

    def param_bits(self) -> int:
        """Switches at 1 bit, BN gamma/beta at 32 bits; the head is excluded."""
        switch_bits = sum(len(sv) for sv in self.switches.values())
        bn_bits = FLOAT_BITS * sum(2 * p.channels for p in self.bn.values())
        return switch_bits + bn_bits

    def dead_layers(self) -> List[str]:
        """Layers whose switches are all off."""
        return [name for name, sv in self.switches.items() if not sv.bits.any()]


@dataclass
class AdaptedConvLayer:
    """A backbone kernel gated by one adapter's switches."""

    spec: ConvSpec
    kernel: Parameter
    switches: SwitchVector
    bank: BnBank

    def __post_init__(self):
        if len(self.switches) != self.kernel.value.shape[2]:
            raise ArchitectureMismatchError(
                f"Layer {self.spec.name}: {len(self.switches)} switches for "
                f"{self.kernel.value.shape[2]} input channels"
            )

    @property
    def stride(self) -> int:
        return self.spec.stride

    @property
    def padding(self) -> int:
        return self.spec.padding


def _warn_if_dead(layer: AdaptedConvLayer) -> None:
    if not layer.switches.bits.any():
        logger.warning(
            f"All switches of layer {layer.spec.name} are off; it outputs zeros",
            extra={"event": "all_switches_off", "layer": layer.spec.name},
        )


def masked_conv(
    tape: Tape,
    x: Node,
    layer: AdaptedConvLayer,
    on_allocate: Optional[AllocationHook] = None,
) -> Node:
    """Record a switch-gated convolution on ``tape``."""
    _warn_if_dead(layer)
    hook = None
    if on_allocate is not None:
        name = layer.spec.name

        def hook(consumed: int, produced: int) -> None:
            on_allocate(name, consumed, produced)

    return tape.apply(
        MaskedConv2d(),
        x,
        tape.param(layer.kernel),
        tape.param(layer.switches.param),
        stride=layer.stride,
        padding=layer.padding,
        on_allocate=hook,
    )


def masked_conv_forward(x: np.ndarray, layer: AdaptedConvLayer) -> np.ndarray:
    """Switch-gated convolution on arrays; inactive channels are never computed."""
    _warn_if_dead(layer)
    return MaskedConv2d().forward(
        x, layer.kernel.value, layer.switches.s_tilde, stride=layer.stride, padding=layer.padding
    )


def masked_conv_backward(
    ctx: MaskedConv2d, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Input and switch gradients (identity straight-through) for a forwarded context."""
    dx, _, ds = ctx.backward(upstream)
    return dx, ds


class AllocationTrace:
    """Per-layer activation bytes observed during an inference run."""

    def __init__(self):
        self.events: List[Tuple[str, int, int]] = []

    def __call__(self, layer: str, consumed: int, produced: int) -> None:
        self.events.append((layer, consumed, produced))

    @property
    def peak_bytes(self) -> int:
        return max((c + p for _, c, p in self.events), default=0)


class MultiDomainModel:
    """
    A backbone with every registered adapter.

    Each convolution keeps one ``BnBank``; registering an adapter adds its
    batch-norm sets under its (domain, budget) key. The backbone's own domain
    is registered at construction; an adapter trained explicitly for that
    domain at budget 1.0 takes its place.
    """

    def __init__(self, backbone: Backbone):
        self.backbone = backbone
        self.banks: Dict[str, BnBank] = {name: BnBank(name) for name in backbone.arch.layer_names}
        self.adapters: Dict[Tuple[str, str], DomainAdapter] = {}
        self._lock = threading.Lock()
        self.register(backbone.base_adapter())

    def register(self, adapter: DomainAdapter) -> None:
        adapter.check_architecture(self.backbone.arch)
        if adapter.arch_hash and adapter.arch_hash != self.backbone.arch.arch_hash():
            raise ArchitectureMismatchError(f"Adapter {adapter.key} was built for another backbone")
        with self._lock:
            replace = False
            if adapter.key in self.adapters:
                current = self.adapters[adapter.key]
                if current is adapter:
                    return
                if not self.is_base(current):
                    raise ValueError(f"Adapter {adapter.key} is already registered")
                replace = True
            for name, bank in self.banks.items():
                bank.put(adapter.domain, adapter.budget, adapter.bn[name], replace=replace)
            self.adapters[adapter.key] = adapter
        if replace:
            logger.info(f"Adapter {adapter.key} replaces the pretrained network's entry")
        else:
            logger.debug(f"Registered adapter {adapter.key}")

    def is_base(self, adapter: DomainAdapter) -> bool:
        """True for the backbone's own all-on adapter."""
        return adapter is self.backbone.base_adapter()

    def resolve(self, domain: str, budget: float) -> DomainAdapter:
        key = (domain, budget_id(budget))
        try:
            return self.adapters[key]
        except KeyError:
            budgets = sorted(b for d, b in self.adapters if d == domain)
            raise NotFoundError(
                f"No adapter for domain '{domain}' budget {key[1]}; available budgets: {budgets}"
            ) from None

    def __iter__(self) -> Iterator[DomainAdapter]:
        return iter(list(self.adapters.values()))

    def layer(self, spec: ConvSpec, adapter: DomainAdapter) -> AdaptedConvLayer:
        return AdaptedConvLayer(
            spec=spec,
            kernel=self.backbone.kernels[spec.name],
            switches=adapter.switches[spec.name],
            bank=self.banks[spec.name],
        )

    def forward(
        self,
        tape: Tape,
        x: Node,
        adapter: DomainAdapter,
        training: bool,
        on_allocate: Optional[AllocationHook] = None,
        bn_momentum: float = DEFAULT_BN_MOMENTUM,
    ) -> Node:
        """Record the full network for ``adapter`` and return the logits node."""

        def conv_bn(h: Node, spec: ConvSpec, activate: bool = True) -> Node:
            layer = self.layer(spec, adapter)
            params = layer.bank.get(adapter.domain, adapter.budget)
            out = masked_conv(tape, h, layer, on_allocate)
            out = batch_norm(
                tape,
                out,
                tape.param(params.gamma),
                tape.param(params.beta),
                params.running_mean,
                params.running_var,
                training,
                momentum=bn_momentum,
            )
            return relu(tape, out) if activate else out

        arch = self.backbone.arch
        h = conv_bn(x, arch.stem)
        for block in arch.blocks:
            out = conv_bn(h, block.conv1)
            out = conv_bn(out, block.conv2, activate=False)
            skip = conv_bn(h, block.shortcut, activate=False) if block.shortcut else h
            h = relu(tape, add(tape, out, skip))
        features = global_avg_pool(tape, h)
        return dense(tape, features, tape.param(adapter.head.weight), tape.param(adapter.head.bias))


def parse_mode(mode: str) -> bool:
    """'train' -> True, 'eval' -> False."""
    normalized = str(mode).lower()
    if normalized not in ("train", "eval"):
        raise ConfigError(f"Mode must be 'train' or 'eval', got '{mode}'")
    return normalized == "train"


def adapter_forward(
    x: np.ndarray,
    model: MultiDomainModel,
    adapter: DomainAdapter,
    mode: str = "eval",
    on_allocate: Optional[AllocationHook] = None,
) -> np.ndarray:
    """Logits of the composed backbone + adapter network."""
    training = parse_mode(mode)
    tape = Tape()
    logits = model.forward(tape, tape.leaf(x), adapter, training, on_allocate)
    return logits.value


def predict(
    model: MultiDomainModel, adapter: DomainAdapter, images: np.ndarray, batch_size: int = 128
) -> np.ndarray:
    """Eval-mode class predictions in fixed-size batches."""
    preds = []
    for start in range(0, images.shape[0], batch_size):
        logits = adapter_forward(images[start : start + batch_size], model, adapter, "eval")
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def error_rate(
    model: MultiDomainModel, adapter: DomainAdapter, images: np.ndarray, labels: np.ndarray
) -> float:
    """Fraction of misclassified samples."""
    if images.shape[0] == 0:
        raise ConfigError("Cannot evaluate on an empty split")
    return float(np.mean(predict(model, adapter, images) != labels))
