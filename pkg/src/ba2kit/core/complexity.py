"""
Cost accounting for masked networks.

Convolution FLOPs count one multiply-accumulate as 2 operations. Element-wise
work (batch norm, ReLU, residual adds, pooling) is reported separately and
does not enter the FLOP ratios. Parameters count floats at 32 bits and
switches at 1 bit; classifier heads are excluded throughout.
"""

from fractions import Fraction
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import FLOAT_BITS, ArchSpec, Backbone, ConvSpec, DomainAdapter
from .models import ComplexityReport, LayerCost
from .tensor import output_size

FLOAT_BYTES = 4

# Element-wise operations per output element
BN_FLOPS_PER_ELEMENT = 2
RELU_FLOPS_PER_ELEMENT = 1
ADD_FLOPS_PER_ELEMENT = 1
POOL_FLOPS_PER_ELEMENT = 1

Shape = Tuple[int, int, int, int]


def layer_complexity(switches: Sequence[int]) -> float:
    """Fraction of active input channels of one layer."""
    bits = np.asarray(switches)
    if bits.size == 0:
        raise ShapeError("Complexity of an empty switch vector is undefined")
    return float(bits.mean())


def layer_complexity_exact(switches: Sequence[int]) -> Fraction:
    bits = np.asarray(switches)
    if bits.size == 0:
        raise ShapeError("Complexity of an empty switch vector is undefined")
    return Fraction(int(bits.sum()), int(bits.size))


def conv_flops(spec: ConvSpec, out_h: int, out_w: int, active: int) -> int:
    """2 * H_out * W_out * KH * KW * C_active * C_out."""
    k = spec.kernel_size
    return 2 * out_h * out_w * k * k * active * spec.out_channels


def layer_shapes(arch: ArchSpec, input_size: Tuple[int, int]) -> Dict[str, Shape]:
    """(in_h, in_w, out_h, out_w) of every convolution for an input of ``input_size``."""

    def resolve(spec: ConvSpec, h: int, w: int) -> Shape:
        k = spec.kernel_size
        return (
            h,
            w,
            output_size(h, k, spec.stride, spec.padding),
            output_size(w, k, spec.stride, spec.padding),
        )

    h, w = input_size
    shapes = {arch.stem.name: resolve(arch.stem, h, w)}
    h, w = shapes[arch.stem.name][2:]
    for block in arch.blocks:
        shapes[block.conv1.name] = resolve(block.conv1, h, w)
        mid_h, mid_w = shapes[block.conv1.name][2:]
        shapes[block.conv2.name] = resolve(block.conv2, mid_h, mid_w)
        if block.shortcut is not None:
            shapes[block.shortcut.name] = resolve(block.shortcut, h, w)
        h, w = shapes[block.conv2.name][2:]
    return shapes


def _active_channels(spec: ConvSpec, adapter: Optional[DomainAdapter]) -> int:
    if adapter is None:
        return spec.in_channels
    return int(adapter.switches[spec.name].bits.sum())


def _elementwise_flops(arch: ArchSpec, shapes: Dict[str, Shape]) -> int:
    total = 0
    for spec in arch.convs():
        _, _, oh, ow = shapes[spec.name]
        total += BN_FLOPS_PER_ELEMENT * oh * ow * spec.out_channels
    stem_h, stem_w = shapes[arch.stem.name][2:]
    total += RELU_FLOPS_PER_ELEMENT * stem_h * stem_w * arch.stem.out_channels
    for block in arch.blocks:
        _, _, oh, ow = shapes[block.conv2.name]
        elements = oh * ow * block.conv2.out_channels
        # ReLU after conv1, then residual add and ReLU after conv2
        c1_h, c1_w = shapes[block.conv1.name][2:]
        total += RELU_FLOPS_PER_ELEMENT * c1_h * c1_w * block.conv1.out_channels
        total += (ADD_FLOPS_PER_ELEMENT + RELU_FLOPS_PER_ELEMENT) * elements
    last = arch.blocks[-1].conv2 if arch.blocks else arch.stem
    oh, ow = shapes[last.name][2:]
    total += POOL_FLOPS_PER_ELEMENT * oh * ow * last.out_channels
    return total


def count_flops(
    arch: ArchSpec,
    adapter: Optional[DomainAdapter] = None,
    input_size: Tuple[int, int] = (32, 32),
) -> ComplexityReport:
    """
    Per-layer FLOPs, parameter bits and activation bytes.

    Without an adapter the report describes the unmasked backbone network.
    Activation bytes assume batch size 1 and float32 storage.
    """
    if adapter is not None:
        adapter.check_architecture(arch)
    shapes = layer_shapes(arch, input_size)
    layers = []
    for spec in arch.convs():
        in_h, in_w, out_h, out_w = shapes[spec.name]
        active = _active_channels(spec, adapter)
        k = spec.kernel_size
        layers.append(
            LayerCost(
                layer=spec.name,
                active_in_channels=active,
                total_in_channels=spec.in_channels,
                flops_forward=conv_flops(spec, out_h, out_w, active),
                param_bits=FLOAT_BITS * k * k * active * spec.out_channels,
                activation_bytes=FLOAT_BYTES
                * (in_h * in_w * active + out_h * out_w * spec.out_channels),
            )
        )
    return ComplexityReport(layers=layers, elementwise_flops=_elementwise_flops(arch, shapes))


def flop_fraction(
    arch: ArchSpec, adapter: DomainAdapter, input_size: Tuple[int, int] = (32, 32)
) -> float:
    """FLOP(Psi_d) / FLOP(Psi_0)."""
    base = count_flops(arch, None, input_size).total_flops
    return count_flops(arch, adapter, input_size).total_flops / base


def relative_flop_from_fractions(fractions: Iterable[float]) -> float:
    """Average over the pretraining domain (fraction 1) and each adapted domain."""
    fractions = list(fractions)
    if not fractions:
        raise ConfigError("Relative FLOP needs at least one adapted domain")
    return (1.0 + sum(fractions)) / (len(fractions) + 1)


def relative_flop(
    arch: ArchSpec,
    adapters: Sequence[DomainAdapter],
    input_size: Tuple[int, int] = (32, 32),
) -> float:
    return relative_flop_from_fractions(flop_fraction(arch, a, input_size) for a in adapters)


def relative_params_bits(backbone_bits: int, adapter_bits: Iterable[int]) -> float:
    """(bits(theta_0) + sum of adapter bits) / bits(theta_0)."""
    if backbone_bits <= 0:
        raise ConfigError("Backbone parameter storage must be positive")
    return (backbone_bits + sum(adapter_bits)) / backbone_bits


def relative_params(backbone: Backbone, adapters: Sequence[DomainAdapter]) -> float:
    return relative_params_bits(backbone.param_bits(), (a.param_bits() for a in adapters))


def memory_footprint(
    arch: ArchSpec,
    adapter: Optional[DomainAdapter] = None,
    input_size: Tuple[int, int] = (32, 32),
) -> int:
    """Peak bytes of consumed input channels plus output of any one convolution."""
    return count_flops(arch, adapter, input_size).peak_activation_bytes
