"""
Small networks and datasets shared by the test modules.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ba2kit.core.layers import ArchSpec, Backbone, DomainAdapter, MultiDomainModel
from ba2kit.core.models import DatasetSpec
from ba2kit.io.datasets import DomainData, Split, ingest_dataset

TINY_WIDTHS = (4, 8)


def tiny_arch(channels: int = 3, downsample: bool = True) -> ArchSpec:
    """Six convolutions: stem, one block at width 4, one projected block at width 8."""
    return ArchSpec.residual(channels, TINY_WIDTHS, 1, downsample=downsample)


def tiny_backbone(
    num_classes: int = 3, seed: int = 0, dtype=np.float32, frozen: bool = True, **arch_kwargs
) -> Backbone:
    backbone = Backbone.initialize(tiny_arch(**arch_kwargs), num_classes, seed=seed, dtype=dtype)
    if frozen:
        backbone.freeze()
    return backbone


def set_switches(adapter: DomainAdapter, name: str, bits) -> None:
    """Force the binarized switches of one layer to ``bits``."""
    sv = adapter.switches[name]
    sv.param.value[...] = np.where(np.asarray(bits) > 0, 0.001, -0.001)


def half_adapter(backbone: Backbone, domain: str = "half", budget: float = 0.5) -> DomainAdapter:
    """Adapter with the first half of every layer's input channels switched on."""
    adapter = DomainAdapter.create(backbone, domain, budget, backbone.head.num_classes, seed=1)
    for spec in backbone.arch.convs():
        bits = np.zeros(spec.in_channels, dtype=np.uint8)
        bits[: max(1, spec.in_channels // 2)] = 1
        set_switches(adapter, spec.name, bits)
    return adapter


def registered(backbone: Backbone, *adapters: DomainAdapter) -> MultiDomainModel:
    model = MultiDomainModel(backbone)
    for adapter in adapters:
        model.register(adapter)
    return model


def synthetic_spec(name: str = "syn", seed: int = 1, **kwargs) -> DatasetSpec:
    values = dict(format="synthetic", num_classes=3, size=30, image_size=8, channels=3, seed=seed)
    values.update(kwargs)
    return DatasetSpec(name=name, **values)


def synthetic_domain(name: str = "syn", seed: int = 1, **kwargs) -> DomainData:
    return ingest_dataset(synthetic_spec(name, seed, **kwargs))


def empty_domain(name: str = "empty", image_size: int = 8) -> DomainData:
    images = np.zeros((0, image_size, image_size, 3), dtype=np.float32)
    labels = np.zeros(0, dtype=np.int64)
    split = Split(images, labels)
    return DomainData(name=name, num_classes=3, train=split, val=split, test=split)
