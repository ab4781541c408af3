"""
Dataset loading for benchmark domains.

Supports IDX image/label pairs, CIFAR-binary record files and a seeded
synthetic generator. Every loader returns NHWC images.
"""

import gzip
import logging
import os
import struct
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ..core.errors import DataError
from ..core.models import DatasetFormat, DatasetSpec
from ..core.utils import file_sha256

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_RECORD_BYTES = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS
MIRROR_PROBABILITY = 0.5

logger = logging.getLogger(__name__)


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class DomainData:
    """A domain's normalized train/val/test splits."""

    name: str
    num_classes: int
    train: Split
    val: Split
    test: Split
    mirror: bool = True
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    @property
    def channels(self) -> int:
        return int(self.train.images.shape[3])


def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise DataError(f"File not found: {path}")
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


class IDXLoader:
    """Reader for big-endian IDX files (unsigned-byte payloads)."""

    @staticmethod
    def _parse(data: bytes, path: str, magic: int, ndims: int) -> Tuple[int, ...]:
        header = 4 + 4 * ndims
        if len(data) < header:
            raise DataError(f"IDX file '{path}' is truncated in its header")
        found = struct.unpack(">I", data[:4])[0]
        if found != magic:
            raise DataError(f"IDX file '{path}' has magic 0x{found:08x}, expected 0x{magic:08x}")
        dims = struct.unpack(f">{ndims}I", data[4:header])
        expected = int(np.prod(dims))
        if len(data) - header < expected:
            raise DataError(
                f"IDX file '{path}' is truncated: {len(data) - header} of {expected} payload bytes"
            )
        return dims

    @staticmethod
    def load_images(path: str) -> np.ndarray:
        """Images as (N, rows, cols, 1) uint8."""
        data = _read_bytes(path)
        n, rows, cols = IDXLoader._parse(data, path, IDX_IMAGE_MAGIC, 3)
        payload = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
        return payload.reshape(n, rows, cols, 1).copy()

    @staticmethod
    def load_labels(path: str) -> np.ndarray:
        data = _read_bytes(path)
        (n,) = IDXLoader._parse(data, path, IDX_LABEL_MAGIC, 1)
        return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).astype(np.int64)


class CIFARLoader:
    """Reader for CIFAR-binary files: 1 label byte then 3072 channel-planar pixel bytes."""

    @staticmethod
    def load_file(path: str) -> Tuple[np.ndarray, np.ndarray]:
        data = _read_bytes(path)
        if len(data) == 0:
            raise DataError(f"CIFAR file '{path}' is empty")
        if len(data) % CIFAR_RECORD_BYTES:
            raise DataError(
                f"CIFAR file '{path}' has {len(data)} bytes, not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0].astype(np.int64)
        planes = records[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE)
        return planes.transpose(0, 2, 3, 1).copy(), labels


class SyntheticGenerator:
    """Class-prototype images plus Gaussian noise, fully determined by the seed."""

    @staticmethod
    def generate(
        seed: int, num_classes: int, size: int, image_size: int = 16, channels: int = 3
    ) -> Tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seed)
        shape = (image_size, image_size, channels)
        prototypes = rng.normal(0.0, 1.0, size=(num_classes,) + shape)
        # Low-frequency structure so that convolutions have something to find.
        prototypes = 0.5 * (prototypes + np.roll(prototypes, 1, axis=1))
        prototypes = 0.5 * (prototypes + np.roll(prototypes, 1, axis=2))
        labels = rng.permutation(np.arange(size) % num_classes).astype(np.int64)
        noise = rng.normal(0.0, 0.5, size=(size,) + shape)
        return (prototypes[labels] + noise).astype(np.float32), labels


def split_indices(
    n: int, fractions: Sequence[float], seed: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint train/val/test index sets covering a seeded permutation of range(n)."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def mirror_augment(
    images: np.ndarray, rng: np.random.Generator, probability: float = MIRROR_PROBABILITY
) -> np.ndarray:
    """Flip each NHWC image left-right with the given probability."""
    flip = rng.random(images.shape[0]) < probability
    out = images.copy()
    out[flip] = out[flip, :, ::-1, :]
    return out


def normalize(
    images: np.ndarray, mean: np.ndarray, std: np.ndarray
) -> np.ndarray:
    return ((images - mean) / std).astype(np.float32)


def _verify_checksums(spec: DatasetSpec) -> None:
    for role, expected in spec.sha256.items():
        path = getattr(spec, role, None)
        if not path:
            raise DataError(f"Dataset '{spec.name}' has a checksum for unknown file '{role}'")
        actual = file_sha256(path)
        if actual != expected.lower():
            raise DataError(
                f"Checksum mismatch for {path}: expected {expected.lower()}, got {actual}"
            )


def ingest_dataset(spec: DatasetSpec) -> DomainData:
    """Load, validate, split and normalize the dataset described by ``spec``."""
    start_time = time.time()
    _verify_checksums(spec)

    if spec.format is DatasetFormat.IDX:
        logger.info(f"Reading IDX dataset '{spec.name}': {spec.images}, {spec.labels}")
        images = IDXLoader.load_images(spec.images)
        labels = IDXLoader.load_labels(spec.labels)
        if images.shape[0] != labels.shape[0]:
            raise DataError(
                f"IDX dataset '{spec.name}' has {images.shape[0]} images but {labels.shape[0]} labels"
            )
    elif spec.format is DatasetFormat.CIFAR:
        logger.info(f"Reading CIFAR-binary dataset '{spec.name}': {spec.path}")
        images, labels = CIFARLoader.load_file(spec.path)
    else:
        images, labels = SyntheticGenerator.generate(
            spec.seed, spec.num_classes, spec.size, spec.image_size, spec.channels
        )

    if spec.limit is not None:
        images, labels = images[: spec.limit], labels[: spec.limit]
    if labels.size == 0:
        raise DataError(f"Dataset '{spec.name}' is empty")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise DataError(
            f"Dataset '{spec.name}' has labels outside [0, {spec.num_classes - 1}]"
        )

    images = images.astype(np.float32)
    if spec.format is not DatasetFormat.SYNTHETIC:
        images /= 255.0
    if images.shape[3] == 1 and spec.channels > 1:
        images = np.repeat(images, spec.channels, axis=3)
    if images.shape[3] != spec.channels:
        raise DataError(
            f"Dataset '{spec.name}' has {images.shape[3]} channels, expected {spec.channels}"
        )

    train_idx, val_idx, test_idx = split_indices(labels.shape[0], spec.splits, spec.seed)
    if spec.mean is not None and spec.std is not None:
        mean = np.asarray(spec.mean, dtype=np.float32)
        std = np.asarray(spec.std, dtype=np.float32)
    else:
        mean = images[train_idx].mean(axis=(0, 1, 2)).astype(np.float32)
        std = images[train_idx].std(axis=(0, 1, 2)).astype(np.float32)
    if np.any(std <= 0):
        raise DataError(f"Dataset '{spec.name}' has a constant channel; cannot normalize")
    images = normalize(images, mean, std)

    data = DomainData(
        name=spec.name,
        num_classes=spec.num_classes,
        train=Split(images[train_idx], labels[train_idx]),
        val=Split(images[val_idx], labels[val_idx]),
        test=Split(images[test_idx], labels[test_idx]),
        mirror=spec.mirror,
        mean=mean,
        std=std,
    )
    logger.info(
        f"Loaded '{spec.name}': {data.train.size}/{data.val.size}/{data.test.size} "
        f"train/val/test samples in {time.time() - start_time:.2f} seconds"
    )
    return data
