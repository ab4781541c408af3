"""
Binary persistence for backbones and adapters, and the on-disk model registry.

Adapter files (AdapterFileV1, little-endian throughout):

    magic      4 bytes  b"BA2A"
    version    u16
    arch hash  32 bytes
    domain     u16 length + UTF-8 bytes
    budget     f32
    layers     u32
    per layer  u32 C_in, then ceil(C_in / 8) bytes of LSB-first switch bits
    per layer  u32 C_out, then gamma, beta, running mean, running var (C_out f32 each)
    head       u32 F, u32 K, then F*K f32 weights (row-major), K f32 biases

Layers follow the backbone's forward order, so layer names are not stored.
"""

import json
import logging
import math
import os
import re
import struct
import tempfile
import threading
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..core.errors import (
    ArchHashMismatchError,
    BadMagicError,
    NotFoundError,
    PaddingBitsError,
    StoreError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from ..core.layers import (
    ArchSpec,
    Backbone,
    BnParams,
    DenseHead,
    DomainAdapter,
    MultiDomainModel,
    SwitchVector,
)
from ..core.tensor import Parameter
from ..core.utils import budget_id, file_sha256

ADAPTER_MAGIC = b"BA2A"
BACKBONE_MAGIC = b"BA2B"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BACKBONE_FILE = "backbone.ba2b"
ADAPTER_DIR = "adapters"

logger = logging.getLogger(__name__)


def pack_switches(bits: np.ndarray) -> bytes:
    """Pack a 0/1 vector LSB-first; unused high bits of the last byte are zero."""
    arr = np.asarray(bits)
    if arr.ndim != 1:
        raise StoreError(f"Switch vector must be 1-D, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise StoreError("Switch vector must contain only 0 and 1")
    return np.packbits(arr.astype(np.uint8), bitorder="little").tobytes()


def unpack_switches(data: bytes, length: int) -> np.ndarray:
    """Inverse of ``pack_switches``; rejects wrong lengths and nonzero padding."""
    expected = math.ceil(length / 8)
    if len(data) != expected:
        raise StoreError(f"{length} switches need {expected} bytes, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits[length:].any():
        raise PaddingBitsError("Nonzero padding bits in packed switch vector")
    return bits[:length].copy()


def adapter_file_size(adapter: DomainAdapter) -> int:
    """Exact byte size of the AdapterFileV1 encoding of ``adapter``."""
    size = 4 + 2 + 32 + 2 + len(adapter.domain.encode("utf-8")) + 4 + 4
    size += sum(4 + math.ceil(len(sv) / 8) for sv in adapter.switches.values())
    size += sum(4 + 16 * p.channels for p in adapter.bn.values())
    features, classes = adapter.head.weight.value.shape
    return size + 8 + 4 * (features * classes + classes)


class _Reader:
    """Sequential little-endian reader that reports truncation."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.source} ended at byte {len(self.data)}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise StoreError(f"{self.source} has {len(self.data) - self.pos} trailing bytes")


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _check_header(reader: _Reader, magic: bytes) -> None:
    found = reader.take(4)
    if found != magic:
        raise BadMagicError(f"{reader.source} starts with {found!r}, expected {magic!r}")
    version = reader.u16()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{reader.source} has format version {version}")


def encode_adapter(adapter: DomainAdapter, arch: ArchSpec) -> bytes:
    specs = arch.convs()
    domain = adapter.domain.encode("utf-8")
    parts = [
        ADAPTER_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        arch.arch_hash(),
        struct.pack("<H", len(domain)),
        domain,
        struct.pack("<f", adapter.budget),
        struct.pack("<I", len(specs)),
    ]
    for spec in specs:
        sv = adapter.switches[spec.name]
        parts.append(struct.pack("<I", len(sv)))
        parts.append(pack_switches(sv.bits))
    for spec in specs:
        p = adapter.bn[spec.name]
        parts.append(struct.pack("<I", p.channels))
        for arr in (p.gamma.value, p.beta.value, p.running_mean, p.running_var):
            parts.append(_f32(arr))
    features, classes = adapter.head.weight.value.shape
    parts.append(struct.pack("<II", features, classes))
    parts.append(_f32(adapter.head.weight.value))
    parts.append(_f32(adapter.head.bias.value))
    return b"".join(parts)


def decode_adapter(data: bytes, arch: ArchSpec, source: str = "adapter file", dtype=np.float32) -> DomainAdapter:
    reader = _Reader(data, source)
    _check_header(reader, ADAPTER_MAGIC)
    stored_hash = reader.take(32)
    if stored_hash != arch.arch_hash():
        raise ArchHashMismatchError(f"{source} was written for a different backbone architecture")
    domain = reader.take(reader.u16()).decode("utf-8")
    budget = float(reader.f32())
    specs = arch.convs()
    count = reader.u32()
    if count != len(specs):
        raise ArchHashMismatchError(f"{source} has {count} layers, backbone has {len(specs)}")

    switches = {}
    for spec in specs:
        c_in = reader.u32()
        if c_in != spec.in_channels:
            raise ArchHashMismatchError(f"{source}: layer {spec.name} has {c_in} input channels")
        bits = unpack_switches(reader.take(math.ceil(c_in / 8)), c_in)
        switches[spec.name] = SwitchVector.from_bits(bits, spec.name, dtype=dtype)

    bn = {}
    for spec in specs:
        c_out = reader.u32()
        if c_out != spec.out_channels:
            raise ArchHashMismatchError(f"{source}: layer {spec.name} has {c_out} output channels")
        gamma, beta, mean, var = (reader.floats(c_out).astype(dtype) for _ in range(4))
        bn[spec.name] = BnParams(
            gamma=Parameter(gamma, name=f"{spec.name}.gamma"),
            beta=Parameter(beta, name=f"{spec.name}.beta"),
            running_mean=mean,
            running_var=var,
        )

    features = reader.u32()
    classes = reader.u32()
    weight = reader.floats(features * classes).reshape(features, classes).astype(dtype)
    bias = reader.floats(classes).astype(dtype)
    reader.finish()
    head = DenseHead(Parameter(weight, name="head.weight"), Parameter(bias, name="head.bias"))
    adapter = DomainAdapter(domain, budget, switches, bn, head, arch.arch_hash())
    adapter.check_architecture(arch)
    return adapter


def atomic_write(path: str, data: bytes) -> None:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _read(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _arch_of(backbone: Union[Backbone, ArchSpec]) -> ArchSpec:
    return backbone.arch if isinstance(backbone, Backbone) else backbone


def save_adapter(path: str, adapter: DomainAdapter, backbone: Union[Backbone, ArchSpec], strict: bool = False) -> None:
    """
    Write ``adapter`` as an AdapterFileV1 file.

    With ``strict`` an adapter with a layer whose switches are all off is
    rejected.
    """
    arch = _arch_of(backbone)
    if adapter.arch_hash and adapter.arch_hash != arch.arch_hash():
        raise ArchHashMismatchError(f"Adapter {adapter.key} was built for another backbone")
    adapter.check_architecture(arch)
    if strict:
        dead = adapter.dead_layers()
        if dead:
            raise StoreError(f"Adapter {adapter.key} has layers with every switch off: {dead}")
    atomic_write(path, encode_adapter(adapter, arch))
    logger.debug(f"Wrote adapter {adapter.key} to {path}")


def load_adapter(path: str, backbone: Union[Backbone, ArchSpec]) -> DomainAdapter:
    dtype = backbone.dtype if isinstance(backbone, Backbone) else np.float32
    return decode_adapter(_read(path), _arch_of(backbone), source=path, dtype=dtype)


def encode_backbone(backbone: Backbone) -> bytes:
    header = json.dumps(
        {
            "arch": backbone.arch.to_dict(),
            "domain": backbone.domain,
            "num_classes": backbone.head.num_classes,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [
        BACKBONE_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<I", len(header)),
        header,
        backbone.arch.arch_hash(),
    ]
    for spec in backbone.arch.convs():
        parts.append(_f32(backbone.kernels[spec.name].value))
        p = backbone.bn[spec.name]
        for arr in (p.gamma.value, p.beta.value, p.running_mean, p.running_var):
            parts.append(_f32(arr))
    parts.append(_f32(backbone.head.weight.value))
    parts.append(_f32(backbone.head.bias.value))
    return b"".join(parts)


def decode_backbone(data: bytes, source: str = "backbone file") -> Backbone:
    """Rebuild a frozen float32 backbone."""
    reader = _Reader(data, source)
    _check_header(reader, BACKBONE_MAGIC)
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
        domain = header["domain"]
        num_classes = int(header["num_classes"])
    except (ValueError, KeyError, TypeError) as e:
        raise StoreError(f"{source} has a malformed header: {e}") from e
    if reader.take(32) != arch.arch_hash():
        raise ArchHashMismatchError(f"{source} header does not match its architecture hash")

    kernels = {}
    bn = {}
    for spec in arch.convs():
        shape = spec.kernel_shape
        kernel = reader.floats(int(np.prod(shape))).reshape(shape)
        kernels[spec.name] = Parameter(kernel, name=f"{spec.name}.kernel", frozen=True)
        c = spec.out_channels
        gamma, beta, mean, var = (reader.floats(c) for _ in range(4))
        bn[spec.name] = BnParams(
            Parameter(gamma, name=f"{spec.name}.gamma"),
            Parameter(beta, name=f"{spec.name}.beta"),
            mean,
            var,
        )
    weight = reader.floats(arch.feature_dim * num_classes).reshape(arch.feature_dim, num_classes)
    bias = reader.floats(num_classes)
    reader.finish()
    head = DenseHead(Parameter(weight, name="head.weight"), Parameter(bias, name="head.bias"))
    return Backbone(arch, kernels, bn, head, domain=domain)


def save_backbone(path: str, backbone: Backbone) -> None:
    atomic_write(path, encode_backbone(backbone))


def load_backbone(path: str) -> Backbone:
    return decode_backbone(_read(path), source=path)


def _entry_key(domain: str, budget: float) -> str:
    return f"{domain}@{budget_id(budget)}"


class ModelRegistry:
    """
    A directory holding one backbone checkpoint, adapter files and a JSON manifest.

    The manifest records for every adapter its file, SHA-256, seed, config hash,
    constraint mode and compliance flag. Reads may run concurrently; writes are
    serialized by a lock and land atomically.
    """

    def __init__(self, root: str):
        self.root = root
        self._lock = threading.Lock()
        self._backbone: Optional[Backbone] = None
        self._model: Optional[MultiDomainModel] = None
        manifest_path = os.path.join(root, MANIFEST_NAME)
        if not os.path.exists(manifest_path):
            raise NotFoundError(f"No registry manifest at {manifest_path}")
        with open(manifest_path, "r") as f:
            self.manifest = json.load(f)

    @classmethod
    def create(cls, root: str, backbone: Backbone) -> "ModelRegistry":
        """Initialize ``root`` with ``backbone`` and an empty adapter table."""
        path = os.path.join(root, BACKBONE_FILE)
        save_backbone(path, backbone)
        manifest = {
            "format": FORMAT_VERSION,
            "backbone": {
                "file": BACKBONE_FILE,
                "sha256": file_sha256(path),
                "arch_hash": backbone.arch.arch_hash().hex(),
                "domain": backbone.domain,
            },
            "adapters": {},
            "baselines": {},
        }
        atomic_write(os.path.join(root, MANIFEST_NAME), _manifest_bytes(manifest))
        logger.info(f"Created registry at {root}")
        registry = cls(root)
        registry._backbone = backbone
        return registry

    @property
    def backbone(self) -> Backbone:
        if self._backbone is None:
            path = os.path.join(self.root, self.manifest["backbone"]["file"])
            self._backbone = load_backbone(path)
        return self._backbone

    @property
    def model(self) -> MultiDomainModel:
        if self._model is None:
            self._model = MultiDomainModel(self.backbone)
        return self._model

    def _write_manifest(self) -> None:
        atomic_write(os.path.join(self.root, MANIFEST_NAME), _manifest_bytes(self.manifest))

    def register(self, adapter: DomainAdapter, metadata: Optional[Dict] = None, strict: bool = False) -> str:
        """Save ``adapter`` and record it; returns the adapter file path."""
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", adapter.domain)
        relpath = os.path.join(ADAPTER_DIR, f"{safe}__{budget_id(adapter.budget)}.ba2a")
        path = os.path.join(self.root, relpath)
        save_adapter(path, adapter, self.backbone, strict=strict)
        entry = {
            "domain": adapter.domain,
            "budget": budget_id(adapter.budget),
            "file": relpath,
            "sha256": file_sha256(path),
        }
        entry.update(adapter.metadata)
        entry.update(metadata or {})
        with self._lock:
            self.manifest["adapters"][_entry_key(adapter.domain, adapter.budget)] = entry
            self._write_manifest()
        logger.info(f"Registered adapter {adapter.key} at {path}")
        return path

    def entry(self, domain: str, budget: float) -> Dict:
        key = _entry_key(domain, budget)
        entries = self.manifest["adapters"]
        if key not in entries:
            domains = sorted({e["domain"] for e in entries.values()})
            if domain not in domains:
                raise NotFoundError(f"Unknown domain '{domain}'; available domains: {domains}")
            budgets = sorted(
                (e["budget"] for e in entries.values() if e["domain"] == domain), key=float
            )
            raise NotFoundError(
                f"No adapter for domain '{domain}' budget {budget_id(budget)}; "
                f"available budgets: {', '.join(budgets)}"
            )
        return entries[key]

    def resolve(self, domain: str, budget: float) -> DomainAdapter:
        """Load the adapter for (domain, budget) and make it runnable on ``model``."""
        entry = self.entry(domain, budget)
        model = self.model
        try:
            cached = model.resolve(domain, budget)
            if not model.is_base(cached):
                return cached
        except NotFoundError:
            pass
        adapter = load_adapter(os.path.join(self.root, entry["file"]), self.backbone)
        adapter.metadata.update({k: v for k, v in entry.items() if k not in ("file", "sha256")})
        model.register(adapter)
        return adapter

    def list(self) -> List[Dict]:
        """Manifest entries sorted by domain and numeric budget."""
        entries = self.manifest["adapters"].values()
        return sorted(entries, key=lambda e: (e["domain"], float(e["budget"])))

    def verify(self) -> Dict[str, bool]:
        """Re-hash the backbone and every adapter file against the manifest."""
        results = {}
        files: List[Tuple[str, Dict]] = [("backbone", self.manifest["backbone"])]
        files += sorted(self.manifest["adapters"].items())
        for key, entry in files:
            path = os.path.join(self.root, entry["file"])
            ok = os.path.exists(path) and file_sha256(path) == entry["sha256"]
            if ok and key != "backbone":
                try:
                    load_adapter(path, self.backbone)
                except StoreError:
                    ok = False
            if not ok:
                logger.warning(
                    f"Registry entry {key} failed verification ({path})",
                    extra={"event": "verify_failed", "entry": key},
                )
            results[key] = ok
        return results

    def set_baseline(self, domain: str, finetune_error: float, e_max: float) -> None:
        with self._lock:
            self.manifest["baselines"][domain] = {"finetune_error": finetune_error, "e_max": e_max}
            self._write_manifest()

    def baseline(self, domain: str) -> Optional[Dict]:
        return self.manifest["baselines"].get(domain)


def _manifest_bytes(manifest: Dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
