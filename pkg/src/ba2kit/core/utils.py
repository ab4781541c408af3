"""
Utility functions for ba2kit.
"""

import hashlib
import json
from typing import Any, Callable

import numpy as np


def budget_id(beta: float) -> str:
    """Canonical string key for a budget value."""
    return format(float(beta), ".6g")


def canonical_json(obj: Any) -> str:
    """JSON text with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_sha256(path: str) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def finite_difference(
    f: Callable[[], float], array: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """
    Central finite-difference gradient of ``f`` with respect to ``array``.

    ``array`` is perturbed in place and restored; ``f`` must read it.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(f())
        flat[i] = orig - eps
        minus = float(f())
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return grad


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor_fraction: float = 1e-3
) -> float:
    """
    Largest elementwise |a - n| / max(|a|, |n|, floor).

    The floor is ``floor_fraction`` of the largest magnitude in either array,
    so entries that are numerically zero are compared absolutely.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    peak = max(np.abs(analytic).max(), np.abs(numeric).max())
    floor = max(floor_fraction * peak, 1e-12)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
