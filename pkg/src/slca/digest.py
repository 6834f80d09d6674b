"""Content digests for parameter sets and byte streams."""
from __future__ import annotations

import hashlib
from collections.abc import Iterable

import numpy as np

_MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def tensor_digest(named: Iterable[tuple[str, np.ndarray]]) -> int:
    """Order-independent 64-bit digest of named tensors.

    Each tensor hashes its name, dtype, shape and raw bytes; the per-tensor
    hashes are summed modulo 2**64, so traversal order does not matter.
    """
    total = 0
    for name, arr in named:
        arr = np.ascontiguousarray(arr)
        h = hashlib.blake2b(digest_size=8)
        h.update(name.encode())
        h.update(arr.dtype.str.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
        total = (total + int.from_bytes(h.digest(), "little")) & _MASK64
    return total


def module_digest(module, trainable: bool | None = None) -> int:
    """Digest over a module's parameters (all, or only trainable/frozen ones)."""
    items = [(n, p.data) for n, p in module.named_parameters()
             if trainable is None or p.trainable == trainable]
    return tensor_digest(items)


def fnv1a64(data: bytes | memoryview) -> int:
    """64-bit FNV-1a over ``data``."""
    h = FNV_OFFSET
    for b in bytes(data):
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def hex64(x: int) -> str:
    return f"{x:016x}"
