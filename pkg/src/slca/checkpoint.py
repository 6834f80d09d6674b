"""Binary checkpoint format for named tensors.

Layout, little-endian::

    magic     8 bytes b"SLCACP01"
    count     u32
    manifest  per tensor: name_len u32, UTF-8 name, dtype u8 (0 f32, 1 f64),
              rank u8, dims u32[rank]
    payload   raw tensor bytes in manifest order
    checksum  u64, FNV-1a over the payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .digest import fnv1a64
from .errors import FormatError

MAGIC = b"SLCACP01"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DIGEST_KEY = "__digest__"


def to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    manifest = [MAGIC, struct.pack("<I", len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        manifest.append(struct.pack("<I", len(raw)) + raw)
        manifest.append(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        manifest.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())
    body = b"".join(payload)
    return b"".join(manifest) + body + struct.pack("<Q", fnv1a64(body))


def from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise FormatError("bad checkpoint magic")
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        entries.append((name, DTYPES[code], dims))
    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    start = pos
    out = {}
    for name, dtype, dims in entries:
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    payload = view[start:pos]
    (checksum,) = struct.unpack("<Q", take(8))
    if pos != len(view):
        raise FormatError("trailing bytes after checksum")
    if fnv1a64(payload) != checksum:
        raise FormatError("checksum mismatch")
    return out


def save_checkpoint(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return from_bytes(Path(path).read_bytes())


def save_model(model, path: str | Path) -> None:
    save_checkpoint(model.state_dict(), path)


def load_model_state(model, path: str | Path) -> None:
    model.load_state_dict(load_checkpoint(path))


def _split64(x: int) -> np.ndarray:
    return np.array([x >> 32, x & 0xFFFFFFFF], dtype=np.float64)


def save_encoder(encoder, path: str | Path) -> None:
    """Encoder weights plus their digest (as two exact 32-bit halves)."""
    tensors = dict(encoder.state_dict())
    tensors[_DIGEST_KEY] = _split64(encoder.digest)
    save_checkpoint(tensors, path)


def load_encoder(cfg, path: str | Path):
    from .encoder import Encoder

    tensors = load_checkpoint(path)
    stored = tensors.pop(_DIGEST_KEY, None)
    enc = Encoder(cfg)
    enc.load_state_dict(tensors)
    if stored is not None:
        hi, lo = (int(v) for v in stored)
        if (hi << 32) | lo != enc.digest:
            raise FormatError("encoder digest does not match the stored digest")
    return enc
