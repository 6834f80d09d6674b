"""Synthetic shape-classification dataset: generation, binary storage, subsets.

File layout (little-endian, no padding)::

    magic      8 bytes  b"SLCADS01"
    image_size u32
    channels   u32      always 3
    num_classes u32
    num_samples u32
    seed       u64
    then per sample: pixels u8[3, S, S] (channel-major, row-major), label u8
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, RejectedInputError

MAGIC = b"SLCADS01"
HEADER = struct.Struct("<8sIIIIQ")
SHAPES = ("disk", "square", "annulus", "cross")
BACKGROUND_MAX = 60
FOREGROUND_RANGE = (140, 255)


@dataclass(frozen=True)
class DatasetHeader:
    image_size: int
    channels: int
    num_classes: int
    num_samples: int
    seed: int

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.image_size, self.channels, self.num_classes,
                           self.num_samples, self.seed)


@dataclass(frozen=True)
class Dataset:
    header: DatasetHeader
    images: np.ndarray  # uint8 [N, 3, S, S]
    labels: np.ndarray  # uint8 [N]

    def __len__(self) -> int:
        return len(self.labels)

    def to_bytes(self) -> bytes:
        n, s = len(self), self.header.image_size
        body = np.empty((n, 3 * s * s + 1), dtype=np.uint8)
        body[:, :-1] = self.images.reshape(n, -1)
        body[:, -1] = self.labels
        return self.header.pack() + body.tobytes()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def subset(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.images[idx], self.labels[idx]


def file_size(num_samples: int, image_size: int) -> int:
    return HEADER.size + num_samples * (3 * image_size * image_size + 1)


def shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Boolean [S, S] mask of one shape class, sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        half = r * np.sqrt(np.pi) / 2  # same area as the disk
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "annulus":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (r / 2) ** 2)
    if kind == "cross":
        arm = r / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise RejectedInputError(f"unknown shape {kind!r}")


@dataclass(frozen=True)
class ShapeParams:
    cx: float
    cy: float
    radius: float
    intensity: int


def generate(num_samples: int, image_size: int = 64, num_classes: int = 4, seed: int = 7,
             *, return_params: bool = False):
    """Deterministically generate a balanced dataset; sample ``i`` has label ``i % num_classes``.

    Each image is uniform background noise in [0, 60] with one filled shape
    of a random intensity in [140, 255], centred in the middle half of the
    frame with radius in [S/8, S/4].
    """
    if num_classes < 1 or num_classes > len(SHAPES):
        raise RejectedInputError(f"num_classes must be in 1..{len(SHAPES)}")
    if num_samples < 1 or num_samples % num_classes:
        raise RejectedInputError(
            f"num_samples ({num_samples}) must be a positive multiple of num_classes ({num_classes})")
    if image_size < 8:
        raise RejectedInputError("image_size must be at least 8")
    rng = np.random.default_rng(seed)
    s = image_size
    images = np.empty((num_samples, 3, s, s), dtype=np.uint8)
    labels = (np.arange(num_samples) % num_classes).astype(np.uint8)
    params = []
    for i in range(num_samples):
        cx, cy = rng.uniform(s / 4, 3 * s / 4, size=2)
        r = rng.uniform(s / 8, s / 4)
        intensity = int(rng.integers(FOREGROUND_RANGE[0], FOREGROUND_RANGE[1] + 1))
        img = rng.integers(0, BACKGROUND_MAX + 1, size=(3, s, s), dtype=np.uint8)
        img[:, shape_mask(SHAPES[labels[i]], s, cx, cy, r)] = intensity
        images[i] = img
        params.append(ShapeParams(float(cx), float(cy), float(r), intensity))
    header = DatasetHeader(s, 3, num_classes, num_samples, seed)
    ds = Dataset(header, images, labels)
    return (ds, params) if return_params else ds


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < HEADER.size:
        raise FormatError("file shorter than the dataset header")
    magic, s, c, k, n, seed = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if c != 3 or s < 1 or k < 1 or n < 1:
        raise FormatError(f"invalid header: size={s} channels={c} classes={k} samples={n}")
    expected = file_size(n, s)
    if len(buf) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(buf)}")
    body = np.frombuffer(buf, dtype=np.uint8, offset=HEADER.size).reshape(n, 3 * s * s + 1)
    labels = body[:, -1].copy()
    if labels.max() >= k:
        raise FormatError("label out of range")
    images = body[:, :-1].reshape(n, 3, s, s).copy()
    return Dataset(DatasetHeader(s, c, k, n, seed), images, labels)


def load(path: str | Path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def stratified_fraction(labels, p: float, seed: int = 0) -> np.ndarray:
    """Class-stratified subset of indices, returned sorted.

    The total is ``round(p * N)`` split over classes by largest remainder
    (ties to the lower class).  Within a class the pick is a prefix of a
    seeded permutation, so smaller fractions are subsets of larger ones.
    """
    labels = np.asarray(labels)
    if not 0 < p <= 1:
        raise RejectedInputError(f"fraction must lie in (0, 1], got {p}")
    n = len(labels)
    if p == 1:
        return np.arange(n)
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == k) for k in classes]
    quotas = np.array([p * len(m) for m in members])
    counts = np.floor(quotas).astype(int)
    total = int(np.floor(p * n + 0.5))
    short = total - counts.sum()
    order = sorted(range(len(classes)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:max(short, 0)]:
        counts[i] += 1
    if (counts == 0).any():
        empty = [int(classes[i]) for i in np.flatnonzero(counts == 0)]
        raise RejectedInputError(f"fraction {p} leaves classes {empty} empty")
    picked = []
    for k, m, c in zip(classes, members, counts):
        perm = np.random.default_rng([seed, int(k)]).permutation(len(m))
        picked.append(m[perm[:c]])
    return np.sort(np.concatenate(picked))


def to_feature_map(images: np.ndarray, normalize: bool = True) -> np.ndarray:
    """uint8 images to float32 [N, 3, S, S]; ``normalize`` maps [0, 255] onto [-1, 1]."""
    x = images.astype(np.float32) / 255.0
    return (x - 0.5) / 0.5 if normalize else x


def flip(images: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Apply per-sample flips: bit 0 horizontal, bit 1 vertical."""
    out = images.copy()
    h = (codes & 1).astype(bool)
    v = (codes & 2).astype(bool)
    out[h] = out[h][..., ::-1]
    out[v] = out[v][..., ::-1, :]
    return out


def random_flip_codes(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 4, size=n)


def decode_label(image: np.ndarray, threshold: int = 100) -> int:
    """Recover the shape class from pixels alone (the foreground/background gap makes the mask exact)."""
    mask = image[0] > threshold
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise RejectedInputError("no foreground in image")
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    box = mask[y0 : y1 + 1, x0 : x1 + 1]
    cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
    fill = box.mean()
    if not mask[cy, cx]:
        return SHAPES.index("annulus")
    if fill > 0.95:
        return SHAPES.index("square")
    if fill > 0.68:
        return SHAPES.index("disk")
    return SHAPES.index("cross")
