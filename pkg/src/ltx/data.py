"""Synthetic shape corpus, SplitMix64 RNG and the on-disk formats.

Formats (all little-endian):

* dataset ``LTXD1``: magic ``b"LTXD1\\n"``; u32 N, C, H, W, K; N*C*H*W float32
  pixels; N u32 labels; N*H*W u8 footprints.
* checkpoint ``LTXC1``: magic ``b"LTXC1\\n"``; u32 tensor count; per tensor
  u16 name length, UTF-8 name, u8 ndim, ndim u32 dims, float32 data; then a
  u16-length UTF-8 metadata string of ``key=value`` lines.
* heatmap: ASCII PGM ``P2`` with maxval 255.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

DATASET_MAGIC = b"LTXD1\n"
CHECKPOINT_MAGIC = b"LTXC1\n"

MAX_CLASSES = 4
SHAPE_NAMES = ("square", "plus", "diagonal", "ring")


class FormatError(ValueError):
    """A file does not follow its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

def splitmix64_next(state: int) -> tuple[int, int]:
    """Reference SplitMix64 step: returns ``(value, new_state)``."""
    state = (state + GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31), state


class SplitMix64:
    """Vectorised SplitMix64 stream; ``next_u64(n)`` equals n sequential steps."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self, n: int | None = None):
        if n is None:
            value, self.state = splitmix64_next(self.state)
            return value
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        self.state = (self.state + n * GAMMA) & MASK64
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int | None = None):
        """Floats in [0, 1) from the top 53 bits of each draw."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0 ** -53
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def randint(self, high: int) -> int:
        """Integer in [0, high)."""
        return min(int(self.uniform() * high), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSample:
    image: np.ndarray          # C x S x S, float32-representable values
    label: int
    footprint: np.ndarray      # S x S bool
    other_label: int | None = None
    other_footprint: np.ndarray | None = None


@dataclass
class Dataset:
    images: np.ndarray         # N x C x H x W float64
    labels: np.ndarray         # N int
    footprints: np.ndarray     # N x H x W uint8
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.footprints[idx], self.num_classes)

    def samples(self) -> list[SyntheticSample]:
        out = []
        for img, lab, fp in zip(self.images, self.labels, self.footprints):
            other = fp == 2
            out.append(SyntheticSample(img, int(lab), fp == 1,
                                       None, other if other.any() else None))
        return out

    @classmethod
    def from_samples(cls, samples: list[SyntheticSample], num_classes: int) -> Dataset:
        if not samples:
            raise ContractError("dataset needs at least one sample")
        images = np.stack([s.image for s in samples]).astype(np.float64)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        fps = np.stack([s.footprint.astype(np.uint8) for s in samples])
        for i, s in enumerate(samples):
            if s.other_footprint is not None:
                fps[i][s.other_footprint] = 2
        return cls(images, labels, fps, num_classes)


def object_size(S: int) -> int:
    side = S // 4
    return side if side % 2 else side - 1 if side > 3 else 3


def shape_mask(cls_id: int, L: int) -> np.ndarray:
    """Binary L x L stencil for one of the four shape classes."""
    r, c = np.mgrid[0:L, 0:L]
    mid = L // 2
    half = max(L // 3, 1) // 2
    if cls_id == 0:
        return np.ones((L, L), dtype=bool)
    if cls_id == 1:
        return (np.abs(r - mid) <= half) | (np.abs(c - mid) <= half)
    if cls_id == 2:
        return np.abs(r - c) <= half
    if cls_id == 3:
        return (r == 0) | (c == 0) | (r == L - 1) | (c == L - 1)
    raise ContractError(f"unknown shape class {cls_id}")


_OBJ_LO = np.float32(0.7) if np.float32(0.7) >= 0.7 else np.nextafter(np.float32(0.7), np.float32(1))
_BG_HI = np.float32(0.3) if np.float32(0.3) <= 0.3 else np.nextafter(np.float32(0.3), np.float32(0))


def _paint(rng: SplitMix64, footprint: np.ndarray, channels: int) -> np.ndarray:
    S = footprint.shape[0]
    u = rng.uniform(channels * S * S).reshape(channels, S, S)
    img = np.where(footprint[None], 0.7 + 0.3 * u, 0.3 * u).astype(np.float32)
    img = np.where(footprint[None], np.maximum(img, _OBJ_LO), np.minimum(img, _BG_HI))
    return img.astype(np.float64)


def gen_synthetic(n: int, classes: int = 4, size: int = 28, seed: int = 0,
                  channels: int = 1, two_object: bool = False) -> list[SyntheticSample]:
    """Deterministic shape corpus; labels cycle round-robin through ``classes``.

    In the two-object variant each image holds the labelled shape plus a
    second shape of another class, in disjoint quadrants.
    """
    if not 1 <= classes <= MAX_CLASSES:
        raise ContractError(f"classes must be in [1, {MAX_CLASSES}], got {classes}")
    if size < 12:
        raise ContractError(f"image size must be >= 12, got {size}")
    if two_object and classes < 2:
        raise ContractError("two-object images need at least 2 classes")
    L = object_size(size)
    half = size // 2
    if two_object and L > half:
        raise ContractError(f"shape of side {L} does not fit a {half}x{half} quadrant")
    rng = SplitMix64(seed)
    samples = []
    for i in range(n):
        label = i % classes
        fp = np.zeros((size, size), dtype=bool)
        if not two_object:
            top, left = rng.randint(size - L + 1), rng.randint(size - L + 1)
            fp[top:top + L, left:left + L] = shape_mask(label, L)
            samples.append(SyntheticSample(_paint(rng, fp, channels), label, fp))
            continue
        other = (label + 1 + rng.randint(classes - 1)) % classes
        qa = rng.randint(4)
        qb = [q for q in range(4) if q != qa][rng.randint(3)]
        fps = []
        for cls_id, q in ((label, qa), (other, qb)):
            m = np.zeros((size, size), dtype=bool)
            r0, c0 = (q // 2) * half, (q % 2) * half
            top, left = r0 + rng.randint(half - L + 1), c0 + rng.randint(half - L + 1)
            m[top:top + L, left:left + L] = shape_mask(cls_id, L)
            fps.append(m)
        img = _paint(rng, fps[0] | fps[1], channels)
        samples.append(SyntheticSample(img, label, fps[0], other, fps[1]))
    return samples


def train_val_split(data: Dataset) -> tuple[Dataset, Dataset]:
    """Even split: first half train, second half validation."""
    half = len(data) // 2
    return data.subset(slice(0, half)), data.subset(slice(half, None))


# ---------------------------------------------------------------------------
# Dataset file
# ---------------------------------------------------------------------------

def dataset_to_bytes(data: Dataset) -> bytes:
    n, c, h, w = data.images.shape
    if n == 0:
        raise ContractError("cannot write an empty dataset")
    return b"".join([
        DATASET_MAGIC,
        struct.pack("<5I", n, c, h, w, data.num_classes),
        data.images.astype("<f4").tobytes(),
        data.labels.astype("<u4").tobytes(),
        data.footprints.astype("u1").tobytes(),
    ])


def write_dataset(samples: list[SyntheticSample] | Dataset, path, num_classes: int | None = None):
    if not isinstance(samples, Dataset):
        if num_classes is None:
            num_classes = max(max(s.label for s in samples), *(s.other_label or 0 for s in samples)) + 1
        samples = Dataset.from_samples(samples, num_classes)
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(samples))


def _check_magic(buf: bytes, magic: bytes, what: str):
    for i, want in enumerate(magic):
        if i >= len(buf) or buf[i] != want:
            raise FormatError(f"bad {what} magic", offset=i)


def dataset_from_bytes(buf: bytes) -> Dataset:
    _check_magic(buf, DATASET_MAGIC, "dataset")
    pos = len(DATASET_MAGIC)
    if len(buf) < pos + 20:
        raise FormatError("truncated dataset: header", offset=len(buf))
    n, c, h, w, k = struct.unpack_from("<5I", buf, pos)
    pos += 20
    sections = [("pixels", n * c * h * w * 4), ("labels", n * 4), ("footprints", n * h * w)]
    chunks = {}
    for name, nbytes in sections:
        if len(buf) < pos + nbytes:
            raise FormatError(f"truncated dataset: {name}", offset=len(buf))
        chunks[name] = buf[pos:pos + nbytes]
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after dataset", offset=pos)
    images = np.frombuffer(chunks["pixels"], dtype="<f4").reshape(n, c, h, w).astype(np.float64)
    labels = np.frombuffer(chunks["labels"], dtype="<u4").astype(np.int64)
    fps = np.frombuffer(chunks["footprints"], dtype="u1").reshape(n, h, w).copy()
    if n and labels.max() >= k:
        raise FormatError("label out of class range", offset=len(DATASET_MAGIC) + 20 + n * c * h * w * 4)
    return Dataset(images, labels, fps, k)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            if not name:
                raise FormatError("empty tensor name")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        meta = "".join(f"{k}={v}\n" for k, v in self.meta.items()).encode("utf-8")
        parts.append(struct.pack("<H", len(meta)) + meta)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> Checkpoint:
        _check_magic(buf, CHECKPOINT_MAGIC, "checkpoint")
        pos = len(CHECKPOINT_MAGIC)

        def need(nbytes, what):
            if len(buf) < pos + nbytes:
                raise FormatError(f"truncated checkpoint: {what}", offset=len(buf))

        need(4, "tensor count")
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            need(2, "name length")
            (ln,) = struct.unpack_from("<H", buf, pos)
            start = pos
            pos += 2
            need(ln, "name")
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            if not name or name in tensors:
                raise FormatError(f"invalid or duplicate tensor name {name!r}", offset=start)
            need(1, "ndim")
            ndim = buf[pos]
            pos += 1
            need(4 * ndim, "dims")
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            need(nbytes, f"data of {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos) \
                .reshape(dims).astype(np.float64)
            pos += nbytes
        need(2, "metadata length")
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(ln, "metadata")
        text = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        if pos != len(buf):
            raise FormatError("trailing bytes after checkpoint", offset=pos)
        meta = {}
        for line in text.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"metadata line without '=': {line!r}")
            meta[key] = value
        return cls(tensors, meta)

    def quantized(self) -> Checkpoint:
        """Copy with every tensor rounded to float32 (what the file stores)."""
        return Checkpoint({k: v.astype(np.float32).astype(np.float64) for k, v in self.tensors.items()},
                          dict(self.meta))


def write_checkpoint(ckpt: Checkpoint, path):
    if len(set(ckpt.tensors)) != len(ckpt.tensors):
        raise FormatError("duplicate tensor names")
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------

def pgm_text(m: np.ndarray) -> str:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError("heatmap must be 2-D")
    if np.any(~np.isfinite(m)) or m.min() < 0 or m.max() > 1:
        raise ContractError("heatmap values must lie in [0, 1]")
    q = np.floor(m * 255 + 0.5).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in q)
    return f"P2\n{m.shape[1]} {m.shape[0]}\n255\n{rows}\n"


def write_pgm(m: np.ndarray, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(pgm_text(m))


def write_map_csv(m: np.ndarray, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in np.asarray(m, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_map_csv(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
