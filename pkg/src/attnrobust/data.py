"""Dataset ingestion: CIFAR binary batches and a raw tensor container.

CIFAR-10 records are 1 label byte + 3072 pixel bytes (R, G, B planes of
32x32, row-major). CIFAR-100 records carry 2 label bytes (coarse, fine)
before the pixels; the fine label is used.

Raw container (little-endian), for pre-converted datasets such as Imagenette::

    magic    6 bytes   b"ATRAW\\x00"
    version  u8        1
    dims     4 x u32   count, channels, height, width
    dtype    u8        0 = uint8 (pixel/255), 1 = float32 (already in [0, 1])
    classes  u32       number of classes
    labels   count x u16
    payload  count*C*H*W values of the tagged dtype, row-major (N, C, H, W)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError
from .rng import make_rng

CIFAR_SHAPE = (3, 32, 32)
CIFAR_PIXELS = 3 * 32 * 32

CIFAR10_STATS = ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))
CIFAR100_STATS = ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762))

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
CIFAR100_TRAIN_FILES = ("train.bin",)
CIFAR100_TEST_FILES = ("test.bin",)

RAW_MAGIC = b"ATRAW\x00"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<6sB4IBI")
_RAW_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype("<f4")}


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    path: str
    image_size: int
    channels: int
    num_classes: int
    means: tuple[float, ...]
    stds: tuple[float, ...]
    train_size: int = 0
    test_size: int = 0
    subsample: int | None = None

    def __post_init__(self):
        if self.subsample is not None and self.train_size and self.subsample > self.train_size:
            raise DataError(f"subsample {self.subsample} exceeds train split size {self.train_size}")


@dataclass
class Split:
    """Images in ``[0, 1]`` shaped ``(N, C, H, W)`` plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default=None)  # positions in the source split

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray) -> "Split":
        return Split(self.images[idx], self.labels[idx], self.indices[idx])


@dataclass
class Dataset:
    spec: DatasetSpec
    train: Split
    test: Split


# ---------------------------------------------------------------------------
# CIFAR


def parse_cifar_bytes(buf: bytes, variant: str = "c10", num_classes: int | None = None) -> Split:
    """Parse concatenated CIFAR records.

    Raises:
        ParseError: if the buffer is not a whole number of records.
        DataError: if a label is out of range.
    """
    label_bytes = _label_bytes(variant)
    num_classes = num_classes or (10 if label_bytes == 1 else 100)
    rec = label_bytes + CIFAR_PIXELS
    if len(buf) % rec:
        whole = len(buf) // rec
        raise ParseError(
            f"truncated CIFAR file: {len(buf)} bytes is not a multiple of the {rec}-byte record",
            offset=whole * rec,
        )
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} at record {i} (byte offset {i * rec}) exceeds {num_classes} classes")
    images = arr[:, label_bytes:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / np.float32(255.0)
    return Split(images, labels)


def _label_bytes(variant: str) -> int:
    v = variant.lower().replace("-", "").replace("cifar", "c")
    if v in ("c10", "10"):
        return 1
    if v in ("c100", "100"):
        return 2
    raise DataError(f"unknown CIFAR variant {variant!r}")


def load_cifar_file(path: str | Path, variant: str = "c10") -> Split:
    return parse_cifar_bytes(Path(path).read_bytes(), variant)


def _concat(splits: list[Split]) -> Split:
    return Split(np.concatenate([s.images for s in splits]), np.concatenate([s.labels for s in splits]))


def load_cifar(path: str | Path, variant: str = "c10") -> Dataset:
    """Load a CIFAR binary directory (``cifar-10-batches-bin`` or ``cifar-100-binary``).

    Raises:
        FileNotFoundError: if an expected batch file is missing.
    """
    root = Path(path)
    c100 = _label_bytes(variant) == 2
    train_files = CIFAR100_TRAIN_FILES if c100 else CIFAR10_TRAIN_FILES
    test_files = CIFAR100_TEST_FILES if c100 else CIFAR10_TEST_FILES
    for name in train_files + test_files:
        if not (root / name).is_file():
            raise FileNotFoundError(f"CIFAR batch file {root / name} not found")
    train = _concat([load_cifar_file(root / f, variant) for f in train_files])
    test = _concat([load_cifar_file(root / f, variant) for f in test_files])
    means, stds = CIFAR100_STATS if c100 else CIFAR10_STATS
    spec = DatasetSpec(
        name="cifar100" if c100 else "cifar10",
        path=str(root),
        image_size=32,
        channels=3,
        num_classes=100 if c100 else 10,
        means=means,
        stds=stds,
        train_size=len(train),
        test_size=len(test),
    )
    return Dataset(spec, train, test)


def write_cifar(path: str | Path, split: Split, variant: str = "c10") -> Path:
    """Write ``split`` as CIFAR records; pixels are rounded to the nearest byte.

    For CIFAR-100 the coarse label byte is written as 0.
    """
    label_bytes = _label_bytes(variant)
    if split.images.shape[1:] != CIFAR_SHAPE:
        raise DataError(f"CIFAR records need images of shape {CIFAR_SHAPE}, got {split.images.shape[1:]}")
    n = len(split)
    rec = np.zeros((n, label_bytes + CIFAR_PIXELS), dtype=np.uint8)
    rec[:, label_bytes - 1] = split.labels.astype(np.uint8)
    rec[:, label_bytes:] = to_bytes(split.images).reshape(n, -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(rec.tobytes())
    return path


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# raw container


def write_raw(path: str | Path, split: Split, num_classes: int, dtype: str = "uint8") -> Path:
    tag = {"uint8": 0, "float32": 1}[dtype]
    n, c, h, w = split.images.shape
    header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, n, c, h, w, tag, num_classes)
    payload = to_bytes(split.images) if tag == 0 else split.images.astype("<f4")
    body = split.labels.astype("<u2").tobytes() + np.ascontiguousarray(payload).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + body)
    return path


def parse_raw_bytes(buf: bytes) -> tuple[Split, int]:
    """Parse a raw container; returns ``(split, num_classes)``.

    Raises:
        ParseError: bad magic, unsupported version or dtype tag, or a
            payload length that disagrees with the header.
        DataError: labels outside ``[0, num_classes)``.
    """
    if len(buf) < _RAW_HEADER.size:
        raise ParseError(f"raw header needs {_RAW_HEADER.size} bytes, file has {len(buf)}", offset=len(buf))
    magic, version, n, c, h, w, tag, classes = _RAW_HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != RAW_VERSION:
        raise ParseError(f"unsupported raw version {version}", offset=6)
    if tag not in _RAW_DTYPES:
        raise ParseError(f"unknown dtype tag {tag}", offset=23)
    dt = _RAW_DTYPES[tag]
    off = _RAW_HEADER.size
    need = off + 2 * n + n * c * h * w * dt.itemsize
    if len(buf) != need:
        raise ParseError(f"raw payload length mismatch: expected {need} bytes, found {len(buf)}", offset=min(len(buf), need))
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    if n and labels.max() >= classes:
        i = int(np.argmax(labels >= classes))
        raise DataError(f"label {labels[i]} at record {i} exceeds {classes} classes")
    pix = np.frombuffer(buf, dtype=dt, count=n * c * h * w, offset=off + 2 * n).reshape(n, c, h, w)
    images = pix.astype(np.float32) / np.float32(255.0) if tag == 0 else pix.astype(np.float32)
    return Split(images, labels), classes


def load_raw(train_path: str | Path, test_path: str | Path, name: str = "raw") -> Dataset:
    """Load a train/test pair of raw containers; channel stats come from train."""
    train, classes = parse_raw_bytes(Path(train_path).read_bytes())
    test, classes_test = parse_raw_bytes(Path(test_path).read_bytes())
    if classes != classes_test or train.images.shape[1:] != test.images.shape[1:]:
        raise DataError("raw train and test containers disagree on classes or image shape")
    _, c, h, w = train.images.shape
    if h != w:
        raise DataError(f"raw images must be square, got {h}x{w}")
    means = tuple(float(v) for v in train.images.mean(axis=(0, 2, 3)))
    stds = tuple(float(v) for v in train.images.std(axis=(0, 2, 3)))
    spec = DatasetSpec(name, str(Path(train_path).parent), h, c, classes, means, stds, len(train), len(test))
    return Dataset(spec, train, test)


# ---------------------------------------------------------------------------
# helpers


def subsample(split: Split, count: int | None, seed: int, stream: str) -> Split:
    """Deterministic random subset of ``count`` images (all of them if None)."""
    if count is None or count >= len(split):
        return split
    if count < 1:
        raise DataError(f"subsample must be positive, got {count}")
    idx = np.sort(make_rng(seed, "subsample", stream).permutation(len(split))[:count])
    return split.take(idx)


def restrict(dataset: Dataset, train_count: int | None, test_count: int | None, seed: int) -> Dataset:
    train = subsample(dataset.train, train_count, seed, "train")
    test = subsample(dataset.test, test_count, seed, "test")
    spec = replace(dataset.spec, subsample=train_count if train_count and train_count < len(dataset.train) else None)
    return Dataset(spec, train, test)


def iter_batches(split: Split, batch_size: int, rng: np.random.Generator | None = None):
    """Yield ``(images, labels, indices)``; shuffled when ``rng`` is given."""
    order = rng.permutation(len(split)) if rng is not None else np.arange(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield split.images[idx], split.labels[idx], split.indices[idx]


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop after zero-padding by ``pad`` plus random horizontal flip."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    rows = dy[:, None] + np.arange(h)[None, :]
    cols = dx[:, None] + np.arange(w)[None, :]
    cols = np.where(flip[:, None], cols[:, ::-1], cols)
    out = padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None], rows[:, None, :, None], cols[:, None, None, :]]
    return np.ascontiguousarray(out)
