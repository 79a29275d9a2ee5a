"""MNIST IDX parsing, normalization and seeded minibatching.

Expected files in a data directory (optionally gzip-compressed with ``.gz``)::

    train-images-idx3-ubyte   47 040 016 bytes
    train-labels-idx1-ubyte       60 008 bytes
    t10k-images-idx3-ubyte     7 840 016 bytes
    t10k-labels-idx1-ubyte        10 008 bytes
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import BadLabel, BadMagic, EmptyDataset, Truncated
from .rng import SplitMix64, derive_seed

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


@dataclass(frozen=True)
class IdxImages:
    count: int
    rows: int
    cols: int
    pixels: bytes

    def array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.count, self.rows, self.cols)


@dataclass(frozen=True)
class IdxLabels:
    count: int
    labels: bytes

    def array(self) -> np.ndarray:
        return np.frombuffer(self.labels, dtype=np.uint8).astype(np.int64)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 28, 28) floats in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


def _read_header(data: bytes, magic: int, ndim: int) -> tuple[int, ...]:
    if len(data) < 4:
        raise Truncated("stream shorter than the 4-byte magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagic(f"magic 0x{found:08x}, expected 0x{magic:08x}")
    end = 4 + 4 * ndim
    if len(data) < end:
        raise Truncated("stream ends inside the dimension header")
    return struct.unpack(">" + "I" * ndim, data[4:end])


def parse_idx_images(data: bytes) -> IdxImages:
    count, rows, cols = _read_header(data, IMAGES_MAGIC, 3)
    size = count * rows * cols
    payload = data[16:16 + size]
    if len(payload) < size:
        raise Truncated(f"header promises {size} pixel bytes, found {len(payload)}")
    return IdxImages(count, rows, cols, bytes(payload))


def parse_idx_labels(data: bytes) -> IdxLabels:
    (count,) = _read_header(data, LABELS_MAGIC, 1)
    payload = data[8:8 + count]
    if len(payload) < count:
        raise Truncated(f"header promises {count} labels, found {len(payload)}")
    if count and max(payload) >= 10:
        bad = next(i for i, v in enumerate(payload) if v >= 10)
        raise BadLabel(f"label {payload[bad]} at index {bad} is not a digit class")
    return IdxLabels(count, bytes(payload))


def serialize_idx_images(images: IdxImages) -> bytes:
    head = struct.pack(">IIII", IMAGES_MAGIC, images.count, images.rows, images.cols)
    return head + images.pixels


def serialize_idx_labels(labels: IdxLabels) -> bytes:
    return struct.pack(">II", LABELS_MAGIC, labels.count) + labels.labels


def normalize(raw: IdxImages, dtype=np.float64) -> np.ndarray:
    """Map byte intensities to ``p / 255`` reals, keeping the image shape."""
    return raw.array().astype(dtype) / 255.0


def read_bytes(path: str | os.PathLike) -> bytes:
    path = os.fspath(path)
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path += ".gz"
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_split(data_dir: str | os.PathLike, train: bool, dtype=np.float64) -> Dataset:
    img_name, lbl_name = (TRAIN_IMAGES, TRAIN_LABELS) if train else (TEST_IMAGES, TEST_LABELS)
    images = parse_idx_images(read_bytes(os.path.join(data_dir, img_name)))
    labels = parse_idx_labels(read_bytes(os.path.join(data_dir, lbl_name)))
    if images.count != labels.count:
        raise Truncated(f"{images.count} images but {labels.count} labels in {data_dir}")
    return Dataset(normalize(images, dtype), labels.array())


def load_mnist(data_dir: str | os.PathLike, dtype=np.float64) -> tuple[Dataset, Dataset]:
    return load_split(data_dir, True, dtype), load_split(data_dir, False, dtype)


def has_mnist(data_dir: str | os.PathLike | None) -> bool:
    if not data_dir:
        return False
    names = (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)
    return all(
        os.path.exists(os.path.join(data_dir, n)) or os.path.exists(os.path.join(data_dir, n + ".gz"))
        for n in names
    )


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int

    def permutation(self, count: int, epoch: int) -> np.ndarray:
        return SplitMix64(derive_seed(self.seed, epoch)).permutation(count)


def batches(ds: Dataset, plan: BatchPlan, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield shuffled ``(images, labels)`` minibatches; the last one may be short."""
    n = len(ds)
    if n == 0:
        raise EmptyDataset("cannot batch an empty dataset")
    if plan.batch_size < 1:
        raise ValueError("batch_size must be positive")
    perm = plan.permutation(n, epoch)
    for start in range(0, n, plan.batch_size):
        idx = perm[start:start + plan.batch_size]
        yield ds.images[idx], ds.labels[idx]
