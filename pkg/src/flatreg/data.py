"""IDX image/label ingestion, [0,1] scaling, deterministic subsetting.

File layout is the classic big-endian IDX pair: images under magic
0x00000803 with 28×28 unsigned bytes per sample, labels under magic
0x00000801 with one byte per sample. Pixels are divided by 255 on load and
re-quantized to the byte grid on save, so load→save→load is bit-exact.
Paths ending in ``.gz`` are decompressed transparently on load.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .rng import named_stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIDE = 28
PIXELS = IMAGE_SIDE * IMAGE_SIDE
NUM_CLASSES = 10

SPLITS = ("train", "test")

STANDARD_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Base kind for malformed IDX input."""


class MagicMismatch(IdxFormatError):
    """Leading magic number is not the expected one for this reader."""


class TruncatedFile(IdxFormatError):
    """Payload shorter than the header promises."""


class BadDimensions(IdxFormatError):
    """Image dimensions in the header are not 28×28."""


class InvalidLabel(IdxFormatError):
    """A label byte is outside 0..9."""


@dataclass(frozen=True)
class Dataset:
    """Immutable (images n×784 in [0,1], labels, split tag) triple."""

    images: np.ndarray
    labels: np.ndarray
    split: str

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64, order="C", copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if images.ndim != 2 or images.shape[1] != PIXELS:
            raise ValueError(f"images must be n×{PIXELS}, got {images.shape}")
        if images.shape[0] == 0:
            raise ValueError("dataset must be non-empty")
        if labels.shape != (images.shape[0],):
            raise ValueError(
                f"{images.shape[0]} images but labels of shape {labels.shape}"
            )
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        if labels.min() < 0 or labels.max() >= NUM_CLASSES:
            raise ValueError(f"labels must lie in [0, {NUM_CLASSES})")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx_images(path: str) -> np.ndarray:
    """Parse an IDX image file into an n×784 float array scaled into [0,1]."""
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is too short for an image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise MagicMismatch(
            f"{path}: magic 0x{magic:08x}, expected image magic 0x{IMAGE_MAGIC:08x}"
        )
    if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE):
        raise BadDimensions(f"{path}: {rows}×{cols} images, expected 28×28")
    expected = 16 + count * PIXELS
    if len(raw) < expected:
        raise TruncatedFile(
            f"{path}: header promises {count} images ({expected} bytes), got {len(raw)}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * PIXELS, offset=16)
    return pixels.reshape(count, PIXELS).astype(np.float64) / 255.0


def load_idx_labels(path: str) -> np.ndarray:
    """Parse an IDX label file into an int array; every byte must be < 10."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is too short for a label header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise MagicMismatch(
            f"{path}: magic 0x{magic:08x}, expected label magic 0x{LABEL_MAGIC:08x}"
        )
    if len(raw) < 8 + count:
        raise TruncatedFile(
            f"{path}: header promises {count} labels, got {len(raw) - 8}"
        )
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise InvalidLabel(f"{path}: label {labels[bad]} at index {bad} is not < 10")
    return labels.astype(np.int64)


def save_idx_images(images: np.ndarray, path: str) -> None:
    """Write images to IDX, quantizing each pixel to the nearest /255 step."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != PIXELS:
        raise ValueError(f"images must be n×{PIXELS}, got {images.shape}")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1]")
    quantized = np.rint(images * 255.0).astype(np.uint8)
    header = struct.pack(">IIII", IMAGE_MAGIC, images.shape[0], IMAGE_SIDE, IMAGE_SIDE)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.tobytes())


def save_idx_labels(labels, path: str) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise ValueError(f"labels must lie in [0, {NUM_CLASSES})")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.size))
        fh.write(labels.astype(np.uint8).tobytes())


def load_dataset(images_path: str, labels_path: str, split: str) -> Dataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return Dataset(images, labels, split)


def load_split(data_dir: str, split: str, return_paths: bool = False):
    """Load one split from a directory holding the four standard file names.

    For each file, a ``.gz`` sibling is accepted when the plain name is
    absent. With return_paths, also returns the list of files actually read.
    """
    import os

    if split not in STANDARD_FILES:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    paths = []
    for name in STANDARD_FILES[split]:
        plain = os.path.join(data_dir, name)
        if os.path.exists(plain):
            paths.append(plain)
        elif os.path.exists(plain + ".gz"):
            paths.append(plain + ".gz")
        else:
            raise FileNotFoundError(f"missing {name}[.gz] in {data_dir}")
    dataset = load_dataset(paths[0], paths[1], split)
    if return_paths:
        return dataset, paths
    return dataset


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """First n entries of a seeded permutation; no stratification."""
    n = int(n)
    if not 0 < n <= len(dataset):
        raise ValueError(f"subset size {n} not in [1, {len(dataset)}]")
    order = named_stream(seed, "subset").permutation(len(dataset))[:n]
    return Dataset(dataset.images[order], dataset.labels[order], dataset.split)
