"""Deterministic MNIST-shaped stand-in corpus.

Ten fixed class prototypes (smooth random ink blobs on a dark background)
are perturbed per sample by a small translation, contrast jitter, and pixel
noise. Ink and background levels sit ~0.9 apart — comfortably more than
twice the 0.3 perturbation radius the robustness experiments use — so a
flat-decision classifier that thresholds pixels near mid-range is immune to
the attack, which is the property the experiments need from real digits too.

Everything is driven by named counter-based streams of one root seed, and
pixels are quantized to the /255 byte grid, so the in-memory corpus equals
its IDX round-trip bit for bit.
"""

from __future__ import annotations

import os

import numpy as np

from .data import (
    IMAGE_SIDE,
    NUM_CLASSES,
    PIXELS,
    STANDARD_FILES,
    Dataset,
    save_idx_images,
    save_idx_labels,
)
from .rng import named_stream

INK_LEVEL = 0.95
BACKGROUND_LEVEL = 0.04
INK_FRACTION = 0.35
MAX_SHIFT = 2
CONTRAST_RANGE = (0.90, 1.0)
NOISE_AMPLITUDE = 0.05


def _upsample_bilinear(coarse: np.ndarray, size: int) -> np.ndarray:
    k = coarse.shape[0]
    xs = np.linspace(0.0, k - 1.0, size)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, k - 1)
    t = xs - i0
    rows = coarse[i0] * (1.0 - t)[:, None] + coarse[i1] * t[:, None]
    return rows[:, i0] * (1.0 - t)[None, :] + rows[:, i1] * t[None, :]


def class_prototypes(seed: int) -> np.ndarray:
    """The ten 784-pixel prototypes for a root seed; deterministic."""
    protos = np.empty((NUM_CLASSES, PIXELS))
    for c in range(NUM_CLASSES):
        rng = named_stream(seed, f"synth.proto.{c}")
        coarse = rng.uniform(0.0, 1.0, size=(7, 7))
        field = _upsample_bilinear(coarse, IMAGE_SIDE)
        cut = np.quantile(field, 1.0 - INK_FRACTION)
        # soft ink mask: 0 well below the cut, 1 well above, ramp in between
        mask = np.clip((field - cut) / 0.08 + 0.5, 0.0, 1.0)
        img = BACKGROUND_LEVEL + (INK_LEVEL - BACKGROUND_LEVEL) * mask
        protos[c] = img.ravel()
    return protos


def _render_split(seed: int, split: str, n: int) -> Dataset:
    protos = class_prototypes(seed).reshape(NUM_CLASSES, IMAGE_SIDE, IMAGE_SIDE)
    rng = named_stream(seed, f"synth.samples.{split}")
    labels = rng.integers(0, NUM_CLASSES, size=n)
    shifts = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=(n, 2))
    contrast = rng.uniform(*CONTRAST_RANGE, size=n)
    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(n, PIXELS))
    images = np.empty((n, PIXELS))
    for i in range(n):
        img = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(0, 1))
        img = BACKGROUND_LEVEL + contrast[i] * (img - BACKGROUND_LEVEL)
        images[i] = img.ravel()
    images = np.clip(images + noise, 0.0, 1.0)
    images = np.rint(images * 255.0) / 255.0  # byte grid: IDX round-trip exact
    return Dataset(images, labels, split)


def make_corpus(seed: int, train_n: int, test_n: int) -> tuple[Dataset, Dataset]:
    """Build (train, test) splits; same seed and sizes → bit-identical data."""
    if train_n <= 0 or test_n <= 0:
        raise ValueError("split sizes must be positive")
    return _render_split(seed, "train", train_n), _render_split(seed, "test", test_n)


def write_corpus(data_dir: str, seed: int, train_n: int, test_n: int) -> dict[str, str]:
    """Generate and write the four standard IDX files; returns their paths."""
    os.makedirs(data_dir, exist_ok=True)
    train, test = make_corpus(seed, train_n, test_n)
    paths = {}
    for ds, (img_name, lab_name) in ((train, STANDARD_FILES["train"]),
                                     (test, STANDARD_FILES["test"])):
        img_path = os.path.join(data_dir, img_name)
        lab_path = os.path.join(data_dir, lab_name)
        save_idx_images(ds.images, img_path)
        save_idx_labels(ds.labels, lab_path)
        paths[f"{ds.split}_images"] = img_path
        paths[f"{ds.split}_labels"] = lab_path
    return paths
