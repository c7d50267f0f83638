"""CIFAR-10 binary ingestion, synthesis, and training-time augmentation.

The on-disk format is the standard binary distribution: five train files and
one test file, 10000 records each, one record = 1 label byte followed by
3072 pixel bytes (red, green, blue planes, row-major). Images stay uint8 in
memory; normalization constants come from the train split and are applied
only when a batch is drawn.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, DataFormatError

IMAGE_SHAPE = (3, 32, 32)
PIXELS_PER_RECORD = 3 * 32 * 32
RECORD_BYTES = 1 + PIXELS_PER_RECORD
RECORDS_PER_FILE = 10_000
FILE_BYTES = RECORDS_PER_FILE * RECORD_BYTES
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
NUM_CLASSES = 10

DATA_ENV = "REVTRAIN_DATA"


@dataclass
class DatasetSource:
    """Parsed dataset plus the normalization constants of its train split."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, images):
        """uint8 (n, 3, 32, 32) to float32, channel-standardized."""
        x = images.astype(np.float32) / 255.0
        return (x - self.mean.reshape(1, 3, 1, 1)) / self.std.reshape(1, 3, 1, 1)


def _parse_file(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise DataFormatError(f"cannot read dataset file {path}: {err}") from None
    if len(raw) != FILE_BYTES:
        raise DataFormatError(
            f"{path}: expected {FILE_BYTES} bytes "
            f"({RECORDS_PER_FILE} records of {RECORD_BYTES}), got {len(raw)}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(RECORDS_PER_FILE, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= NUM_CLASSES:
        raise DataFormatError(
            f"{path}: label {labels.max()} out of range (expected 0..{NUM_CLASSES - 1})"
        )
    images = records[:, 1:].reshape(RECORDS_PER_FILE, *IMAGE_SHAPE).copy()
    return images, labels


def load_cifar10(root):
    """Load the six binary batch files under root into a DatasetSource."""
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError(f"dataset directory {root} does not exist")
    train_parts = [_parse_file(root / name) for name in TRAIN_FILES]
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = _parse_file(root / TEST_FILE)
    scaled = train_images.astype(np.float32) / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = scaled.std(axis=(0, 2, 3))
    return DatasetSource(
        train_images=train_images,
        train_labels=train_labels,
        test_images=test_images,
        test_labels=test_labels,
        mean=mean,
        std=std,
    )


def data_root(override=None):
    """Dataset directory: explicit argument, else the environment default."""
    root = override if override is not None else os.environ.get(DATA_ENV)
    if not root:
        raise ConfigError(
            f"no dataset directory given and {DATA_ENV} is not set"
        )
    return Path(root)


# -- synthetic stand-in -----------------------------------------------------------


def _class_prototypes(rng):
    """Smooth class-conditional patterns, one (3, 32, 32) image per class."""
    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    protos = np.zeros((NUM_CLASSES, *IMAGE_SHAPE), dtype=np.float64)
    for cls in range(NUM_CLASSES):
        base = rng.uniform(70, 185, size=3)
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        wave = np.sin(2 * np.pi * fy * yy / 32 + py) * np.sin(2 * np.pi * fx * xx / 32 + px)
        for ch in range(3):
            protos[cls, ch] = base[ch] + 55.0 * wave * rng.choice((-1.0, 1.0))
    return protos


def synthesize_cifar_like(root, seed=0, noise_std=25.0):
    """Write six synthetic batch files in the exact CIFAR-10 binary layout.

    Classes are smooth patterns plus pixel noise, so small models can learn
    the task; useful where the real dataset is unavailable.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = ops.default_rng(seed)
    protos = _class_prototypes(rng)
    for name in TRAIN_FILES + (TEST_FILE,):
        labels = rng.integers(0, NUM_CLASSES, size=RECORDS_PER_FILE)
        noise = rng.normal(0.0, noise_std, size=(RECORDS_PER_FILE, *IMAGE_SHAPE))
        images = np.clip(protos[labels] + noise, 0, 255).astype(np.uint8)
        records = np.empty((RECORDS_PER_FILE, RECORD_BYTES), dtype=np.uint8)
        records[:, 0] = labels
        records[:, 1:] = images.reshape(RECORDS_PER_FILE, PIXELS_PER_RECORD)
        (root / name).write_bytes(records.tobytes())
    return root


def ensure_dataset(root):
    """Load the dataset under root, synthesizing it first when absent."""
    root = Path(root)
    if not all((root / name).is_file() for name in TRAIN_FILES + (TEST_FILE,)):
        synthesize_cifar_like(root)
    return load_cifar10(root)


# -- augmentation ------------------------------------------------------------------


def hflip(batch):
    """Mirror every image left-right."""
    return np.ascontiguousarray(batch[..., ::-1])


def augment(batch, seed, pad=4):
    """Random horizontal flip and random crop from zero padding, per image."""
    n, c, h, w = batch.shape
    rng = ops.default_rng(seed)
    out = batch.copy()
    flips = rng.random(n) < 0.5
    out[flips] = out[flips][..., ::-1]
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = out
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i, (oy, ox) in enumerate(offsets):
        out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    return out


def take_subset(images, labels, n, seed):
    """Deterministic random sample of n records without replacement."""
    if n > len(images):
        raise ConfigError(f"subset of {n} exceeds the {len(images)} available records")
    idx = ops.default_rng(seed).permutation(len(images))[:n]
    return images[idx], labels[idx]
