# SPDX-License-Identifier: GPL-3.0-or-later
"""
Datasets: Gaussian blobs generated from a seed and IDX image files.
"""

import logging
import struct
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np
import numpy.typing as npt

from osclab.tensor import STREAM_DATA, Matrix, Rng, ShapeError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


class Split(StrEnum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: Matrix
    labels: npt.NDArray[np.int64]
    splits: npt.NDArray[np.str_]
    num_classes: int

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise ShapeError(
                f"Dataset has {n} examples but {self.labels.shape[0]} labels"
                f" and {self.splits.shape[0]} split tags"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"Labels must lie in [0, {self.num_classes})")
        unknown = set(self.splits.tolist()) - {str(s) for s in Split}
        if unknown:
            raise ValueError(f"Unknown split tags: {sorted(unknown)}")

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, split: Split) -> tuple[Matrix, npt.NDArray[np.int64]]:
        mask = self.splits == str(split)
        return self.features[mask], self.labels[mask]


def assign_splits(n: int, rng: Rng) -> npt.NDArray[np.str_]:
    """Tags a random 70/15/15 partition of ``n`` examples."""
    order = rng.permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    splits = np.empty(n, dtype="<U5")
    splits[order[:n_train]] = str(Split.TRAIN)
    splits[order[n_train : n_train + n_val]] = str(Split.VAL)
    splits[order[n_train + n_val :]] = str(Split.TEST)
    return splits


def standardize(features: Matrix, splits: npt.NDArray[np.str_]) -> Matrix:
    """Zero mean, unit variance per dimension using training-split statistics."""
    train = features[splits == str(Split.TRAIN)]
    mean = train.mean(axis=0, keepdims=True)
    std = train.std(axis=0, keepdims=True)
    std[std == 0.0] = 1.0
    return (features - mean) / std


def gen_blobs(
    seed: int,
    num_classes: int,
    dims: int,
    per_class: int,
    spread: float,
    *,
    center_scale: float = 0.5,
) -> Dataset:
    """
    Gaussian clusters around class centers drawn from N(0, center_scale^2)
    per dimension; each example adds N(0, spread^2) noise per dimension.
    """
    if min(num_classes, dims, per_class) < 1:
        raise ValueError("Blob counts must be at least 1")
    if not spread > 0:
        raise ValueError(f"Blob spread must be positive, got {spread}")

    rng = Rng(seed).split(STREAM_DATA)
    centers = rng.split(0).generator.normal(0.0, center_scale, (num_classes, dims))
    noise = rng.split(1).generator.normal(0.0, spread, (num_classes * per_class, dims))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    features = centers[labels] + noise
    splits = assign_splits(labels.size, rng.split(2))
    return Dataset(
        features=standardize(features, splits),
        labels=labels,
        splits=splits,
        num_classes=num_classes,
    )


def _unpack(data: bytes, offset: int, fmt: str, what: str) -> tuple:
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise IdxFormatError(
            f"Truncated IDX data at byte offset {offset}: expected {what}"
        )
    return struct.unpack_from(fmt, data, offset)


def parse_idx_images(data: bytes) -> Matrix:
    (magic,) = _unpack(data, 0, ">I", "magic number")
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"Bad IDX image magic 0x{magic:08x} at byte offset 0,"
            f" expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    count, rows, cols = _unpack(data, 4, ">III", "image dimensions")
    size = count * rows * cols
    if 16 + size > len(data):
        raise IdxFormatError(
            f"Truncated IDX image data at byte offset {len(data)}:"
            f" expected {size} pixel bytes from offset 16"
        )
    if 16 + size < len(data):
        raise IdxFormatError(f"Trailing bytes after byte offset {16 + size}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=size, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes) -> npt.NDArray[np.int64]:
    (magic,) = _unpack(data, 0, ">I", "magic number")
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(
            f"Bad IDX label magic 0x{magic:08x} at byte offset 0,"
            f" expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    (count,) = _unpack(data, 4, ">I", "label count")
    if 8 + count > len(data):
        raise IdxFormatError(
            f"Truncated IDX label data at byte offset {len(data)}:"
            f" expected {count} labels from offset 8"
        )
    if 8 + count < len(data):
        raise IdxFormatError(f"Trailing bytes after byte offset {8 + count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(
    images_path: Path | str, labels_path: Path | str, *, split_seed: int = 0
) -> Dataset:
    """
    Loads an IDX image/label pair. Pixels are scaled to [0, 1] and
    flattened; splits are a seeded 70/15/15 partition.
    """
    logger.info("Loading IDX dataset %s, %s", images_path, labels_path)
    features = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if features.shape[0] != labels.size:
        raise IdxFormatError(
            f"IDX label count {labels.size} at byte offset 4 does not match"
            f" image count {features.shape[0]}"
        )
    splits = assign_splits(labels.size, Rng(split_seed).split(STREAM_DATA))
    num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(
        features=features, labels=labels, splits=splits, num_classes=num_classes
    )


def take_fraction(
    features: Matrix, labels: npt.NDArray[np.int64], fraction: float, rng: Rng
) -> tuple[Matrix, npt.NDArray[np.int64]]:
    """Deterministic subsample keeping ``fraction`` of the rows."""
    if fraction >= 1.0:
        return features, labels
    keep = max(1, int(round(fraction * labels.size)))
    rows = np.sort(rng.permutation(labels.size)[:keep])
    return features[rows], labels[rows]
