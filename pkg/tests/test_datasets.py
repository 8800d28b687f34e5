# SPDX-License-Identifier: GPL-3.0-or-later
import struct

import numpy as np
from pytest import approx, raises

from osclab.datasets import (
    Dataset,
    IdxFormatError,
    Split,
    gen_blobs,
    load_idx,
    parse_idx_images,
    parse_idx_labels,
    take_fraction,
)
from osclab.models.parse_config import parse_manifest
from osclab.tensor import Rng

from .factory import idx_images_bytes, idx_labels_bytes, write_idx

PIXELS = np.array([[[0, 255], [51, 102]], [[255, 0], [0, 204]]], dtype=np.uint8)


def test_gen_blobs_deterministic():
    a = gen_blobs(7, 3, 5, 10, 1.0)
    b = gen_blobs(7, 3, 5, 10, 1.0)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tolist() == b.labels.tolist()
    assert a.splits.tolist() == b.splits.tolist()


def test_gen_blobs_seed_matters():
    assert not np.array_equal(
        gen_blobs(1, 3, 5, 10, 1.0).features, gen_blobs(2, 3, 5, 10, 1.0).features
    )


def test_gen_blobs_shape_and_splits():
    data = gen_blobs(0, 4, 6, 50, 1.5)
    assert data.features.shape == (200, 6)
    assert data.num_classes == 4
    assert sorted(np.bincount(data.labels).tolist()) == [50] * 4
    counts = {split: int(np.sum(data.splits == str(split))) for split in Split}
    assert counts == {Split.TRAIN: 140, Split.VAL: 30, Split.TEST: 30}


def test_gen_blobs_standardized_on_train_split():
    data = gen_blobs(0, 4, 6, 50, 1.5)
    train, _ = data.subset(Split.TRAIN)
    np.testing.assert_allclose(train.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(train.std(axis=0), 1.0, atol=1e-12)


def test_gen_blobs_tiny_spread_is_separable():
    data = gen_blobs(0, 3, 4, 20, 1e-6)
    for label in range(3):
        rows = data.features[data.labels == label]
        assert np.ptp(rows, axis=0).max() < 1e-3


def test_gen_blobs_invalid():
    with raises(ValueError, match="at least 1"):
        gen_blobs(0, 0, 4, 20, 1.0)
    with raises(ValueError, match="spread must be positive"):
        gen_blobs(0, 3, 4, 20, 0.0)


def test_dataset_validation():
    with raises(ValueError, match="Labels must lie"):
        Dataset(
            features=np.zeros((2, 1)),
            labels=np.array([0, 3]),
            splits=np.array(["train", "val"]),
            num_classes=2,
        )
    with raises(ValueError, match="Unknown split"):
        Dataset(
            features=np.zeros((1, 1)),
            labels=np.array([0]),
            splits=np.array(["dev"]),
            num_classes=1,
        )


def test_parse_idx_images():
    features = parse_idx_images(idx_images_bytes(PIXELS))
    assert features.shape == (2, 4)
    assert features.tolist() == [[0.0, 1.0, 0.2, 0.4], [1.0, 0.0, 0.0, 0.8]]


def test_parse_idx_labels():
    assert parse_idx_labels(idx_labels_bytes([3, 1, 4])).tolist() == [3, 1, 4]


def test_parse_idx_bad_magic():
    data = struct.pack(">IIII", 0x0803 + 1, 0, 1, 1)
    with raises(IdxFormatError, match="0x00000804 at byte offset 0"):
        parse_idx_images(data)
    with raises(IdxFormatError, match="label magic"):
        parse_idx_labels(idx_images_bytes(PIXELS))


def test_parse_idx_truncated_header():
    with raises(IdxFormatError, match="byte offset 4"):
        parse_idx_images(idx_images_bytes(PIXELS)[:10])
    with raises(IdxFormatError, match="byte offset 0"):
        parse_idx_labels(b"\0\0")


def test_parse_idx_truncated_pixels():
    with raises(IdxFormatError, match="byte offset 20: expected 8 pixel bytes"):
        parse_idx_images(idx_images_bytes(PIXELS)[:20])
    with raises(IdxFormatError, match="byte offset 9: expected 3 labels"):
        parse_idx_labels(idx_labels_bytes([1, 2, 3])[:9])


def test_parse_idx_trailing_bytes():
    with raises(IdxFormatError, match="Trailing bytes after byte offset 24"):
        parse_idx_images(idx_images_bytes(PIXELS) + b"\0")


def test_load_idx(tmp_path):
    manifest = parse_manifest(write_idx(tmp_path, PIXELS, [1, 0], split_seed=5))
    data = load_idx(manifest.images, manifest.labels, split_seed=manifest.split_seed)
    assert data.features.tolist() == [[0.0, 1.0, 0.2, 0.4], [1.0, 0.0, 0.0, 0.8]]
    assert data.labels.tolist() == [1, 0]
    assert data.num_classes == 2


def test_load_idx_count_mismatch(tmp_path):
    manifest = parse_manifest(write_idx(tmp_path, PIXELS, [1, 0, 1]))
    with raises(IdxFormatError, match="does not match image count 2"):
        load_idx(manifest.images, manifest.labels)


def test_take_fraction():
    features = np.arange(20, dtype=np.float64).reshape(10, 2)
    labels = np.arange(10)
    x, y = take_fraction(features, labels, 0.5, Rng(0))
    assert y.size == 5
    assert np.array_equal(x[:, 0] / 2, y)
    again, _ = take_fraction(features, labels, 0.5, Rng(0))
    assert np.array_equal(x, again)
    assert take_fraction(features, labels, 1.0, Rng(0))[1].size == 10


def test_split_fractions_large():
    data = gen_blobs(0, 10, 2, 100, 1.0)
    assert np.mean(data.splits == str(Split.TRAIN)) == approx(0.7)
