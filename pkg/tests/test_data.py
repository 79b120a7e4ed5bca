"""Synthetic dataset generation and the local uint8 tensor layout."""

import numpy as np
import pytest

from selekt import DatasetDescriptor, generate_synthetic, load_dataset, load_local, materialize_dataset
from selekt.exceptions import ConfigError


def descriptor(**overrides):
    base = dict(source="synthetic", num_classes=10, image_size=16,
                train_count=100, val_count=50, test_count=50,
                split_policy="per_class", generation_seed=5)
    base.update(overrides)
    return DatasetDescriptor(**base)


def test_generation_is_deterministic():
    a = generate_synthetic(descriptor())
    b = generate_synthetic(descriptor())
    assert np.array_equal(a.train_pool.pixels, b.train_pool.pixels)
    assert np.array_equal(a.train_pool.labels, b.train_pool.labels)
    assert np.array_equal(a.test.pixels, b.test.pixels)


def test_generation_seed_changes_data():
    a = generate_synthetic(descriptor())
    b = generate_synthetic(descriptor(generation_seed=6))
    assert not np.array_equal(a.train_pool.pixels, b.train_pool.pixels)


def test_counts_and_balance():
    ds = generate_synthetic(descriptor(train_count=550, val_count=50, test_count=100))
    assert len(ds.train_pool) == 600
    assert len(ds.test) == 100
    counts = np.bincount(ds.train_pool.labels, minlength=10)
    assert np.all(counts == 60)


def test_pixel_range_and_uint8_grid():
    ds = generate_synthetic(descriptor())
    pix = ds.train_pool.pixels
    assert pix.min() >= 0.0 and pix.max() <= 1.0
    # values sit on the uint8 grid so materialization is lossless
    assert np.allclose(np.round(pix * 255) / 255, pix, atol=0)


def test_image_size_too_small_rejected():
    with pytest.raises(ConfigError, match="too small"):
        descriptor(image_size=8).validate()


def test_unbalanced_counts_rejected():
    with pytest.raises(ConfigError, match="divisible"):
        descriptor(train_count=101, val_count=52).validate()


def test_materialize_round_trips_bit_exactly(tmp_path):
    ds = generate_synthetic(descriptor())
    materialize_dataset(ds, tmp_path)
    local = load_local(DatasetDescriptor(
        source="local_cifar_style", num_classes=10, image_size=16,
        train_count=100, val_count=50, test_count=50, root=str(tmp_path),
    ))
    assert np.array_equal(local.train_pool.pixels, ds.train_pool.pixels)
    assert np.array_equal(local.train_pool.labels, ds.train_pool.labels)
    assert np.array_equal(local.test.pixels, ds.test.pixels)


def test_local_row_order_preserved(tmp_path):
    ds = generate_synthetic(descriptor())
    materialize_dataset(ds, tmp_path)
    raw = np.load(tmp_path / "test_images.npy")
    local = load_local(DatasetDescriptor(
        source="local_cifar_style", num_classes=10, image_size=16,
        train_count=100, val_count=50, test_count=50, root=str(tmp_path),
    ))
    for i in (0, 7, 49):
        expected = raw[i].astype(np.float32).transpose(2, 0, 1) / 255.0
        assert np.array_equal(local.test.pixels[i], expected)


def test_label_count_mismatch_rejected(tmp_path):
    ds = generate_synthetic(descriptor())
    materialize_dataset(ds, tmp_path)
    np.save(tmp_path / "train_labels.npy", ds.train_pool.labels[:-1])
    with pytest.raises(ValueError, match="labels for"):
        load_local(DatasetDescriptor(
            source="local_cifar_style", num_classes=10, image_size=16,
            train_count=100, val_count=50, test_count=50, root=str(tmp_path),
        ))


def test_missing_files_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_local(DatasetDescriptor(
            source="local_cifar_style", num_classes=10, image_size=16,
            train_count=10, val_count=10, test_count=10, root=str(tmp_path),
        ))


def test_wrong_tensor_shape_rejected(tmp_path):
    np.save(tmp_path / "train_images.npy", np.zeros((5, 16, 16), dtype=np.uint8))
    np.save(tmp_path / "train_labels.npy", np.zeros(5, dtype=np.int64))
    with pytest.raises(ValueError, match="expected"):
        load_local(DatasetDescriptor(
            source="local_cifar_style", num_classes=10, image_size=16,
            train_count=3, val_count=2, test_count=5, split_policy="fixed_count",
            root=str(tmp_path),
        ))


def test_descriptor_round_trip_and_unknown_fields():
    d = descriptor()
    assert DatasetDescriptor.from_dict(d.to_dict()) == d
    with pytest.raises(ConfigError, match="unknown dataset fields"):
        DatasetDescriptor.from_dict({**d.to_dict(), "surprise": 1})


def test_load_dataset_cache_returns_same_object():
    d = descriptor(train_count=50, val_count=50, test_count=50)
    assert load_dataset(d) is load_dataset(d)
