"""Shared fixtures: tiny models and datasets sized for fast unit tests."""

import numpy as np
import pytest
import torch

from selekt import (
    ArchConfig,
    DatasetDescriptor,
    ImageBatch,
    TrainConfig,
    build_model,
    load_dataset,
    train,
)

MICRO_ARCH = ArchConfig(
    family="micro_cnn", num_classes=3, in_channels=1, image_size=8,
    conv_widths=(2, 3), conv_strides=(1, 2),
)

TINY_ARCH = ArchConfig(
    family="micro_cnn", num_classes=10, in_channels=3, image_size=16,
    conv_widths=(6, 8), conv_strides=(1, 2),
)

TINY_DATASET = DatasetDescriptor(
    source="synthetic", num_classes=10, image_size=16,
    train_count=300, val_count=50, test_count=200,
    split_policy="per_class", generation_seed=11,
)


def random_batch(n=6, channels=1, size=8, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return ImageBatch(
        rng.uniform(0.0, 1.0, size=(n, channels, size, size)).astype(np.float32),
        rng.integers(0, classes, size=n),
        classes,
    )


@pytest.fixture
def micro_model():
    """~100-parameter float64 model for finite-difference oracles."""
    return build_model(MICRO_ARCH, seed=0, dtype=torch.float64)


@pytest.fixture
def micro_batch():
    rng = np.random.default_rng(1)
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
    pixels = rng.uniform(0.0, 1.0, size=(9, 1, 8, 8)).astype(np.float32)
    return ImageBatch(pixels, labels, 3)


@pytest.fixture(scope="session")
def tiny_dataset():
    return load_dataset(TINY_DATASET)


@pytest.fixture(scope="session")
def trained_model(tmp_path_factory):
    """Trained tiny model loaded from its best-validation checkpoint."""
    run_dir = tmp_path_factory.mktemp("tiny_run")
    config = TrainConfig(
        arch=TINY_ARCH, dataset=TINY_DATASET, alpha=0.0, epochs=8,
        batch_size=64, lr=0.05, anneal_epochs=(6,), anneal_factor=0.1, seed=3,
    )
    record = train(config, run_dir=run_dir, run_id="tiny-fixture")
    assert record.status == "completed"
    model = record.load_model()
    test = load_dataset(TINY_DATASET).test
    return model, test, record
