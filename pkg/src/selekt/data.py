"""Dataset providers.

The bundled synthetic dataset renders 10 procedural shape classes (squares,
disks, rings, stripes, crosses, ...) onto noisy backgrounds so the whole
pipeline runs with zero downloads. Shape identity and orientation are
class-determined; position, scale, channel tint and background noise are
drawn per image from the generation seed. Pixels are quantized to the uint8
grid, so materializing to disk and reloading is lossless.

A local CIFAR-style dataset can be used instead: the layout is one uint8
tensor file (N, H, W, 3) plus a labels file per split, the same tensor
layout used by the corruption benchmark reader, so one reader core serves
both and row order is preserved end to end (clean row i always matches
corruption-file row i).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import ImageBatch
from .exceptions import ConfigError

NUM_SHAPE_CLASSES = 10
MIN_IMAGE_SIZE = 16

LOCAL_FILES = {
    "train": ("train_images.npy", "train_labels.npy"),
    "test": ("test_images.npy", "test_labels.npy"),
}


@dataclass
class DatasetDescriptor:
    """Identifies a dataset and its split sizes.

    train_count/val_count describe the split of the training pool (the pool
    holds train_count + val_count samples); test_count is the held-out test
    set. split_policy "per_class" draws the validation set class-stratified,
    "fixed_count" draws it uniformly from the pool.
    """

    source: str = "synthetic"  # "synthetic" | "local_cifar_style"
    num_classes: int = 10
    image_size: int = 32
    train_count: int = 5000
    val_count: int = 500
    test_count: int = 1000
    split_policy: str = "per_class"
    root: Optional[str] = None
    generation_seed: int = 7

    def validate(self) -> "DatasetDescriptor":
        if self.source not in ("synthetic", "local_cifar_style"):
            raise ConfigError(f"unknown dataset source: {self.source!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if min(self.train_count, self.val_count, self.test_count) <= 0:
            raise ConfigError("split counts must be positive")
        if self.split_policy not in ("per_class", "fixed_count"):
            raise ConfigError(f"unknown split policy: {self.split_policy!r}")
        if self.split_policy == "per_class" and self.val_count % self.num_classes != 0:
            raise ConfigError("per_class policy needs val_count divisible by num_classes")
        if self.source == "synthetic":
            if self.image_size < MIN_IMAGE_SIZE:
                raise ConfigError(f"image size too small to render (< {MIN_IMAGE_SIZE})")
            if self.num_classes > NUM_SHAPE_CLASSES:
                raise ConfigError(f"synthetic dataset supports at most {NUM_SHAPE_CLASSES} classes")
            pool = self.train_count + self.val_count
            if pool % self.num_classes or self.test_count % self.num_classes:
                raise ConfigError("synthetic counts must be divisible by num_classes")
        if self.source == "local_cifar_style" and not self.root:
            raise ConfigError("local dataset needs a root path")
        return self

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "train_count": self.train_count,
            "val_count": self.val_count,
            "test_count": self.test_count,
            "split_policy": self.split_policy,
            "root": self.root,
            "generation_seed": self.generation_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetDescriptor":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset fields: {sorted(unknown)}")
        return cls(**d).validate()

    def cache_key(self) -> tuple:
        return tuple(sorted(self.to_dict().items(), key=lambda kv: kv[0]))


@dataclass
class Dataset:
    """A loaded dataset: the training pool (train + val) and the test set."""

    descriptor: DatasetDescriptor
    train_pool: ImageBatch
    test: ImageBatch


# ------------------------------------------------------------------ synthetic


def _render_shape(canvas: np.ndarray, label: int, rng: np.random.Generator) -> None:
    """Draw one class-determined shape with per-image position/scale jitter."""
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = size / 7.0
    cx = size / 2.0 + rng.uniform(-jitter, jitter)
    cy = size / 2.0 + rng.uniform(-jitter, jitter)
    r = size / 4.0 * rng.uniform(0.65, 1.15)
    dx, dy = xx - cx, yy - cy
    dist = np.sqrt(dx ** 2 + dy ** 2)
    box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    period = max(2, int(round(size / 8)))
    if label == 0:    # filled square
        mask = box
    elif label == 1:  # square frame
        mask = box & ~((np.abs(dx) <= 0.5 * r) & (np.abs(dy) <= 0.5 * r))
    elif label == 2:  # filled disk
        mask = dist <= 0.95 * r
    elif label == 3:  # ring
        mask = (dist <= 0.95 * r) & (dist >= 0.5 * r)
    elif label == 4:  # horizontal stripes
        mask = box & ((np.floor(dy / period) % 2) == 0)
    elif label == 5:  # vertical stripes
        mask = box & ((np.floor(dx / period) % 2) == 0)
    elif label == 6:  # plus
        mask = box & ((np.abs(dx) <= 0.35 * r) | (np.abs(dy) <= 0.35 * r))
    elif label == 7:  # diagonal cross
        mask = box & ((np.abs(dx - dy) <= 0.5 * r) | (np.abs(dx + dy) <= 0.5 * r))
    elif label == 8:  # filled triangle, apex up
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    else:             # checkerboard
        mask = box & (((np.floor(dx / period) + np.floor(dy / period)) % 2) == 0)
    intensity = rng.uniform(0.55, 0.85)
    canvas[mask] = intensity


def _render_split(n: int, descriptor: DatasetDescriptor, rng: np.random.Generator) -> ImageBatch:
    size = descriptor.image_size
    c = descriptor.num_classes
    per_class = n // c
    labels = np.repeat(np.arange(c), per_class)
    pixels = np.empty((n, 3, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        canvas = rng.uniform(0.1, 0.3) * np.ones((size, size))
        _render_shape(canvas, int(label), rng)
        gains = rng.uniform(0.85, 1.0, size=3)
        img = canvas[None, :, :] * gains[:, None, None]
        img = img + rng.uniform(-0.09, 0.09, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        pixels[i] = (np.round(img * 255.0) / 255.0).astype(np.float32)
    return ImageBatch(pixels, labels, c).validate()


def generate_synthetic(descriptor: DatasetDescriptor) -> Dataset:
    """Procedural shape dataset; bit-identical for identical descriptors."""
    descriptor.validate()
    if descriptor.source != "synthetic":
        raise ConfigError("generate_synthetic needs a synthetic descriptor")
    pool_rng = np.random.default_rng([descriptor.generation_seed, 0])
    test_rng = np.random.default_rng([descriptor.generation_seed, 1])
    pool = _render_split(descriptor.train_count + descriptor.val_count, descriptor, pool_rng)
    test = _render_split(descriptor.test_count, descriptor, test_rng)
    return Dataset(descriptor=descriptor, train_pool=pool, test=test)


# ------------------------------------------------------------------ local


def _read_pair(images_path: Path, labels_path: Path, num_classes: int) -> ImageBatch:
    if not images_path.exists():
        raise FileNotFoundError(f"missing images file: {images_path}")
    if not labels_path.exists():
        raise FileNotFoundError(f"missing labels file: {labels_path}")
    images = np.load(images_path)
    labels = np.load(labels_path).astype(np.int64)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"{images_path.name}: expected (N, H, W, 3), got {images.shape}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{labels_path.name}: {labels.shape[0]} labels for {images.shape[0]} images"
        )
    pixels = images.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    return ImageBatch(pixels, labels, num_classes).validate()


def load_local(descriptor: DatasetDescriptor) -> Dataset:
    """Load a local CIFAR-style dataset; row order is preserved exactly."""
    descriptor.validate()
    if descriptor.source != "local_cifar_style":
        raise ConfigError("load_local needs a local_cifar_style descriptor")
    root = Path(descriptor.root)
    pool = _read_pair(root / LOCAL_FILES["train"][0], root / LOCAL_FILES["train"][1],
                      descriptor.num_classes)
    test = _read_pair(root / LOCAL_FILES["test"][0], root / LOCAL_FILES["test"][1],
                      descriptor.num_classes)
    if len(pool) != descriptor.train_count + descriptor.val_count:
        raise ValueError(
            f"train pool holds {len(pool)} samples, descriptor expects "
            f"{descriptor.train_count + descriptor.val_count}"
        )
    return Dataset(descriptor=descriptor, train_pool=pool, test=test)


_CACHE: dict = {}


def load_dataset(descriptor: DatasetDescriptor, cache: bool = True) -> Dataset:
    """Dispatch on descriptor.source, with an in-process cache (read-only use)."""
    descriptor.validate()
    key = descriptor.cache_key()
    if cache and key in _CACHE:
        return _CACHE[key]
    if descriptor.source == "synthetic":
        ds = generate_synthetic(descriptor)
    else:
        ds = load_local(descriptor)
    if cache:
        _CACHE[key] = ds
    return ds


def materialize_dataset(dataset: Dataset, out_dir) -> None:
    """Write a dataset to the local uint8 layout (lossless for synthetic data)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, batch in (("train", dataset.train_pool), ("test", dataset.test)):
        images = np.round(batch.pixels.transpose(0, 2, 3, 1) * 255.0).astype(np.uint8)
        np.save(out / LOCAL_FILES[split][0], images)
        np.save(out / LOCAL_FILES[split][1], batch.labels)
