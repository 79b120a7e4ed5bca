"""Naturalistic corruption evaluation.

Two corruption sources:

* a built-in synthetic suite (brightness, contrast, gaussian_noise,
  motion_blur, pixelate) with severities 1..5, deterministic given
  (batch, spec, seed), so the full pipeline runs with zero downloads;
* a reader for the published corruption-benchmark file layout: one uint8
  tensor file per corruption with the 5 severity blocks stacked along axis 0
  (block k -> severity k+1) plus a labels file with one entry per block row.

Severity maps for the synthetic suite (s = severity, pixel scale [0, 1]):

    brightness      x + 0.1*s
    contrast        (x - 0.5) * (1 - 0.15*s) + 0.5
    gaussian_noise  x + N(0, (0.04*s)^2)
    motion_blur     horizontal box kernel of length 2s + 1 (edge padding)
    pixelate        block-mean downsample by factor s + 1, nearest upsample

All outputs are clipped to [0, 1]; labels and shapes are never modified.
Corrupted accuracy is always normalized by clean accuracy on the matched
clean test set, and model selection never sees corrupted data.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .backbone import ImageBatch, ModelAdapter

SYNTHETIC_CORRUPTIONS = ("brightness", "contrast", "gaussian_noise", "motion_blur", "pixelate")
SEVERITIES = (1, 2, 3, 4, 5)

# The 19 corruption names of the published CIFAR-10-C release (15 core + 4 extra).
BENCHMARK_CORRUPTIONS = (
    "brightness", "contrast", "defocus_blur", "elastic_transform", "fog",
    "frost", "gaussian_blur", "gaussian_noise", "glass_blur", "impulse_noise",
    "jpeg_compression", "motion_blur", "pixelate", "saturate", "shot_noise",
    "snow", "spatter", "speckle_noise", "zoom_blur",
)


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption instance: name, severity 1..5, and its source."""

    name: str
    severity: int
    source: str = "synthetic"  # "synthetic" | "benchmark"

    def validate(self) -> "CorruptionSpec":
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")
        if self.source not in ("synthetic", "benchmark"):
            raise ValueError(f"unknown corruption source: {self.source!r}")
        if self.source == "synthetic" and self.name not in SYNTHETIC_CORRUPTIONS:
            raise ValueError(f"unknown corruption name: {self.name!r}")
        return self

    def to_dict(self) -> dict:
        return {"name": self.name, "severity": self.severity, "source": self.source}


def _corruption_rng(spec: CorruptionSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), spec.severity, zlib.crc32(spec.name.encode())])


def _motion_blur(img: np.ndarray, length: int) -> np.ndarray:
    """Horizontal box blur along the width axis with edge padding."""
    half = length // 2
    padded = np.pad(img, ((0, 0), (0, 0), (0, 0), (half, half)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for k in range(length):
        out += padded[:, :, :, k:k + img.shape[3]]
    return out / length


def _overlap_weights(size: int, blocks: int) -> np.ndarray:
    """(blocks x size) area weights for equal fractional boxes over [0, size)."""
    edges = np.linspace(0.0, size, blocks + 1)
    weights = np.zeros((blocks, size))
    for k in range(blocks):
        lo, hi = edges[k], edges[k + 1]
        for j in range(int(np.floor(lo)), min(size, int(np.ceil(hi)))):
            weights[k, j] = min(hi, j + 1) - max(lo, j)
    return weights / (size / blocks)


def _pixelate(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downsample by `factor`, then nearest-neighbour upsample.

    Boxes are equal fractional spans (ceil(size/factor) per axis) rather than
    ragged integer tiles, so distortion cannot dip when the image size is not
    a multiple of the factor.
    """
    n, c, h, w = img.shape
    bh, bw = -(-h // factor), -(-w // factor)
    wh = _overlap_weights(h, bh)
    ww = _overlap_weights(w, bw)
    blocks = np.einsum("kh,nchw,lw->nckl", wh, img, ww)
    hi = np.minimum((np.arange(h) + 0.5) * bh / h, bh - 1).astype(np.int64)
    wi = np.minimum((np.arange(w) + 0.5) * bw / w, bw - 1).astype(np.int64)
    return blocks[:, :, hi][:, :, :, wi]


def apply_corruption(batch: ImageBatch, spec: CorruptionSpec, seed: int = 0) -> ImageBatch:
    """Apply a synthetic corruption; deterministic given (batch, spec, seed)."""
    spec.validate()
    if spec.source != "synthetic":
        raise ValueError("apply_corruption only supports synthetic specs")
    x = batch.pixels.astype(np.float64)
    s = spec.severity
    if spec.name == "brightness":
        out = x + 0.1 * s
    elif spec.name == "contrast":
        out = (x - 0.5) * (1 - 0.15 * s) + 0.5
    elif spec.name == "gaussian_noise":
        rng = _corruption_rng(spec, seed)
        out = x + rng.normal(0.0, 0.04 * s, size=x.shape)
    elif spec.name == "motion_blur":
        out = _motion_blur(x, 2 * s + 1)
    elif spec.name == "pixelate":
        out = _pixelate(x, s + 1)
    else:  # pragma: no cover - guarded by validate()
        raise ValueError(f"unknown corruption name: {spec.name!r}")
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return ImageBatch(out, batch.labels.copy(), batch.num_classes)


def synthetic_suite(batch: ImageBatch, seed: int = 0,
                    names=SYNTHETIC_CORRUPTIONS,
                    severities=SEVERITIES) -> Iterator[Tuple[CorruptionSpec, ImageBatch]]:
    """All (name, severity) corruptions of one clean batch, row-aligned with it."""
    for name in names:
        for severity in severities:
            spec = CorruptionSpec(name, severity, "synthetic")
            yield spec, apply_corruption(batch, spec, seed)


# ------------------------------------------------------------------ benchmark


def load_corruption_benchmark(root_path, layout: str = "cifar10c_style",
                              num_classes: int = 10,
                              strict: bool = False,
                              severity_high_first: bool = False
                              ) -> Iterator[Tuple[CorruptionSpec, ImageBatch]]:
    """Stream (spec, batch) pairs from a benchmark-layout directory.

    Each <name>.npy holds uint8 images of shape (N*5, H, W, 3) with the five
    severity blocks stacked low to high (set severity_high_first for a local
    copy stored the other way); labels.npy holds the N per-block labels.
    Pixels are converted to float32 in [0, 1] with row order preserved, so
    batch row i always matches clean test row i.
    """
    if layout != "cifar10c_style":
        raise ValueError(f"unknown benchmark layout: {layout!r}")
    root = Path(root_path)
    labels_path = root / "labels.npy"
    if not labels_path.exists():
        raise FileNotFoundError(f"missing labels file: {labels_path}")
    labels = np.load(labels_path).astype(np.int64)
    n = labels.shape[0]
    for path in sorted(root.glob("*.npy")):
        if path.name == "labels.npy":
            continue
        name = path.stem
        if name not in BENCHMARK_CORRUPTIONS:
            if strict:
                raise ValueError(f"unknown corruption file in strict mode: {path.name}")
        data = np.load(path)
        if data.shape[0] % 5 != 0:
            raise ValueError(f"{path.name}: row count {data.shape[0]} not divisible by 5")
        if data.shape[0] != n * 5:
            raise ValueError(f"{path.name}: {data.shape[0]} rows for {n} labels")
        for block in range(5):
            severity = 5 - block if severity_high_first else block + 1
            chunk = data[block * n:(block + 1) * n]
            pixels = chunk.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
            yield (
                CorruptionSpec(name, severity, "benchmark"),
                ImageBatch(pixels, labels.copy(), num_classes),
            )


# ------------------------------------------------------------------ evaluation


@dataclass
class CorruptionEvalResult:
    """Accuracy per (corruption, severity) plus normalized and aggregate views."""

    clean_accuracy: float
    entries: list  # dicts: name, severity, source, accuracy, normalized_accuracy
    per_corruption_mean: dict       # name -> mean accuracy across severities
    per_corruption_norm_mean: dict  # name -> mean normalized accuracy
    mean_accuracy: float            # grand mean over the (name, severity) table
    mean_normalized_accuracy: float

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "entries": self.entries,
            "per_corruption_mean": self.per_corruption_mean,
            "per_corruption_norm_mean": self.per_corruption_norm_mean,
            "mean_accuracy": self.mean_accuracy,
            "mean_normalized_accuracy": self.mean_normalized_accuracy,
        }

    def csv_rows(self, run_id: str, alpha: float, seed: int) -> list:
        """Flat rows: run_id, alpha, seed, corruption, severity, accuracy, normalized."""
        return [
            (run_id, alpha, seed, e["name"], e["severity"], e["accuracy"], e["normalized_accuracy"])
            for e in self.entries
        ]


def corrupted_eval(model: ModelAdapter, pairs, clean_batch: ImageBatch,
                   eval_batch_size: int = 256) -> CorruptionEvalResult:
    """Accuracy of `model` over an iterable of (CorruptionSpec, ImageBatch).

    Clean accuracy comes from the matched clean test set; normalized accuracy
    is corrupted/clean whenever clean > 0 (NaN otherwise).
    """
    clean_acc = model.accuracy(clean_batch, batch_size=eval_batch_size)
    entries = []
    for spec, batch in pairs:
        acc = model.accuracy(batch, batch_size=eval_batch_size)
        norm = acc / clean_acc if clean_acc > 0 else float("nan")
        entries.append({
            "name": spec.name,
            "severity": spec.severity,
            "source": spec.source,
            "accuracy": acc,
            "normalized_accuracy": norm,
        })
    if not entries:
        raise ValueError("empty corruption source")
    names = sorted({e["name"] for e in entries})
    per_mean = {
        n: float(np.mean([e["accuracy"] for e in entries if e["name"] == n])) for n in names
    }
    per_norm = {
        n: float(np.mean([e["normalized_accuracy"] for e in entries if e["name"] == n]))
        for n in names
    }
    return CorruptionEvalResult(
        clean_accuracy=clean_acc,
        entries=entries,
        per_corruption_mean=per_mean,
        per_corruption_norm_mean=per_norm,
        mean_accuracy=float(np.mean([e["accuracy"] for e in entries])),
        mean_normalized_accuracy=float(np.mean([e["normalized_accuracy"] for e in entries])),
    )
