"""Input-output Jacobian probe for network stability.

The Jacobian is taken of the logits (pre-softmax) with respect to the input
pixels; softmax saturation would mask stability differences. "Magnitude" is
the Frobenius norm per sample, averaged over the evaluated batch; a spectral
(largest singular value) variant is available via norm_kind. A large
magnitude means small input changes move the outputs a lot, i.e. an unstable
network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .backbone import ImageBatch, ModelAdapter

DEFAULT_MAX_SAMPLES = 500
NORM_KINDS = ("fro", "spectral")


@dataclass
class JacobianReport:
    """Per-sample Jacobian norms with mean and bootstrap CI."""

    norm_kind: str
    per_sample: np.ndarray
    mean: float
    ci_lower: float
    ci_upper: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "norm_kind": self.norm_kind,
            "per_sample": [float(v) for v in self.per_sample],
            "mean": self.mean,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "sample_count": self.sample_count,
        }


def _batch_jacobian_rows(model: ModelAdapter, pixels: np.ndarray) -> np.ndarray:
    """Jacobians for a whole batch: (N, C, input_pixels).

    Row c comes from one backward pass of sum_n logits[n, c]; samples are
    independent in eval mode, so the per-sample gradients separate exactly.
    """
    was_training = model.module.training
    model.module.eval()
    try:
        x = model._to_tensor(pixels, requires_grad=True)
        logits, _ = model.forward_tensors(x)
        n, num_classes = logits.shape
        rows = []
        for c in range(num_classes):
            (g,) = torch.autograd.grad(logits[:, c].sum(), x, retain_graph=c < num_classes - 1)
            rows.append(g.reshape(n, -1).numpy().copy())
    finally:
        model.module.train(was_training)
    jac = np.stack(rows, axis=1)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite Jacobian entries")
    return jac


def input_output_jacobian(model: ModelAdapter, sample: np.ndarray) -> np.ndarray:
    """Jacobian (num_classes x input_pixels) of the logits at one image.

    Accepts a (C, H, W) image or a singleton (1, C, H, W) batch; the pixel
    axis is flattened row-major.
    """
    sample = np.asarray(sample)
    if sample.ndim == 3:
        sample = sample[None]
    if sample.ndim != 4 or sample.shape[0] != 1:
        raise ValueError(f"expected one image, got shape {sample.shape}")
    return _batch_jacobian_rows(model, sample)[0]


def jacobian_magnitude(model: ModelAdapter, batch: ImageBatch,
                       norm_kind: str = "fro",
                       max_samples: Optional[int] = DEFAULT_MAX_SAMPLES,
                       eval_batch_size: int = 128,
                       ci_seed: int = 0) -> JacobianReport:
    """Per-sample Jacobian norms over (up to) max_samples of a batch."""
    from .harness import bootstrap_ci

    if norm_kind not in NORM_KINDS:
        raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {norm_kind!r}")
    if len(batch) == 0:
        raise ValueError("empty batch")
    pixels = batch.pixels if max_samples is None else batch.pixels[:max_samples]
    norms = []
    for start in range(0, len(pixels), eval_batch_size):
        jac = _batch_jacobian_rows(model, pixels[start:start + eval_batch_size])
        if norm_kind == "fro":
            norms.append(np.sqrt((jac.astype(np.float64) ** 2).sum(axis=(1, 2))))
        else:
            norms.append(np.array([np.linalg.norm(j.astype(np.float64), 2) for j in jac]))
    per_sample = np.concatenate(norms)
    ci = bootstrap_ci(per_sample, seed=ci_seed)
    return JacobianReport(
        norm_kind=norm_kind,
        per_sample=per_sample,
        mean=float(per_sample.mean()),
        ci_lower=ci.lower,
        ci_upper=ci.upper,
        sample_count=int(per_sample.shape[0]),
    )
