"""PCA dimensionality probe for layer activations.

For each layer we count the principal components needed to explain a target
share (default 90%) of the variance of the (samples x units) activation
matrix, then divide by the layer's unit count to get a fraction comparable
across layers of different widths. The same probe applied to the difference
matrix (clean activations minus perturbed activations over matched samples)
characterizes the representational footprint of a perturbation.

Columns are mean-centered before PCA (pass center=False for the uncentered
sensitivity variant); variance comes from squared singular values and the
threshold comparison is a plain >= with no tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backbone import LayerActivations

DEFAULT_THRESHOLD = 0.9
DEFAULT_MAX_SAMPLES = 2000

DIM_KINDS = ("clean", "corruption_diff", "adversarial_diff")


@dataclass
class DimReport:
    """Per-layer component counts and dimensionality fractions."""

    kind: str                      # clean | corruption_diff | adversarial_diff
    perturbation: Optional[dict]   # descriptor when kind != clean
    threshold: float
    layers: list                   # dicts: layer_id, dims_90, units, fraction
    samples_used: int

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "perturbation": self.perturbation,
            "threshold": self.threshold,
            "layers": self.layers,
            "samples_used": self.samples_used,
        }


def dims_to_variance(matrix: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                     center: bool = True) -> int:
    """Smallest k such that the top-k principal components reach `threshold`.

    A matrix with zero variance after centering needs 0 components.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("activation matrix must be 2-D")
    if matrix.shape[0] < 2:
        raise ValueError(f"need >= 2 samples, got {matrix.shape[0]}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if center:
        matrix = matrix - matrix.mean(axis=0)
    s = np.linalg.svd(matrix, compute_uv=False)
    cumulative = np.cumsum(s ** 2)
    total = cumulative[-1]
    if total == 0.0:
        return 0
    ratios = cumulative / total  # last ratio is exactly 1.0, so >= always fires
    return int(np.argmax(ratios >= threshold) + 1)


def _profile(layer_matrices, kind: str, perturbation, threshold: float,
             max_samples: Optional[int], center: bool) -> DimReport:
    layers = []
    samples_used = None
    for lid, mat in layer_matrices:
        mat = np.asarray(mat, dtype=np.float64)
        if max_samples is not None:
            mat = mat[:max_samples]
        samples_used = mat.shape[0]
        dims = dims_to_variance(mat, threshold, center=center)
        layers.append({
            "layer_id": lid,
            "dims_90": dims,
            "units": int(mat.shape[1]),
            "fraction": dims / mat.shape[1],
        })
    return DimReport(kind=kind, perturbation=perturbation, threshold=threshold,
                     layers=layers, samples_used=int(samples_used))


def clean_dim_profile(acts: LayerActivations, threshold: float = DEFAULT_THRESHOLD,
                      max_samples: Optional[int] = DEFAULT_MAX_SAMPLES,
                      center: bool = True) -> DimReport:
    """Per-layer dimensionality of clean activations."""
    if not acts.layers:
        raise ValueError("no layers to profile")
    return _profile(acts.layers.items(), "clean", None, threshold, max_samples, center)


def difference_dim_profile(clean_acts: LayerActivations, perturbed_acts: LayerActivations,
                           kind: str, perturbation: Optional[dict] = None,
                           threshold: float = DEFAULT_THRESHOLD,
                           max_samples: Optional[int] = DEFAULT_MAX_SAMPLES,
                           center: bool = True) -> DimReport:
    """Per-layer dimensionality of (clean - perturbed) over matched samples.

    Refuses mismatched layer sets or row counts rather than truncating: row i
    of both inputs must be the same underlying image.
    """
    if kind not in ("corruption_diff", "adversarial_diff"):
        raise ValueError(f"kind must be corruption_diff or adversarial_diff, got {kind!r}")
    if clean_acts.layer_ids != perturbed_acts.layer_ids:
        raise ValueError("layer mismatch between clean and perturbed activations")
    diffs = []
    for lid in clean_acts.layer_ids:
        a, b = clean_acts.layers[lid], perturbed_acts.layers[lid]
        if a.shape != b.shape:
            raise ValueError(
                f"layer {lid}: shape mismatch {a.shape} vs {b.shape} between clean and perturbed"
            )
        diffs.append((lid, np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
    return _profile(diffs, kind, perturbation, threshold, max_samples, center)
