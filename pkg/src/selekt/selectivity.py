"""Class selectivity: per-unit index, network aggregation, regularized loss.

A unit's selectivity index is

    SI = (mu_max - mu_rest) / (mu_max + mu_rest)

where mu_max is the unit's largest class-conditional mean activation and
mu_rest is the mean of its responses to the remaining classes. SI is 0 for a
unit with identical average activity across classes and 1 for a unit that
responds to a single class. Network selectivity mu_SI is the mean over layers
of the within-layer mean SI; taking the layer mean first keeps wide layers
from dominating the aggregate.

The training loss is  CE - alpha * mu_SI  with mu_SI computed on the current
minibatch. Negative alpha discourages selectivity, positive alpha encourages
it. Two implementations live here:

* a numpy analysis path (class_conditional_means / selectivity_index /
  network_selectivity) used for test-set reports, and
* a torch path (regularized_loss) that is differentiable end-to-end through
  the per-class means and the max, used during training.

Tests cross-check the two paths against each other.

Conventions: a dead unit (mu_max + mu_rest below dead_unit_epsilon) has
SI = 0; ties for mu_max resolve to the lowest class index; a minibatch with
fewer than min_classes_for_si distinct labels skips the regularizer (the loss
falls back to plain cross-entropy and the skip is logged). mu_SI is
per-batch only; no smoothing across batches is applied.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import LayerActivations

logger = logging.getLogger(__name__)


@dataclass
class RegularizerConfig:
    """Scale and edge-case handling for the selectivity regularizer."""

    alpha: float = 0.0
    min_classes_for_si: int = 2
    dead_unit_epsilon: float = 1e-12

    def validate(self) -> "RegularizerConfig":
        if self.min_classes_for_si < 2:
            raise ValueError("min_classes_for_si must be >= 2")
        if not self.dead_unit_epsilon > 0:
            raise ValueError("dead_unit_epsilon must be positive")
        return self

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "min_classes_for_si": self.min_classes_for_si,
            "dead_unit_epsilon": self.dead_unit_epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizerConfig":
        return cls(
            alpha=float(d.get("alpha", 0.0)),
            min_classes_for_si=int(d.get("min_classes_for_si", 2)),
            dead_unit_epsilon=float(d.get("dead_unit_epsilon", 1e-12)),
        ).validate()


@dataclass
class LossSpec:
    """Loss descriptor for backbone.loss_and_grads: plain CE or regularized."""

    kind: str = "cross_entropy"  # "cross_entropy" | "regularized"
    regularizer: Optional[RegularizerConfig] = None

    def validate(self) -> "LossSpec":
        if self.kind not in ("cross_entropy", "regularized"):
            raise ValueError(f"unknown loss kind: {self.kind!r}")
        if self.kind == "regularized" and self.regularizer is None:
            raise ValueError("regularized loss requires a RegularizerConfig")
        return self


@dataclass
class UnitClassStats:
    """Per-layer (units x classes) class-conditional mean activations.

    Means for classes absent from the data are NaN, never zero. Column count
    equals num_classes for every layer.
    """

    per_layer: "OrderedDict[str, np.ndarray]"
    classes_present: np.ndarray
    num_classes: int


@dataclass
class LayerSelectivity:
    layer_id: str
    unit_si: np.ndarray
    mean_si: float


@dataclass
class SelectivityReport:
    """Per-unit SI values, per-layer means, and the network mean mu_SI."""

    layers: list
    network_si: float
    source: str

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "layer_id": l.layer_id,
                    "unit_si": [float(v) for v in l.unit_si],
                    "mean_si": float(l.mean_si),
                }
                for l in self.layers
            ],
            "network_si": float(self.network_si),
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectivityReport":
        layers = [
            LayerSelectivity(
                layer_id=l["layer_id"],
                unit_si=np.asarray(l["unit_si"], dtype=np.float64),
                mean_si=float(l["mean_si"]),
            )
            for l in d["layers"]
        ]
        return cls(layers=layers, network_si=float(d["network_si"]), source=d.get("source", ""))


# ---------------------------------------------------------------- numpy path


def class_conditional_means(acts: LayerActivations, labels, num_classes: int) -> UnitClassStats:
    """Mean activation of every unit for every class present in the data."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0 or not acts.layers:
        raise ValueError("empty input")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    first = next(iter(acts.layers.values()))
    if first.shape[0] != labels.size:
        raise ValueError(f"{first.shape[0]} activation rows for {labels.size} labels")
    present = np.unique(labels)
    per_layer = OrderedDict()
    for lid, mat in acts.layers.items():
        mat = np.asarray(mat, dtype=np.float64)
        means = np.full((mat.shape[1], num_classes), np.nan)
        for c in present:
            means[:, c] = mat[labels == c].mean(axis=0)
        per_layer[lid] = means
    return UnitClassStats(per_layer=per_layer, classes_present=present, num_classes=num_classes)


def unit_si(class_means: np.ndarray, cfg: Optional[RegularizerConfig] = None) -> np.ndarray:
    """SI per unit from a (units x classes) matrix; NaN columns mark absent classes."""
    cfg = (cfg or RegularizerConfig()).validate()
    means = np.atleast_2d(np.asarray(class_means, dtype=np.float64))
    present = ~np.all(np.isnan(means), axis=0)
    n_present = int(present.sum())
    if n_present < cfg.min_classes_for_si:
        raise ValueError(
            f"{n_present} classes present, need >= {cfg.min_classes_for_si} for SI"
        )
    sub = means[:, present]
    max_idx = sub.argmax(axis=1)
    mu_max = sub[np.arange(sub.shape[0]), max_idx]
    # mean of the remaining entries, summed with the max excluded (not
    # subtracted) so uniform rows give exactly 0 and one-hot rows exactly 1
    masked = sub.copy()
    masked[np.arange(sub.shape[0]), max_idx] = 0.0
    mu_rest = masked.sum(axis=1) / (n_present - 1)
    den = mu_max + mu_rest
    dead = den < cfg.dead_unit_epsilon
    si = np.zeros(means.shape[0])
    alive = ~dead
    si[alive] = (mu_max[alive] - mu_rest[alive]) / den[alive]
    return si


def selectivity_index(stats: UnitClassStats, cfg: Optional[RegularizerConfig] = None):
    """Per-unit SI values for every layer in the stats."""
    return OrderedDict((lid, unit_si(m, cfg)) for lid, m in stats.per_layer.items())


def network_selectivity(per_layer_si) -> float:
    """mu_SI: mean over layers of the within-layer mean SI.

    Accepts the mapping returned by selectivity_index or any iterable of
    per-layer SI arrays. The output layer is never part of the input by
    construction (activation capture excludes it).
    """
    if isinstance(per_layer_si, dict):
        per_layer_si = list(per_layer_si.values())
    per_layer_si = [np.asarray(v, dtype=np.float64) for v in per_layer_si]
    if not per_layer_si:
        raise ValueError("empty layer list")
    for v in per_layer_si:
        if v.size == 0:
            raise ValueError("layer with no units")
    return float(np.mean([v.mean() for v in per_layer_si]))


def selectivity_report(acts: LayerActivations, labels, num_classes: int,
                       cfg: Optional[RegularizerConfig] = None,
                       source: str = "") -> SelectivityReport:
    """Full report (per-unit SI, layer means, mu_SI) for one activation set."""
    stats = class_conditional_means(acts, labels, num_classes)
    per_layer = selectivity_index(stats, cfg)
    layers = [
        LayerSelectivity(layer_id=lid, unit_si=si, mean_si=float(si.mean()))
        for lid, si in per_layer.items()
    ]
    return SelectivityReport(
        layers=layers,
        network_si=network_selectivity(per_layer),
        source=source,
    )


# ---------------------------------------------------------------- torch path


def minibatch_network_selectivity(acts, labels: torch.Tensor, num_classes: int,
                                  cfg: RegularizerConfig):
    """Differentiable mu_SI over a minibatch's in-graph activations.

    Uses only the classes present in the batch. Returns None when fewer than
    cfg.min_classes_for_si classes are present. Gradient flows through the
    per-class means and the max; a tie for mu_max follows the lowest class
    index, and dead units contribute SI = 0 with zero gradient.
    """
    counts = torch.bincount(labels, minlength=num_classes)
    present = counts > 0
    n_present = int(present.sum().item())
    if n_present < cfg.min_classes_for_si:
        return None
    layer_means = []
    denom = counts[present].to(next(iter(acts.values())).dtype).unsqueeze(1)
    for mat in acts.values():
        sums = torch.zeros(num_classes, mat.shape[1], dtype=mat.dtype)
        sums.index_add_(0, labels, mat)
        means = sums[present] / denom                       # (present, units)
        max_idx = means.argmax(dim=0)                       # first max = lowest class
        mu_max = means.gather(0, max_idx.unsqueeze(0)).squeeze(0)
        masked = means.scatter(0, max_idx.unsqueeze(0), 0.0)
        mu_rest = masked.sum(dim=0) / (n_present - 1)
        den = mu_max + mu_rest
        dead = den < cfg.dead_unit_epsilon
        safe_den = torch.where(dead, torch.ones_like(den), den)
        si = torch.where(dead, torch.zeros_like(den), (mu_max - mu_rest) / safe_den)
        layer_means.append(si.mean())
    return torch.stack(layer_means).mean()


def regularized_loss(logits: torch.Tensor, labels: torch.Tensor, acts,
                     cfg: RegularizerConfig, num_classes: Optional[int] = None) -> torch.Tensor:
    """CE - alpha * mu_SI on one minibatch, differentiable end-to-end."""
    loss, _, _ = regularized_loss_terms(logits, labels, acts, cfg, num_classes)
    return loss


def regularized_loss_terms(logits: torch.Tensor, labels: torch.Tensor, acts,
                           cfg: RegularizerConfig, num_classes: Optional[int] = None):
    """(loss, cross_entropy, mu_SI or None); mu_SI is None when skipped."""
    cfg.validate()
    if num_classes is None:
        num_classes = logits.shape[1]
    ce = F.cross_entropy(logits, labels)
    if cfg.alpha == 0.0:
        return ce, ce, None
    if isinstance(acts, LayerActivations):
        raise TypeError("regularized_loss needs in-graph torch activations, not numpy capture")
    mu_si = minibatch_network_selectivity(acts, labels, num_classes, cfg)
    if mu_si is None:
        logger.info(
            "selectivity regularizer skipped: %d classes in minibatch, need >= %d",
            int((torch.bincount(labels, minlength=num_classes) > 0).sum().item()),
            cfg.min_classes_for_si,
        )
        return ce, ce, None
    return ce - cfg.alpha * mu_si, ce, mu_si


def build_loss(logits: torch.Tensor, labels: torch.Tensor, acts, loss_spec,
               num_classes: Optional[int] = None) -> torch.Tensor:
    """Dispatch a LossSpec (or None for plain CE) to the right loss."""
    if loss_spec is None:
        return F.cross_entropy(logits, labels)
    loss_spec.validate()
    if loss_spec.kind == "cross_entropy":
        return F.cross_entropy(logits, labels)
    return regularized_loss(logits, labels, acts, loss_spec.regularizer, num_classes)
