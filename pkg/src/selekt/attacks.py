"""White-box gradient attacks: FGSM and PGD, plus sweep drivers.

Both attacks perturb pixels inside an L-inf ball of radius epsilon around the
clean input and keep pixels in [0, 1]. The attacked loss is plain
cross-entropy against the true labels (untargeted); labels are never
modified. PGD starts from the clean input with no random start, so identical
(model, batch, spec) inputs always produce identical adversarial batches.

The PGD step size defaults to 1e-4 interpreted on the [0, 1] pixel scale;
pass step_size explicitly to override.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backbone import ImageBatch, ModelAdapter

DEFAULT_PGD_STEPS = 25
DEFAULT_PGD_STEP_SIZE = 1e-4
EPSILON_GRID = (0.0, 1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255)


@dataclass(frozen=True)
class AttackSpec:
    """Parameterization of one attack: method, budget, and PGD schedule."""

    method: str  # "fgsm" | "pgd"
    epsilon: float
    step_size: Optional[float] = None  # pgd only
    steps: Optional[int] = None        # pgd only

    def validate(self) -> "AttackSpec":
        if self.method not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack method: {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.method == "pgd":
            if self.steps is None or self.steps < 0:
                raise ValueError("pgd needs steps >= 0")
            if self.step_size is None or self.step_size <= 0:
                raise ValueError("pgd needs step_size > 0")
        return self

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(
            method=d["method"],
            epsilon=float(d["epsilon"]),
            step_size=None if d.get("step_size") is None else float(d["step_size"]),
            steps=None if d.get("steps") is None else int(d["steps"]),
        ).validate()


def _signed_step(model: ModelAdapter, batch: ImageBatch, magnitude: float) -> np.ndarray:
    grad = model.input_gradient(batch)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite input gradient during attack")
    return batch.pixels + np.float32(magnitude) * np.sign(grad, dtype=np.float32)


def fgsm(model: ModelAdapter, batch: ImageBatch, epsilon: float) -> ImageBatch:
    """One signed-gradient step of size epsilon, clipped to [0, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    adv = np.clip(_signed_step(model, batch, epsilon), 0.0, 1.0)
    return ImageBatch(adv, batch.labels.copy(), batch.num_classes)


def pgd(model: ModelAdapter, batch: ImageBatch, spec: AttackSpec) -> ImageBatch:
    """Iterated signed-gradient steps, projected onto the epsilon ball each step."""
    spec.validate()
    if spec.method != "pgd":
        raise ValueError(f"pgd called with method {spec.method!r}")
    x0 = batch.pixels
    current = ImageBatch(x0.copy(), batch.labels.copy(), batch.num_classes)
    eps = np.float32(spec.epsilon)
    for _ in range(spec.steps):
        stepped = _signed_step(model, current, spec.step_size)
        delta = np.clip(stepped - x0, -eps, eps)
        current = ImageBatch(np.clip(x0 + delta, 0.0, 1.0), current.labels, batch.num_classes)
    return current


def run_attack(model: ModelAdapter, batch: ImageBatch, spec: AttackSpec) -> ImageBatch:
    spec.validate()
    if spec.method == "fgsm":
        return fgsm(model, batch, spec.epsilon)
    return pgd(model, batch, spec)


def attack_sweep(model: ModelAdapter, batch: ImageBatch, specs, eval_batch_size: int = 256) -> dict:
    """Accuracy under each attack spec, with clean accuracy alongside.

    Attacks run in eval_batch_size chunks to bound the per-backward memory.
    Failures are re-raised tagged with the offending spec.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("specs must be non-empty")
    clean_acc = model.accuracy(batch, batch_size=eval_batch_size)
    rows = []
    for spec in specs:
        try:
            spec.validate()
            correct = 0
            for start in range(0, len(batch), eval_batch_size):
                chunk = batch.subset(slice(start, start + eval_batch_size))
                adv = run_attack(model, chunk, spec)
                preds = np.argmax(model.logits(adv, batch_size=eval_batch_size), axis=1)
                correct += int(np.sum(preds == chunk.labels))
        except Exception as exc:
            raise RuntimeError(f"attack failed for spec {spec.to_dict()}: {exc}") from exc
        rows.append({**spec.to_dict(), "accuracy": correct / len(batch)})
    return {"clean_accuracy": clean_acc, "rows": rows}
