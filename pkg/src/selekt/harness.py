"""Training harness: SGD loop, splits, multi-seed sweeps, bootstrap statistics.

A run is a pure function of its TrainConfig (seed included): SGD with
momentum and weight decay on the regularized loss, the network selectivity
term computed per minibatch, learning rate multiplied by anneal_factor at
each anneal epoch, and a best-so-far checkpoint selected by clean validation
accuracy (earliest epoch wins ties). After training the best checkpoint is
reloaded and the final selectivity report is computed over the entire clean
test set. A non-finite loss aborts the run and marks the record diverged;
diverged runs are first-class results, never dropped.

All downstream evaluations (attacks, corruptions, dimensionality, Jacobian)
must load the best-validation checkpoint; corrupted or adversarial data never
influences model selection.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import ArchConfig, ImageBatch, ModelAdapter, build_model, load_checkpoint
from .data import Dataset, DatasetDescriptor, load_dataset
from .exceptions import ConfigError, DivergedRunError
from .selectivity import (
    RegularizerConfig,
    minibatch_network_selectivity,
    regularized_loss_terms,
    selectivity_report,
)

logger = logging.getLogger(__name__)

RECORD_FILENAME = "record.json"
CHECKPOINT_FILENAME = "checkpoint.bin"


@dataclass
class TrainConfig:
    """Everything that defines one training run."""

    arch: ArchConfig
    dataset: DatasetDescriptor
    alpha: float = 0.0
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    anneal_epochs: tuple = (15, 25)
    anneal_factor: float = 0.1
    seed: int = 0
    val_metric: str = "accuracy"
    grad_clip: Optional[float] = None  # global grad-norm cap; None disables
    alpha_warmup_epochs: int = 0       # ramp |alpha| linearly over the first epochs
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)

    def validate(self) -> "TrainConfig":
        self.arch.validate()
        self.dataset.validate()
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("lr and batch_size must be positive")
        if not 0 < self.anneal_factor:
            raise ConfigError("anneal_factor must be positive")
        anneal = list(self.anneal_epochs)
        if anneal != sorted(set(anneal)) or any(e < 1 for e in anneal):
            raise ConfigError("anneal_epochs must be strictly increasing positive epochs")
        if anneal and anneal[-1] >= self.epochs:
            raise ConfigError("anneal_epochs must be < epochs")
        if self.val_metric != "accuracy":
            raise ConfigError("val_metric must be 'accuracy' (checkpoint selection basis)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if self.alpha_warmup_epochs < 0:
            raise ConfigError("alpha_warmup_epochs must be >= 0")
        self.regularizer = replace(self.regularizer, alpha=self.alpha)  # single source
        self.regularizer.validate()
        return self

    def to_dict(self) -> dict:
        d = {
            "arch": self.arch.to_dict(),
            "dataset": self.dataset.to_dict(),
            "alpha": self.alpha,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "anneal_epochs": list(self.anneal_epochs),
            "anneal_factor": self.anneal_factor,
            "seed": self.seed,
            "val_metric": self.val_metric,
            "grad_clip": self.grad_clip,
            "alpha_warmup_epochs": self.alpha_warmup_epochs,
            # TrainConfig.alpha is the single source for the regularizer scale
            "regularizer": {k: v for k, v in self.regularizer.to_dict().items()
                            if k != "alpha"},
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            arch = ArchConfig.from_dict(d["arch"])
            dataset = DatasetDescriptor.from_dict(d["dataset"])
        except KeyError as exc:
            raise ConfigError(f"config missing section: {exc}") from exc
        reg = d.get("regularizer", {})
        reg = dict(reg)
        reg.setdefault("alpha", d.get("alpha", 0.0))
        cfg = cls(
            arch=arch,
            dataset=dataset,
            alpha=float(d.get("alpha", 0.0)),
            epochs=int(d.get("epochs", 30)),
            batch_size=int(d.get("batch_size", 128)),
            lr=float(d.get("lr", 0.05)),
            momentum=float(d.get("momentum", 0.9)),
            weight_decay=float(d.get("weight_decay", 1e-4)),
            anneal_epochs=tuple(int(e) for e in d.get("anneal_epochs", (15, 25))),
            anneal_factor=float(d.get("anneal_factor", 0.1)),
            seed=int(d.get("seed", 0)),
            val_metric=d.get("val_metric", "accuracy"),
            grad_clip=None if d.get("grad_clip") is None else float(d["grad_clip"]),
            alpha_warmup_epochs=int(d.get("alpha_warmup_epochs", 0)),
            regularizer=RegularizerConfig.from_dict(reg),
        )
        cfg.regularizer.alpha = cfg.alpha
        return cfg.validate()

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:8]


@dataclass
class BootstrapCI:
    """Percentile bootstrap interval for a mean."""

    point: float
    lower: float
    upper: float
    level: float = 0.95
    resamples: int = 10_000

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "lower": self.lower,
            "upper": self.upper,
            "level": self.level,
            "resamples": self.resamples,
        }


def bootstrap_ci(values, level: float = 0.95, resamples: int = 10_000,
                 seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap of the mean: resample with replacement, take quantiles."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empty input")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(resamples, vals.size))
    means = vals[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    return BootstrapCI(
        point=float(vals.mean()),
        lower=float(np.quantile(means, tail)),
        upper=float(np.quantile(means, 1.0 - tail)),
        level=level,
        resamples=resamples,
    )


# ------------------------------------------------------------------ splitting


def split_dataset(descriptor: DatasetDescriptor, seed: int,
                  dataset: Optional[Dataset] = None):
    """(train, val, test) ImageBatches; validation drawn from the pool per seed.

    The test set is never touched. per_class policy draws val_count //
    num_classes samples from every class; fixed_count draws val_count
    uniformly. Identical (descriptor, seed) pairs give identical splits.
    """
    descriptor.validate()
    if dataset is None:
        dataset = load_dataset(descriptor)
    pool, test = dataset.train_pool, dataset.test
    rng = np.random.default_rng([int(seed), 0x5E1E])
    n = len(pool)
    if descriptor.val_count >= n:
        raise ConfigError(f"val_count {descriptor.val_count} >= pool size {n}")
    if descriptor.split_policy == "per_class":
        per_class = descriptor.val_count // descriptor.num_classes
        val_idx = []
        for c in range(descriptor.num_classes):
            members = np.flatnonzero(pool.labels == c)
            if members.size < per_class + 1:
                raise ConfigError(
                    f"class {c} has {members.size} pool samples, "
                    f"needs > {per_class} for the validation draw"
                )
            val_idx.append(rng.choice(members, size=per_class, replace=False))
        val_idx = np.sort(np.concatenate(val_idx))
    else:
        val_idx = np.sort(rng.choice(n, size=descriptor.val_count, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[val_idx] = True
    train = pool.subset(~mask)
    val = pool.subset(mask)
    return train, val, test


# ------------------------------------------------------------------ records


@dataclass
class RunRecord:
    """One training run: config, metric traces, checkpoint, evaluations."""

    run_id: str
    config: TrainConfig
    status: str                      # "completed" | "diverged" | "failed"
    epochs: list                     # dicts: epoch, lr, train_loss, val_accuracy,
                                     #        train_si, regularizer_skips
    best_epoch: Optional[int]
    best_val_accuracy: Optional[float]
    test_accuracy: Optional[float]
    selectivity: Optional[dict]      # SelectivityReport dict over the clean test set
    evaluations: dict = field(default_factory=dict)
    error: Optional[str] = None
    run_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config.to_dict(),
            "status": self.status,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "test_accuracy": self.test_accuracy,
            "selectivity": self.selectivity,
            "evaluations": self.evaluations,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict, run_dir: Optional[str] = None) -> "RunRecord":
        return cls(
            run_id=d["run_id"],
            config=TrainConfig.from_dict(d["config"]),
            status=d["status"],
            epochs=d["epochs"],
            best_epoch=d["best_epoch"],
            best_val_accuracy=d["best_val_accuracy"],
            test_accuracy=d["test_accuracy"],
            selectivity=d["selectivity"],
            evaluations=d.get("evaluations", {}),
            error=d.get("error"),
            run_dir=run_dir,
        )

    @property
    def checkpoint_path(self) -> Optional[Path]:
        if self.run_dir is None:
            return None
        path = Path(self.run_dir) / CHECKPOINT_FILENAME
        return path if path.exists() else None

    def load_model(self) -> ModelAdapter:
        if self.status != "completed":
            raise DivergedRunError(f"run {self.run_id} is {self.status}, refusing to evaluate")
        path = self.checkpoint_path
        if path is None:
            raise FileNotFoundError(f"run {self.run_id} has no checkpoint")
        return load_checkpoint(path)


def validate_record(d: dict) -> None:
    """Schema check for a persisted record; raises ValueError on violation."""
    required = {
        "run_id": str, "config": dict, "status": str, "epochs": list,
        "evaluations": dict,
    }
    for key, typ in required.items():
        if key not in d:
            raise ValueError(f"record missing field: {key}")
        if not isinstance(d[key], typ):
            raise ValueError(f"record field {key} must be {typ.__name__}")
    if d["status"] not in ("completed", "diverged", "failed"):
        raise ValueError(f"bad status: {d['status']!r}")
    for row in d["epochs"]:
        for key in ("epoch", "lr", "train_loss", "val_accuracy"):
            if key not in row:
                raise ValueError(f"epoch row missing {key}")
    if d["status"] == "completed":
        if d.get("best_epoch") is None or d.get("test_accuracy") is None:
            raise ValueError("completed record needs best_epoch and test_accuracy")
        if not isinstance(d.get("selectivity"), dict):
            raise ValueError("completed record needs a selectivity report")
    TrainConfig.from_dict(d["config"])


def write_record(record: RunRecord, run_dir) -> None:
    """Atomic record write: temp file then rename, so record.json stays valid."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(record.to_dict(), indent=2, sort_keys=True)
    fd, tmp = tempfile.mkstemp(dir=run_dir, prefix=".record-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, run_dir / RECORD_FILENAME)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    record.run_dir = str(run_dir)


def read_record(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    with open(run_dir / RECORD_FILENAME) as fh:
        d = json.load(fh)
    validate_record(d)
    return RunRecord.from_dict(d, run_dir=str(run_dir))


def next_run_id(runs_root, config: TrainConfig) -> str:
    """Zero-padded counter plus short config hash; sorts naturally, collisions visible."""
    runs_root = Path(runs_root)
    count = len([p for p in runs_root.glob("*") if p.is_dir()]) if runs_root.exists() else 0
    return f"{count + 1:04d}-{config.config_hash()}"


# ------------------------------------------------------------------ training


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate in force during 1-indexed `epoch` (anneal applies at epoch start)."""
    drops = sum(1 for e in config.anneal_epochs if e <= epoch)
    return config.lr * config.anneal_factor ** drops


def alpha_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Regularizer scale during 1-indexed `epoch`, honoring the warmup ramp.

    With warmup w, epoch 1 trains at alpha/w, epoch w at alpha, so the
    regularizer only reaches full strength once features have formed.
    """
    if config.alpha_warmup_epochs <= 0:
        return config.alpha
    ramp = min(1.0, epoch / config.alpha_warmup_epochs)
    return config.alpha * ramp


def _epoch_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]  # last partial batch kept


def train(config: TrainConfig, run_dir=None, run_id: Optional[str] = None) -> RunRecord:
    """Run one training job; returns (and optionally persists) its RunRecord."""
    config.validate()
    run_id = run_id or f"local-{config.config_hash()}"
    dataset = load_dataset(config.dataset)
    train_b, val_b, test_b = split_dataset(config.dataset, config.seed, dataset=dataset)
    model = build_model(config.arch, config.seed)
    optimizer = torch.optim.SGD(
        model.module.parameters(), lr=config.lr,
        momentum=config.momentum, weight_decay=config.weight_decay,
    )
    shuffle_rng = np.random.default_rng([config.seed, 0x0DDE])
    reg = replace(config.regularizer, alpha=config.alpha)

    epoch_rows = []
    best_val, best_epoch = -1.0, None
    best_params: Optional[np.ndarray] = None
    diverged = False

    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        epoch_reg = replace(reg, alpha=alpha_at_epoch(config, epoch))
        model.module.train()
        losses, si_values, skips = [], [], 0
        for idx in _epoch_minibatches(len(train_b), config.batch_size, shuffle_rng):
            batch = train_b.subset(idx)
            x = model._to_tensor(batch.pixels)
            labels = torch.from_numpy(batch.labels)
            logits, acts = model.forward_tensors(x)
            loss, _, mu_si = regularized_loss_terms(
                logits, labels, acts, epoch_reg, num_classes=config.dataset.num_classes
            )
            if mu_si is None and epoch_reg.alpha == 0.0:
                with torch.no_grad():
                    mu_si = minibatch_network_selectivity(
                        {k: v.detach() for k, v in acts.items()}, labels,
                        config.dataset.num_classes, epoch_reg,
                    )
            if not torch.isfinite(loss):
                logger.warning("run %s diverged at epoch %d (loss=%r)", run_id, epoch, loss.item())
                diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.module.parameters(), config.grad_clip)
            optimizer.step()
            losses.append(float(loss.item()))
            if mu_si is not None:
                si_values.append(float(mu_si.item()))
            else:
                skips += 1
        if diverged:
            break
        val_acc = model.accuracy(val_b)
        epoch_rows.append({
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_accuracy": val_acc,
            "train_si": float(np.mean(si_values)) if si_values else None,
            "regularizer_skips": skips,
        })
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best_params = model.get_flat_params()

    status = "diverged" if diverged else "completed"
    test_acc = None
    sel_dict = None
    if best_params is not None:
        model.set_flat_params(best_params)
    if status == "completed" and best_params is not None:
        test_acc = model.accuracy(test_b)
        acts = model.activations(test_b)
        # the canonical report always uses the default analysis config, so
        # mu_SI stays comparable across runs whatever the training epsilon was
        sel = selectivity_report(acts, test_b.labels, config.dataset.num_classes,
                                 source="clean_test")
        sel_dict = sel.to_dict()

    record = RunRecord(
        run_id=run_id,
        config=config,
        status=status,
        epochs=epoch_rows,
        best_epoch=best_epoch,
        best_val_accuracy=None if best_epoch is None else best_val,
        test_accuracy=test_acc,
        selectivity=sel_dict,
        evaluations={},
    )
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if best_params is not None:
            model.save_checkpoint(run_dir / CHECKPOINT_FILENAME)
        write_record(record, run_dir)
    return record


def run_sweep(base_config: TrainConfig, alphas, seeds, runs_root) -> list:
    """One run per (alpha, seed); failures are recorded and the sweep continues."""
    alphas, seeds = list(alphas), list(seeds)
    if not alphas or not seeds:
        raise ConfigError("alphas and seeds must be non-empty")
    runs_root = Path(runs_root)
    runs_root.mkdir(parents=True, exist_ok=True)
    records = []
    for alpha in alphas:
        for seed in seeds:
            config = replace(base_config, alpha=float(alpha), seed=int(seed))
            config.regularizer = replace(config.regularizer, alpha=float(alpha))
            run_id = next_run_id(runs_root, config)
            run_dir = runs_root / run_id
            try:
                record = train(config, run_dir=run_dir, run_id=run_id)
            except Exception as exc:  # keep sweeping; the failure stays visible
                logger.exception("run %s failed", run_id)
                record = RunRecord(
                    run_id=run_id, config=config, status="failed", epochs=[],
                    best_epoch=None, best_val_accuracy=None, test_accuracy=None,
                    selectivity=None, evaluations={}, error=f"{type(exc).__name__}: {exc}",
                )
                write_record(record, run_dir)
            records.append(record)
    return records
