"""Per-alpha aggregation of run records with bootstrap CIs and trend checks.

The summary groups completed runs by regularization scale alpha, bootstraps a
95% CI for every metric's seed mean, and evaluates the four directional
trends the sweep is designed to probe:

  corruption_robustness   corrupted accuracy higher at the most negative alpha
  adversarial_robustness  desk PGD-25 accuracy higher at the most positive alpha
  jacobian_stability      Jacobian magnitude higher at the most negative alpha
  early_layer_dims        early-layer adversarial-difference dimensionality
                          above the corruption-difference one at matched alpha

A trend's status is "holds" on seed means, "reversed_ci_separated" when the
direction flips with disjoint CIs, and "inconclusive_at_desk_scale"
otherwise. Floats written to CSV use repr, so re-parsing reproduces the JSON
values exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .evals import DESK_PGD, REPRESENTATIVE_PGD, attack_metric_key
from .exceptions import ConfigError
from .harness import RunRecord, bootstrap_ci

TREND_ADV_METRIC = attack_metric_key(DESK_PGD)


def run_metrics(record: RunRecord) -> dict:
    """Flatten one completed run into scalar metric columns."""
    m = {}
    if record.test_accuracy is not None:
        m["clean_acc"] = float(record.test_accuracy)
    if record.selectivity:
        m["network_si"] = float(record.selectivity["network_si"])
    corrupt = record.evaluations.get("corrupt")
    if corrupt:
        m["corrupt_acc_mean"] = float(corrupt["mean_accuracy"])
        m["corrupt_acc_norm_mean"] = float(corrupt["mean_normalized_accuracy"])
        for name, acc in corrupt["per_corruption_mean"].items():
            m[f"corrupt_acc:{name}"] = float(acc)
        for name, acc in corrupt["per_corruption_norm_mean"].items():
            m[f"corrupt_norm:{name}"] = float(acc)
    attack = record.evaluations.get("attack")
    if attack:
        m["attack_clean_acc"] = float(attack["clean_accuracy"])
        for row in attack["rows"]:
            from .attacks import AttackSpec

            key = attack_metric_key(AttackSpec.from_dict(row))
            m[key] = float(row["accuracy"])
    jac = record.evaluations.get("jacobian")
    if jac:
        m[f"jacobian_{jac['norm_kind']}_mean"] = float(jac["mean"])
    dims = record.evaluations.get("dims")
    if dims:
        for kind, report in dims.items():
            for layer in report["layers"]:
                m[f"dims:{kind}:{layer['layer_id']}"] = float(layer["fraction"])
    return m


def _dims_layer_order(records) -> list:
    for record in records:
        dims = record.evaluations.get("dims")
        if dims:
            report = next(iter(dims.values()))
            return [l["layer_id"] for l in report["layers"]]
    return []


def _group_stats(values, level, resamples, seed):
    ci = bootstrap_ci(values, level=level, resamples=resamples, seed=seed)
    return {
        "mean": ci.point,
        "lower": ci.lower,
        "upper": ci.upper,
        "n": len(values),
        "values": [float(v) for v in values],
    }


def _trend(name, description, low_stats, high_stats, alpha_low, alpha_high,
           expect_low_greater: bool) -> dict:
    if low_stats is None or high_stats is None:
        return {"name": name, "description": description, "status": "missing_metrics"}
    lo, hi = low_stats, high_stats
    diff = lo["mean"] - hi["mean"] if expect_low_greater else hi["mean"] - lo["mean"]
    holds = diff > 0
    separated = lo["lower"] > hi["upper"] or hi["lower"] > lo["upper"]
    if holds:
        status = "holds"
    elif separated:
        status = "reversed_ci_separated"
    else:
        status = "inconclusive_at_desk_scale"
    return {
        "name": name,
        "description": description,
        "alpha_low": alpha_low,
        "alpha_high": alpha_high,
        "low": lo,
        "high": hi,
        "direction_holds": holds,
        "ci_separated": separated,
        "status": status,
    }


def _early_layer_trend(groups, layer_order) -> dict:
    if not layer_order:
        return {"name": "early_layer_dims", "status": "missing_metrics"}
    early = layer_order[0]
    adv_key = f"dims:adversarial_diff:{early}"
    corr_key = f"dims:corruption_diff:{early}"
    per_alpha = []
    for g in groups:
        adv, corr = g["metrics"].get(adv_key), g["metrics"].get(corr_key)
        if adv is None or corr is None:
            continue
        holds = adv["mean"] > corr["mean"]
        separated = corr["lower"] > adv["upper"] or adv["lower"] > corr["upper"]
        per_alpha.append({
            "alpha": g["alpha"],
            "adversarial": adv,
            "corruption": corr,
            "direction_holds": holds,
            "ci_separated": separated,
        })
    if not per_alpha:
        return {"name": "early_layer_dims", "status": "missing_metrics"}
    if all(row["direction_holds"] for row in per_alpha):
        status = "holds"
    elif any(not row["direction_holds"] and row["ci_separated"] for row in per_alpha):
        status = "reversed_ci_separated"
    else:
        status = "inconclusive_at_desk_scale"
    return {
        "name": "early_layer_dims",
        "description": "early-layer adversarial-diff dimensionality exceeds corruption-diff",
        "early_layer": early,
        "per_alpha": per_alpha,
        "status": status,
    }


def build_summary(records, level: float = 0.95, resamples: int = 10_000,
                  bootstrap_seed: int = 0) -> dict:
    """Aggregate a sweep's records into the per-alpha summary structure."""
    records = list(records)
    completed = [r for r in records if r.status == "completed"]
    if not completed:
        raise ConfigError("no completed runs to report")
    alphas = sorted({r.config.alpha for r in completed})
    groups = []
    for alpha in alphas:
        members = [r for r in completed if r.config.alpha == alpha]
        per_run = [(r, run_metrics(r)) for r in members]
        keys = sorted({k for _, m in per_run for k in m})
        metrics = {}
        for key in keys:
            values = [m[key] for _, m in per_run if key in m]
            metrics[key] = _group_stats(values, level, resamples, bootstrap_seed)
        groups.append({
            "alpha": alpha,
            "n_runs": len(members),
            "seeds": sorted(r.config.seed for r in members),
            "run_ids": [r.run_id for r in members],
            "metrics": metrics,
        })
    lo_group, hi_group = groups[0], groups[-1]

    def stat(group, key):
        return group["metrics"].get(key)

    trends = [
        _trend(
            "corruption_robustness",
            "corrupted accuracy is higher at the most negative alpha",
            stat(lo_group, "corrupt_acc_mean"), stat(hi_group, "corrupt_acc_mean"),
            lo_group["alpha"], hi_group["alpha"], expect_low_greater=True,
        ),
        _trend(
            "adversarial_robustness",
            "desk PGD-25 accuracy is higher at the most positive alpha",
            stat(lo_group, TREND_ADV_METRIC), stat(hi_group, TREND_ADV_METRIC),
            lo_group["alpha"], hi_group["alpha"], expect_low_greater=False,
        ),
        _trend(
            "jacobian_stability",
            "Jacobian magnitude is higher at the most negative alpha",
            stat(lo_group, "jacobian_fro_mean"), stat(hi_group, "jacobian_fro_mean"),
            lo_group["alpha"], hi_group["alpha"], expect_low_greater=True,
        ),
        _early_layer_trend(groups, _dims_layer_order(completed)),
    ]
    return {
        "alphas": alphas,
        "groups": groups,
        "trends": trends,
        "dims_layers": _dims_layer_order(completed),
        "attrition": {
            "completed": len(completed),
            "diverged": sum(1 for r in records if r.status == "diverged"),
            "failed": sum(1 for r in records if r.status == "failed"),
        },
        "bootstrap": {"level": level, "resamples": resamples, "seed": bootstrap_seed},
    }


# ------------------------------------------------------------------ writers


def write_summary(summary: dict, records, out_path) -> dict:
    """Write summary JSON plus CSV flattenings; returns the paths written."""
    out_path = Path(out_path)
    base = out_path.with_suffix("") if out_path.suffix == ".json" else out_path
    json_path = base.with_suffix(".json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    csv_path = base.parent / (base.name + ".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "alpha", "n", "mean", "lower", "upper"])
        for group in summary["groups"]:
            for key in sorted(group["metrics"]):
                s = group["metrics"][key]
                writer.writerow([key, repr(group["alpha"]), s["n"],
                                 repr(s["mean"]), repr(s["lower"]), repr(s["upper"])])

    runs_path = base.parent / (base.name + "_runs.csv")
    completed = [r for r in records if r.status == "completed"]
    per_run = [(r, run_metrics(r)) for r in completed]
    extra_cols = sorted({k for _, m in per_run for k in m if k not in ("clean_acc", "network_si")})
    with open(runs_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "alpha", "seed", "best_epoch", "clean_acc", "network_si"]
                        + extra_cols)
        for r, m in per_run:
            row = [r.run_id, repr(r.config.alpha), r.config.seed, r.best_epoch,
                   repr(m.get("clean_acc", "")), repr(m.get("network_si", ""))]
            row += [repr(m[k]) if k in m else "" for k in extra_cols]
            writer.writerow(row)

    corr_path = base.parent / (base.name + "_corruptions.csv")
    with open(corr_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "alpha", "seed", "corruption", "severity",
                         "accuracy", "normalized_accuracy"])
        for r in completed:
            corrupt = r.evaluations.get("corrupt")
            if not corrupt:
                continue
            for e in corrupt["entries"]:
                writer.writerow([r.run_id, repr(r.config.alpha), r.config.seed,
                                 e["name"], e["severity"],
                                 repr(e["accuracy"]), repr(e["normalized_accuracy"])])
    return {"json": json_path, "csv": csv_path, "runs": runs_path, "corruptions": corr_path}


def load_summary(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
