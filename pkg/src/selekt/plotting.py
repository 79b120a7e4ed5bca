"""Static figure emission from a report summary.

Six figure families, each a batch artifact with bootstrap CI bands:

  acc-vs-alpha     clean / corrupted-mean / normalized accuracy vs alpha
  acc-vs-eps       FGSM accuracy vs perturbation budget, one line per alpha
  acc-vs-steps     PGD accuracy vs optimization steps, one line per alpha
  jacobian-vs-alpha  mean Jacobian magnitude vs alpha
  dims-vs-layer    dimensionality fraction vs layer (clean or difference kinds)
  corruption-bars  per-corruption normalized accuracy grouped by alpha
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .attacks import EPSILON_GRID, AttackSpec
from .evals import DESK_EPSILON, DESK_PGD_STEP_SIZE, PGD_STEPS_GRID, attack_metric_key
from .exceptions import ConfigError

FIGURE_FAMILIES = (
    "acc-vs-alpha", "acc-vs-eps", "acc-vs-steps",
    "jacobian-vs-alpha", "dims-vs-layer", "corruption-bars",
)

DIFF_KINDS = ("clean", "corruption_diff", "adversarial_diff")


def _metric_series(summary, key):
    """(alphas, means, lowers, uppers) for one metric across groups."""
    alphas, means, lowers, uppers = [], [], [], []
    for group in summary["groups"]:
        stats = group["metrics"].get(key)
        if stats is None:
            continue
        alphas.append(group["alpha"])
        means.append(stats["mean"])
        lowers.append(stats["lower"])
        uppers.append(stats["upper"])
    if not alphas:
        raise ConfigError(f"summary is missing metric: {key}")
    return np.array(alphas), np.array(means), np.array(lowers), np.array(uppers)


def _line_with_band(ax, x, mean, lower, upper, label=None, color=None):
    line, = ax.plot(x, mean, marker="o", label=label, color=color)
    ax.fill_between(x, lower, upper, alpha=0.2, color=line.get_color())


def _plot_vs_alpha(summary, keys, titles, ylabel, path):
    fig, axes = plt.subplots(1, len(keys), figsize=(4.2 * len(keys), 3.4), squeeze=False)
    for ax, key, title in zip(axes[0], keys, titles):
        x, m, lo, hi = _metric_series(summary, key)
        _line_with_band(ax, x, m, lo, hi)
        ax.set_xlabel("regularization scale alpha")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _per_alpha_curves(summary, keys, x_values, xlabel, ylabel, title, path, log_x=False):
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    plotted = False
    for group in summary["groups"]:
        xs, means, lowers, uppers = [], [], [], []
        for x, key in zip(x_values, keys):
            stats = group["metrics"].get(key)
            if stats is None:
                continue
            xs.append(x)
            means.append(stats["mean"])
            lowers.append(stats["lower"])
            uppers.append(stats["upper"])
        if not xs:
            continue
        _line_with_band(ax, np.array(xs), np.array(means), np.array(lowers),
                        np.array(uppers), label=f"alpha={group['alpha']:g}")
        plotted = True
    if not plotted:
        raise ConfigError(f"summary is missing metrics: {keys}")
    if log_x:
        ax.set_xscale("symlog", linthresh=min(v for v in x_values if v > 0))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_corruption_bars(summary, path):
    names = sorted({
        key.split(":", 1)[1]
        for group in summary["groups"]
        for key in group["metrics"]
        if key.startswith("corrupt_norm:")
    })
    if not names:
        raise ConfigError("summary is missing metric: corrupt_norm:*")
    fig, ax = plt.subplots(figsize=(max(5.0, 1.1 * len(names)), 3.8))
    groups = summary["groups"]
    width = 0.8 / len(groups)
    xs = np.arange(len(names))
    for gi, group in enumerate(groups):
        means = [group["metrics"].get(f"corrupt_norm:{n}", {}).get("mean", np.nan) for n in names]
        errs_lo = [
            group["metrics"].get(f"corrupt_norm:{n}", {}).get("lower", np.nan) for n in names
        ]
        errs_hi = [
            group["metrics"].get(f"corrupt_norm:{n}", {}).get("upper", np.nan) for n in names
        ]
        offset = (gi - (len(groups) - 1) / 2) * width
        yerr = np.array([np.array(means) - np.array(errs_lo),
                         np.array(errs_hi) - np.array(means)])
        ax.bar(xs + offset, means, width=width, yerr=yerr, capsize=2,
               label=f"alpha={group['alpha']:g}")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("normalized corrupted accuracy")
    ax.set_title("per-corruption robustness (mean over severities)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_figure(summary: dict, family: str, out_dir, kind: str = None) -> list:
    """Emit one figure family; returns the written paths."""
    if family not in FIGURE_FAMILIES:
        raise ConfigError(f"unknown figure family: {family!r} (choose from {FIGURE_FAMILIES})")
    if not summary.get("groups"):
        raise ConfigError("summary has no run groups to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if family == "acc-vs-alpha":
        path = out_dir / "fig_acc_vs_alpha.png"
        _plot_vs_alpha(
            summary,
            ["clean_acc", "corrupt_acc_mean", "corrupt_acc_norm_mean"],
            ["clean test accuracy", "corrupted accuracy (all types x severities)",
             "normalized corrupted accuracy"],
            "accuracy", path,
        )
        written.append(path)
    elif family == "acc-vs-eps":
        keys = [attack_metric_key(AttackSpec("fgsm", eps)) for eps in EPSILON_GRID]
        path = out_dir / "fig_acc_vs_eps.png"
        _per_alpha_curves(summary, keys, EPSILON_GRID, "epsilon (L-inf budget)",
                          "test accuracy", "FGSM accuracy vs budget", path)
        written.append(path)
    elif family == "acc-vs-steps":
        keys = [
            attack_metric_key(AttackSpec("pgd", DESK_EPSILON, DESK_PGD_STEP_SIZE, steps))
            for steps in PGD_STEPS_GRID
        ]
        path = out_dir / "fig_acc_vs_steps.png"
        _per_alpha_curves(summary, keys, PGD_STEPS_GRID, "PGD steps",
                          "test accuracy", "PGD accuracy vs optimization steps", path)
        written.append(path)
    elif family == "jacobian-vs-alpha":
        path = out_dir / "fig_jacobian_vs_alpha.png"
        _plot_vs_alpha(summary, ["jacobian_fro_mean"],
                       ["input-output Jacobian magnitude"], "Frobenius norm", path)
        written.append(path)
    elif family == "dims-vs-layer":
        kinds = (kind,) if kind else DIFF_KINDS
        layer_ids = summary.get("dims_layers") or []
        if not layer_ids:
            raise ConfigError("summary is missing metric: dims:* (no dims evaluations)")
        for k in kinds:
            if k not in DIFF_KINDS:
                raise ConfigError(f"unknown dims kind: {k!r} (choose from {DIFF_KINDS})")
            keys = [f"dims:{k}:{lid}" for lid in layer_ids]
            path = out_dir / f"fig_dims_vs_layer_{k}.png"
            _per_alpha_curves(summary, keys, list(range(1, len(layer_ids) + 1)),
                              "layer", "fraction of dimensionality",
                              f"dimensionality by layer ({k.replace('_', ' ')})", path)
            written.append(path)
    elif family == "corruption-bars":
        path = out_dir / "fig_corruption_bars.png"
        _plot_corruption_bars(summary, path)
        written.append(path)
    return written
