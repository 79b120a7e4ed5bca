"""End-to-end CLI behavior: commands, exit codes, file artifacts."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from selekt.cli import main
from selekt.harness import read_record

CONFIG = {
    "arch": {"family": "micro_cnn", "num_classes": 10, "in_channels": 3,
             "image_size": 16, "conv_widths": [6, 8], "conv_strides": [1, 2]},
    "dataset": {"source": "synthetic", "num_classes": 10, "image_size": 16,
                "train_count": 300, "val_count": 50, "test_count": 120,
                "split_policy": "per_class", "generation_seed": 11},
    "alpha": 0.0,
    "epochs": 3,
    "batch_size": 64,
    "lr": 0.05,
    "anneal_epochs": [2],
    "anneal_factor": 0.1,
    "seed": 0,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "desk.json"
    path.write_text(json.dumps(CONFIG))
    return path


def run_dirs(runs: Path):
    return sorted(p for p in runs.iterdir() if p.is_dir())


def test_train_happy_path(config_path, tmp_path, capsys):
    runs = tmp_path / "runs"
    assert main(["train", "--config", str(config_path), "--alpha", "-1", "--seed", "3",
                 "--out", str(runs)]) == 0
    (run_dir,) = run_dirs(runs)
    assert (run_dir / "record.json").exists()
    assert (run_dir / "checkpoint.bin").exists()
    record = read_record(run_dir)
    assert record.config.alpha == -1.0
    assert record.config.seed == 3
    assert record.status == "completed"


def test_train_invalid_flag_value_exits_one(config_path, tmp_path, capsys):
    code = main(["train", "--config", str(config_path), "--alpha", "notanumber",
                 "--out", str(tmp_path / "runs")])
    assert code == 1
    err = capsys.readouterr().err
    assert "--alpha" in err


def test_train_missing_config_exits_one(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "runs")])
    assert code == 1
    assert "error: config:" in capsys.readouterr().err


def test_train_bad_config_field_names_it(config_path, tmp_path, capsys):
    bad = dict(CONFIG, epochs=0)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "runs")]) == 1
    assert "epochs" in capsys.readouterr().err


def test_train_replay_is_deterministic(config_path, tmp_path):
    runs = tmp_path / "runs"
    for _ in range(2):
        assert main(["train", "--config", str(config_path), "--seed", "5",
                     "--out", str(runs)]) == 0
    first, second = run_dirs(runs)
    a, b = read_record(first), read_record(second)
    assert a.run_id != b.run_id
    assert a.epochs == b.epochs
    assert a.test_accuracy == b.test_accuracy


def test_train_materialize_writes_dataset(config_path, tmp_path):
    runs = tmp_path / "runs"
    assert main(["train", "--config", str(config_path), "--materialize",
                 "--out", str(runs)]) == 0
    (run_dir,) = run_dirs(runs)
    assert (run_dir / "dataset" / "train_images.npy").exists()
    assert (run_dir / "dataset" / "test_labels.npy").exists()


def test_diverged_run_exits_two_and_refuses_evaluation(tmp_path, capsys):
    bad = dict(CONFIG, lr=1e9, epochs=2, anneal_epochs=[])
    path = tmp_path / "diverge.json"
    path.write_text(json.dumps(bad))
    runs = tmp_path / "runs"
    assert main(["train", "--config", str(path), "--out", str(runs)]) == 2
    (run_dir,) = run_dirs(runs)
    record = read_record(run_dir)
    assert record.status == "diverged"
    code = main(["evaluate", "--run", record.run_id, "--kind", "attack",
                 "--runs", str(runs)])
    assert code == 2
    assert "diverged run" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """sweep -> evaluate (all kinds) -> report, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    config_path = root / "desk.json"
    config_path.write_text(json.dumps(CONFIG))
    runs = root / "runs"
    # --alphas=-1,1 (equals form) keeps argparse from reading the negative
    # value as an option name
    assert main(["sweep", "--config", str(config_path), "--alphas=-1,1",
                 "--seeds", "0,1", "--out", str(runs)]) == 0
    for run_dir in run_dirs(runs):
        run_id = run_dir.name
        for kind, extra in (
            ("attack", ["--method", "pgd", "--eps", "0.0157", "--steps", "3",
                        "--step-size", "0.008"]),
            ("corrupt", []),
            ("dims", ["--samples", "80"]),
            ("jacobian", ["--samples", "40"]),
        ):
            assert main(["evaluate", "--run", run_id, "--kind", kind,
                         "--runs", str(runs)] + extra) == 0
    summary = root / "summary.json"
    assert main(["report", "--runs", str(runs), "--out", str(summary)]) == 0
    return root, runs, summary


def test_sweep_creates_grid(pipeline):
    _, runs, _ = pipeline
    dirs = run_dirs(runs)
    assert len(dirs) == 4
    alphas = sorted(read_record(d).config.alpha for d in dirs)
    assert alphas == [-1.0, -1.0, 1.0, 1.0]


def test_evaluate_attaches_all_kinds(pipeline):
    _, runs, _ = pipeline
    record = read_record(run_dirs(runs)[0])
    assert set(record.evaluations) == {"attack", "corrupt", "dims", "jacobian"}
    attack_rows = record.evaluations["attack"]["rows"]
    assert any(r["method"] == "pgd" and r["steps"] == 3 for r in attack_rows)
    assert set(record.evaluations["dims"]) == {"clean", "corruption_diff", "adversarial_diff"}


def test_explicit_attack_row_appends(pipeline):
    _, runs, _ = pipeline
    run_id = run_dirs(runs)[0].name
    before = len(read_record(run_dirs(runs)[0]).evaluations["attack"]["rows"])
    assert main(["evaluate", "--run", run_id, "--kind", "attack", "--method", "fgsm",
                 "--eps", "0.01", "--runs", str(runs)]) == 0
    after = len(read_record(run_dirs(runs)[0]).evaluations["attack"]["rows"])
    assert after == before + 1


def test_report_csv_reloads_to_json_values(pipeline):
    root, _, summary = pipeline
    data = json.loads(summary.read_text())
    csv_path = root / "summary.csv"
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    by_group = {g["alpha"]: g["metrics"] for g in data["groups"]}
    for row in rows:
        stats = by_group[float(row["alpha"])][row["metric"]]
        assert float(row["mean"]) == stats["mean"]
        assert float(row["lower"]) == stats["lower"]
        assert float(row["upper"]) == stats["upper"]


def test_report_contains_trends_and_attrition(pipeline):
    _, _, summary = pipeline
    data = json.loads(summary.read_text())
    assert {t["name"] for t in data["trends"]} >= {
        "corruption_robustness", "jacobian_stability", "early_layer_dims",
    }
    assert data["attrition"]["completed"] == 4


def test_report_empty_runs_dir_exits_one(tmp_path, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    assert main(["report", "--runs", str(empty), "--out", str(tmp_path / "s.json")]) == 1


def test_plot_families(pipeline):
    root, _, summary = pipeline
    out = root / "figs"
    for fig in ("acc-vs-alpha", "jacobian-vs-alpha", "dims-vs-layer", "corruption-bars"):
        assert main(["plot", "--summary", str(summary), "--fig", fig,
                     "--out", str(out)]) == 0
    assert (out / "fig_corruption_bars.png").exists()
    assert (out / "fig_dims_vs_layer_adversarial_diff.png").exists()


def test_plot_missing_metric_named(pipeline, capsys):
    root, _, summary = pipeline
    # the pipeline never ran an fgsm epsilon sweep, so acc-vs-eps lacks metrics
    code = main(["plot", "--summary", str(summary), "--fig", "acc-vs-eps",
                 "--out", str(root / "figs2")])
    assert code == 1
    assert "attack:fgsm" in capsys.readouterr().err


def test_plot_unknown_family_exits_one(pipeline, capsys):
    _, _, summary = pipeline
    assert main(["plot", "--summary", str(summary), "--fig", "acc-vs-everything"]) == 1


def test_env_var_runs_root(config_path, tmp_path, monkeypatch):
    runs = tmp_path / "env_runs"
    monkeypatch.setenv("SELEKT_RUNS_DIR", str(runs))
    assert main(["train", "--config", str(config_path)]) == 0
    assert run_dirs(runs)


def test_unknown_eval_kind_exits_one(pipeline, capsys):
    _, runs, _ = pipeline
    run_id = run_dirs(runs)[0].name
    code = main(["evaluate", "--run", run_id, "--kind", "telepathy",
                 "--runs", str(runs)])
    assert code == 1
