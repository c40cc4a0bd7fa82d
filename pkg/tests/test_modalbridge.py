import csv
import json

import pytest
import yaml

import modalbridge
import transfer_pipeline
from experiment_config import generator_options, load_config
from modalbridge import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main, verify_manifest
from paired_dataset import GeneratorConfig, content_digest, generate_from_config, read_manifest

RUN_FILES = ["config.yaml", "curves_feature_supervised.svg", "manifest.json", "metrics_feature_supervised.csv",
             "summary.json"]


def _summary(out):
    return json.loads((out / "summary.json").read_text())


def _phases(path):
    with open(path, newline="") as f:
        return [row["phase"] for row in csv.DictReader(f)]


def _run(config, out, *extra):
    return main(["run", "--config", str(config), "--out", str(out), "--generate", *extra])


# ─────────────────────────────────────────────────────────────────────────────
# generate
# ─────────────────────────────────────────────────────────────────────────────

def test_generate_writes_dataset_with_expected_digest(config_file, tmp_path):
    path = config_file()
    assert main(["generate", "--config", str(path)]) == EXIT_OK
    config = load_config(path)
    expected = content_digest(generate_from_config(config["data.seed"], GeneratorConfig(**generator_options(config))))
    assert read_manifest(tmp_path / "data")["content_digest"] == expected


def test_generate_twice_needs_force(config_file, tmp_path, capsys):
    path = config_file()
    out = tmp_path / "elsewhere"
    assert main(["generate", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert main(["generate", "--config", str(path), "--out", str(out)]) == EXIT_INVALID
    assert "--force" in capsys.readouterr().err
    assert main(["generate", "--config", str(path), "--out", str(out), "--force"]) == EXIT_OK


def test_missing_seed_is_reported(tmp_path, capsys):
    path = tmp_path / "noseed.yaml"
    path.write_text(yaml.safe_dump({"experiment.k": 2}))
    assert main(["generate", "--config", str(path)]) == EXIT_INVALID
    assert "data.seed" in capsys.readouterr().err


def test_invalid_config_value(config_file, tmp_path, capsys):
    path = config_file(**{"experiment.loss": "huber"})
    assert _run(path, tmp_path / "out") == EXIT_INVALID
    assert "experiment.loss" in capsys.readouterr().err


# ─────────────────────────────────────────────────────────────────────────────
# run
# ─────────────────────────────────────────────────────────────────────────────

def test_run_writes_manifested_outputs(config_file, tmp_path):
    out = tmp_path / "run"
    assert _run(config_file(), out) == EXIT_OK
    assert sorted(p.name for p in out.iterdir() if p.is_file()) == RUN_FILES
    assert verify_manifest(out) == []
    summary = _summary(out)
    assert summary["status"] == "completed" and summary["error"] is None
    assert summary["checkpoints"] == json.loads((out / "manifest.json").read_text())["checkpoints"]
    assert "checkpoints/seed0/feature_supervised/classifier.ckpt" in summary["checkpoints"]
    assert summary["data_digest"] == read_manifest(tmp_path / "data")["content_digest"]


def test_summary_mean_matches_eval_rows(config_file, tmp_path):
    out = tmp_path / "run"
    assert _run(config_file(**{"experiment.seeds": [0, 1]}), out) == EXIT_OK
    with open(out / "metrics_feature_supervised.csv", newline="") as f:
        finals = [float(row["accuracy"]) for row in csv.DictReader(f) if row["phase"] == "eval"]
    assert len(finals) == 2
    assert _summary(out)["mean"] == pytest.approx(sum(finals) / 2)


def test_rerun_refused_without_force(config_file, tmp_path, capsys):
    path, out = config_file(), tmp_path / "run"
    assert _run(path, out) == EXIT_OK
    (out / "checkpoints" / "stale.ckpt").write_bytes(b"x")
    assert _run(path, out) == EXIT_INVALID
    assert "already holds results" in capsys.readouterr().err
    assert _run(path, out, "--force") == EXIT_OK
    assert not (out / "checkpoints" / "stale.ckpt").exists()


def test_baseline_flag_runs_from_scratch_only(config_file, tmp_path):
    out = tmp_path / "run"
    assert _run(config_file(), out, "--baseline", "from_scratch") == EXIT_OK
    assert set(_phases(out / "metrics_from_scratch.csv")) == {"finetune", "eval"}
    assert not (out / "metrics_feature_supervised.csv").exists()


@pytest.mark.parametrize("overrides", [
    {},
    {"experiment.target_modality": "skeleton", "experiment.source_modality": "rgb"},
], ids=["depth", "skeleton"])
def test_deterministic_runs_are_byte_identical(config_file, tmp_path, monkeypatch, overrides):
    monkeypatch.setenv("MODALBRIDGE_DETERMINISTIC", "1")
    path = config_file(**overrides)
    first, second = tmp_path / "a", tmp_path / "b"
    assert _run(path, first) == EXIT_OK
    assert _run(path, second) == EXIT_OK
    for name in RUN_FILES:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_failed_phase_keeps_partial_metrics(config_file, tmp_path, monkeypatch):
    def broken_transfer(*args, **kwargs):
        raise RuntimeError("transfer diverged")

    monkeypatch.setattr(transfer_pipeline, "run_transfer", broken_transfer)
    out = tmp_path / "run"
    assert _run(config_file(), out) == EXIT_FAILED
    summary = _summary(out)
    assert summary["status"] == "failed"
    assert "transfer diverged" in summary["error"]
    assert _phases(out / "metrics_feature_supervised.csv") == ["teacher", "teacher"]
    assert verify_manifest(out) == []


def test_skeleton_run(config_file, tmp_path):
    path = config_file(**{"experiment.target_modality": "skeleton", "experiment.source_modality": "rgb"})
    out = tmp_path / "run"
    assert _run(path, out) == EXIT_OK
    assert _summary(out)["config"]["experiment.eval_mode"] == "whole_sequence"


def test_mismatched_dataset_refused(config_file, tmp_path, capsys):
    assert main(["generate", "--config", str(config_file())]) == EXIT_OK
    changed = config_file(**{"data.seed": 4})
    assert main(["run", "--config", str(changed), "--out", str(tmp_path / "run")]) == EXIT_INVALID
    assert "different data" in capsys.readouterr().err


# ─────────────────────────────────────────────────────────────────────────────
# ablate
# ─────────────────────────────────────────────────────────────────────────────

def _grid(tmp_path, base, axes):
    path = tmp_path / "grid.yaml"
    path.write_text(yaml.safe_dump({"base_config": base.name, "axes": axes}))
    return path


def test_ablate_runs_one_cell_per_combination(config_file, tmp_path):
    grid = _grid(tmp_path, config_file(), {"loss": ["cosine", "mse"], "k": [1, 2]})
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", str(grid), "--out", str(out), "--generate"]) == EXIT_OK
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "loss,k,mean,variance,status"
    assert len(rows) == 1 + 4
    assert len(list((out / "cells").iterdir())) == 4
    table = (out / "ablation.md").read_text()
    assert "| loss | k=1 | k=2 |" in table
    assert len(list((out / "teachers").glob("*.ckpt"))) == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["cells"]) == 4


def test_ablate_cell_matches_standalone_run(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("MODALBRIDGE_DETERMINISTIC", "1")
    grid = _grid(tmp_path, config_file(), {"loss": ["mse"]})
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", str(grid), "--out", str(out), "--generate"]) == EXIT_OK
    standalone = tmp_path / "run"
    assert main(["run", "--config", str(config_file(**{"experiment.loss": "mse"})), "--out", str(standalone)]) == EXIT_OK
    cell = out / "cells" / "loss-mse"
    assert _summary(cell)["finals"] == _summary(standalone)["finals"]
    name = "metrics_feature_supervised.csv"
    assert (cell / name).read_bytes() == (standalone / name).read_bytes()


def test_ablate_invalid_value_fails_before_running(config_file, tmp_path, capsys):
    grid = _grid(tmp_path, config_file(), {"loss": ["cosine", "huber"]})
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", str(grid), "--out", str(out), "--generate"]) == EXIT_INVALID
    assert "huber" in capsys.readouterr().err
    assert not out.exists()


def test_ablate_unknown_axis(config_file, tmp_path, capsys):
    grid = _grid(tmp_path, config_file(), {"epochs": [1, 2]})
    assert main(["ablate", "--config", str(grid), "--out", str(tmp_path / "ablate")]) == EXIT_INVALID
    assert "unknown axes" in capsys.readouterr().err


# ─────────────────────────────────────────────────────────────────────────────
# eval
# ─────────────────────────────────────────────────────────────────────────────

def test_eval_reproduces_run_accuracy(config_file, tmp_path):
    path, out = config_file(), tmp_path / "run"
    assert _run(path, out) == EXIT_OK
    checkpoint = out / "checkpoints" / "seed0" / "feature_supervised" / "classifier.ckpt"
    report = tmp_path / "eval.json"
    assert main(["eval", "--config", str(path), "--checkpoint", str(checkpoint), "--out", str(report)]) == EXIT_OK
    assert json.loads(report.read_text())["accuracy"] == _summary(out)["finals"]["0"]


def test_eval_missing_checkpoint(config_file, tmp_path):
    path = config_file()
    assert main(["generate", "--config", str(path)]) == EXIT_OK
    assert main(["eval", "--config", str(path), "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_INVALID


def test_version_flag(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert modalbridge.VERSION in capsys.readouterr().out
