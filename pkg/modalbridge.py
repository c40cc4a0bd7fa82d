#!/usr/bin/env python3
"""
modalbridge: cross-modal feature supervision experiments.

A teacher trained on labeled rgb or flow clips supervises a depth or
skeleton student through unlabeled paired videos; the student is then
fine-tuned on k labels per new class and evaluated.

Commands:
    generate   write the synthetic paired dataset named by data.dir
    run        teacher → transfer → fine-tune → eval for every seed/baseline
    ablate     one run per cell of a grid over source_modality × loss ×
               granularity × k, summarized as ablation.csv / ablation.md
    eval       evaluate a saved classifier checkpoint on the eval split

Usage:
    python modalbridge.py generate --config configs/depth_default.yaml
    python modalbridge.py run --config configs/depth_default.yaml --out runs/depth --generate
    python modalbridge.py run --config configs/depth_default.yaml --out runs/scratch --baseline from_scratch
    python modalbridge.py ablate --config configs/ablate_loss.yaml --out runs/ablate_loss --jobs 4
    python modalbridge.py eval --config configs/depth_default.yaml \\
        --checkpoint runs/depth/checkpoints/seed0/feature_supervised/classifier.ckpt

Environment:
    MODALBRIDGE_DETERMINISTIC=1   single process, single BLAS thread, ms=0 in
                                  metrics (byte-identical outputs)
    MODALBRIDGE_DEBUG=1           NaN/Inf assertions after every tensor op

Exit codes: 0 completed, 1 a phase failed (partial metrics kept),
2 invalid config/dataset or refused overwrite.
"""

import os

if os.environ.get("MODALBRIDGE_DETERMINISTIC") == "1":
    # Must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"

import argparse
import itertools
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml

from action_nets import load_network
from experiment_config import (
    ConfigError, deterministic_mode, dump_config, generator_options, load_config, with_overrides,
)
from paired_dataset import (
    MANIFEST_FILE, DatasetError, DatasetSplit, GeneratorConfig, generate_from_config, load_dataset,
    read_manifest, save_dataset,
)
from run_plots import plot_curves
from tensor_checkpoint import CheckpointError, file_digest
from transfer_pipeline import GridResult, evaluate, run_experiment_grid, write_metrics_csv

logger = logging.getLogger("modalbridge")

# ─────────────────────────────────────────────────────────────────────────────
# CONSTANTS
# ─────────────────────────────────────────────────────────────────────────────

VERSION = "0.1.0"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2

RUN_MANIFEST = "manifest.json"
SUMMARY_FILE = "summary.json"
CONFIG_ECHO = "config.yaml"

# Grid axis name → config key
ABLATION_AXES = {
    "source_modality": "experiment.source_modality",
    "loss": "experiment.loss",
    "granularity": "experiment.granularity",
    "k": "experiment.k",
}
GRID_KEYS = {"base_config", "axes", "overrides"}


class RefusedOverwrite(Exception):
    """Output already exists and --force was not given."""


# ─────────────────────────────────────────────────────────────────────────────
# HELPERS
# ─────────────────────────────────────────────────────────────────────────────

def _banner(title: str, rows: List[Tuple[str, Any]]) -> None:
    print(f"\n{'=' * 60}")
    print(title)
    print(f"{'=' * 60}")
    for label, value in rows:
        print(f"  {label + ':':<22} {value}")
    print(f"{'=' * 60}")


def _write_json(path: Path, payload: Mapping) -> str:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    path.write_text(text, encoding="utf-8")
    return file_digest(path)


def _relative(path: str, root: Path) -> str:
    try:
        return Path(path).relative_to(root).as_posix()
    except ValueError:
        return Path(path).as_posix()


def claim_output_dir(out: Path, force: bool) -> None:
    """
    Refuse to reuse a finished output directory unless forced; with force,
    remove the artifacts a previous run wrote so reruns start clean.
    """
    if (out / RUN_MANIFEST).exists():
        if not force:
            raise RefusedOverwrite(f"{out} already holds results (pass --force to overwrite)")
        for pattern in ("metrics_*.csv", "curves_*.svg", SUMMARY_FILE, CONFIG_ECHO, RUN_MANIFEST,
                        "ablation.csv", "ablation.md"):
            for stale in out.glob(pattern):
                stale.unlink()
        for directory in ("checkpoints", "cells"):
            shutil.rmtree(out / directory, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)


def prepare_dataset(config: Mapping, generate_missing: bool) -> DatasetSplit:
    """Load data.dir (checking it matches the config) or generate it when allowed."""
    data_dir = Path(config["data.dir"])
    expected = GeneratorConfig(**generator_options(config))
    if (data_dir / MANIFEST_FILE).exists():
        manifest = read_manifest(data_dir)
        if manifest.get("seed") != config["data.seed"] or manifest.get("generator") != asdict(expected):
            raise ConfigError(f"dataset at {data_dir} was generated with different data.* settings "
                              f"(regenerate it with `generate --force`)")
        return load_dataset(data_dir)
    if not generate_missing:
        raise ConfigError(f"no dataset at {data_dir} (run `generate` first or pass --generate)")
    split = generate_from_config(config["data.seed"], expected)
    save_dataset(split, data_dir)
    return split


def execute_run(config: Mapping, split: DatasetSplit, out: Path, jobs: int = 1,
                teacher_cache: Optional[Path] = None) -> Tuple[str, GridResult]:
    """Run the seed grid into `out` and write every artifact, even on failure."""
    result = GridResult(baselines=list(config["experiment.baselines"]),
                        seeds=list(config["experiment.seeds"]), data_digest="")
    status, error = "completed", None
    try:
        run_experiment_grid(config, split, jobs=jobs, checkpoint_dir=out / "checkpoints",
                            teacher_cache=teacher_cache, result=result)
    except Exception as e:
        status, error = "failed", f"{type(e).__name__}: {e}"
        logger.error("Run in %s failed: %s", out, error)
    write_run_outputs(out, config, result, status, error)
    return status, result


def write_run_outputs(out: Path, config: Mapping, result: GridResult, status: str,
                      error: Optional[str] = None) -> Dict:
    """Metrics CSVs, curves, config echo, summary.json, then manifest.json last."""
    metrics = {}
    curves = {}
    for baseline in result.baselines:
        records = result.records.get(baseline, [])
        path = out / f"metrics_{baseline}.csv"
        write_metrics_csv(path, records)
        metrics[path.name] = file_digest(path)
        if records:
            svg = plot_curves(records, out / f"curves_{baseline}.svg", title=baseline)
            curves[svg.name] = file_digest(svg)

    echo = out / CONFIG_ECHO
    echo.write_text(dump_config(config), encoding="utf-8")

    checkpoints = {_relative(path, out): digest for path, digest in sorted(result.checkpoints.items())}
    summary = result.summary()
    summary.update({
        "status": status,
        "error": error,
        "config": dict(config),
        "code_version": VERSION,
        "checkpoints": checkpoints,
    })
    summary_digest = _write_json(out / SUMMARY_FILE, summary)

    manifest = {
        "status": status,
        "code_version": VERSION,
        "config": dict(config),
        "dataset_digest": result.data_digest,
        "checkpoints": checkpoints,
        "metrics": metrics,
        "curves": curves,
        "summary": {SUMMARY_FILE: summary_digest},
        "config_echo": {CONFIG_ECHO: file_digest(echo)},
    }
    _write_json(out / RUN_MANIFEST, manifest)
    return manifest


def verify_manifest(out: Path) -> List[str]:
    """Files referenced by a run manifest that are missing or changed."""
    with open(out / RUN_MANIFEST, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    problems = []
    for group in ("checkpoints", "metrics", "curves", "summary", "config_echo"):
        for name, digest in manifest.get(group, {}).items():
            path = out / name
            if not path.exists():
                problems.append(f"{name}: missing")
            elif file_digest(path) != digest:
                problems.append(f"{name}: digest mismatch")
    return problems


def _apply_cli_overrides(config: Dict, args: argparse.Namespace) -> Dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["experiment.seeds"] = [args.seed]
    if getattr(args, "baseline", None):
        overrides["experiment.baselines"] = [args.baseline]
    return with_overrides(config, overrides) if overrides else config


# ─────────────────────────────────────────────────────────────────────────────
# COMMANDS
# ─────────────────────────────────────────────────────────────────────────────

def cmd_generate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    out = Path(args.out) if args.out else Path(config["data.dir"])
    if (out / MANIFEST_FILE).exists() and not args.force:
        raise RefusedOverwrite(f"{out} already holds a dataset (pass --force to overwrite)")
    split = generate_from_config(config["data.seed"], GeneratorConfig(**generator_options(config)))
    try:
        digest = save_dataset(split, out)
    except OSError as e:
        print(f"Error: cannot write dataset to {out}: {e}", file=sys.stderr)
        return EXIT_FAILED

    _banner("DATASET GENERATED", [
        ("Output directory", out),
        ("Seed", config["data.seed"]),
        ("Source samples", len(split.source_train)),
        ("Unlabeled pairs", len(split.target_unlabeled)),
        ("Labeled pool", len(split.target_labeled)),
        ("Eval samples", len(split.target_eval)),
        ("Content digest", digest),
    ])
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _apply_cli_overrides(load_config(args.config), args)
    out = Path(args.out)
    claim_output_dir(out, args.force)
    split = prepare_dataset(config, args.generate)
    cache = Path(config["experiment.teacher_cache"]) if config["experiment.teacher_cache"] else None
    status, result = execute_run(config, split, out, jobs=args.jobs, teacher_cache=cache)

    summary = result.summary()
    rows = [("Output directory", out), ("Status", status), ("Data digest", result.data_digest[:16])]
    for baseline, entry in summary["baselines"].items():
        if entry.get("mean") is not None:
            rows.append((baseline, f"{100 * entry['mean']:.2f}% ± {100 * 100 * entry['variance']:.2f}"))
    _banner("RUN COMPLETE" if status == "completed" else "RUN FAILED", rows)
    return EXIT_OK if status == "completed" else EXIT_FAILED


def load_grid(path: Path) -> Tuple[Dict, List[str], List[Tuple], List[Dict]]:
    """
    Parse and validate an ablation grid spec.

    Returns:
        Tuple of (base config, axis names, cell value tuples, cell configs);
        every cell config is fully validated before anything runs.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            grid = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read grid spec {path}: {e}") from e
    if not isinstance(grid, Mapping):
        raise ConfigError(f"{path}: grid spec must be a mapping")
    unknown = sorted(set(grid) - GRID_KEYS)
    if unknown or "base_config" not in grid or "axes" not in grid:
        raise ConfigError(f"{path}: grid spec needs base_config and axes (unknown keys: {', '.join(unknown) or 'none'})")

    base = load_config(path.parent / grid["base_config"])
    if grid.get("overrides"):
        base = with_overrides(base, grid["overrides"])
    axes = grid["axes"]
    if not isinstance(axes, Mapping) or not axes:
        raise ConfigError(f"{path}: axes must be a non-empty mapping")
    bad_axes = sorted(set(axes) - set(ABLATION_AXES))
    if bad_axes:
        raise ConfigError(f"{path}: unknown axes {', '.join(bad_axes)} (expected {', '.join(ABLATION_AXES)})")
    names = [name for name in ABLATION_AXES if name in axes]
    for name in names:
        if not isinstance(axes[name], list) or not axes[name]:
            raise ConfigError(f"{path}: axis {name} needs a non-empty list of values")

    cells = list(itertools.product(*(axes[name] for name in names)))
    configs = []
    for values in cells:
        overrides = {ABLATION_AXES[name]: value for name, value in zip(names, values)}
        try:
            configs.append(with_overrides(base, overrides))
        except ConfigError as e:
            raise ConfigError(f"grid cell {dict(zip(names, values))}: {e}") from None
    return base, names, cells, configs


def cell_name(names: List[str], values: Tuple) -> str:
    return "__".join(f"{name}-{value}" for name, value in zip(names, values))


def _run_cell(config: Dict, split: DatasetSplit, out: Path, teacher_cache: Path) -> Tuple[str, Dict]:
    claim_output_dir(out, force=True)
    status, result = execute_run(config, split, out, jobs=1, teacher_cache=teacher_cache)
    return status, result.summary()


def write_ablation_tables(out: Path, names: List[str], cells: List[Tuple], outcomes: List[Tuple[str, Dict]]) -> None:
    """Long-form ablation.csv and a markdown table with k as columns (accuracy in %)."""
    lines = [",".join(names + ["mean", "variance", "status"])]
    for values, (status, summary) in zip(cells, outcomes):
        mean = "" if summary.get("mean") is None else repr(summary["mean"])
        variance = "" if summary.get("variance") is None else repr(summary["variance"])
        lines.append(",".join([str(v) for v in values] + [mean, variance, status]))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    row_axes = [name for name in names if name != "k"]
    k_values = sorted({dict(zip(names, values)).get("k") for values in cells}, key=lambda v: (v is None, v))
    columns = [f"k={k}" for k in k_values] if "k" in names else ["accuracy"]
    table: Dict[Tuple, Dict[Any, str]] = {}
    for values, (status, summary) in zip(cells, outcomes):
        axis = dict(zip(names, values))
        row = tuple(axis[name] for name in row_axes)
        if summary.get("mean") is None:
            text = status
        else:
            text = f"{100 * summary['mean']:.2f} ± {100 * 100 * summary['variance']:.2f}"
        table.setdefault(row, {})[axis.get("k")] = text

    md = ["Accuracy % (mean ± variance over seeds)", ""]
    md.append("| " + " | ".join(row_axes + columns) + " |")
    md.append("|" + "---|" * (len(row_axes) + len(columns)))
    for row, by_k in table.items():
        md.append("| " + " | ".join([str(v) for v in row] + [by_k.get(k, "") for k in k_values]) + " |")
    (out / "ablation.md").write_text("\n".join(md) + "\n", encoding="utf-8")


def cmd_ablate(args: argparse.Namespace) -> int:
    base, names, cells, configs = load_grid(Path(args.config))
    configs = [_apply_cli_overrides(cfg, args) for cfg in configs]
    out = Path(args.out)
    claim_output_dir(out, args.force)
    split = prepare_dataset(base, args.generate)
    teacher_cache = out / "teachers"
    print(f"Running {len(cells)} grid cell(s) over axes: {', '.join(names)}")

    cell_dirs = [out / "cells" / cell_name(names, values) for values in cells]
    jobs = 1 if deterministic_mode() else max(1, args.jobs)
    if jobs == 1:
        outcomes = [_run_cell(cfg, split, cell_dir, teacher_cache) for cfg, cell_dir in zip(configs, cell_dirs)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, cfg, split, cell_dir, teacher_cache)
                       for cfg, cell_dir in zip(configs, cell_dirs)]
            outcomes = [future.result() for future in futures]

    write_ablation_tables(out, names, cells, outcomes)
    status = "completed" if all(s == "completed" for s, _ in outcomes) else "failed"
    cell_manifests = {f"cells/{d.name}/{RUN_MANIFEST}": file_digest(d / RUN_MANIFEST) for d in cell_dirs}
    _write_json(out / RUN_MANIFEST, {
        "status": status,
        "code_version": VERSION,
        "config": dict(base),
        "axes": {name: sorted({values[i] for values in cells}, key=str) for i, name in enumerate(names)},
        "cells": cell_manifests,
        "tables": {name: file_digest(out / name) for name in ("ablation.csv", "ablation.md")},
    })

    _banner("ABLATION COMPLETE" if status == "completed" else "ABLATION FAILED", [
        ("Output directory", out),
        ("Cells", len(cells)),
        ("Failed cells", sum(s != "completed" for s, _ in outcomes)),
        ("Table", out / "ablation.md"),
    ])
    return EXIT_OK if status == "completed" else EXIT_FAILED


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    split = prepare_dataset(config, generate_missing=False)
    classifier, tags = load_network(args.checkpoint)
    modality = tags.get("target_modality", config["experiment.target_modality"])
    mode = tags.get("eval_mode", config["experiment.eval_mode"])
    clip_len = int(tags.get("clip_len", config["experiment.clip_len"]))
    accuracy = evaluate(classifier, split.target_eval, mode, modality=modality, clip_len=clip_len)

    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise RefusedOverwrite(f"{out} exists (pass --force to overwrite)")
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out, {
            "accuracy": accuracy,
            "checkpoint": Path(args.checkpoint).as_posix(),
            "checkpoint_digest": file_digest(args.checkpoint),
            "eval_mode": mode,
            "target_modality": modality,
            "eval_samples": len(split.target_eval),
        })
    _banner("EVALUATION", [
        ("Checkpoint", args.checkpoint),
        ("Eval mode", mode),
        ("Eval samples", len(split.target_eval)),
        ("Accuracy", f"{100 * accuracy:.2f}%"),
    ])
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
}


# ─────────────────────────────────────────────────────────────────────────────
# ENTRY POINT
# ─────────────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modalbridge", description="Cross-modal feature supervision experiments.")
    parser.add_argument("--version", action="version", version=f"modalbridge {VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, out_required: bool) -> None:
        sub.add_argument("--config", required=True, help="experiment config (grid spec for ablate)")
        sub.add_argument("--out", required=out_required, help="output directory")
        sub.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sub.add_argument("--verbose", action="store_true", help="debug logging")

    generate = commands.add_parser("generate", help="write the synthetic dataset")
    common(generate, out_required=False)

    for name, text in (("run", "run every seed and baseline"), ("ablate", "run a grid of configs")):
        sub = commands.add_parser(name, help=text)
        common(sub, out_required=True)
        sub.add_argument("--seed", type=int, help="run only this seed")
        sub.add_argument("--baseline", choices=("feature_supervised", "from_scratch", "modality_pretrain"),
                         help="run only this baseline")
        sub.add_argument("--jobs", type=int, default=1, help="worker processes")
        sub.add_argument("--generate", action="store_true", help="generate the dataset if missing")

    evaluate_cmd = commands.add_parser("eval", help="evaluate a classifier checkpoint")
    common(evaluate_cmd, out_required=False)
    evaluate_cmd.add_argument("--checkpoint", required=True, help="classifier checkpoint")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if deterministic_mode() and hasattr(args, "jobs"):
        args.jobs = 1
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, CheckpointError, RefusedOverwrite) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
