"""Shared fixtures: a tiny synthetic dataset and a matching tiny config."""

from pathlib import Path
from typing import Dict

import pytest
import yaml

from experiment_config import generator_options, resolve_config
from paired_dataset import GeneratorConfig, generate_from_config

TINY_RAW: Dict = {
    "data.seed": 3,
    "data.num_source_classes": 3,
    "data.num_target_classes": 2,
    "data.source_per_class": 4,
    "data.unlabeled_per_class": 4,
    "data.labeled_per_class": 3,
    "data.eval_per_class": 3,
    "data.min_frames": 8,
    "data.max_frames": 20,
    "data.num_joints": 5,
    "experiment.source_modality": "flow",
    "experiment.k": 2,
    "experiment.seeds": [0],
    "experiment.baselines": ["feature_supervised"],
    "nets.teacher_dim": 8,
    "nets.student_dim": 6,
    "nets.num_blocks": 2,
    "nets.stem_channels": 4,
    "nets.graph_blocks": 2,
    "nets.graph_channels": 6,
    "teacher.epochs": 2,
    "teacher.batch_size": 4,
    "transfer.epochs": 2,
    "transfer.batch_size": 4,
    "finetune.epochs": 2,
    "finetune.batch_size": 4,
}


def tiny_raw(data_dir: Path, **overrides) -> Dict:
    raw = dict(TINY_RAW, **{"data.dir": str(data_dir)})
    raw.update(overrides)
    return raw


def write_config(path: Path, raw: Dict) -> Path:
    path.write_text(yaml.safe_dump(raw, sort_keys=True), encoding="utf-8")
    return path


@pytest.fixture
def tiny_config(tmp_path):
    return resolve_config(tiny_raw(tmp_path / "data"))


@pytest.fixture
def skeleton_config(tmp_path):
    return resolve_config(tiny_raw(tmp_path / "data", **{
        "experiment.target_modality": "skeleton",
        "experiment.source_modality": "rgb",
    }))


@pytest.fixture(scope="session")
def base_config():
    return resolve_config(tiny_raw(Path("unused")))


@pytest.fixture(scope="session")
def tiny_split(base_config):
    options = generator_options(base_config)
    return generate_from_config(base_config["data.seed"], GeneratorConfig(**options))


@pytest.fixture
def config_file(tmp_path):
    """Factory writing the tiny config (plus overrides) to a YAML file."""
    written = []

    def write(**overrides) -> Path:
        path = tmp_path / f"config_{len(written)}.yaml"
        written.append(write_config(path, tiny_raw(tmp_path / "data", **overrides)))
        return path

    return write
