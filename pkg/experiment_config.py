#!/usr/bin/env python3
"""
Experiment configuration for modalbridge.

A config is one YAML file of flat dotted keys (nested mappings are flattened
on load), for example:

    data.seed: 7
    experiment.target_modality: depth
    experiment.k: 5
    transfer:
      epochs: 40
      lr: 0.01

Every key is declared in SCHEMA with a type and a default; `data.seed` has no
default and must be given. Unknown keys are errors. `preset: full_scale`
swaps in the large-scale optimizer schedule for the chosen target modality;
explicit keys still win over the preset. `auto` values are resolved from the
target modality:

    experiment.granularity   → combined (depth) / video_to_video (skeleton)
    experiment.freeze_policy → head_plus_last_block (depth) / all_layers (skeleton)
    experiment.eval_mode     → clip_average (depth) / whole_sequence (skeleton)
"""

import os
from collections import namedtuple
from pathlib import Path
from typing import Any, Dict, List, Mapping, Union

import yaml

# ─────────────────────────────────────────────────────────────────────────────
# CONSTANTS
# ─────────────────────────────────────────────────────────────────────────────

REQUIRED = object()

Field = namedtuple("Field", ["kind", "default", "choices", "minimum"])


def _field(kind: str, default: Any = REQUIRED, choices=None, minimum=None) -> Field:
    return Field(kind, default, choices, minimum)


SOURCE_MODALITIES = ("rgb", "flow", "two_stream")
TARGET_MODALITIES = ("depth", "skeleton")
GRANULARITIES = ("clip_to_clip", "video_to_clip", "combined", "video_to_video")
LOSSES = ("cosine", "mse")
FREEZE_POLICIES = ("head_plus_last_block", "all_layers")
EVAL_MODES = ("clip_average", "whole_sequence")
BASELINES = ("feature_supervised", "from_scratch", "modality_pretrain")
PHASES = ("teacher", "transfer", "finetune")


def _phase_fields(epochs: int) -> Dict[str, Field]:
    return {
        "epochs": _field("int", epochs, minimum=0),
        "lr": _field("float", 0.01, minimum=0.0),
        "momentum": _field("float", 0.9, minimum=0.0),
        "weight_decay": _field("float", 1e-3, minimum=0.0),
        "batch_size": _field("int", 8, minimum=1),
        "lr_step": _field("int", 0, minimum=0),  # 0 disables step decay
        "lr_gamma": _field("float", 0.1, minimum=0.0),
    }


SCHEMA: Dict[str, Field] = {
    "preset": _field("str", "desk", choices=("desk", "full_scale")),

    "data.dir": _field("str", "datasets/default"),
    "data.seed": _field("int"),
    "data.num_source_classes": _field("int", 6, minimum=2),
    "data.num_target_classes": _field("int", 4, minimum=2),
    "data.source_per_class": _field("int", 60, minimum=1),
    "data.unlabeled_per_class": _field("int", 30, minimum=1),
    "data.labeled_per_class": _field("int", 10, minimum=1),
    "data.eval_per_class": _field("int", 20, minimum=1),
    "data.min_frames": _field("int", 16, minimum=1),
    "data.max_frames": _field("int", 40, minimum=1),
    "data.frame_size": _field("int", 16, minimum=8),
    "data.num_joints": _field("int", 8, minimum=2),

    "experiment.source_modality": _field("str", "flow", choices=SOURCE_MODALITIES),
    "experiment.target_modality": _field("str", "depth", choices=TARGET_MODALITIES),
    "experiment.granularity": _field("str", "auto", choices=("auto",) + GRANULARITIES),
    "experiment.loss": _field("str", "cosine", choices=LOSSES),
    "experiment.k": _field("int", 5, minimum=1),
    "experiment.seeds": _field("int_list", [0, 1, 2, 3, 4]),
    "experiment.clip_len": _field("int", 8, minimum=1),
    "experiment.baselines": _field("str_list", ["feature_supervised"], choices=BASELINES),
    "experiment.freeze_policy": _field("str", "auto", choices=("auto",) + FREEZE_POLICIES),
    "experiment.eval_mode": _field("str", "auto", choices=("auto",) + EVAL_MODES),
    "experiment.teacher_cache": _field("str", ""),

    "nets.teacher_dim": _field("int", 64, minimum=1),
    "nets.student_dim": _field("int", 64, minimum=1),
    "nets.num_blocks": _field("int", 3, minimum=1),
    "nets.stem_channels": _field("int", 16, minimum=1),
    "nets.graph_blocks": _field("int", 3, minimum=1),
    "nets.graph_channels": _field("int", 32, minimum=1),
    "nets.temporal_kernel": _field("int", 3, minimum=1),
}
for _phase, _epochs in (("teacher", 30), ("transfer", 40), ("finetune", 20)):
    SCHEMA.update({f"{_phase}.{key}": value for key, value in _phase_fields(_epochs).items()})

# Large-scale schedule, per target modality
PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {"depth": {}, "skeleton": {}},
    "full_scale": {
        "depth": {
            "transfer.epochs": 400, "finetune.epochs": 100,
            "transfer.batch_size": 128, "finetune.batch_size": 128,
            "transfer.lr": 0.1, "finetune.lr": 0.1,
            "transfer.momentum": 0.9, "finetune.momentum": 0.9,
            "transfer.weight_decay": 1e-3, "finetune.weight_decay": 1e-3,
        },
        "skeleton": {
            "transfer.epochs": 120, "finetune.epochs": 70,
            "transfer.batch_size": 100, "finetune.batch_size": 100,
            "transfer.lr": 0.1, "finetune.lr": 0.1,
            "transfer.momentum": 0.9, "finetune.momentum": 0.9,
            "transfer.weight_decay": 1e-5, "finetune.weight_decay": 1e-5,
        },
    },
}

AUTO_VALUES = {
    "experiment.granularity": {"depth": "combined", "skeleton": "video_to_video"},
    "experiment.freeze_policy": {"depth": "head_plus_last_block", "skeleton": "all_layers"},
    "experiment.eval_mode": {"depth": "clip_average", "skeleton": "whole_sequence"},
}


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


# ─────────────────────────────────────────────────────────────────────────────
# FUNCTIONS
# ─────────────────────────────────────────────────────────────────────────────

def deterministic_mode() -> bool:
    return os.environ.get("MODALBRIDGE_DETERMINISTIC") == "1"


def flatten(raw: Mapping, prefix: str = "") -> Dict[str, Any]:
    """Flatten nested mappings into dotted keys."""
    flat = {}
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value: Any, spec: Field) -> Any:
    def fail(expected: str):
        raise ConfigError(f"{key}: expected {expected}, got {value!r}")

    if spec.kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
        result = value
    elif spec.kind == "float":
        if isinstance(value, bool):
            fail("a number")
        try:
            # PyYAML reads 1e-3 (no dot) as a string
            result = float(value)
        except (TypeError, ValueError):
            fail("a number")
    elif spec.kind == "str":
        if not isinstance(value, str):
            fail("a string")
        result = value
    elif spec.kind == "int_list":
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or not value or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            fail("a non-empty list of integers")
        result = list(value)
    elif spec.kind == "str_list":
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not value or not all(isinstance(v, str) for v in value):
            fail("a non-empty list of strings")
        if len(set(value)) != len(value):
            fail("a list without duplicates")
        result = list(value)
    else:
        raise ConfigError(f"{key}: unknown schema kind {spec.kind}")

    if spec.choices is not None:
        items = result if isinstance(result, list) else [result]
        bad = [item for item in items if item not in spec.choices]
        if bad:
            raise ConfigError(f"{key}: {bad[0]!r} is not one of {', '.join(spec.choices)}")
    if spec.minimum is not None and result < spec.minimum:
        raise ConfigError(f"{key}: must be at least {spec.minimum}, got {result!r}")
    return result


def _check_combinations(cfg: Dict[str, Any]) -> None:
    target = cfg["experiment.target_modality"]
    granularity = cfg["experiment.granularity"]
    if target == "skeleton":
        if granularity != "video_to_video":
            raise ConfigError(f"experiment.granularity: skeleton students consume whole sequences, "
                              f"only video_to_video is valid (got {granularity})")
        if cfg["experiment.freeze_policy"] != "all_layers":
            raise ConfigError("experiment.freeze_policy: skeleton students fine-tune all_layers")
        if cfg["experiment.eval_mode"] != "whole_sequence":
            raise ConfigError("experiment.eval_mode: skeleton students are evaluated on whole_sequence")
        if "modality_pretrain" in cfg["experiment.baselines"]:
            raise ConfigError("experiment.baselines: modality_pretrain needs a clip (depth) student")
        if cfg["data.min_frames"] < 2:
            raise ConfigError(f"data.min_frames: skeleton sequences need at least 2 frames for the temporal "
                              f"convolution (got {cfg['data.min_frames']})")
    else:
        if granularity == "video_to_video":
            raise ConfigError("experiment.granularity: video_to_video needs a whole-sequence (skeleton) student")
        if cfg["experiment.eval_mode"] != "clip_average":
            raise ConfigError("experiment.eval_mode: depth students are evaluated with clip_average")

    if cfg["experiment.clip_len"] < 2:
        raise ConfigError(f"experiment.clip_len: the stem max-pool halves the temporal axis, clips need at least "
                          f"2 frames (got {cfg['experiment.clip_len']})")
    if cfg["data.max_frames"] < cfg["data.min_frames"]:
        raise ConfigError(f"data.max_frames ({cfg['data.max_frames']}) < data.min_frames ({cfg['data.min_frames']})")
    if cfg["data.min_frames"] < cfg["experiment.clip_len"]:
        raise ConfigError(f"data.min_frames ({cfg['data.min_frames']}) shorter than "
                          f"experiment.clip_len ({cfg['experiment.clip_len']})")
    if cfg["experiment.k"] > cfg["data.labeled_per_class"]:
        raise ConfigError(f"experiment.k ({cfg['experiment.k']}) exceeds "
                          f"data.labeled_per_class ({cfg['data.labeled_per_class']})")
    for phase in PHASES:
        if cfg[f"{phase}.momentum"] >= 1.0:
            raise ConfigError(f"{phase}.momentum must be below 1")


def resolve_config(raw: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Validate a raw (possibly nested) mapping and fill in every key.

    Returns:
        Flat dict holding every schema key, sorted by key

    Raises:
        ConfigError: unknown or missing keys, bad values, invalid combinations
    """
    given = flatten(raw)
    unknown = sorted(set(given) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    missing = sorted(key for key, spec in SCHEMA.items() if spec.default is REQUIRED and key not in given)
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}")

    cfg = {key: _coerce(key, given[key], spec) for key, spec in SCHEMA.items() if key in given}
    for key, spec in SCHEMA.items():
        if key not in cfg and spec.default is not REQUIRED:
            cfg[key] = list(spec.default) if isinstance(spec.default, list) else spec.default

    target = cfg["experiment.target_modality"]
    for key, value in PRESETS[cfg["preset"]][target].items():
        if key not in given:
            cfg[key] = value
    for key, by_target in AUTO_VALUES.items():
        if cfg[key] == "auto":
            cfg[key] = by_target[target]

    _check_combinations(cfg)
    return dict(sorted(cfg.items()))


def load_config(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping of config keys")
    return resolve_config(raw)


def with_overrides(cfg: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Re-resolve `cfg` with some keys replaced."""
    merged = dict(cfg)
    merged.update(flatten(overrides))
    # Auto-derived keys follow a changed target modality unless overridden too
    if "experiment.target_modality" in flatten(overrides):
        for key in AUTO_VALUES:
            if key not in flatten(overrides):
                merged[key] = "auto"
    return resolve_config(merged)


def dump_config(cfg: Mapping[str, Any]) -> str:
    return yaml.safe_dump(dict(sorted(cfg.items())), sort_keys=True, default_flow_style=False)


def section(cfg: Mapping[str, Any], prefix: str) -> Dict[str, Any]:
    """Keys under `prefix.` with the prefix removed."""
    head = prefix + "."
    return {key[len(head):]: value for key, value in cfg.items() if key.startswith(head)}


def generator_options(cfg: Mapping[str, Any]) -> Dict[str, int]:
    data = section(cfg, "data")
    return {key: value for key, value in data.items() if key not in ("dir", "seed")}


def baseline_list(cfg: Mapping[str, Any]) -> List[str]:
    return list(cfg["experiment.baselines"])
