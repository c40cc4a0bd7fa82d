import pytest

from experiment_config import (
    ConfigError,
    SCHEMA,
    dump_config,
    flatten,
    generator_options,
    load_config,
    resolve_config,
    section,
    with_overrides,
)
from paired_dataset import GeneratorConfig


def test_missing_seed_lists_key():
    with pytest.raises(ConfigError, match="data.seed"):
        resolve_config({})


def test_defaults_fill_every_key():
    cfg = resolve_config({"data.seed": 1})
    assert set(cfg) == set(SCHEMA)
    assert list(cfg) == sorted(cfg)
    assert cfg["experiment.granularity"] == "combined"
    assert cfg["experiment.freeze_policy"] == "head_plus_last_block"
    assert cfg["experiment.eval_mode"] == "clip_average"


def test_skeleton_auto_values():
    cfg = resolve_config({"data.seed": 1, "experiment.target_modality": "skeleton"})
    assert cfg["experiment.granularity"] == "video_to_video"
    assert cfg["experiment.freeze_policy"] == "all_layers"
    assert cfg["experiment.eval_mode"] == "whole_sequence"


def test_nested_and_flat_keys_agree():
    nested = resolve_config({"data": {"seed": 1}, "transfer": {"epochs": 3}})
    flat = resolve_config({"data.seed": 1, "transfer.epochs": 3})
    assert nested == flat
    assert flatten({"a": {"b": {"c": 1}}}) == {"a.b.c": 1}


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        resolve_config({"data.seed": 1, "transfer.epoch": 3})


@pytest.mark.parametrize("key,value,message", [
    ("experiment.k", 0, "at least 1"),
    ("experiment.k", "five", "an integer"),
    ("experiment.loss", "huber", "not one of"),
    ("experiment.baselines", ["from_scratch", "from_scratch"], "duplicates"),
    ("transfer.lr", "fast", "a number"),
])
def test_bad_values(key, value, message):
    with pytest.raises(ConfigError, match=message):
        resolve_config({"data.seed": 1, key: value})


def test_float_from_exponent_string():
    assert resolve_config({"data.seed": 1, "transfer.lr": "1e-3"})["transfer.lr"] == pytest.approx(1e-3)


@pytest.mark.parametrize("raw,message", [
    ({"experiment.target_modality": "skeleton", "experiment.granularity": "combined"}, "video_to_video"),
    ({"experiment.target_modality": "skeleton", "experiment.freeze_policy": "head_plus_last_block"}, "all_layers"),
    ({"experiment.target_modality": "skeleton", "experiment.baselines": ["modality_pretrain"]}, "modality_pretrain"),
    ({"experiment.granularity": "video_to_video"}, "whole-sequence"),
    ({"data.min_frames": 4, "experiment.clip_len": 8}, "clip_len"),
    ({"experiment.clip_len": 1}, "max-pool"),
    ({"experiment.target_modality": "skeleton", "data.min_frames": 1, "experiment.clip_len": 1}, "at least 2 frames"),
    ({"experiment.k": 11}, "labeled_per_class"),
    ({"finetune.momentum": 1.0}, "below 1"),
])
def test_invalid_combinations(raw, message):
    with pytest.raises(ConfigError, match=message):
        resolve_config(dict(raw, **{"data.seed": 1}))


def test_full_scale_preset_per_target():
    depth = resolve_config({"data.seed": 1, "preset": "full_scale"})
    skeleton = resolve_config({"data.seed": 1, "preset": "full_scale", "experiment.target_modality": "skeleton"})
    assert depth["transfer.epochs"] == 400 and depth["finetune.batch_size"] == 128
    assert skeleton["transfer.weight_decay"] == pytest.approx(1e-5)
    explicit = resolve_config({"data.seed": 1, "preset": "full_scale", "transfer.epochs": 2})
    assert explicit["transfer.epochs"] == 2


def test_overrides_follow_target_change():
    cfg = resolve_config({"data.seed": 1})
    moved = with_overrides(cfg, {"experiment.target_modality": "skeleton"})
    assert moved["experiment.granularity"] == "video_to_video"
    assert with_overrides(cfg, {"experiment.k": 2})["experiment.k"] == 2


def test_load_config_round_trips_dump(tmp_path):
    cfg = resolve_config({"data.seed": 4, "experiment.seeds": [1, 2]})
    path = tmp_path / "config.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "list.yaml")


def test_section_and_generator_options():
    cfg = resolve_config({"data.seed": 1})
    assert section(cfg, "teacher")["epochs"] == 30
    GeneratorConfig(**generator_options(cfg))
