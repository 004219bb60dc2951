# File: test_config.py
import json
import logging
import os

import pytest

from src.config import (AblationConfig, ModelConfig, PlacementSpec, TrainConfig, config_digest, default_configs,
                        load_config, resolve_placement)
from src.errors import ArgumentError, ConfigError
from src.logging_utils import configure_logging

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")


def test_placement_strategies():
    """continuous_first takes the first k blocks; distributed_even rounds i*L/k half up"""
    assert resolve_placement(PlacementSpec(strategy="continuous_first", k=3), 8) == [0, 1, 2]
    assert resolve_placement(PlacementSpec(strategy="distributed_even", k=3), 8) == [0, 3, 5]
    assert resolve_placement(PlacementSpec(strategy="distributed_even", k=2), 3) == [0, 2]
    assert resolve_placement(PlacementSpec(strategy="distributed_even", k=8), 8) == list(range(8))
    assert resolve_placement(PlacementSpec(strategy="explicit", indices=[5, 1]), 8) == [1, 5]


@pytest.mark.parametrize("layers", range(1, 17))
def test_placement_strategies_agree_at_full_depth(layers):
    """With k equal to the depth both strategies select every block"""
    full = list(range(layers))
    assert resolve_placement(PlacementSpec(strategy="continuous_first", k=layers), layers) == full
    assert resolve_placement(PlacementSpec(strategy="distributed_even", k=layers), layers) == full


def test_placement_errors():
    """Out-of-range k, duplicate and out-of-range explicit indices are rejected"""
    with pytest.raises(ArgumentError):
        resolve_placement(PlacementSpec(strategy="distributed_even", k=9), 8)
    with pytest.raises(ArgumentError):
        resolve_placement(PlacementSpec(strategy="explicit", indices=[1, 1]), 8)
    with pytest.raises(ArgumentError):
        resolve_placement(PlacementSpec(strategy="explicit", indices=[8]), 8)


def test_model_config_validation():
    """Model shape and placement problems surface at construction"""
    with pytest.raises(ValueError):
        ModelConfig(model_dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=2, placement=PlacementSpec(k=3))
    assert ModelConfig(mode="fullft", layers=2, placement=PlacementSpec(k=3)).context_layers == []
    assert ModelConfig().pad_id == ModelConfig().text_buckets


def test_train_config_ranges():
    """p_zero outside [0, 1] and shift below 1 are invalid"""
    with pytest.raises(ValueError):
        TrainConfig(p_zero=1.5)
    with pytest.raises(ValueError):
        TrainConfig(shift=0.5)


def test_load_shipped_configs():
    """Both shipped config files load and the tiny one overrides the defaults"""
    default = load_config(os.path.join(CONFIG_DIR, "default.yaml"))
    tiny = load_config(os.path.join(CONFIG_DIR, "tiny.yaml"))
    assert set(default) == {"model", "train", "sample", "data", "eval", "ablate"}
    assert default["model"] == ModelConfig()
    assert tiny["model"].layers == 2 and tiny["data"].frames == 4
    assert tiny["model"].context_layers == [0]


def test_missing_sections_default(tmp_path):
    """Sections left out of a file take their defaults"""
    path = tmp_path / "partial.yaml"
    path.write_text("train:\n  steps: 7\n")
    configs = load_config(str(path))
    assert configs["train"].steps == 7
    assert configs["model"] == default_configs()["model"]
    assert configs["ablate"] == AblationConfig()


@pytest.mark.parametrize("text", [
    "model:\n  no_such_key: 1\n",
    "unknown_section:\n  a: 1\n",
    "train:\n  steps: [1, 2\n",
    "- a list\n",
    "model:\n  model_dim: 30\n  heads: 4\n",
])
def test_bad_config_files(tmp_path, text):
    """Unknown keys, unknown sections, broken YAML and invalid values raise ConfigError"""
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_missing_config_file(tmp_path):
    """A missing file is a ConfigError naming the path"""
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(str(tmp_path / "nope.yaml"))


def test_config_digest():
    """Equal configs hash equal; any changed field changes the digest"""
    assert config_digest(ModelConfig(), TrainConfig()) == config_digest(ModelConfig(), TrainConfig())
    assert config_digest(ModelConfig()) != config_digest(ModelConfig(layers=4))


def test_json_log_file(tmp_path):
    """With a JSON path, records are also written as one JSON object per line"""
    path = tmp_path / "log.jsonl"
    configure_logging("INFO", str(path))
    try:
        logging.getLogger("vcu.test").info("hello records")
        for handler in logging.getLogger().handlers:
            handler.flush()
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    finally:
        configure_logging("WARNING")
    assert any(r["message"] == "hello records" and r["levelname"] == "INFO" and r["name"] == "vcu.test"
               for r in records)
