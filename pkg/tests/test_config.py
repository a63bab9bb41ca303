"""Run configuration: defaults, key=value files, and override precedence."""

import pytest

from fewseg.config import ENV_DATA_ROOT, RunConfig, build_config, parse_config_file


# =============================================================================
# Defaults and validation
# =============================================================================


def test_default_values():
    config = RunConfig()
    assert config.backbone == "resnet50"
    assert config.batch_size == 8
    assert config.lr == 0.001
    assert config.alpha == 0.1
    assert config.drop_rate == 0.05
    assert config.bi_transformer is True
    assert config.image_size == 400
    assert config.width == 20
    assert config.k == 1


def test_epochs_resolve_per_dataset():
    assert RunConfig(dataset="pascal").epochs == 50
    assert RunConfig(dataset="coco").epochs == 20
    assert RunConfig(dataset="synthetic").epochs == 20
    assert RunConfig(dataset="pascal", epochs=7).epochs == 7


def test_validation_errors():
    with pytest.raises(ValueError):
        RunConfig(dataset="cityscapes")
    with pytest.raises(ValueError):
        RunConfig(fold=4)
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)
    with pytest.raises(ValueError):
        RunConfig(lr=0.0)
    with pytest.raises(ValueError):
        RunConfig(drop_rate=1.0)
    with pytest.raises(ValueError):
        RunConfig(k=0)
    with pytest.raises(ValueError):
        RunConfig(image_size=100)  # not divisible by 16


def test_resolved_weights_seed_vs_path():
    assert RunConfig(weights="123").resolved_weights() == 123
    assert RunConfig(weights="/tmp/model.pt").resolved_weights() == "/tmp/model.pt"
    assert RunConfig().resolved_weights() is None


def test_to_text_is_key_value_lines():
    text = RunConfig().to_text()
    lines = [line for line in text.splitlines() if line]
    assert all("=" in line for line in lines)
    assert "backbone=resnet50" in lines
    assert "width=20" in lines


# =============================================================================
# Config files
# =============================================================================


def test_parse_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# a comment line\n"
        "backbone = toy\n"
        "lr=0.01  # trailing comment\n"
        "\n"
        "batch_size=4\n"
    )
    values = parse_config_file(str(path))
    assert values == {"backbone": "toy", "lr": "0.01", "batch_size": "4"}


def test_parse_config_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="absent.cfg"):
        parse_config_file(str(tmp_path / "absent.cfg"))
    bad = tmp_path / "bad.cfg"
    bad.write_text("backbone=toy\nnot a pair\n")
    with pytest.raises(ValueError, match="bad.cfg:2"):
        parse_config_file(str(bad))


# =============================================================================
# Merge precedence: CLI > env > file > defaults
# =============================================================================


def test_cli_beats_env_beats_file():
    file_values = {"data_root": "/from/file", "lr": "0.5"}
    env = {ENV_DATA_ROOT: "/from/env"}

    config = build_config(file_values, {"data_root": "/from/cli"}, env)
    assert config.data_root == "/from/cli"

    config = build_config(file_values, {}, env)
    assert config.data_root == "/from/env"

    config = build_config(file_values, {}, {})
    assert config.data_root == "/from/file"
    assert config.lr == 0.5

    config = build_config({}, {}, {})
    assert config.data_root is None


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown config key"):
        build_config({"learningrate": "0.1"}, {}, {})
    with pytest.raises(ValueError, match="unknown config key"):
        build_config({}, {"momentum": "0.9"}, {})


def test_string_values_coerced_to_field_types():
    config = build_config(
        {"batch_size": "4", "lr": "0.25", "bi_transformer": "false", "epochs": "3"}, {}, {}
    )
    assert config.batch_size == 4
    assert config.lr == 0.25
    assert config.bi_transformer is False
    assert config.epochs == 3


def test_boolean_coercion_accepts_common_spellings():
    assert build_config({"bi_transformer": "true"}, {}, {}).bi_transformer is True
    assert build_config({"bi_transformer": "0"}, {}, {}).bi_transformer is False
    with pytest.raises(ValueError):
        build_config({"bi_transformer": "maybe"}, {}, {})


def test_invalid_numeric_string_raises():
    with pytest.raises(ValueError):
        build_config({"batch_size": "four"}, {}, {})
