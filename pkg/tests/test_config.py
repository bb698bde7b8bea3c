"""Tests for run-config loading, validation and overrides."""

from unittest.mock import patch

import pytest
import yaml

from src.config import (
    RESOLVED_CONFIG_NAME,
    RUN_CONFIG_SCHEMA,
    check_device,
    default_config,
    load_run_config,
    parse_input_size,
    parse_overrides,
    to_augment_policy,
    to_model_config,
    to_train_config,
    validate_field,
    validate_run_config,
    write_resolved_config,
)
from src.errors import ConfigError


class TestValidateField:
    def test_string_enum_valid(self):
        assert validate_field("fusion_mode", "igam", RUN_CONFIG_SCHEMA["fusion_mode"]) == []

    def test_string_enum_invalid(self):
        errors = validate_field("fusion_mode", "sum", RUN_CONFIG_SCHEMA["fusion_mode"])
        assert len(errors) == 1
        assert "must be one of" in errors[0]

    def test_integer_rejects_bool(self):
        assert validate_field("epochs", True, RUN_CONFIG_SCHEMA["epochs"]) == ["expected integer, got bool"]

    def test_integer_minimum(self):
        assert "below minimum" in validate_field("epochs", 0, RUN_CONFIG_SCHEMA["epochs"])[0]

    def test_number_accepts_int(self):
        assert validate_field("weight_decay", 0, RUN_CONFIG_SCHEMA["weight_decay"]) == []

    def test_exclusive_bounds(self):
        assert validate_field("threshold", 1.0, RUN_CONFIG_SCHEMA["threshold"])
        assert validate_field("lr0", 0.0, RUN_CONFIG_SCHEMA["lr0"])

    def test_pattern(self):
        spec = RUN_CONFIG_SCHEMA["backend"]
        assert validate_field("backend", "stub:3", spec) == []
        assert validate_field("backend", "pretrained:/w/edge.fcnt", spec) == []
        assert "does not match pattern" in validate_field("backend", "edgesam", spec)[0]

    def test_list_items(self):
        spec = RUN_CONFIG_SCHEMA["rotation_choices"]
        errors = validate_field("rotation_choices", [0, 45, "x"], spec)
        assert len(errors) == 2
        assert "item [1]" in errors[0]
        assert "item [2]" in errors[1]

    def test_list_length(self):
        assert "expected 2 items" in validate_field("input_size", [512], RUN_CONFIG_SCHEMA["input_size"])[0]

    def test_nullable(self):
        assert validate_field("train_root", None, RUN_CONFIG_SCHEMA["train_root"]) == []
        assert validate_field("out_dir", None, RUN_CONFIG_SCHEMA["out_dir"]) == ["must not be null"]


class TestLoadRunConfig:
    def test_defaults_are_valid(self):
        assert validate_run_config(default_config()) == []
        assert load_run_config() == default_config()

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("epochs: 5\nfusion_mode: concat\nlr0: 1e-3\n")
        cfg = load_run_config(path, {"fusion_mode": "none"})
        assert cfg["epochs"] == 5
        assert cfg["fusion_mode"] == "none"
        assert cfg["lr0"] == 1e-3

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("epoch: 5\n")
        with pytest.raises(ConfigError, match="unknown key 'epoch'"):
            load_run_config(path)

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_run_config(path)

    def test_empty_file_means_defaults(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("")
        assert load_run_config(path) == default_config()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="missing.yaml"):
            load_run_config(tmp_path / "missing.yaml")

    def test_input_size_string(self):
        assert load_run_config(overrides={"input_size": "256x320"})["input_size"] == [256, 320]

    def test_latency_counts_have_floors(self):
        with pytest.raises(ConfigError) as exc_info:
            load_run_config(overrides={"warmup": 0, "repeats": 1})
        assert "warmup" in str(exc_info.value)
        assert "repeats" in str(exc_info.value)
        assert load_run_config(overrides={"warmup": 3, "repeats": 10})["repeats"] == 10

    def test_all_errors_reported(self):
        with pytest.raises(ConfigError) as exc_info:
            load_run_config(overrides={"epochs": 0, "batch_size": "two"})
        assert "epochs" in str(exc_info.value)
        assert "batch_size" in str(exc_info.value)


class TestOverrides:
    def test_values_parsed_as_yaml(self):
        overrides = parse_overrides(["--epochs", "3", "--eval_resize", "false", "--betas", "[0.8, 0.9]"])
        assert overrides == {"epochs": 3, "eval_resize": False, "betas": [0.8, 0.9]}

    def test_equals_form_and_dashes(self):
        assert parse_overrides(["--batch-size=4"]) == {"batch_size": 4}

    def test_negative_value(self):
        assert parse_overrides(["--augment_seed", "-1"]) == {"augment_seed": -1}

    def test_missing_value(self):
        with pytest.raises(ConfigError, match="--epochs has no value"):
            parse_overrides(["--epochs"])

    def test_stray_token(self):
        with pytest.raises(ConfigError, match="expected --key"):
            parse_overrides(["epochs"])


class TestInputSize:
    def test_parse(self):
        assert parse_input_size("512x384") == [512, 384]
        assert parse_input_size(" 64 X 64 ") == [64, 64]

    def test_bad(self):
        with pytest.raises(ConfigError, match="HxW"):
            parse_input_size("512")


class TestConversions:
    def test_model_config(self):
        cfg = load_run_config(overrides={"base_channels": 8, "stub_channels": [4, 8, 8, 8, 8]})
        model_cfg = to_model_config(cfg)
        assert model_cfg.base_channels == 8
        assert model_cfg.stub_channels == (4, 8, 8, 8, 8)

    def test_train_config(self):
        cfg = load_run_config(overrides={"epochs": 4, "seed": 9})
        train_cfg = to_train_config(cfg)
        assert train_cfg.epochs == 4
        assert train_cfg.betas == (0.9, 0.999)
        assert train_cfg.augment.seed == 9

    def test_augment_seed_overrides_global_seed(self):
        cfg = load_run_config(overrides={"seed": 1, "augment_seed": 5, "rotation_choices": [0]})
        policy = to_augment_policy(cfg)
        assert policy.seed == 5
        assert policy.rotation_choices == (0,)


class TestResolvedConfig:
    def test_written_and_reloadable(self, tmp_path):
        cfg = load_run_config(overrides={"fusion_mode": "none"})
        path = write_resolved_config(cfg, tmp_path / "out")
        assert path.name == RESOLVED_CONFIG_NAME
        assert yaml.safe_load(path.read_text()) == cfg
        assert load_run_config(path) == cfg


class TestCheckDevice:
    def test_cpu(self):
        assert check_device("cpu") == "cpu"

    def test_not_a_device(self):
        with pytest.raises(ConfigError, match="not a torch device"):
            check_device("quantum")

    def test_cuda_unavailable(self):
        with patch("torch.cuda.is_available", return_value=False):
            with pytest.raises(ConfigError, match="CUDA is not available"):
                check_device("cuda:0")
