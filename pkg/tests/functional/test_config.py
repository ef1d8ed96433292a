"""
Functional tests for run configuration loading and validation.
"""

import json

import pytest
import yaml

from offroad_planner.config import (
    DEFAULTS,
    deep_merge,
    load_config,
    log_level,
    planner_threads,
    resolve,
    write_resolved,
)
from offroad_planner.errors import ConfigError


class TestResolve:
    """Test suite for merging overrides over the defaults."""

    def test_defaults_are_valid(self):
        """Test the documented defaults resolve unchanged."""
        assert resolve() == DEFAULTS

    def test_nested_override(self):
        """Test a nested override leaves sibling keys in place."""
        config = resolve({"planner": {"horizon": 20}, "reward": {"mpc": {"beta_sigma": 0.0}}})

        assert config["planner"]["horizon"] == 20
        assert config["planner"]["goal"] == DEFAULTS["planner"]["goal"]
        assert config["reward"]["mpc"] == {"beta_sigma": 0.0, "beta_v": 1.0, "sigma_min": 1e-3}

    def test_deep_merge_copies(self):
        """Test merging does not alias or mutate its inputs."""
        base = {"a": {"b": [1, 2]}}
        merged = deep_merge(base, {"a": {"c": 3}})
        merged["a"]["b"].append(9)

        assert base == {"a": {"b": [1, 2]}}
        assert merged["a"]["c"] == 3

    def test_unknown_key_names_path(self):
        """Test a misspelled key is reported with its dotted path."""
        with pytest.raises(ConfigError) as excinfo:
            resolve({"planner": {"horizn": 5}})

        assert excinfo.value.key_path == "planner.horizn"

    def test_wrong_type_names_path(self):
        """Test a value of the wrong type is reported with its dotted path."""
        with pytest.raises(ConfigError) as excinfo:
            resolve({"mhe": {"window": "twenty"}})

        assert excinfo.value.key_path == "mhe.window"

    @pytest.mark.parametrize("path,value", [
        (("optimizer", "steering", "method"), "adam"),
        (("model", "architecture"), "gru"),
        (("ensemble", "distance"), "wasserstein"),
        (("planner", "predictor"), "magic"),
    ])
    def test_enumerations(self, path, value):
        """Test restricted string fields reject unknown choices."""
        override = value
        for key in reversed(path):
            override = {key: override}
        with pytest.raises(ConfigError):
            resolve(override)

    def test_nullable_lambda(self):
        """Test the CMA-ES population may be an integer or null."""
        assert resolve({"optimizer": {"throttle": {"lambda": 12}}})["optimizer"]["throttle"]["lambda"] == 12
        with pytest.raises(ConfigError):
            resolve({"optimizer": {"throttle": {"lambda": "big"}}})

    def test_class_frequency_length(self):
        """Test one frequency per event class is required."""
        with pytest.raises(ConfigError) as excinfo:
            resolve({"world": {"class_frequencies": [0.5, 0.5]}})

        assert excinfo.value.key_path == "world.class_frequencies"

    def test_top_level_mapping(self):
        """Test a non-mapping configuration is rejected."""
        with pytest.raises(ConfigError):
            resolve([1, 2])


class TestLoadConfig:
    """Test suite for configuration files."""

    def test_yaml_file(self, tmp_output_dir):
        """Test YAML files are merged over the defaults."""
        path = tmp_output_dir / "run.yaml"
        path.write_text(yaml.safe_dump({"seed": 7, "planner": {"max_ticks": 5}}))
        config = load_config(path)

        assert config["seed"] == 7
        assert config["planner"]["max_ticks"] == 5

    def test_json_file_with_overrides(self, tmp_output_dir):
        """Test explicit overrides win over the file."""
        path = tmp_output_dir / "run.json"
        path.write_text(json.dumps({"seed": 7}))

        assert load_config(path, {"seed": 9})["seed"] == 9

    def test_no_file_means_defaults(self):
        """Test a missing path argument resolves the defaults."""
        assert load_config(None) == DEFAULTS

    def test_missing_file(self, tmp_output_dir):
        """Test a nonexistent file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_config(tmp_output_dir / "absent.yaml")

    def test_malformed_file(self, tmp_output_dir):
        """Test unparsable content raises ConfigError."""
        path = tmp_output_dir / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_empty_yaml(self, tmp_output_dir):
        """Test an empty YAML file means defaults."""
        path = tmp_output_dir / "empty.yaml"
        path.write_text("")

        assert load_config(path) == DEFAULTS

    def test_write_resolved(self, tmp_output_dir):
        """Test the resolved echo reloads to the same configuration."""
        config = resolve({"seed": 3})
        path = write_resolved(config, tmp_output_dir / "run")

        assert path.name == "config.resolved.json"
        assert json.loads(path.read_text()) == config


class TestEnvironment:
    """Test suite for environment knobs."""

    def test_thread_cap(self, monkeypatch):
        """Test PLANNER_THREADS sets the worker cap."""
        monkeypatch.setenv("PLANNER_THREADS", "3")

        assert planner_threads() == 3

    def test_thread_cap_floor_and_garbage(self, monkeypatch):
        """Test non-positive values floor at one and garbage falls back to the core count."""
        monkeypatch.setenv("PLANNER_THREADS", "0")
        assert planner_threads() == 1
        monkeypatch.setenv("PLANNER_THREADS", "many")
        assert planner_threads() >= 1

    def test_log_level(self, monkeypatch):
        """Test PLANNER_LOG_LEVEL is upper-cased with an INFO default."""
        monkeypatch.setenv("PLANNER_LOG_LEVEL", "debug")
        assert log_level() == "DEBUG"
        monkeypatch.delenv("PLANNER_LOG_LEVEL")
        assert log_level() == "INFO"
