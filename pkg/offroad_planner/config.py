"""
Run configuration: documented defaults, JSON/YAML loading, schema validation
and environment knobs.
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import jsonschema
import yaml
from dotenv import load_dotenv

from offroad_planner.errors import ConfigError
from offroad_planner.events import BUMPY_CLASSES, COLLISION_CLASSES, label_frequencies

logger = logging.getLogger(__name__)

load_dotenv()

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "output_dir": "output",
    "vehicle": {
        "c1": 0.5,
        "c2": 1.69,
        "cm1": 12.0,
        "cm2": 2.5,
        "cr2": 0.15,
        "cr0": 0.7,
        "g": 9.81,
        "mass_scale": 1.0,
    },
    "mhe": {
        "window": 20,
        "gps_xy_std": 0.1,
        "gps_psi_std": 0.05,
        "accel_std": 0.2,
        "speed_std": 0.1,
        "prior_std": {"x": 1.0, "y": 1.0, "psi": 0.2, "v": 0.5, "phi": 0.05, "sigma": 1.0},
        "param_prior_std": {"cr0": None, "cr2": None},
        "estimate": {"phi": True, "cr0": True, "cr2": True},
        "max_iters": 30,
        "tol": 1e-10,
        "damping": 1e-3,
    },
    "optimizer": {
        "steering": {
            "method": "cem",
            "population": 48,
            "elite_frac": 0.125,
            "iters": 5,
            "init_std": 0.2,
            "min_std": 0.02,
            "lambda": None,
            "init_sigma": 0.1,
        },
        "throttle": {
            "method": "cem",
            "population": 48,
            "elite_frac": 0.125,
            "iters": 5,
            "init_std": 0.3,
            "min_std": 0.02,
            "lambda": None,
            "init_sigma": 0.2,
        },
    },
    "model": {
        "architecture": "transformer",
        "width": 32,
        "layers": 2,
        "heads": 2,
        "obs_hidden": 64,
        "var_min": 1e-6,
        "horizon": 20,
        "epochs": 40,
        "batch": 64,
        "lr": 3e-3,
    },
    "ensemble": {
        "members": 5,
        "distance": "kl",
        "w_class": 1.0,
        "w_bearing": 1.0,
        "sigma_min": 1e-3,
    },
    "reward": {
        "event": {
            "alpha_pos": 1.0,
            "alpha_bum": 0.5,
            "gamma": 0.99,
            "collision_classes": list(COLLISION_CLASSES),
            "bumpy_classes": list(BUMPY_CLASSES),
        },
        "mpc": {"beta_sigma": 10.0, "beta_v": 1.0, "sigma_min": 1e-3},
    },
    "planner": {
        "horizon": 10,
        "replan_every": 1,
        "start": [4.0, 16.0, 0.0],
        "goal": [28.0, 16.0],
        "goal_radius": 1.0,
        "max_ticks": 60,
        "delta_max": 0.35,
        "v_max": 3.0,
        "joint": False,
        "joint_weight": 1.0,
        "episodes": 50,
        "predictor": "ensemble",
    },
    "world": {
        "size": 64,
        "cell_size": 0.5,
        "blob_scale": 3.0,
        "class_frequencies": [float(f) for f in label_frequencies()],
        "forward_offsets": 6,
        "forward_spacing": 1.5,
        "lateral_spacing": 2.0,
        "noise_std": 0.05,
        "n_samples": 2000,
        "test_samples": 500,
    },
}

# Fields whose values are restricted beyond their JSON type.
_ENUMS = {
    ("optimizer", "steering", "method"): ["cem", "cma"],
    ("optimizer", "throttle", "method"): ["cem", "cma"],
    ("model", "architecture"): ["transformer", "lstm"],
    ("ensemble", "distance"): ["kl", "bhattacharyya"],
    ("planner", "predictor"): ["ensemble", "oracle"],
}
_NULLABLE_INTEGERS = {("optimizer", "steering", "lambda"), ("optimizer", "throttle", "lambda")}


def _schema_for(value: Any, path: tuple) -> Dict[str, Any]:
    """Derive a strict JSON schema from a default value."""
    if path in _ENUMS:
        return {"enum": _ENUMS[path]}
    if path in _NULLABLE_INTEGERS:
        return {"type": ["integer", "null"]}
    if isinstance(value, dict):
        return {
            "type": "object",
            "properties": {k: _schema_for(v, path + (k,)) for k, v in value.items()},
            "additionalProperties": False,
        }
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, list):
        item_type = "integer" if value and all(isinstance(v, int) for v in value) else "number"
        return {"type": "array", "items": {"type": item_type}}
    if value is None:
        return {"type": ["number", "null"]}
    raise TypeError(f"No schema rule for default at {'.'.join(path)}")


SCHEMA = _schema_for(DEFAULTS, ())


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge override into a copy of base."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _error_key_path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "additionalProperties" and isinstance(error.instance, dict):
        allowed = set(error.schema.get("properties", {}))
        extra = sorted(k for k in error.instance if k not in allowed)
        if extra:
            parts.append(extra[0])
    return ".".join(parts)


def validate(config: Dict[str, Any]) -> None:
    """Validate a fully merged configuration against the schema."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    error = jsonschema.exceptions.best_match(validator.iter_errors(config))
    if error is not None:
        raise ConfigError(error.message, key_path=_error_key_path(error))
    freqs = config["world"]["class_frequencies"]
    if len(freqs) != len(DEFAULTS["world"]["class_frequencies"]):
        raise ConfigError("expected one frequency per event class", key_path="world.class_frequencies")


def resolve(overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Merge overrides over the defaults and validate."""
    if overrides is not None and not isinstance(overrides, dict):
        raise ConfigError("top-level configuration must be a mapping")
    config = deep_merge(DEFAULTS, overrides or {})
    validate(config)
    return config


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Load a configuration file (JSON or YAML) and resolve it against the defaults.

    Args:
        path: Config file path; None means defaults only
        overrides: Values applied on top of the file (e.g. from CLI flags)

    Returns:
        Fully resolved configuration dictionary

    Raises:
        FileNotFoundError: If path does not exist
        ConfigError: If the file is malformed or fails validation
    """
    user: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        text = path.read_text()
        try:
            if path.suffix.lower() in (".yaml", ".yml"):
                user = yaml.safe_load(text) or {}
            else:
                user = json.loads(text)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot parse {path.name}: {e}") from e
        logger.info(f"Loaded configuration from {path}")
    if not isinstance(user, dict):
        raise ConfigError("top-level configuration must be a mapping")
    return resolve(deep_merge(user, overrides or {}))


def write_resolved(config: Dict[str, Any], output_dir: Union[str, Path]) -> Path:
    """Echo the resolved configuration to output_dir/config.resolved.json."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "config.resolved.json"
    target.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return target


def planner_threads() -> int:
    """Worker cap from PLANNER_THREADS (default: machine cores)."""
    raw = os.getenv("PLANNER_THREADS", "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning(f"Ignoring non-integer PLANNER_THREADS={raw!r}")
    return os.cpu_count() or 1


def log_level() -> str:
    return os.getenv("PLANNER_LOG_LEVEL", "INFO").upper()
