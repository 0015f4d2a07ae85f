"""
Configuration Utilities

Handles loading, validating and echoing experiment configuration.
"""

import copy
import logging
import os
from typing import Any, Dict, List, Optional, Union

import yaml

from eyeseg_dg.utils.errors import ConfigError, MissingInputError

logger = logging.getLogger(__name__)

PACKAGE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
STOCK_DOMAINS_FILE = os.path.join(PACKAGE_DIR, "config", "stock_domains.yaml")

TEST_KINDS = ("within_dataset", "cross_dataset", "all_vs_one", "leave_one_out")

DEFAULT_CONFIG: Dict[str, Any] = {
    "experiment": "default",
    "seed": 7,

    # Registry Settings
    "registry": {
        "domains": "stock",        # "stock" or a path to a domain spec YAML file
        "include": [],             # subset of domain names; empty keeps all
        "manifests": {},           # external domains: name -> directory with manifest.jsonl
        "height": 72,
        "width": 96,
        "images_per_subject": 50,
        "test_fraction": 0.25,
    },

    # Suite Settings
    "suite": {
        "kinds": list(TEST_KINDS),
        "targets": [],             # empty evaluates every registered domain
        "augmentation": [False],   # [False, True] runs both arms
    },

    # Training Settings
    "train": {
        "epochs": 20,
        "max_iterations": 0,       # 0 derives the iteration count from epochs
        "eval_every": 200,
        "multiset_quota": 3,
        "single_quota": 24,
        "validation_fraction": 0.2,
        "normalization": "instance",
        "precision": "float32",
        "selection_score": "three_term",
        "max_nonfinite": 3,
        "eval_batch_size": 32,
        "optimizer": {
            "lr": 5e-4,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
        },
        "loss_weights": {
            "seg": 1.0,
            "center": 1.0,
            "ellipse": 0.5,
        },
    },

    # Model Settings
    "model": {
        "preset": "default",       # "compact" = growth 1.0, groups 32, base channels 32
        "base_channels": 16,
        "growth": 1.4,
        "groups": 1,
        "blocks": 4,
        "regression_head": True,
    },

    # Augmentation Settings
    "augment": {
        "exposure_fallback": "image_median",
        "exposure_symmetric": False,
    },

    # Report Settings
    "report": {
        "formats": ["csv", "json", "boxplot", "tables"],
        "verdict_tolerance": 0.2,
    },

    # Output Settings
    "output": {
        "runs_dir": "runs",
    },
}

MODEL_PRESETS = {
    "default": {},
    "compact": {"base_channels": 32, "growth": 1.0, "groups": 32},
}

# Sections whose children are free-form (keys are domain names)
_OPEN_SECTIONS = {("registry", "manifests")}


def locate_key(text: str, path: List[Union[str, int]]) -> Optional[int]:
    """Return the 1-based line of a dotted key path inside a YAML document"""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = None
    for key in path:
        if isinstance(node, yaml.SequenceNode) and isinstance(key, int):
            if key >= len(node.value):
                return line
            node = node.value[key]
            line = node.start_mark.line + 1
            continue
        if not isinstance(node, yaml.MappingNode):
            return line
        for key_node, value_node in node.value:
            if key_node.value == key:
                line = key_node.start_mark.line + 1
                node = value_node
                break
        else:
            return line
    return line


def _merge(defaults: Dict[str, Any], overrides: Dict[str, Any], text: str, prefix: List[str]) -> Dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        path = prefix + [str(key)]
        if key not in defaults:
            line = locate_key(text, path)
            where = f" (line {line})" if line else ""
            raise ConfigError(f"Unknown configuration key '{'.'.join(path)}'{where}")
        if isinstance(defaults[key], dict) and tuple(path) not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"Configuration key '{'.'.join(path)}' must be a mapping")
            merged[key] = _merge(defaults[key], value, text, path)
        else:
            merged[key] = value
    return merged


def validate_config(config: Dict[str, Any]) -> None:
    """
    Check value ranges and enumerations

    Raises:
        ConfigError: Naming the offending dotted key
    """
    train = config["train"]
    model = config["model"]
    checks = [
        ("train.multiset_quota", train["multiset_quota"] >= 1),
        ("train.single_quota", train["single_quota"] >= 1),
        ("train.eval_every", train["eval_every"] >= 1),
        ("train.epochs", train["epochs"] >= 1),
        ("train.validation_fraction", 0.0 < train["validation_fraction"] < 1.0),
        ("train.max_nonfinite", train["max_nonfinite"] >= 1),
        ("train.eval_batch_size", train["eval_batch_size"] >= 1),
        ("train.normalization", train["normalization"] in ("instance", "batch")),
        ("train.precision", train["precision"] in ("float32", "float64")),
        ("train.selection_score", train["selection_score"] in ("three_term", "two_term")),
        ("model.preset", model["preset"] in MODEL_PRESETS),
        ("model.base_channels", model["base_channels"] >= 4),
        ("model.growth", model["growth"] >= 1.0),
        ("model.groups", model["groups"] >= 1),
        ("registry.test_fraction", 0.0 < config["registry"]["test_fraction"] < 1.0),
        ("augment.exposure_fallback", config["augment"]["exposure_fallback"] in ("image_median", "fixed_range")),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigError(f"Invalid value for '{key}'")
    for kind in config["suite"]["kinds"]:
        if kind not in TEST_KINDS:
            raise ConfigError(f"Unknown test kind '{kind}' in 'suite.kinds'")


def apply_model_preset(model_cfg: Dict[str, Any]) -> Dict[str, Any]:
    resolved = dict(model_cfg)
    resolved.update(MODEL_PRESETS[model_cfg.get("preset", "default")])
    return resolved


def load_config(config_file: Optional[str] = None) -> Dict[str, Any]:
    """
    Load configuration from a YAML file merged over the defaults

    Args:
        config_file: Path to YAML configuration file; None returns the defaults

    Returns:
        Dict containing configuration settings

    Raises:
        MissingInputError: If the file does not exist
        ConfigError: On YAML syntax errors, unknown keys or invalid values
    """
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_file is None:
        return config
    if not os.path.exists(config_file):
        raise MissingInputError(f"Config file {config_file} not found")

    with open(config_file, "r") as f:
        text = f.read()
    try:
        file_config = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse {config_file}: {e}") from e
    if not isinstance(file_config, dict):
        raise ConfigError(f"{config_file} must contain a mapping at the top level")

    config = _merge(config, file_config, text, [])
    validate_config(config)
    logger.info(f"Loaded configuration from {config_file}")
    return config


def dump_config(config: Dict[str, Any]) -> str:
    return yaml.safe_dump(config, sort_keys=True, default_flow_style=False)
