"""Configuration loading utilities."""

import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml
from dotenv import load_dotenv

from src.utils.errors import ConfigError


DEFAULT_CONFIG_PATH = Path("config/config.yaml")


def load_config(config_path: Optional[str | Path] = DEFAULT_CONFIG_PATH) -> Dict[str, Any]:
    """Load configuration from a YAML file.

    A missing default file yields an empty configuration (every RunConfig field has a
    default); a missing explicit path is an error.

    Args:
        config_path: Path to the configuration file, or None for defaults only

    Returns:
        Configuration dictionary

    Raises:
        ConfigError: If the file doesn't exist or is not valid YAML
    """
    load_dotenv()

    if config_path is None:
        return {}

    config_path = Path(config_path)
    if not config_path.exists():
        if config_path == DEFAULT_CONFIG_PATH:
            return {}
        raise ConfigError(f"Configuration file not found: {config_path}")

    try:
        with open(config_path, encoding="utf-8") as f:
            config = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {config_path}: {e}")

    if not isinstance(config, dict):
        raise ConfigError(f"Top level of {config_path} must be a mapping")

    return _substitute_env_vars(config)


def _substitute_env_vars(config: Any) -> Any:
    """Recursively substitute environment variables in config.

    Environment variables are specified as ${VAR_NAME} in the config.
    """
    if isinstance(config, dict):
        return {k: _substitute_env_vars(v) for k, v in config.items()}
    if isinstance(config, list):
        return [_substitute_env_vars(item) for item in config]
    if isinstance(config, str) and config.startswith("${") and config.endswith("}"):
        var_name = config[2:-1]
        return os.getenv(var_name, config)
    return config


def apply_overrides(config: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` overrides on top of a config dictionary.

    Values are parsed as YAML scalars/flow collections, so ``panel.start_year=2014``
    yields an int and ``laglead.lags=[1,2,3]`` a list.

    Args:
        config: Base configuration (not modified)
        overrides: Strings of the form ``dotted.key=value``

    Returns:
        New configuration dictionary with overrides applied
    """
    result = _deep_copy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value, got '{item}'")
        key_path, raw = item.split("=", 1)
        keys = [k for k in key_path.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"Empty key in override '{item}'")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse value in override '{item}': {e}")

        node = result
        for key in keys[:-1]:
            child = node.get(key)
            if not isinstance(child, dict):
                child = {}
                node[key] = child
            node = child
        node[keys[-1]] = value
    return result


def _deep_copy(config: Any) -> Any:
    if isinstance(config, dict):
        return {k: _deep_copy(v) for k, v in config.items()}
    if isinstance(config, list):
        return [_deep_copy(v) for v in config]
    return config
