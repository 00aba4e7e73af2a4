"""
Configuration Module
Resolves the working configuration: built-in defaults from
config/settings.py, then an optional key-value file, then --set overrides
"""
import copy
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from dotenv import dotenv_values

from config.settings import DESK_PRESET, SECTIONS
from src.errors import ConfigError, DataIOError

logger = logging.getLogger(__name__)

Config = Dict[str, Dict[str, Any]]

PRESETS = ("full", "desk")


def default_config(preset: str = "full") -> Config:
    """Copy of the built-in sections, with the desk preset merged on request"""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {', '.join(PRESETS)}")
    config = copy.deepcopy(SECTIONS)
    if preset == "desk":
        for section, values in DESK_PRESET.items():
            config[section].update(copy.deepcopy(values))
    return config


def coerce_value(raw: str, default: Any, key: str) -> Any:
    """Parse text into the type of the default value"""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [item.strip() for item in raw.strip("[]").split(",") if item.strip()]
            element = type(default[0]) if default else float
            return [element(item) for item in items]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}")


def format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def apply_values(config: Config, values: Dict[str, Optional[str]], origin: str):
    """Merge flat section.key=value pairs into config, rejecting unknown keys"""
    for dotted, raw in values.items():
        section, _, key = dotted.partition(".")
        if not key or section not in config or key not in config[section]:
            raise ConfigError(f"unknown configuration key {dotted!r} ({origin})")
        if raw is None:
            raise ConfigError(f"{dotted}: missing value ({origin})")
        config[section][key] = coerce_value(raw, config[section][key], dotted)


def read_key_values(path: Path) -> Dict[str, Optional[str]]:
    """Read a flat key=value document (# comments allowed)"""
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"config file not found: {path}")
    return dict(dotenv_values(path))


def write_key_values(path: Path, values: Dict[str, Any], header: str = ""):
    lines = [f"# {header}"] if header else []
    lines += [f"{key}={format_value(value)}" for key, value in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def flatten(config: Config, sections: Optional[Iterable[str]] = None) -> Dict[str, Any]:
    return {
        f"{section}.{key}": value
        for section, values in config.items()
        if sections is None or section in sections
        for key, value in values.items()
    }


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        overrides[key.strip()] = value
    return overrides


def load_config(config_file: Optional[Path] = None, overrides: Iterable[str] = (),
                preset: str = "full") -> Config:
    """
    Resolve the configuration

    Args:
        config_file: Optional key-value file of section.key=value lines
        overrides: section.key=value strings from --set, applied last
        preset: "full" or "desk"

    Returns:
        Dict of sections, each a dict of typed values
    """
    config = default_config(preset)
    if config_file is not None:
        apply_values(config, read_key_values(config_file), str(config_file))
    apply_values(config, parse_overrides(overrides), "--set")
    logger.debug(f"Resolved configuration: {flatten(config)}")
    return config
