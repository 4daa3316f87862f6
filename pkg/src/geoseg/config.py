"""Pipeline configuration: defaults < config file < command-line flags.

Every tunable is addressed by a dotted key such as ``merge.overlap_threshold``.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Mapping

ENV_VAR = "GEOSEG_CONFIG"

DEFAULTS: dict[str, dict[str, Any]] = {
    "height": {"edges": [15.0, 40.0]},
    "merge": {"overlap_threshold": 0.5},
    "tile": {"tile_size": 512, "min_clipped_area_ratio": 0.25, "pad_value": 0},
    "convert": {"window": 51, "offset": 0.0, "connectivity": 8, "min_area": 0},
    "filter": {"iou_threshold": 0.5, "discard_ratio": 0.5, "score_threshold": 0.5, "geometry_mode": "mask"},
    "evaluate": {"iou_threshold": 0.5, "score_threshold": 0.5, "geometry_mode": "mask", "group_matching": True},
    "stats": {"bin_width": 5.0},
}


class ConfigError(ValueError):
    pass


def _flatten(tree: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return [float(v) for v in value]
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def parse_assignment(text: str) -> tuple[str, Any]:
    """Split ``key=value``; the value is read as JSON when it parses."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> dict[str, dict[str, Any]]:
    """Build the effective configuration.

    ``path`` falls back to the ``GEOSEG_CONFIG`` environment variable. The
    file may be nested or use dotted keys. ``None`` overrides are skipped so
    unset CLI flags leave lower layers alone.

    Raises:
        ConfigError: unknown keys, wrong value types, unreadable file.
    """
    cfg = copy.deepcopy(DEFAULTS)
    flat_defaults = _flatten(DEFAULTS)
    layers: list[tuple[str, Mapping[str, Any]]] = []
    path = path or os.environ.get(ENV_VAR) or None
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        layers.append((str(path), _flatten(raw)))
    if overrides:
        layers.append(("flags", {k: v for k, v in overrides.items() if v is not None}))
    for source, layer in layers:
        for key, value in layer.items():
            if key not in flat_defaults:
                raise ConfigError(f"unknown config key {key!r} (from {source})")
            section, name = key.split(".", 1)
            cfg[section][name] = _coerce(key, value, flat_defaults[key])
    return cfg
