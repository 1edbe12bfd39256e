"""Flat ``key = value`` config files and the error types shared across modules."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration value or key."""


def read_flat_config(path: str | Path) -> dict[str, str]:
    """Parse a ``key = value`` file. ``#`` starts a comment; blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def write_flat_config(values: dict[str, Any], path: str | Path) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(text: str, default: Any, name: str) -> Any:
    if isinstance(default, bool):
        return parse_bool(text)
    if text.strip().lower() == "none":
        return None
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}")
    return text


def config_key(field_name: str) -> str:
    """Map a dataclass field to its config key (``naw_sigma`` -> ``naw.sigma``)."""
    if field_name.startswith("naw_"):
        return "naw." + field_name[4:]
    return field_name


def apply_overrides(cfg, values: dict[str, str]):
    """Return a copy of dataclass ``cfg`` with string ``values`` applied by config key."""
    fields = {config_key(f.name): f.name for f in dataclasses.fields(cfg)}
    changes = {}
    for key, text in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        name = fields[key]
        changes[name] = _coerce(text, getattr(cfg, name), key)
    return dataclasses.replace(cfg, **changes)


def as_flat_dict(cfg) -> dict[str, Any]:
    return {config_key(f.name): getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
