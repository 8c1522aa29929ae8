"""Flat `key = value` run configuration with layered overrides.

A config file is plain text: one assignment per line, `#` starts a
comment, blank lines are ignored.  Values are typed by the default they
override, so the defaults table doubles as the schema.  Resolution
order is fixed: built-in defaults, then file values, then command-line
overrides.
"""

from __future__ import annotations

from typing import Any, Mapping


class ConfigError(Exception):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {n}: expected key = value")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(raw: str, template: Any) -> Any:
    """Parse a raw string into the type of the default it replaces."""
    if isinstance(template, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if isinstance(template, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"expected integer, got {raw!r}") from exc
    if isinstance(template, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"expected number, got {raw!r}") from exc
    if isinstance(template, tuple):
        try:
            return tuple(float(part) for part in raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"expected comma-separated numbers, got {raw!r}") from exc
    return raw


def resolve(defaults: Mapping[str, Any], *layers: Mapping[str, Any]
            ) -> dict[str, Any]:
    """Merge override layers onto defaults; later layers win.

    String values are coerced against the default's type; already-typed
    values pass through.  Keys absent from the defaults are rejected so
    typos fail loudly.
    """
    merged = dict(defaults)
    for layer in layers:
        for key, value in layer.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = coerce(value, defaults[key]) if isinstance(value, str) \
                else value
    return merged


def format_config(cfg: Mapping[str, Any]) -> str:
    """Render a resolved config as reparseable flat text."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if value == "":          # unset path-like entries cannot round-trip
            continue
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
