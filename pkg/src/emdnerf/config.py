"""Flat ``key = value`` experiment files.

Lines are ``key = value``; ``#`` starts a comment. ``include = other.cfg``
splices another file in place (paths relative to the including file), and
``profile = paper|desk`` selects the base values the remaining keys
override. Later keys win.
"""

from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .trainer import PROFILES, TrainConfig

_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key, text):
    kind = _TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def read_entries(path, _seen=None):
    """Ordered ``(key, raw value)`` pairs with includes expanded."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    seen = seen | {path}
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key == "include":
            entries.extend(read_entries(path.parent / value, seen))
        else:
            entries.append((key, value))
    return entries


def parse_entries(entries):
    profile = "desk"
    values = {}
    for key, value in entries:
        if key == "profile":
            if value not in PROFILES:
                raise ConfigError(f"unknown profile {value!r}")
            profile = value
        else:
            values[key] = parse_value(key, value)
    return profile, values


def load_config(path=None, overrides=None, require_seed=True):
    """Build a validated :class:`TrainConfig` from a file plus overrides."""
    entries = read_entries(path) if path is not None else []
    profile, values = parse_entries(entries)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if require_seed and "seed" not in values:
        raise ConfigError("config must set a seed (key 'seed' or --seed)")
    cfg = TrainConfig(**{**PROFILES[profile], **values})
    return cfg.validate()


def dump_config(cfg):
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
