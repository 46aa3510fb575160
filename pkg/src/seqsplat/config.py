"""Plain-text ``key = value`` configuration with section headers."""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path


def read_config(path: str | Path | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cp.read_string(p.read_text())
    return cp


def apply_overrides(cp: configparser.ConfigParser, overrides: list[str], default_section: str) -> None:
    """Apply ``key=value`` or ``section.key=value`` overrides in order."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        section, _, name = key.strip().rpartition(".")
        section = section or default_section
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][name] = value.strip()


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(x) for x in value.replace(",", " ").split())
    return value


def fill_dataclass(obj, section: configparser.SectionProxy | dict):
    """Return a copy of dataclass ``obj`` with matching keys replaced; unknown keys raise."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for k, v in section.items():
        if k not in names:
            raise KeyError(f"unknown option {k!r}")
        changes[k] = _coerce(v, getattr(obj, k))
    return dataclasses.replace(obj, **changes)


def format_dataclass(obj, section: str) -> str:
    lines = [f"[{section}]"]
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = " ".join(repr(float(x)) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
