"""Flat ``section.key = value`` configuration format.

One assignment per line, ``#`` starts a comment, tuples are comma separated.
Parsing is strict: unknown sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(tp, text: str, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p for p in text.split(",") if p.strip()] if text else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse(args[0], p, key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse(a, p, key) for a, p in zip(args, parts))
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        return _parse(args[0], text, key)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def to_lines(obj, prefix: str) -> list[str]:
    return [f"{prefix}.{f.name} = {_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def to_text(obj, prefix: str) -> str:
    return "\n".join(to_lines(obj, prefix)) + "\n"


def parse_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def apply_pairs(obj, pairs: dict[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with ``pairs`` (bare field names) applied."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for k, v in pairs.items():
        if k not in names:
            raise ConfigError(f"unknown key {prefix + '.' if prefix else ''}{k}")
        updates[k] = _parse(hints[k], v, f"{prefix}.{k}" if prefix else k)
    out = dataclasses.replace(obj, **updates)
    validate = getattr(out, "validate", None)
    if validate is not None:
        validate()
    return out


def from_text(cls, text: str, prefix: str):
    """Parse a dataclass echoed by :func:`to_text`."""
    pairs = {}
    for k, v in parse_pairs(text):
        sec, _, name = k.partition(".")
        if sec != prefix:
            raise ConfigError(f"unexpected section {sec!r} (want {prefix!r})")
        pairs[name] = v
    return apply_pairs(cls(), pairs, prefix)


def read_text(path) -> str:
    return Path(path).read_text()
