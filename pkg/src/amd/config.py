"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Values are coerced to the type of
the matching dataclass field; tuples are written comma-separated.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def _coerce(key, raw, typ):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, float, str):
            return typ(raw)
        if origin is tuple:
            args = typing.get_args(typ)
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(args[0](p) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(a(p) for a, p in zip(args, parts))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def build(cls, values: dict[str, str], prefix: str = "", strict: bool = True):
    """Instantiate dataclass ``cls`` from string values, keeping defaults for absent keys."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = set()
    for f in dataclasses.fields(cls):
        names.add(prefix + f.name)
        key = prefix + f.name
        if key in values:
            kwargs[f.name] = _coerce(key, values[key], hints[f.name])
    if strict:
        unknown = [k for k in values if k.startswith(prefix) and k not in names]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cls(**kwargs)


def dump(obj, prefix: str = "") -> list[str]:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{prefix}{f.name} = {v}")
    return lines
