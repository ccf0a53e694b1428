"""Flat ``key=value`` configuration files and their mapping onto dataclasses.

Nested dataclass fields are addressed with dotted keys (``stft.hop_length``);
tuples are written comma-separated; ``none`` maps to ``None``.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def dump_kv(values: dict) -> str:
    return "".join(f"{k}={_format(v)}\n" for k, v in values.items())


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    return str(v)


def _convert(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        (tp,) = [a for a in args if a is not type(None)]
        return _convert(text, tp, key)
    try:
        if origin is tuple:
            items = [p.strip() for p in text.split(",") if p.strip()]
            elem = args[0]
            return tuple(_convert(p, elem, key) for p in items)
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if tp in (int, float, str):
            return tp(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}", key) from None
    raise ConfigError(f"unsupported field type for {key}: {tp!r}", key)


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = v
    return out


def build(cls, values: dict[str, str], base=None):
    """Instantiate dataclass ``cls`` from dotted string values layered over ``base``."""
    base = base if base is not None else cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    groups: dict[str, dict[str, str]] = {}
    direct = {}
    for key, text in values.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}", key)
        if rest:
            if not dataclasses.is_dataclass(hints[head]):
                raise ConfigError(f"unknown config key {key!r}", key)
            groups.setdefault(head, {})[rest] = text
        else:
            if dataclasses.is_dataclass(hints[head]):
                raise ConfigError(f"config key {key!r} names a section, not a value", key)
            direct[head] = _convert(text, hints[head], key)
    for head, sub in groups.items():
        try:
            direct[head] = build(hints[head], sub, getattr(base, head))
        except ConfigError as exc:
            full = f"{head}.{exc.key}" if exc.key else None
            raise ConfigError(str(exc).replace(repr(exc.key), repr(full)), full) from None
    try:
        return dataclasses.replace(base, **direct)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
