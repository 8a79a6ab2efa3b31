"""Flat ``key = value`` run-config files."""

from __future__ import annotations

import dataclasses
import math
import types
import typing
from pathlib import Path

from .errors import ConfigurationError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_kv(text)


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def coerce(value: str, tp, key: str = "?"):
    """Convert a config string to the annotated field type."""
    tp, optional = _unwrap_optional(tp)
    if optional and value.lower() in ("", "none", "null"):
        return None
    try:
        if tp is bool:
            v = value.lower()
            if v in _TRUE:
                return True
            if v in _FALSE:
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            f = float(value)
            if not math.isfinite(f):
                raise ValueError(value)
            return f
        if tp is str:
            return value
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(coerce(v.strip(), inner, key) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {value!r} as {tp}") from None
    raise ConfigurationError(f"{key}: unsupported field type {tp}")


def fill_dataclass(cls, values: dict[str, str], strict: bool = True):
    """Build ``cls`` from string values, consuming the keys it knows.

    Returns ``(instance_kwargs, leftover)``.
    """
    hints = typing.get_type_hints(cls)
    kw, rest = {}, {}
    names = {f.name for f in dataclasses.fields(cls)}
    for k, v in values.items():
        if k in names:
            kw[k] = coerce(v, hints[k], k)
        else:
            rest[k] = v
    if strict and rest:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(rest))}")
    return kw, rest
