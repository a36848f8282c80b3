"""Flat ``key = value`` text configs.

One assignment per line, ``#`` starts a comment, lists are comma separated.
Keys may carry a section prefix (``model.``, ``train.``, ``distill.``) when a
single file configures several stages.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


class ConfigError(ValueError):
    """One or more invalid configuration entries; ``problems`` lists them all."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def parse(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    if problems:
        raise ConfigError(problems)
    return values


def read(path: str | Path) -> dict[str, str]:
    return parse(Path(path).read_text(encoding="utf-8"))


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def dump(obj, prefix: str = "") -> str:
    return "".join(f"{prefix}{f.name} = {format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def section(values: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


def _convert(text: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        return _convert(text, tp)
    if origin in (tuple, list):
        inner = args[0] if args else str
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_convert(item, inner) for item in items)
    if tp is bool:
        lowered = text.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return lowered in ("true", "1", "yes")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def build(cls, values: dict[str, str], base=None):
    """Instantiate dataclass ``cls`` from string values, overriding ``base`` when given."""
    obj, problems = build_lenient(cls, values, base)
    if problems:
        raise ConfigError(problems)
    return obj


def build_lenient(cls, values: dict[str, str], base=None):
    """Like build, but skip bad entries and return ``(obj, problems)``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    problems = [f"unknown key {k!r} for {cls.__name__}" for k in values if k not in names]
    kwargs = {}
    for key, text in values.items():
        if key not in names:
            continue
        try:
            kwargs[key] = _convert(text, hints[key])
        except (ValueError, StopIteration) as exc:
            problems.append(f"{key}: {exc}")
    if base is not None:
        return dataclasses.replace(base, **kwargs), problems
    return cls(**kwargs), problems
