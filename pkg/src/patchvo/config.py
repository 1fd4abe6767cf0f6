"""Plain-text ``key=value`` configs and named random sub-streams."""

from __future__ import annotations

import dataclasses
import zlib
from pathlib import Path
from typing import Any, TypeVar

import numpy as np

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def _coerce(value: str, kind: Any, key: str):
    kind = {"int": int, "float": float, "str": str, "bool": bool}.get(kind, kind)
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"invalid value for {key!r}: {value!r}") from None
    return value


def from_kv(cls: type[T], mapping: dict[str, str], **overrides) -> T:
    """Build dataclass ``cls`` from string values; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(mapping) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(v, fields[k].type, k) for k, v in mapping.items()}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def to_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for the named component of a seeded run."""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
