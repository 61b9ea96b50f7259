"""Flat ``key = value`` configuration files.

Values are JSON literals (numbers, quoted strings, booleans, lists); a bare
word that is not valid JSON is read as a string. Keys may contain dots to
namespace module settings (``encoder.n_layers = 4``). Output is sorted by key
so that dumps are byte-stable.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Union


class ConfigError(ValueError):
    pass


def loads(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def dumps(cfg: Mapping[str, Any]) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{key} = {json.dumps(value, ensure_ascii=False)}")
    return "\n".join(lines) + "\n"


def load(path: Union[str, Path]) -> dict[str, Any]:
    return loads(Path(path).read_text(encoding="utf-8"))


def dump(cfg: Mapping[str, Any], path: Union[str, Path]) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def section(cfg: Mapping[str, Any], prefix: str) -> dict[str, Any]:
    """Sub-mapping of keys under ``prefix.``, with the prefix stripped."""
    p = prefix + "."
    return {k[len(p) :]: v for k, v in cfg.items() if k.startswith(p)}


def flatten(prefix: str, values: Mapping[str, Any]) -> dict[str, Any]:
    return {f"{prefix}.{k}": v for k, v in values.items()}
