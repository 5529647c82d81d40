"""Plain ``key = value`` text used for model configs, run configs and echoes.

Blank lines and lines starting with ``#`` are ignored. Values are kept as
strings; callers convert them.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from .errors import ParseError


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ParseError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def dump_kv(values: Mapping[str, object], header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {v}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def write_kv(path, values: Mapping[str, object], header: str | None = None) -> None:
    Path(path).write_text(dump_kv(values, header), encoding="utf-8")
