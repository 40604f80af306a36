"""Flat ``key = value`` config files, one assignment per line."""

from __future__ import annotations

from pathlib import Path

from .errors import ParseError


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ParseError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ParseError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_kv_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv_text(path.read_text(), source=str(path))


def format_kv(mapping: dict[str, str]) -> str:
    return "".join(f"{key} = {mapping[key]}\n" for key in mapping)
