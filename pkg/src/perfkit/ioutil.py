"""Deterministic file I/O helpers.

All structured outputs use sorted JSON keys and exact shortest round-trip
float formatting, so identical inputs produce byte-identical files and
saved values re-load bit-for-bit.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import FormatError


def fmt_float(x: float) -> str:
    """Shortest decimal string that parses back to exactly ``x``."""
    return repr(float(x))


def write_json(path: str | Path, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise FormatError(f"file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{p}: invalid JSON ({e})") from e
