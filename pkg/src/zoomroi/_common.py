"""Shared helpers: deterministic JSON/CSV writing and error types."""

from __future__ import annotations

import json
from pathlib import Path


class DivergenceError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


def dump_json(obj, path):
    """Write obj as JSON with sorted keys, LF endings, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path, header, rows):
    """Write CSV with LF endings and no trailing whitespace.

    Floats are serialized with repr so that reading them back restores the
    exact double.
    """
    lines = [header]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)
