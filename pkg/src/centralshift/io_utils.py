"""Deterministic, atomic file output.

Every writer here produces byte-identical output for identical input: floats
are rendered with ``repr`` (the shortest round-trip form), JSON keys are
sorted, and nothing time- or machine-dependent is embedded.  Files are
written to a temporary sibling and moved into place with :func:`os.replace`,
so concurrent readers never observe a partial file and parallel writers of
*different* files never interfere.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

__all__ = [
    "atomic_write_text",
    "format_cell",
    "render_csv",
    "write_csv",
    "write_json",
    "read_json",
]


def atomic_write_text(path: str, text: str) -> str:
    """Write ``text`` to ``path`` atomically (temp file + rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return path


def format_cell(value) -> str:
    """Deterministic scalar rendering for CSV cells.

    ``None`` becomes the empty cell, booleans lowercase words, floats their
    shortest round-trip form, everything else ``str``.
    """
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(columns, rows, header_comments=()) -> str:
    """Render a CSV document with ``#`` comment lines documenting it."""
    buf = io.StringIO()
    for line in header_comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(columns))
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path: str, columns, rows, header_comments=()) -> str:
    """Atomically write a commented CSV file; returns the path."""
    return atomic_write_text(path, render_csv(columns, rows, header_comments))


def write_json(path: str, obj) -> str:
    """Atomically write sorted-key, indented JSON; returns the path."""
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    return atomic_write_text(path, text)


def read_json(path: str):
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)
