"""CSV and atomic file-writing helpers.

Numbers are rendered with Python's shortest round-trip representation so
that repeated runs of the same computation produce byte-identical files.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path


def fmt(x) -> str:
    """Shortest decimal string that round-trips to the same float."""
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    return repr(float(x))


def write_text_atomic(path, text: str) -> Path:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv_atomic(path, header: list[str], rows) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(x) if not isinstance(x, str) else x for x in row))
    return write_text_atomic(path, "\n".join(lines) + "\n")
