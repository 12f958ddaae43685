"""Small file-output helpers: atomic writes and round-trip float formatting."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path


def fmt17(x: float) -> str:
    """Format a float with 17 significant digits (round-trip exact for doubles)."""
    return format(float(x), ".17g")


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write text to `path` via a same-directory temp file and rename.

    Readers never observe a partially written file; on failure the target
    is left untouched.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        umask = os.umask(0)
        os.umask(umask)
        os.fchmod(fd, 0o666 & ~umask)  # mkstemp defaults to 0600
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
