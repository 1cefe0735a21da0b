"""Canonical JSON and atomic file writes.

Everything persisted by this package (manifests, logs, checkpoints,
reports) goes through canonical_dumps so that identical runs produce
byte-identical files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path


def canonical_dumps(obj) -> str:
    """JSON with sorted keys and no whitespace; stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a
    partially written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
