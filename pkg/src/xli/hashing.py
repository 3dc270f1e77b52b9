"""Content hashing helpers used for provenance tags and stage addressing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any


def bytes_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def json_sha256(obj: Any) -> str:
    """Hash of the canonical JSON rendering (sorted keys, compact separators)."""
    return bytes_sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    )
