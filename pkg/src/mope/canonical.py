"""Canonical JSON (sorted keys, compact, shortest round-trip floats) and hashing."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def canonical_bytes(obj) -> bytes:
    return canonical_dumps(obj).encode("ascii")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_json(obj) -> str:
    return sha256_bytes(canonical_bytes(obj))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, obj) -> str:
    """Write canonical JSON plus a trailing newline; returns the file hash."""
    data = canonical_bytes(obj) + b"\n"
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def clean_float(x: float) -> float:
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialised")
    return float(x)
