"""Checkpoint container.

Layout::

    b"MOPECKPT"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         canonical JSON
    payload                          little-endian float64 tensors, back to back

The manifest carries the model config, the architecture record, provenance
and a tensor index of ``{name, shape, offset, length}`` entries (offsets and
lengths in bytes, relative to the payload start). Tensors are stored in
sorted name order, so saving a loaded checkpoint reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from mope.canonical import canonical_bytes, sha256_bytes
from mope.model import ENCODERS, DualEncoder, LayerArch, ModelConfig, expected_shapes

MAGIC = b"MOPECKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sQ")


class FormatError(ValueError):
    pass


def checkpoint_bytes(model: DualEncoder) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name in sorted(model.params):
        arr = np.asarray(model.params[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "arch": {enc: [asdict(la) for la in model.arch[enc]] for enc in ENCODERS},
        "provenance": model.provenance,
        "tensors": index,
        "payload_bytes": offset,
    }
    head = canonical_bytes(manifest)
    return _HEADER.pack(MAGIC, len(head)) + head + b"".join(chunks)


def save_checkpoint(model: DualEncoder, path: str | Path) -> str:
    """Write ``model`` to ``path``; returns the sha256 of the file contents."""
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def parse_checkpoint(data: bytes) -> DualEncoder:
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than the checkpoint header")
    magic, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("bad magic; not a checkpoint container")
    start = _HEADER.size + mlen
    if start > len(data):
        raise FormatError("manifest length overruns the file")
    try:
        manifest = json.loads(data[_HEADER.size : start].decode("ascii"))
        cfg = ModelConfig.from_dict(manifest["config"])
        arch = {enc: tuple(LayerArch(**la) for la in manifest["arch"][enc]) for enc in ENCODERS}
        index = manifest["tensors"]
        declared = int(manifest["payload_bytes"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}") from None

    payload = memoryview(data)[start:]
    if len(payload) != declared:
        raise FormatError(f"payload is {len(payload)} bytes, manifest declares {declared}")
    shapes = expected_shapes(cfg, arch)
    params = {}
    cursor = 0
    for entry in index:
        name, shape = entry["name"], tuple(entry["shape"])
        off, length = int(entry["offset"]), int(entry["length"])
        if off != cursor:
            raise FormatError(f"tensor {name}: offset {off} leaves a gap or overlap (expected {cursor})")
        if off + length > len(payload):
            raise FormatError(f"tensor {name}: offset overflow past payload end")
        if length != 8 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {name}: shape {list(shape)} does not match {length} payload bytes")
        if shapes.get(name) != shape:
            raise FormatError(f"tensor {name}: shape {list(shape)} inconsistent with the architecture record")
        params[name] = np.frombuffer(payload[off : off + length], dtype="<f8").reshape(shape).astype(np.float64)
        cursor += length
    missing = set(shapes) - set(params)
    if missing:
        raise FormatError(f"tensor {sorted(missing)[0]}: missing from the container")
    return DualEncoder(cfg, arch, params, manifest.get("provenance", {}))


def load_checkpoint(path: str | Path) -> DualEncoder:
    return parse_checkpoint(Path(path).read_bytes())
