"""Checkpoint container: JSON header plus concatenated little-endian f64 payload.

Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, raw payload.
The header carries a version, the tensor manifest (name/shape/offset in
bytes), schedule parameters, a config echo, and the run seed. Round trips are
byte-exact: the header JSON is canonicalized and arrays are stored sorted by
name.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LPCHKPT\n"
VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, meta=None):
    """Write named f64 arrays plus metadata; arrays are sorted by name."""
    names = sorted(arrays)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        blob = arr.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        offset += len(blob)
        blobs.append(blob)
    header = {
        "version": VERSION,
        "manifest": manifest,
        "payload_bytes": offset,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (arrays dict, meta dict); validates the manifest exhaustively."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: version mismatch: file has {header.get('version')}, expected {VERSION}"
        )
    payload = raw[12 + hlen:]
    expected = header["payload_bytes"]
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload length mismatch: expected {expected} bytes, found {len(payload)}"
        )
    arrays = {}
    cursor = 0
    for entry in header["manifest"]:
        if entry["offset"] != cursor:
            raise CheckpointError(
                f"{path}: manifest offset for {entry['name']!r} is {entry['offset']}, "
                f"expected {cursor} (overlap or gap)"
            )
        nbytes = entry["nbytes"]
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if size * 8 != nbytes:
            raise CheckpointError(
                f"{path}: {entry['name']!r} shape {entry['shape']} disagrees with {nbytes} bytes"
            )
        arr = np.frombuffer(payload[cursor:cursor + nbytes], dtype="<f8").reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        cursor += nbytes
    if cursor != expected:
        raise CheckpointError(f"{path}: manifest covers {cursor} of {expected} payload bytes")
    return arrays, header["meta"]
