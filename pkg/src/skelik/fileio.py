"""Versioned binary container shared by every on-disk artifact.

Layout: 8-byte magic, little-endian uint64 header length, a UTF-8 JSON header
(sorted keys) describing kind, version, metadata and array table, then the raw
little-endian C-ordered array bytes in table order. Writing the same content
twice gives byte-identical files.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SKELIK\x00\x01"


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def write_container(path, kind: str, version: int, meta: dict, arrays: dict):
    table = []
    blobs = []
    offset = 0
    for name in arrays:
        a = _le(np.asarray(arrays[name]))
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str.replace(">", "<").replace("=", "<"),
                      "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "version": version, "meta": meta, "arrays": table},
                        sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a skelik container")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def read_container(path, kind: str, version: int):
    """Return ``(meta, arrays)``; raise FormatError on kind/version mismatch."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a skelik container")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        if header.get("kind") != kind:
            raise FormatError(f"{path}: expected a '{kind}' file, found '{header.get('kind')}'")
        if header.get("version") != version:
            raise FormatError(f"{path}: unsupported {kind} version {header.get('version')}, "
                              f"expected version {version}")
        body = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["meta"], arrays
