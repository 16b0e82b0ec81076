"""Deterministic binary container used for checkpoints and data pools.

Layout (all integers little-endian):

    bytes 0..3   magic ``b"CFC1"``
    bytes 4..11  uint64 header length H
    bytes 12..   UTF-8 JSON header of H bytes, then the raw array payloads

The header is ``{"kind": str, "version": int, "meta": {...}, "arrays":
[{"name", "dtype", "shape"}, ...]}``; payloads follow in header order as
C-contiguous little-endian bytes. The writer never embeds timestamps, so
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .exceptions import FormatError, VersionError

MAGIC = b"CFC1"


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write-then-rename so readers never observe partial files."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_container(path: str, kind: str, version: int, meta: dict,
                   arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        arr = arr.astype(dt, copy=False)
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"kind": kind, "version": int(version), "meta": meta, "arrays": entries}
    ).encode("utf-8")
    blob = b"".join([MAGIC, struct.pack("<Q", len(header)), header, *payloads])
    atomic_write_bytes(path, blob)


def load_container(path: str, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated container, {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    (header_len,) = struct.unpack("<Q", blob[4:12])
    if 12 + header_len > len(blob):
        raise FormatError(f"{path}: header truncated at byte 12 (needs {header_len} bytes)")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e
    if header.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
    if header.get("version") != version:
        raise VersionError(
            f"{path}: version {header.get('version')!r} not supported (expected {version})")
    arrays: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(
                f"{path}: payload for {entry['name']!r} truncated at byte {offset}")
        arrays[entry["name"]] = (
            np.frombuffer(blob[offset:offset + nbytes], dtype=dt).reshape(shape).copy()
        )
        offset += nbytes
    return header["meta"], arrays
