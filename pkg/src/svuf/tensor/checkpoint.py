"""Checkpoint container.

Layout: ``b"SVUF1"``, an unsigned 64-bit little-endian manifest length, the
UTF-8 JSON manifest, then every array as raw little-endian float64 values.
The manifest lists ``name``, ``shape`` and byte ``offset`` (relative to the
start of the data block) for each array, plus a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

MAGIC = b"SVUF1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps(
        {"entries": entries, "meta": dict(meta or {}), "data_bytes": offset},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + _LEN.pack(len(manifest)) + manifest + b"".join(blobs)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic: not an SVUF1 checkpoint")
    head = len(MAGIC) + _LEN.size
    if len(blob) < head:
        raise CheckpointError("truncated header")
    (mlen,) = _LEN.unpack_from(blob, len(MAGIC))
    if len(blob) < head + mlen:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(blob[head : head + mlen].decode("utf-8"))
        entries = manifest["entries"]
        data_bytes = int(manifest["data_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    data = blob[head + mlen :]
    if len(data) != data_bytes:
        raise CheckpointError(f"data block is {len(data)} bytes, manifest declares {data_bytes}")
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if e["offset"] != expected or e["offset"] + nbytes > data_bytes:
            raise CheckpointError(f"entry {e['name']!r}: offset/shape inconsistent with data block")
        arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=e["offset"]).reshape(shape).astype(np.float64)
        expected += nbytes
    if expected != data_bytes:
        raise CheckpointError("manifest entries do not cover the data block")
    return arrays, manifest.get("meta", {})


def save(path: Union[str, Path], arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
