"""Flat binary container: magic, JSON header, little-endian array payload.

Layout::

    b"FIIHPAR1" | uint64 LE header length | UTF-8 JSON header | payload

The header lists each array's name, dtype, shape and byte offset into the
payload, plus a free-form ``meta`` mapping.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FIIHPAR1"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": dict(meta or {}), "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a parameter container (bad magic)")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {header.get('version')!r}")
    payload = memoryview(blob)[start + hlen :]
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise ContainerError(f"array {e['name']!r} runs past end of file")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return arrays, header["meta"]


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
