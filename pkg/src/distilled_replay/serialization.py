"""Binary container: a JSON header followed by a little-endian float payload.

Layout::

    b"DRBF" | uint32 LE header length | header (UTF-8 JSON) | payload

The header lists the arrays in payload order with their shapes and dtype.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DRBF"


class FormatError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict, dtype: str = "float64") -> bytes:
    le = np.dtype(dtype).newbyteorder("<")
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"dtype": dtype, "arrays": entries, "meta": meta}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype=le).tobytes() for v in arrays.values())
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise FormatError("not a DRBF container (bad magic)")
    if len(blob) < 8:
        raise FormatError("truncated DRBF header")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen].decode())
    le = np.dtype(header["dtype"]).newbyteorder("<")
    offset = 8 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * le.itemsize
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=le).astype(header["dtype"]).reshape(shape)
        offset += nbytes
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict, dtype: str = "float64") -> None:
    Path(path).write_bytes(dumps(arrays, meta, dtype))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
