"""Single-file tensor checkpoints.

Layout::

    b"ULAB" | version (1 byte) | header length (uint32 LE) | JSON header | payload

The JSON header holds free-form ``meta`` plus a tensor table of
``{name, dtype, shape, offset}`` entries; ``offset`` counts bytes from the
start of the payload. Payloads are raw little-endian arrays in table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ULAB"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "dtype": _CODES[dt], "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": table}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]) + struct.pack("<I", len(header)) + header)
        for raw in blobs:
            fh.write(raw)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a ULAB checkpoint")
    if data[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {data[4]}")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    base = 9 + hlen
    out = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype=dt, count=count, offset=start)
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return out, header["meta"]
