"""Named-tensor file format used by checkpoints and gallery exports.

Layout: 8-byte magic ``HCTNSR01``, a little-endian uint64 header length, a
UTF-8 JSON header, then the raw little-endian float64 blocks concatenated in
header order.  The header carries a required ``version`` field, the tensor
names/shapes, and an arbitrary JSON ``meta`` payload (e.g. an encoder config).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

MAGIC = b"HCTNSR01"
FORMAT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f8").tobytes())
    header = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise InvalidInputError(f"{path}: not a tensor file (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if "version" not in header:
            raise InvalidInputError(f"{path}: header missing version field")
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            tensors[entry["name"]] = data.astype(np.float64).reshape(shape)
    return tensors, header.get("meta", {})
