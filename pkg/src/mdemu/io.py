"""Binary tensor files and multi-tensor bundles.

A tensor record is ``b"SMT1"``, a little-endian ``u32`` rank, ``rank`` x
``u64`` dimensions and a little-endian float64 payload in row-major order.
A bundle is a sequence of records in one file, indexed by a JSON manifest
that lists each name, shape and byte offset.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import DataError

MAGIC = b"SMT1"


def _values(array) -> np.ndarray:
    # ndarray.data is a memoryview, so only unwrap objects that are not arrays
    return array if isinstance(array, np.ndarray) else np.asarray(getattr(array, "data", array))


def write_record(fh: BinaryIO, array) -> int:
    arr = np.require(np.asarray(array, dtype="<f8"), requirements="C")  # keeps rank 0
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))
    return 8 + 8 * arr.ndim + arr.nbytes


def read_record(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise DataError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_record(fh, _values(array))


def load_tensor(path) -> np.ndarray:
    if not Path(path).exists():
        raise DataError(f"tensor file {path} not found")
    with open(path, "rb") as fh:
        return read_record(fh)


def save_bundle(path, arrays: Mapping[str, np.ndarray]) -> list[dict]:
    """Write named arrays into one file; return manifest entries."""
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(_values(arr), dtype=np.float64)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += write_record(fh, arr)
    return entries


def load_bundle(path, entries: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        for e in entries:
            fh.seek(e["offset"])
            arr = read_record(fh)
            if list(arr.shape) != list(e["shape"]):
                raise DataError(f"manifest shape mismatch for {e['name']}")
            out[e["name"]] = arr
    return out


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
