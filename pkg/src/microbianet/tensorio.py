"""Binary tensor dump format.

Each tensor is stored as one JSON header line
``{"shape": [...], "dtype": "f32"|"f64", "layout": "row-major"}``
followed immediately by the little-endian payload bytes. Checkpoints and
activation exports are built from this primitive.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def write_tensor(fh, arr):
    """Append one tensor entry to a binary file handle."""
    arr = np.asarray(arr)
    name = _NAMES.get(arr.dtype)
    if name is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} (use float32/float64)")
    header = {"shape": list(arr.shape), "dtype": name, "layout": "row-major"}
    fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode("ascii"))
    fh.write(np.ascontiguousarray(arr).astype(_DTYPES[name], copy=False).tobytes())


def read_tensor(fh):
    """Read one tensor entry written by write_tensor."""
    line = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            raise CheckpointError("truncated tensor entry (missing header)")
        if ch == b"\n":
            break
        line.extend(ch)
        if len(line) > 65536:
            raise CheckpointError("tensor header too long; file is not a tensor dump")
    try:
        header = json.loads(line.decode("ascii"))
        shape = tuple(int(d) for d in header["shape"])
        dtype = _DTYPES[header["dtype"]]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"malformed tensor header: {exc}") from exc
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * np.dtype(dtype).itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise CheckpointError("truncated tensor entry (short payload)")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def dump_tensor(path, arr):
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)
