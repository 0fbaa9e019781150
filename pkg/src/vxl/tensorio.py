"""Binary tensor serialization.

Record layout: magic ``VXT1``, u32 rows, u32 cols, u8 precision code
(4 = float32, 8 = float64), then row-major little-endian element data.
Multi-tensor bundles concatenate records in one file and carry a JSON
manifest listing names, shapes and byte offsets.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import CODE_BY_DTYPE, DTYPE_BY_CODE

MAGIC = b"VXT1"
_HEADER = struct.Struct("<4sIIB")


def write_tensor(f, arr: np.ndarray):
    a = np.ascontiguousarray(np.atleast_2d(arr))
    if a.ndim != 2:
        raise FormatError(f"only 2-D tensors are serializable, got shape {arr.shape}")
    code = CODE_BY_DTYPE.get(a.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    f.write(_HEADER.pack(MAGIC, a.shape[0], a.shape[1], code))
    f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(f) -> np.ndarray:
    head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError("truncated tensor record header")
    magic, rows, cols, code = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code not in DTYPE_BY_CODE:
        raise FormatError(f"bad precision code {code}")
    dtype = np.dtype(DTYPE_BY_CODE[code]).newbyteorder("<")
    nbytes = rows * cols * dtype.itemsize
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError("truncated tensor record payload")
    return np.frombuffer(buf, dtype=dtype).reshape(rows, cols).astype(DTYPE_BY_CODE[code])


def dump_tensor(path, arr: np.ndarray):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_bundle(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Write named tensors as concatenated records plus a .json manifest."""
    path = Path(path)
    entries = []
    with open(path, "wb") as f:
        for name, arr in tensors.items():
            offset = f.tell()
            write_tensor(f, arr)
            entries.append({"name": name, "rows": int(np.atleast_2d(arr).shape[0]),
                            "cols": int(np.atleast_2d(arr).shape[1]), "offset": offset})
    manifest = {"tensors": entries, "meta": meta or {}}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    out = {}
    with open(path, "rb") as f:
        for entry in manifest["tensors"]:
            f.seek(entry["offset"])
            out[entry["name"]] = read_tensor(f)
    return out, manifest.get("meta", {})
