"""Writers for the toolkit's on-disk formats, built from the byte layouts.

This package talks to the quantization toolkit only through its files
and CLI, so the formats are implemented here directly from the frozen
layout documentation (docs/formats.md in the toolkit repo) rather than
imported:

  tensor blob   16-byte header '<4sBBBB4H' (magic SQTB, version, dtype
                code 0=float32/1=int8/2=int32, rank 1..4, reserved,
                four uint16 dims) + raw row-major payload
  float model   JSON manifest next to a weight blob whose 8-byte header
                is '<4sHH' (magic SQFB, version, reserved); manifest
                tensor offsets index into the payload after the header

All multi-byte values are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ExporterError

TENSOR_MAGIC = b"SQTB"
FLOAT_BLOB_MAGIC = b"SQFB"
FLOAT_MODEL_FORMAT = "shiftquant-float-model"
FORMAT_VERSION = 1

_TENSOR_HEADER = struct.Struct("<4sBBBB4H")
_BLOB_HEADER = struct.Struct("<4sHH")

_DTYPE_CODES = {"float32": 0, "int8": 1, "int32": 2}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write one float32/int8/int32 array as a self-describing blob."""
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype("<f4")
    elif arr.dtype == np.int8:
        arr = arr.astype("<i1")
    elif np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype("<i4")
    else:
        raise ExporterError(f"unsupported tensor dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise ExporterError(f"tensor rank must be 1..4, got {arr.ndim}")
    if max(arr.shape) > 0xFFFF:
        raise ExporterError(f"dimension too large for the format: {arr.shape}")
    dims = list(arr.shape) + [0] * (4 - arr.ndim)
    code = _DTYPE_CODES[arr.dtype.name]
    with open(path, "wb") as f:
        f.write(_TENSOR_HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, code, arr.ndim, 0, *dims))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor blob, keeping the stored dtype."""
    raw = Path(path).read_bytes()
    if len(raw) < _TENSOR_HEADER.size:
        raise ExporterError(f"{path}: truncated header")
    magic, version, code, rank, _, *dims = _TENSOR_HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC or version != FORMAT_VERSION or code not in _CODE_DTYPES:
        raise ExporterError(f"{path}: not a readable tensor blob")
    shape = tuple(dims[:rank])
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    payload = raw[_TENSOR_HEADER.size :]
    if len(payload) != int(np.prod(shape)) * dtype.itemsize:
        raise ExporterError(f"{path}: payload does not match dims {shape}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_float_model(
    manifest_path: str | Path,
    blob_path: str | Path,
    nodes: list[dict],
    tensors: dict[str, np.ndarray],
) -> int:
    """Write manifest JSON plus a float32 weight blob; returns payload bytes.

    `tensors` must be ordered by first reference so offsets are
    reproducible; every array must already be normalized to float32.
    """
    table: dict[str, dict] = {}
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr.astype("<f4"))
        table[name] = {
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": len(payload),
            "nbytes": arr.nbytes,
        }
        payload += arr.tobytes()
    manifest = {
        "format": FLOAT_MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "blob": Path(blob_path).name,
        "nodes": nodes,
        "tensors": table,
    }
    with open(blob_path, "wb") as f:
        f.write(_BLOB_HEADER.pack(FLOAT_BLOB_MAGIC, FORMAT_VERSION, 0))
        f.write(bytes(payload))
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return len(payload)
