"""Flat binary container for named arrays; round-trips bit-exactly.

Byte layout (all integers little-endian, data row-major):

    offset  size  field
    0       8     magic ``b"ASCKPT01"`` (the trailing two bytes version it)
    8       4     u32 entry count
    then per entry:
            2     u16 name length in bytes
            var   name, UTF-8
            1     u8 dtype code (0 = float32, 1 = float64, 2 = int64)
            1     u8 ndim
            8*nd  u64 dims
            var   raw array bytes, little-endian, C order

The same container backs parameter checkpoints and batch-norm buffers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ASCKPT01"

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def dump_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.dtype.newbyteorder("<")
        if np.dtype(le) not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        data = arr.astype(le, copy=False)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[np.dtype(le)], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(data.tobytes(order="C"))
    return b"".join(chunks)


def load_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:8]!r}; expected {MAGIC!r}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code} at byte {off}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        out[name] = arr
    if off != len(blob):
        raise CheckpointError(f"trailing bytes after offset {off}")
    return out


def save(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Atomic write: temp file then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dump_arrays(arrays))
    tmp.replace(path)


def load(path: str | Path) -> dict[str, np.ndarray]:
    return load_arrays(Path(path).read_bytes())
