"""Binary checkpoint format for named parameter tensors.

Layout (all integers little endian):

* magic ``MDET1`` (5 bytes),
* uint32 tensor count,
* per tensor: uint16 name length, UTF-8 name bytes, uint8 dtype code
  (0 = float32, 1 = float64), uint8 rank, uint32 per dimension, then
  the raw element bytes in C order, little endian.

Round-trip is bitwise exact, which the determinism checks depend on.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MDET1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, named_arrays) -> None:
    """Write an ordered mapping of name -> numpy array."""
    items = list(named_arrays.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            # asarray keeps rank-0 tensors rank 0 (ascontiguousarray would
            # promote them to rank 1).
            arr = np.asarray(arr, order="C")
            if arr.dtype not in _CODE_FOR:
                raise FormatError(
                    f"{path}: tensor '{name}' has unsupported dtype {arr.dtype}"
                )
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"{path}: tensor name too long")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(le.tobytes(order="C"))


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint back into an ordered dict of numpy arrays."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path, "count"))
        for i in range(count):
            (nlen,) = struct.unpack(
                "<H", _read_exact(fh, 2, path, f"name length #{i}"))
            name = _read_exact(fh, nlen, path, f"name #{i}").decode("utf-8")
            code, rank = struct.unpack(
                "<BB", _read_exact(fh, 2, path, f"header of '{name}'"))
            if code not in _DTYPE_CODES:
                raise FormatError(f"{path}: unknown dtype code {code}")
            dims = struct.unpack(
                "<" + "I" * rank,
                _read_exact(fh, 4 * rank, path, f"dims of '{name}'"))
            dtype = _DTYPE_CODES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, path, f"data of '{name}'")
            arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
            if name in out:
                raise FormatError(f"{path}: duplicate tensor name '{name}'")
            out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after {count} tensors")
    return out
