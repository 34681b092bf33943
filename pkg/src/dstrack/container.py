"""Binary tensor container used for videos, checkpoints and golden files.

Layout (all integers little-endian):

    magic   4 bytes  b"DSTC"
    version u32      format version (currently 1)
    hlen    u64      length of the UTF-8 JSON header
    header  hlen bytes, json.dumps(..., sort_keys=True)
    count   u32      number of named arrays
    per array:
        nlen  u16, name utf-8
        dtype u8   (0 = float64, 1 = int64, 2 = uint8)
        ndim  u8
        dims  ndim * u64
        data  raw C-order bytes

The encoding is fully deterministic: identical header dict + arrays produce
identical bytes, which the end-to-end determinism tests rely on.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSTC"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("float64"): 0,
    np.dtype("int64"): 1,
    np.dtype("uint8"): 2,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(ValueError):
    """Raised for malformed container files."""


def save_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a header dict plus named arrays to ``path``."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<Q", len(hdr))
    blob += hdr
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<Q", d)
        blob += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (header, arrays) written by :func:`save_container`."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a DSTC container (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        nbytes = size * dtype.itemsize
        arrays[name] = (
            np.frombuffer(raw[off : off + nbytes], dtype=dtype).reshape(dims).copy()
        )
        off += nbytes
    return header, arrays


def save_manifest(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write the human-readable JSON twin of a container (shapes, not data)."""
    doc = {
        "format": "dstc-manifest",
        "version": FORMAT_VERSION,
        "header": header,
        "arrays": {
            name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in sorted(arrays.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
