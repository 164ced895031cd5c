"""Reader and writer for the IDX binary format used by MNIST-family datasets.

Layout (big endian): two zero bytes, a type code, the number of dimensions,
one uint32 per dimension, then the raw payload in C order.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from ..exceptions import ParseError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_TYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dtype: np.dtype
    shape: tuple


def _read(path):
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx_bytes(raw):
    if len(raw) < 4:
        raise ParseError("truncated header", offset=len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _TYPES or raw[3] == 0:
        raise ParseError(f"bad magic number 0x{magic:08X}", offset=0)
    dtype = _TYPES[raw[2]]
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ParseError("truncated dimension table", offset=len(raw))
    shape = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    available = len(raw) - header_end
    if available < expected:
        raise ParseError(f"truncated payload: expected {expected} bytes, found {available}",
                         offset=len(raw))
    if available > expected:
        raise ParseError(f"{available - expected} trailing bytes after payload",
                         offset=header_end + expected)
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=header_end)
    return data.reshape(shape), IdxHeader(magic=magic, dtype=dtype, shape=tuple(shape))


def parse_idx(path):
    """Parse an IDX file (optionally gzipped).

    Label files (one dimension) come back as int64 class indices.  Image
    files (two or more dimensions) of unsigned bytes are scaled to [0, 1].

    Returns
    -------
    data : ndarray
    header : IdxHeader
    """
    data, header = parse_idx_bytes(_read(path))
    if data.ndim == 1:
        return data.astype(np.int64), header
    if header.dtype == np.uint8:
        return data.astype(np.float64) / 255.0, header
    return data.astype(np.float64), header


def write_idx(path, array):
    """Write a uint8/int8 array in IDX format (used for fixtures and demos)."""
    array = np.ascontiguousarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {array.dtype}; use uint8 or int8")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())
