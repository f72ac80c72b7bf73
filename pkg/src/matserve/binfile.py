"""Flat binary matrix files.

Layout (little-endian):

    offset  size  field
    0       4     magic "ALCH"
    4       2     version (u16, currently 1)
    6       8     rows (u64)
    14      8     cols (u64)
    22      ...   row-major float64 payload

File size is exactly 22 + 8*rows*cols bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ALCH"
VERSION = 1
HEADER_LEN = 22
_HEADER = struct.Struct("<4sHQQ")


class BinMatrixError(Exception):
    pass


def write_matrix(path, matrix):
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise BinMatrixError("matrix files hold 2-D arrays")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, matrix.shape[0], matrix.shape[1]))
        f.write(matrix.tobytes())


def read_header(f):
    raw = f.read(HEADER_LEN)
    if len(raw) != HEADER_LEN:
        raise BinMatrixError("file shorter than header")
    magic, version, rows, cols = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BinMatrixError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BinMatrixError(f"unsupported version {version}")
    return rows, cols


def read_rows(f, rows, cols, row_start, row_count):
    """Read a contiguous row block from an open file positioned anywhere."""
    if not 0 <= row_start <= row_start + row_count <= rows:
        raise BinMatrixError(
            f"rows [{row_start}, {row_start + row_count}) outside [0, {rows})"
        )
    f.seek(HEADER_LEN + row_start * cols * 8)
    nbytes = row_count * cols * 8
    raw = f.read(nbytes)
    if len(raw) != nbytes:
        raise BinMatrixError("file truncated mid-payload")
    return np.frombuffer(raw, dtype="<f8").reshape(row_count, cols).copy()


def read_matrix(path):
    with open(path, "rb") as f:
        rows, cols = read_header(f)
        return read_rows(f, rows, cols, 0, rows)
