"""Dataset readers, zero-padding and empirical covariance."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DataFormatError",
    "DatasetMatrix",
    "covariance",
    "load_dataset",
    "next_power_of_two",
    "pad_columns",
    "pad_matrix",
    "parse_idx",
    "read_csv_matrix",
    "read_idx_images",
]

IDX_IMAGES_MAGIC = 0x00000803

# IDX type byte -> (numpy dtype, item size)
_IDX_TYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


class DataFormatError(ValueError):
    """Malformed input file; ``offset`` is the byte offset (or line number for CSV)."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = "" if offset is None else f" at offset {offset}"
        super().__init__(message + where)


@dataclass
class DatasetMatrix:
    data: np.ndarray
    provenance: str
    n_raw: int

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an IDX file (big-endian magic ``0x0000TTNN``: type TT, NN dims)."""
    if len(buf) < 4:
        raise DataFormatError("file shorter than IDX magic", 0)
    zero, dtype_code, ndim = struct.unpack_from(">HBB", buf, 0)
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim == 0:
        raise DataFormatError(f"bad IDX magic 0x{struct.unpack_from('>I', buf, 0)[0]:08x}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError("truncated IDX dimension header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dtype, size = _IDX_TYPES[dtype_code]
    expected = header + size * int(np.prod(dims, dtype=np.int64))
    if len(buf) != expected:
        raise DataFormatError(
            f"IDX payload size mismatch for dims {dims}: expected {expected} bytes, got {len(buf)}",
            min(len(buf), expected),
        )
    return np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """Image file (magic ``0x00000803``) as ``(count, rows * cols)`` floats in [0, 1]."""
    buf = _read_bytes(path)
    if len(buf) < 4 or struct.unpack_from(">I", buf, 0)[0] != IDX_IMAGES_MAGIC:
        got = struct.unpack_from(">I", buf, 0)[0] if len(buf) >= 4 else None
        raise DataFormatError(f"expected IDX image magic 0x00000803, got {got if got is None else hex(got)}", 0)
    images = parse_idx(buf)
    return images.reshape(images.shape[0], -1).astype(np.float64) / 255.0


def read_csv_matrix(path) -> np.ndarray:
    """One sample per row, decimal real64 fields; a non-numeric first row is a header."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec:
                continue
            try:
                vals = [float(v) for v in rec]
            except ValueError:
                if lineno == 1:
                    continue
                raise DataFormatError(f"non-numeric field in CSV row {lineno}", lineno) from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataFormatError(f"CSV row {lineno} has {len(vals)} fields, expected {width}", lineno)
            rows.append(vals)
    if not rows:
        raise DataFormatError("CSV file contains no data rows", 0)
    data = np.array(rows, dtype=np.float64)
    if not np.isfinite(data).all():
        raise DataFormatError("CSV contains non-finite values")
    return data


def load_dataset(path, fmt: str) -> DatasetMatrix:
    if fmt == "idx":
        data = read_idx_images(path)
        note = f"{path} (idx, pixels/255)"
    elif fmt == "csv":
        data = read_csv_matrix(path)
        note = f"{path} (csv)"
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    return DatasetMatrix(data, note, data.shape[1])


def next_power_of_two(n: int) -> int:
    return 1 << max(1, (int(n) - 1).bit_length())


def pad_columns(X: np.ndarray, n: int) -> np.ndarray:
    return np.hstack([X, np.zeros((X.shape[0], n - X.shape[1]))]) if n > X.shape[1] else X


def pad_matrix(M: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    k = M.shape[0]
    out[:k, :k] = M
    return out


def covariance(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(C, mean)`` with ``C = (1/m) sum (x - mean)(x - mean)^T``."""
    mean = X.mean(axis=0)
    Z = X - mean
    return Z.T @ Z / X.shape[0], mean
