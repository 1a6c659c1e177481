"""On-disk formats: sample arrays, metrics CSV and atomic writes.

Sample file layout (all integers little-endian)::

    offset  size      field
    0       8         magic  b"CVSAMPLE"
    8       4         uint32 format version (1)
    12      4         uint32 dtype tag (1 = float64, 2 = float32)
    16      4         uint32 rank
    20      8*rank    uint64 dims
    ...               array data, little-endian, C order

Metrics CSV: first line ``# covsampler-metrics v1``, then a header row and
one row per run.  Floats are written with ``repr`` so reruns are byte-equal.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile

import numpy as np

SAMPLE_MAGIC = b"CVSAMPLE"
SAMPLE_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_TAG_OF = {np.dtype("float64"): 1, np.dtype("float32"): 2}

CSV_MAGIC = "# covsampler-metrics"
CSV_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout or version."""


class SchemaError(FormatError):
    """A metrics CSV lacks required columns."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_samples(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAG_OF:
        raise FormatError(f"unsupported sample dtype {arr.dtype}")
    tag = _TAG_OF[arr.dtype]
    header = SAMPLE_MAGIC + struct.pack("<III", SAMPLE_VERSION, tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()


def decode_samples(data: bytes) -> np.ndarray:
    if len(data) < 20 or data[:8] != SAMPLE_MAGIC:
        raise FormatError("not a sample file (bad magic)")
    version, tag, rank = struct.unpack_from("<III", data, 8)
    if version != SAMPLE_VERSION:
        raise FormatError(f"unsupported sample file version {version}")
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    offset = 20 + 8 * rank
    if len(data) < offset:
        raise FormatError("truncated sample header")
    shape = struct.unpack_from(f"<{rank}Q", data, 20)
    dtype = _DTYPE_TAGS[tag]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise FormatError(f"payload has {len(data) - offset} bytes, header implies {expected}")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))


def write_samples(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_samples(arr))


def read_samples(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_samples(fh.read())


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def encode_csv(rows, columns) -> bytes:
    buf = io.StringIO()
    buf.write(f"{CSV_MAGIC} v{CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue().encode("utf-8")


def write_csv(path, rows, columns) -> None:
    atomic_write_bytes(path, encode_csv(rows, columns))


def read_csv(path, required) -> list[dict]:
    """Rows as dicts of strings; raises :class:`SchemaError` on missing columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith(CSV_MAGIC):
            raise FormatError(f"{path}: missing '{CSV_MAGIC} v<N>' header line")
        version = first[len(CSV_MAGIC):].strip()
        if version != f"v{CSV_VERSION}":
            raise FormatError(f"{path}: unsupported metrics file version {version!r}")
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: no header row")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"schema error: {path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    for i, row in enumerate(rows):
        if None in row or any(v is None for v in row.values()):
            raise FormatError(f"{path}: row {i + 1} has the wrong number of fields")
    return rows
