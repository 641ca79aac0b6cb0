"""File formats: tensor container, IDX image/label files, CSV result tables."""

from __future__ import annotations

import csv
import gzip
import struct
from typing import Dict, Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {"f": 0, "i": 1, "u": 1, "b": 1}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays (float64 or int64) to a little-endian binary file.

    Layout: ``b"TNSR"``, ``u32`` version, ``u32`` tensor count, then per
    tensor ``u32`` name length, UTF-8 name, ``u32`` dtype code (0 = f64,
    1 = i64), ``u32`` ndim, ``ndim x u32`` shape; payloads follow in the
    same order, row-major.
    """
    items = [(name, np.asarray(arr)) for name, arr in tensors.items()]
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", TENSOR_VERSION, len(items)))
        for name, arr in items:
            if arr.dtype.kind not in _CODES:
                raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<II", _CODES[arr.dtype.kind], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name, arr in items:
            dtype = _DTYPES[_CODES[arr.dtype.kind]]
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}")

    def unpack(fmt, pos):
        size = struct.calcsize(fmt)
        if len(data) < pos + size:
            raise FormatError("truncated header")
        return struct.unpack_from(fmt, data, pos), pos + size

    (version, count), pos = unpack("<II", 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    header = []
    for _ in range(count):
        (n,), pos = unpack("<I", pos)
        if len(data) < pos + n:
            raise FormatError("truncated header")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (code, ndim), pos = unpack("<II", pos)
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        shape, pos = unpack(f"<{ndim}I", pos)
        header.append((name, _DTYPES[code], shape))
    out = {}
    for name, dtype, shape in header:
        size = int(np.prod(shape, dtype=np.int64))
        if len(data) < pos + size * dtype.itemsize:
            raise FormatError(f"tensor {name!r}: truncated payload")
        out[name] = np.frombuffer(data, dtype, size, pos).reshape(shape).copy()
        pos += size * dtype.itemsize
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes")
    return out


def _read_maybe_gzip(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(data: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(data) < 4:
        raise FormatError(f"{what}: truncated header")
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{what}: truncated header")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    pos = 4 + 4 * ndim
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) < pos + size:
        raise FormatError(f"{what}: truncated payload ({len(data) - pos} of {size} bytes)")
    if len(data) > pos + size:
        raise FormatError(f"{what}: {len(data) - pos - size} trailing bytes")
    return np.frombuffer(data, np.uint8, size, pos).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an IDX image file and label file (optionally gzipped).

    Returns ``(images, labels)`` with images flattened to ``(n, rows*cols)``
    float64 in ``[0, 1]`` and labels as int64 class indices.
    """
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64)


def write_idx(images_path, labels_path, images, labels) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_csv(path, columns: Sequence[str], rows: Iterable[Mapping]) -> None:
    """Write dict rows with a header; floats use ``repr`` so they round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
