"""Flat binary array container with a four-line ASCII header.

Layout: four ``key=value`` header lines (dtype, shape, byteorder,
pixel_size_mm) terminated by newlines, followed by the raw row-major
array bytes. The writer always emits little-endian payloads.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

_HEADER_KEYS = ("dtype", "shape", "byteorder", "pixel_size_mm")
_ALLOWED_DTYPES = {"float32", "float64", "int16", "int32", "uint8"}


class ArrayFormatError(ValueError):
    """Raised when an array file has a malformed or inconsistent header."""


def write_array(path: str | os.PathLike, array: np.ndarray, pixel_size_mm: float) -> None:
    """Write ``array`` to ``path`` in the container format.

    The dtype is preserved (must be one of the allowed scalar types) and the
    payload is stored little-endian regardless of the host byte order.
    """
    arr = np.asarray(array)
    if arr.dtype.name not in _ALLOWED_DTYPES:
        raise ArrayFormatError(f"unsupported dtype {arr.dtype.name!r} for {os.fspath(path)}")
    if arr.ndim == 0:
        raise ArrayFormatError(f"refusing to write 0-d array to {os.fspath(path)}")
    if not float(pixel_size_mm) > 0:
        raise ArrayFormatError(f"pixel_size_mm must be positive, got {pixel_size_mm!r}")
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = (
        f"dtype={arr.dtype.name}\n"
        f"shape={' '.join(str(s) for s in arr.shape)}\n"
        "byteorder=little\n"
        f"pixel_size_mm={float(pixel_size_mm)!r}\n"
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(little).tobytes())
    os.replace(tmp, path)


def read_array(path: str | os.PathLike) -> tuple[np.ndarray, float]:
    """Read a container file, returning ``(array, pixel_size_mm)``."""
    spath = os.fspath(path)
    with open(path, "rb") as fh:
        fields = {}
        for _ in range(4):
            line = fh.readline()
            if not line.endswith(b"\n"):
                raise ArrayFormatError(f"{spath}: truncated header")
            try:
                key, _, value = line.decode("ascii").rstrip("\n").partition("=")
            except UnicodeDecodeError as exc:
                raise ArrayFormatError(f"{spath}: non-ASCII header") from exc
            if not value:
                raise ArrayFormatError(f"{spath}: malformed header line {line!r}")
            fields[key] = value
        if tuple(fields) != _HEADER_KEYS:
            raise ArrayFormatError(
                f"{spath}: header keys {tuple(fields)!r} != expected {_HEADER_KEYS!r}"
            )
        if fields["dtype"] not in _ALLOWED_DTYPES:
            raise ArrayFormatError(f"{spath}: unsupported dtype {fields['dtype']!r}")
        if fields["byteorder"] not in ("little", "big"):
            raise ArrayFormatError(f"{spath}: bad byteorder {fields['byteorder']!r}")
        try:
            shape = tuple(int(s) for s in fields["shape"].split())
            pixel_size_mm = float(fields["pixel_size_mm"])
        except ValueError as exc:
            raise ArrayFormatError(f"{spath}: malformed header value ({exc})") from exc
        if not shape or any(s <= 0 for s in shape):
            raise ArrayFormatError(f"{spath}: bad shape {shape!r}")
        if pixel_size_mm <= 0:
            raise ArrayFormatError(f"{spath}: bad pixel_size_mm {pixel_size_mm!r}")
        order = "<" if fields["byteorder"] == "little" else ">"
        dtype = np.dtype(fields["dtype"]).newbyteorder(order)
        count = int(np.prod(shape))
        payload = fh.read(count * dtype.itemsize + 1)
        if len(payload) < count * dtype.itemsize:
            raise ArrayFormatError(
                f"{spath}: payload holds {len(payload)} bytes, "
                f"header implies {count * dtype.itemsize}"
            )
        if len(payload) > count * dtype.itemsize:
            raise ArrayFormatError(f"{spath}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), pixel_size_mm
