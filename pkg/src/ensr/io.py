"""On-disk formats.

Raw container: 16-byte little-endian header (magic ``ENSR``, u32 height,
u32 width, u32 reserved) followed by row-major float64 values. The reserved
word is 0 for real payloads and 1 for complex payloads, which are stored as
interleaved (real, imag) pairs.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ensr.errors import DataError
from ensr.image_core import Image

MAGIC = b"ENSR"
_HEADER = struct.Struct("<4sIII")
REAL, COMPLEX = 0, 1


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_raw(path, array) -> None:
    """Write a 2D real or complex array in the raw container."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError(f"raw container holds 2D arrays, got shape {arr.shape}")
    if np.iscomplexobj(arr):
        body = np.ascontiguousarray(arr, dtype="<c16").tobytes()
        kind = COMPLEX
    else:
        body = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        kind = REAL
    _atomic_write(path, _HEADER.pack(MAGIC, arr.shape[0], arr.shape[1], kind) + body)


def read_raw(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing raw file {path}") from None
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, h, w, kind = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    dtype = "<c16" if kind == COMPLEX else "<f8"
    expected = h * w * np.dtype(dtype).itemsize
    if len(blob) - _HEADER.size != expected:
        raise DataError(f"{path}: payload is {len(blob) - _HEADER.size} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(h, w).astype(
        np.complex128 if kind == COMPLEX else np.float64)


def save_image(path, img: Image) -> None:
    write_raw(path, img.data)


def load_image(path, intensity_max: float = 1.0) -> Image:
    return Image(read_raw(path), intensity_max)


def write_pgm(path, img: Image) -> None:
    """Binary 16-bit PGM scaled so that ``intensity_max`` maps to 65535."""
    scale = 65535.0 / img.intensity_max if img.intensity_max > 0 else 0.0
    vals = np.clip(np.rint(img.data * scale), 0, 65535).astype(">u2")
    header = f"P5\n{img.width} {img.height}\n65535\n".encode("ascii")
    _atomic_write(path, header + vals.tobytes())


def read_pgm(path, intensity_max: float = 1.0) -> Image:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    vals = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return Image(vals.astype(np.float64) * (intensity_max / maxval), intensity_max)
