"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .errors import FormatError

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _parse(buf: bytes, path):
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise FormatError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(v) for v in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(f"{path}: bad dimensions or maxval ({width}x{height}, {maxval})")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    data = buf[pos:pos + n]
    if len(data) != n:
        raise FormatError(f"{path}: expected {n} bytes of pixel data, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def read_pnm(path) -> np.ndarray:
    """Read a P5 or P6 file into a uint8 array ([H,W] or [H,W,3])."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"{path}: {e.strerror}") from None
    return _parse(buf, path)


def read_pgm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a grayscale PGM")
    return arr


def _atomic_write(path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_pgm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = arr.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_ppm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("write_ppm expects an [H,W,3] uint8 array")
    h, w, _ = arr.shape
    _atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def to_u8(x):
    """Quantize [0,1] floats to bytes by ``round(v*255)``."""
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)


def normalize_u8(x):
    """Min-max stretch to 0..255; a constant map becomes all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.uint8)
    return to_u8((x - lo) / (hi - lo))
