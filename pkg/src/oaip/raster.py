"""Reading and writing PGM (P5), PPM (P6) and RAWF rasters.

RAWF layout: b"RAWF", then height, width, channels as little-endian u32,
then height*width*channels little-endian float32 values, row-major,
channel-interleaved.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

RAWF_MAGIC = b"RAWF"
_MAX_DIM = 1 << 16


class RasterError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.offset = offset


def _netpbm_header(data: bytes, path, fields: int):
    """Parse whitespace-separated header integers after the 2-byte magic, skipping comments."""
    pos = 2
    values = []
    while len(values) < fields:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise RasterError(path, start, "expected a header integer")
        values.append((int(data[start:pos]), start))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise RasterError(path, pos, "expected whitespace after the header")
    return values, pos + 1


def _read_netpbm(data: bytes, path, channels: int) -> np.ndarray:
    header, start = _netpbm_header(data, path, 3)
    (width, wo), (height, ho), (maxval, mo) = header
    for v, off, name in ((width, wo, "width"), (height, ho, "height")):
        if not 0 < v <= _MAX_DIM:
            raise RasterError(path, off, f"{name} {v} out of range 1..{_MAX_DIM}")
    if maxval != 255:
        raise RasterError(path, mo, f"only 8-bit rasters are supported (maxval {maxval})")
    need = width * height * channels
    have = len(data) - start
    if have < need:
        raise RasterError(path, len(data), f"truncated payload: {have} of {need} bytes")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    return pixels.reshape(height, width, channels).astype(np.float32)


def _read_rawf(data: bytes, path) -> np.ndarray:
    if len(data) < 16:
        raise RasterError(path, len(data), "truncated RAWF header")
    height, width, channels = struct.unpack_from("<III", data, 4)
    for v, off, name in ((height, 4, "height"), (width, 8, "width")):
        if not 0 < v <= _MAX_DIM:
            raise RasterError(path, off, f"{name} {v} out of range 1..{_MAX_DIM}")
    if channels not in (1, 3):
        raise RasterError(path, 12, f"channel count {channels} must be 1 or 3")
    need = height * width * channels * 4
    if len(data) - 16 < need:
        raise RasterError(path, len(data), f"truncated payload: {len(data) - 16} of {need} bytes")
    values = np.frombuffer(data, dtype="<f4", count=height * width * channels, offset=16)
    return values.reshape(height, width, channels).astype(np.float32)


def read_raster(path, replicate: bool = True) -> np.ndarray:
    """H x W x C float32 pixels; single-channel images become 3 identical channels."""
    data = Path(path).read_bytes()
    magic = data[:4]
    if magic == RAWF_MAGIC:
        img = _read_rawf(data, path)
    elif data[:2] == b"P5":
        img = _read_netpbm(data, path, 1)
    elif data[:2] == b"P6":
        img = _read_netpbm(data, path, 3)
    else:
        raise RasterError(path, 0, f"unknown format magic {magic!r}")
    if replicate and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_rawf(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f4")
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    Path(path).write_bytes(RAWF_MAGIC + struct.pack("<III", h, w, c) + img.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM output needs a 2-D array")
    data = np.clip(img, 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + data.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM output needs an H x W x 3 array")
    data = np.clip(img, 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + data.tobytes())
