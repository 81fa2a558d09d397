"""Image file I/O: binary PPM (P6) / PGM (P5) readers and writers plus PNG
reading through Pillow. Color images load as (3, H, W) float64 in [0,1];
rasters load as (H, W) uint16 (8-bit files still arrive as their raw values).
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _read_netpbm(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file")
    magic = data[:2].decode()
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    channels = 3 if magic == "P6" else 1
    if maxval < 256:
        raw = np.frombuffer(data, dtype=np.uint8, offset=pos)
        need = width * height * channels
    else:
        raw = np.frombuffer(data, dtype=">u2", offset=pos)
        need = width * height * channels
    if raw.size < need:
        raise DataError(f"{path}: pixel data truncated "
                        f"({raw.size} values, need {need})")
    arr = raw[:need].astype(np.uint16).reshape(height, width, channels)
    return magic, arr if channels == 3 else arr[:, :, 0]


def read_image(path) -> np.ndarray:
    """Load a color image (PPM P6 or PNG) as (3, H, W) float64 in [0,1]."""
    if str(path).lower().endswith(".png"):
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    magic, arr = _read_netpbm(path)
    if magic != "P6":
        raise DataError(f"{path}: expected a color PPM image")
    maxval = 255 if arr.max() < 256 else 65535
    return np.ascontiguousarray(arr.transpose(2, 0, 1).astype(np.float64) / maxval)


def read_raster(path) -> np.ndarray:
    """Load a gray raster (PGM P5 or PNG) as (H, W) uint16 of raw values."""
    if str(path).lower().endswith(".png"):
        from PIL import Image
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint16)
    magic, arr = _read_netpbm(path)
    if magic != "P5":
        raise DataError(f"{path}: expected a grayscale PGM raster")
    return arr


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write (3, H, W) float values in [0,1] as an 8-bit binary PPM."""
    rgb = np.asarray(rgb, dtype=np.float64)
    q = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.transpose(1, 2, 0).tobytes())


def write_pgm(path, raster: np.ndarray) -> None:
    """Write a bool or uint8 (H, W) raster as an 8-bit binary PGM;
    boolean True maps to 255."""
    raster = np.asarray(raster)
    if raster.dtype == np.bool_:
        raster = raster.astype(np.uint8) * 255
    q = raster.astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def write_pgm16(path, values: np.ndarray) -> None:
    """Write (H, W) floats in [0,1] as a 16-bit PGM (big-endian samples)."""
    q = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 65535.0),
                0, 65535).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(q.tobytes())
