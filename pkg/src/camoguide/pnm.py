"""Binary PNM image I/O: P6 (RGB) for images, P5 (gray) for masks.

Maxval is fixed at 255 and writes are canonical (single-space header,
newline separators), so write -> read -> write round-trips bit-exactly.
In-memory values are floats in [0, 1] (byte value / 255).
"""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    pass


def _read_header(data: bytes, path: str):
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError(f"{path}: truncated header")
        return data[start:pos]

    magic = token()
    if magic in (b"P2", b"P3"):
        raise PnmError(f"{path}: ASCII PNM ({magic.decode()}) is not supported, use P5/P6")
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"{path}: unsupported magic {magic!r}")
    width = int(token())
    height = int(token())
    maxval = int(token())
    if maxval != 255:
        raise PnmError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    return magic, width, height, pos


def _read(path: str, magic_want: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, width, height, pos = _read_header(data, path)
    if magic != magic_want:
        raise PnmError(f"{path}: expected {magic_want.decode()}, found {magic.decode()}")
    need = width * height * channels
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise PnmError(f"{path}: payload has {len(raw)} bytes, expected {need}")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / 255.0
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 image as float32 3 x H x W in [0, 1]."""
    return _read(path, b"P6", 3)


def read_pgm(path: str) -> np.ndarray:
    """Read a binary P5 map as float32 H x W in [0, 1]."""
    return _read(path, b"P5", 1)


def _quantize(arr: np.ndarray) -> np.ndarray:
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0)
    return q.astype(np.uint8)


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a 3 x H x W float image in [0, 1] as binary P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise PnmError(f"write_ppm expects 3xHxW, got {image.shape}")
    _, h, w = image.shape
    payload = _quantize(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(payload)


def write_pgm(path: str, gray: np.ndarray) -> None:
    """Write an H x W float map in [0, 1] as binary P5."""
    if gray.ndim != 2:
        raise PnmError(f"write_pgm expects HxW, got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(_quantize(gray).tobytes())
