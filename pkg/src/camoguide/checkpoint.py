"""Binary checkpoint container.

Layout: magic ``RFO1`` | u32 version | u32 entry count | entries | u32 CRC32
of everything before it. Entry: u16 name length | name (utf-8) | u8 dtype
code (0 = float32, 1 = uint8, 2 = float64) | u8 rank | u32 dims | raw
little-endian payload. Entries are written sorted by name, so save -> load
-> save is byte-identical.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"RFO1"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, entries: dict[str, np.ndarray]) -> None:
    names = sorted(entries)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate entry names")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(names))
    for name in names:
        arr = np.ascontiguousarray(entries[name])
        code = _CODE_FOR.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype(_DTYPE_CODES[code]).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated at byte {len(data)}")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0: {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    stored_crc, = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch at offset {len(data) - 4}")
    pos = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
        except struct.error:
            raise CheckpointError(f"{path}: truncated entry header at offset {pos}") from None
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} at offset {pos}")
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = n * dtype.itemsize
        if pos + nbytes > len(data) - 4:
            raise CheckpointError(f"{path}: truncated payload for {name!r} at offset {pos}")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(dims).copy()
        pos += nbytes
        if name in entries:
            raise CheckpointError(f"{path}: duplicate entry {name!r} at offset {pos}")
        entries[name] = arr
    if pos != len(data) - 4:
        raise CheckpointError(f"{path}: {len(data) - 4 - pos} stray bytes at offset {pos}")
    return entries
