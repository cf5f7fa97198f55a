"""Little-endian binary container shared by datasets and checkpoints.

Layout::

    magic      4 bytes
    version    u16
    header     u32 length + UTF-8 text (config echo / metadata)
    count      u32
    records    count x (u32 length + bytes)
    crc32      u32 over every preceding byte

A record is a sequence of named arrays, each encoded as::

    name       u16 length + UTF-8
    dtype      u8 (0 = float64, 1 = int32, 2 = uint8, 3 = int64)
    ndim       u8
    dims       ndim x u32
    payload    raw little-endian values
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from pathlib import Path

import numpy as np

VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i4"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    """File is truncated, corrupted, or not the expected container kind."""


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode()
            pos += n
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise ContainerError(f"array {name!r} overruns its record")
            out[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise ContainerError(f"malformed record: {exc}") from None
    return out


def write_container(path, magic: bytes, header: str, records: list[bytes]) -> int:
    """Write atomically; returns the CRC32 stored in the trailer."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    buf = io.BytesIO()
    buf.write(magic)
    htext = header.encode()
    buf.write(struct.pack("<HI", VERSION, len(htext)))
    buf.write(htext)
    buf.write(struct.pack("<I", len(records)))
    for rec in records:
        buf.write(struct.pack("<I", len(rec)))
        buf.write(rec)
    body = buf.getvalue()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)
    return crc


def read_container(path, magic: bytes) -> tuple[str, list[bytes]]:
    data = Path(path).read_bytes()
    if len(data) < 4 + 2 + 4 + 4 + 4:
        raise ContainerError(f"{path}: file too short ({len(data)} bytes)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError(f"{path}: checksum mismatch")
    if body[:4] != magic:
        raise ContainerError(f"{path}: bad magic {body[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    pos = 10
    header = body[pos:pos + hlen].decode()
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    records = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        records.append(body[pos:pos + n])
        pos += n
    if pos != len(body):
        raise ContainerError(f"{path}: trailing bytes after last record")
    return header, records


def file_crc(path) -> int:
    """CRC32 stored in a container trailer."""
    data = Path(path).read_bytes()
    return struct.unpack("<I", data[-4:])[0]
