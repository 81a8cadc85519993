"""CRC-verified binary container: JSON header plus raw float64 arrays.

Layout: 4-byte magic, version u8=1, u32 header length, UTF-8 JSON header,
the arrays named in ``header["arrays"]`` as little-endian float64 in listed
order, and a closing CRC32 over all preceding bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["ContainerFormatError", "write_container", "read_container"]

VERSION = 1


class ContainerFormatError(ValueError):
    """A container file failed structural or checksum validation."""


def write_container(path, magic: bytes, header: dict, arrays: dict) -> Path:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    path = Path(path)
    header = dict(header)
    header["arrays"] = [
        {"name": name, "shape": list(np.asarray(arr).shape)} for name, arr in arrays.items()
    ]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += magic
    blob += struct.pack("<B", VERSION)
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for name, arr in arrays.items():
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    path.write_bytes(bytes(blob))
    return path


def read_container(path, magic: bytes):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 13:
        raise ContainerFormatError(f"{path}: file too short")
    if raw[:4] != magic:
        raise ContainerFormatError(
            f"{path}: magic mismatch, expected {magic.decode('ascii', 'replace')}"
        )
    version = raw[4]
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise ContainerFormatError(f"{path}: checksum mismatch, file is corrupt or truncated")
    (header_len,) = struct.unpack("<I", raw[5:9])
    header_end = 9 + header_len
    try:
        header = json.loads(raw[9:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: unreadable header ({exc})") from exc
    arrays = {}
    offset = header_end
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw) - 4:
            raise ContainerFormatError(f"{path}: array {entry['name']!r} overruns the file")
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        )
        offset = end
    if offset != len(raw) - 4:
        raise ContainerFormatError(f"{path}: trailing bytes after declared arrays")
    return header, arrays
