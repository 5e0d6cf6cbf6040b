"""Canonical byte encodings.

All hashes in the ledger are computed over these encodings, so they must be
bit-exact and stable: every variable-length field carries a 4-byte big-endian
length prefix, integers are fixed-width big-endian, and JSON (used only for
values stored in world state) is emitted with sorted keys and no whitespace.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct

_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")


def pack_bytes(*fields: bytes) -> bytes:
    """Concatenate length-prefixed fields."""
    out = bytearray()
    for f in fields:
        out += _LEN.pack(len(f))
        out += f
    return bytes(out)


def unpack_bytes(buf: bytes, count: int, offset: int = 0) -> tuple[list[bytes], int]:
    """Read `count` length-prefixed fields starting at `offset`.

    Returns the fields and the offset just past the last one. Raises
    ValueError on truncation or absurd lengths.
    """
    fields = []
    pos = offset
    for _ in range(count):
        if pos + 4 > len(buf):
            raise ValueError("truncated length prefix")
        (n,) = _LEN.unpack_from(buf, pos)
        pos += 4
        if pos + n > len(buf):
            raise ValueError("field overruns buffer")
        fields.append(bytes(buf[pos:pos + n]))
        pos += n
    return fields, pos


def u64(value: int) -> bytes:
    return _U64.pack(value)


def read_u64(buf: bytes, offset: int = 0) -> int:
    if offset + 8 > len(buf):
        raise ValueError("truncated u64")
    return _U64.unpack_from(buf, offset)[0]


def u32(value: int) -> bytes:
    return _LEN.pack(value)


def read_u32(buf: bytes, offset: int = 0) -> int:
    if offset + 4 > len(buf):
        raise ValueError("truncated u32")
    return _LEN.unpack_from(buf, offset)[0]


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def int_to_bytes(value: int) -> bytes:
    """Big-endian magnitude bytes, minimal width (b"\\x00" for zero)."""
    if value < 0:
        raise ValueError("negative integers are not encoded")
    return value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")


def int_from_bytes(data: bytes) -> int:
    return int.from_bytes(data, "big")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)
