"""Envelope framing and the little-endian payload codec.

Header layout (14 bytes, little-endian)::

    u8 version | u8 msg_type | u32 round | u16 sender | u16 receiver | u32 payload_len

``receiver == 0xFFFF`` addresses the server (client to server) or every
client (server broadcast). Ring elements travel as ``n`` unsigned 64-bit
words in ``[0, q)``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FramingError
from ..ring import RingElement, RingParams

WIRE_VERSION = 1
HEADER = struct.Struct("<BBIHHI")
HEADER_SIZE = HEADER.size
SERVER_ID = 0xFFFF
BROADCAST = 0xFFFF
MAX_PAYLOAD = 64 * 1024 * 1024


class MsgType(enum.IntEnum):
    REGISTER = 1
    SETUP_PARAMS = 2
    PK_SHARE = 3
    SECRET_SHARE = 4
    CPK_BCAST = 5
    CT_UPLOAD = 6
    AGG_BCAST = 7
    SELECT_COEFFS = 8
    DEC_SHARE = 9
    ROUND_RESULT = 10
    NEWUSER_REQ = 11
    AUX_SHARE = 12


@dataclass(frozen=True)
class Envelope:
    msg_type: int
    round: int
    sender: int
    receiver: int
    payload: bytes = b""
    version: int = WIRE_VERSION

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise FramingError(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        try:
            head = HEADER.pack(
                self.version, int(self.msg_type), self.round, self.sender, self.receiver, len(self.payload)
            )
        except struct.error as exc:
            raise FramingError(f"header field out of range: {exc}") from None
        return head + bytes(self.payload)

    @classmethod
    def decode(cls, data: bytes) -> "Envelope":
        env, used = cls.decode_prefix(data)
        if used != len(data):
            raise FramingError(f"{len(data) - used} trailing bytes after envelope")
        return env

    @classmethod
    def decode_prefix(cls, data: bytes) -> tuple["Envelope", int]:
        """Decode one envelope from the front of ``data``; return it and its size."""
        if len(data) < HEADER_SIZE:
            raise FramingError(f"need {HEADER_SIZE} header bytes, got {len(data)}")
        version, mtype, rnd, sender, receiver, plen = HEADER.unpack_from(data, 0)
        if version != WIRE_VERSION:
            raise FramingError(f"unsupported wire version {version}")
        if plen > MAX_PAYLOAD:
            raise FramingError(f"declared payload length {plen} exceeds {MAX_PAYLOAD}")
        end = HEADER_SIZE + plen
        if len(data) < end:
            raise FramingError(f"truncated payload: declared {plen}, have {len(data) - HEADER_SIZE}")
        return cls(mtype, rnd, sender, receiver, bytes(data[HEADER_SIZE:end]), version), end

    def type_name(self) -> str:
        try:
            return MsgType(self.msg_type).name
        except ValueError:
            return f"UNKNOWN({self.msg_type})"


def parse_header(head: bytes) -> tuple[int, int, int, int, int, int]:
    if len(head) != HEADER_SIZE:
        raise FramingError("bad header length")
    fields = HEADER.unpack(head)
    if fields[0] != WIRE_VERSION:
        raise FramingError(f"unsupported wire version {fields[0]}")
    if fields[5] > MAX_PAYLOAD:
        raise FramingError(f"declared payload length {fields[5]} exceeds {MAX_PAYLOAD}")
    return fields


def serialize_ring_element(a: RingElement) -> bytes:
    return np.mod(a.coeffs, a.params.q).astype("<u8").tobytes()


def deserialize_ring_element(data: bytes, params: RingParams) -> RingElement:
    if len(data) != 8 * params.n:
        raise FramingError(f"ring element needs {8 * params.n} bytes, got {len(data)}")
    words = np.frombuffer(data, dtype="<u8")
    if np.any(words >= np.uint64(params.q)):
        raise FramingError("coefficient not below q")
    # q < 2^62 so every word fits in int64
    arr = words.astype(np.int64)
    half = (params.q + 1) // 2
    return RingElement._raw(np.where(arr >= half, arr - params.q, arr), params)


class Writer:
    """Append-only builder for payloads."""

    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u16(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<H", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<Q", v))
        return self

    def f64(self, v: float) -> "Writer":
        self._parts.append(struct.pack("<d", v))
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def bytes_(self, b: bytes) -> "Writer":
        self.u32(len(b))
        self._parts.append(bytes(b))
        return self

    def ring(self, a: RingElement) -> "Writer":
        self._parts.append(serialize_ring_element(a))
        return self

    def zq(self, v: int, q: int) -> "Writer":
        return self.u64(v % q)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Cursor over a payload; every malformed read raises :class:`FramingError`."""

    def __init__(self, data: bytes):
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, k: int) -> memoryview:
        if k < 0 or self._pos + k > len(self._data):
            raise FramingError(f"payload truncated at offset {self._pos} (wanted {k} bytes)")
        out = self._data[self._pos : self._pos + k]
        self._pos += k
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, k: int) -> bytes:
        return bytes(self._take(k))

    def bytes_(self) -> bytes:
        return bytes(self._take(self.u32()))

    def ring(self, params: RingParams) -> RingElement:
        return deserialize_ring_element(bytes(self._take(8 * params.n)), params)

    def zq(self, q: int) -> int:
        v = self.u64()
        if v >= q:
            raise FramingError("scalar not below q")
        return v - q if v >= (q + 1) // 2 else v

    def remaining(self) -> int:
        return len(self._data) - self._pos

    def done(self) -> None:
        if self.remaining():
            raise FramingError(f"{self.remaining()} unexpected trailing payload bytes")
