"""Binary wire formats.

Frame layout (all multi-byte integers big-endian):

    magic      u32   0x44474554 ("DGET")
    version    u8    0x01
    frameType  u8    0 HELLO, 1 HELLO_ACK, 2 FRAGMENT, 3 CONTROL, 4 PING, 5 PONG
    flags      u8    bit0 = compressed
    bodyLength u32
    body       bodyLength bytes
    crc32      u32   over header + body

FRAGMENT body:

    messageId  16 bytes
    index      u16
    total      u16
    channelId  u32
    chunk      remaining bytes

HELLO body:      nucleusId 16 B, protocolCount u8, protocol codes u8 * n
HELLO_ACK body:  nucleusId 16 B, negotiated u8 (0xFF = none),
                 protocolCount u8, protocol codes u8 * n
PING/PONG body:  token u64

Control bodies and higher-level payloads use tagged fields
(tag u8, length u16, value); repeated tags concatenate, which is how
values larger than 64 KiB (snapshots) are carried.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import CorruptFrame, HandshakeVersionMismatch
from .ids import ID_LEN, EntityId

MAGIC = 0x44474554
VERSION = 0x01

F_HELLO = 0
F_HELLO_ACK = 1
F_FRAGMENT = 2
F_CONTROL = 3
F_PING = 4
F_PONG = 5

FRAME_NAMES = {
    F_HELLO: "HELLO",
    F_HELLO_ACK: "HELLO_ACK",
    F_FRAGMENT: "FRAGMENT",
    F_CONTROL: "CONTROL",
    F_PING: "PING",
    F_PONG: "PONG",
}

FLAG_COMPRESSED = 0x01

_HDR = struct.Struct(">IBBBI")
_CRC = struct.Struct(">I")
_FRAG = struct.Struct(">HHI")
_TAG = struct.Struct(">BH")
_U64 = struct.Struct(">Q")

HEADER_LEN = _HDR.size          # 11
TRAILER_LEN = _CRC.size         # 4
FRAGMENT_OVERHEAD = ID_LEN + _FRAG.size  # 24


@dataclass(slots=True)
class Frame:
    frame_type: int
    flags: int
    body: bytes


def pack_frame(frame_type: int, flags: int, body: bytes) -> bytes:
    header = _HDR.pack(MAGIC, VERSION, frame_type, flags, len(body))
    return header + body + _CRC.pack(zlib.crc32(header + body))


def peek_body_length(header: bytes) -> int:
    """Body length from a raw 11-byte header; used to delimit TCP streams."""
    if len(header) < HEADER_LEN:
        raise ValueError("short header")
    magic, version, _, _, body_len = _HDR.unpack_from(header)
    if magic != MAGIC:
        raise CorruptFrame("bad magic")
    return body_len


def parse_frame(data: bytes) -> Frame:
    """Parse and CRC-check one complete frame."""
    if len(data) < HEADER_LEN + TRAILER_LEN:
        raise CorruptFrame("frame truncated")
    magic, version, frame_type, flags, body_len = _HDR.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFrame("bad magic")
    if len(data) != HEADER_LEN + body_len + TRAILER_LEN:
        raise CorruptFrame("length mismatch")
    payload = data[: HEADER_LEN + body_len]
    (crc,) = _CRC.unpack_from(data, HEADER_LEN + body_len)
    if zlib.crc32(payload) != crc:
        raise CorruptFrame("crc mismatch")
    if version != VERSION:
        raise HandshakeVersionMismatch("version 0x%02x" % version)
    return Frame(frame_type, flags, bytes(data[HEADER_LEN : HEADER_LEN + body_len]))


def pack_fragment_body(message_id: bytes, index: int, total: int, channel_id: int, chunk: bytes) -> bytes:
    return message_id + _FRAG.pack(index, total, channel_id) + chunk


def unpack_fragment_body(body: bytes) -> tuple[bytes, int, int, int, bytes]:
    if len(body) < FRAGMENT_OVERHEAD:
        raise CorruptFrame("fragment body truncated")
    message_id = bytes(body[:ID_LEN])
    index, total, channel_id = _FRAG.unpack_from(body, ID_LEN)
    return message_id, index, total, channel_id, bytes(body[FRAGMENT_OVERHEAD:])


def pack_hello(nucleus_id: bytes, codes: list[int]) -> bytes:
    return nucleus_id + bytes([len(codes)]) + bytes(codes)


def parse_hello(body: bytes) -> tuple[bytes, list[int]]:
    if len(body) < ID_LEN + 1:
        raise CorruptFrame("hello truncated")
    n = body[ID_LEN]
    codes = list(body[ID_LEN + 1 : ID_LEN + 1 + n])
    if len(codes) != n:
        raise CorruptFrame("hello protocol list truncated")
    return bytes(body[:ID_LEN]), codes


NEGOTIATED_NONE = 0xFF


def pack_hello_ack(nucleus_id: bytes, negotiated: int | None, codes: list[int]) -> bytes:
    neg = NEGOTIATED_NONE if negotiated is None else negotiated
    return nucleus_id + bytes([neg, len(codes)]) + bytes(codes)


def parse_hello_ack(body: bytes) -> tuple[bytes, int | None, list[int]]:
    if len(body) < ID_LEN + 2:
        raise CorruptFrame("hello_ack truncated")
    neg: int | None = body[ID_LEN]
    if neg == NEGOTIATED_NONE:
        neg = None
    n = body[ID_LEN + 1]
    codes = list(body[ID_LEN + 2 : ID_LEN + 2 + n])
    if len(codes) != n:
        raise CorruptFrame("hello_ack protocol list truncated")
    return bytes(body[:ID_LEN]), neg, codes


def pack_token(token: int) -> bytes:
    return _U64.pack(token & 0xFFFFFFFFFFFFFFFF)


def parse_token(body: bytes) -> int:
    if len(body) != _U64.size:
        raise CorruptFrame("bad ping body")
    return _U64.unpack(body)[0]


# --- tagged fields ----------------------------------------------------------

# tag registry; tags are scoped per enclosing body type, values reused freely
T_OP = 1
T_ERROR_CODE = 2
T_ERROR_DETAIL = 3
T_PRINCIPAL = 4
T_ID = 5
T_SELECT = 6
T_PARAMS = 7
T_COMMUNITY = 8
T_RIGHTS = 9
T_EVENT = 10
T_SUBSCRIBER = 11
T_PAYLOAD = 12
T_COUNT = 13
T_DEST = 14
T_MODE = 15
T_RECORD = 16
T_SNAPSHOT = 17
T_KIND = 18
T_NAME = 19
T_ATTR = 20
T_WHAT = 21
T_LINE = 22
T_CLAUSES = 23
T_TTL = 24
T_QUERY_ID = 25
T_ORIGIN = 26
T_HOPS = 27
T_ADVERT = 28
T_VERSION = 29
T_NUCLEUS = 30
T_ENDPOINT = 31
T_NEIGHBOR = 32
T_DOC = 33
T_RULE = 34
T_MAC = 35
T_HOME = 36
T_CAPABILITY = 37
T_RESULT = 38
T_GRANT = 39
T_MEMBER = 40
T_STATE = 41
T_SUBSCRIPTION = 42
T_OWNER = 43
T_REASON = 44

_CHUNK = 60_000


class TagWriter:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def add(self, tag: int, value: bytes) -> "TagWriter":
        if len(value) <= _CHUNK:
            self._parts.append(_TAG.pack(tag, len(value)) + value)
        else:
            for off in range(0, len(value), _CHUNK):
                piece = value[off : off + _CHUNK]
                self._parts.append(_TAG.pack(tag, len(piece)) + piece)
        return self

    def add_str(self, tag: int, value: str) -> "TagWriter":
        return self.add(tag, value.encode("utf-8"))

    def add_int(self, tag: int, value: int) -> "TagWriter":
        return self.add_str(tag, str(value))

    def add_id(self, tag: int, value: EntityId) -> "TagWriter":
        return self.add(tag, value.to_bytes())

    def bytes(self) -> bytes:
        return b"".join(self._parts)


class TagReader:
    """Decoded view of a tagged body; repeated tags accumulate in order."""

    __slots__ = ("_fields",)

    def __init__(self, data: bytes):
        self._fields: dict[int, list[bytes]] = {}
        off = 0
        n = len(data)
        while off < n:
            if off + _TAG.size > n:
                raise CorruptFrame("tagged field truncated")
            tag, length = _TAG.unpack_from(data, off)
            off += _TAG.size
            if off + length > n:
                raise CorruptFrame("tagged value truncated")
            self._fields.setdefault(tag, []).append(bytes(data[off : off + length]))
            off += length

    def has(self, tag: int) -> bool:
        return tag in self._fields

    def first(self, tag: int, default: bytes | None = None) -> bytes:
        values = self._fields.get(tag)
        if not values:
            if default is None:
                raise CorruptFrame("missing field tag %d" % tag)
            return default
        return values[0]

    def all(self, tag: int) -> list[bytes]:
        return list(self._fields.get(tag, []))

    def joined(self, tag: int) -> bytes:
        return b"".join(self._fields.get(tag, []))

    def str(self, tag: int, default: str | None = None) -> str:
        raw = self.first(tag, None if default is None else default.encode())
        return raw.decode("utf-8")

    def int(self, tag: int, default: int | None = None) -> int:
        raw = self.first(tag, None if default is None else str(default).encode())
        return int(raw.decode("ascii"))

    def id(self, tag: int) -> EntityId:
        return EntityId.from_bytes(self.first(tag))
