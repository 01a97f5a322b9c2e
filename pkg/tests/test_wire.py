"""Wire format tests: bit-exact layout, CRC soundness, tagged fields."""

from __future__ import annotations

import struct
import zlib

import pytest
from hypothesis import given, settings, strategies as st

from dget import wire
from dget.errors import CorruptFrame, HandshakeVersionMismatch
from dget.ids import EntityId


def test_frame_layout_is_bit_exact():
    body = b"hello world"
    raw = wire.pack_frame(wire.F_FRAGMENT, 0x01, body)
    # magic "DGET", version, type, flags, length
    assert raw[:4] == b"DGET"
    magic, version, ftype, flags, length = struct.unpack_from(">IBBBI", raw)
    assert magic == 0x44474554
    assert version == 0x01
    assert ftype == wire.F_FRAGMENT
    assert flags == 0x01
    assert length == len(body)
    assert raw[11:11 + length] == body
    (crc,) = struct.unpack_from(">I", raw, 11 + length)
    assert crc == zlib.crc32(raw[: 11 + length])


def test_frame_round_trip():
    body = bytes(range(256))
    frame = wire.parse_frame(wire.pack_frame(wire.F_CONTROL, 0, body))
    assert frame.frame_type == wire.F_CONTROL
    assert frame.flags == 0
    assert frame.body == body


def test_bad_magic_rejected():
    raw = bytearray(wire.pack_frame(wire.F_PING, 0, b"12345678"))
    raw[0] ^= 0xFF
    with pytest.raises(CorruptFrame):
        wire.parse_frame(bytes(raw))


def test_version_mismatch_detected():
    raw = bytearray(wire.pack_frame(wire.F_HELLO, 0, b"x" * 18))
    raw[4] = 0x02
    # re-seal the CRC so only the version differs
    raw[-4:] = struct.pack(">I", zlib.crc32(bytes(raw[:-4])))
    with pytest.raises(HandshakeVersionMismatch):
        wire.parse_frame(bytes(raw))


@settings(max_examples=200, deadline=None)
@given(
    body=st.binary(min_size=0, max_size=200),
    bit=st.integers(min_value=0),
)
def test_any_single_bit_flip_is_detected(body, bit):
    raw = bytearray(wire.pack_frame(wire.F_FRAGMENT, 0, body))
    position = bit % (len(raw) * 8)
    raw[position // 8] ^= 1 << (position % 8)
    with pytest.raises((CorruptFrame, HandshakeVersionMismatch)):
        wire.parse_frame(bytes(raw))


def test_fragment_body_layout():
    mid = bytes(range(16))
    body = wire.pack_fragment_body(mid, 2, 5, 0x01020304, b"chunk")
    assert body[:16] == mid
    index, total, channel = struct.unpack_from(">HHI", body, 16)
    assert (index, total, channel) == (2, 5, 0x01020304)
    assert body[24:] == b"chunk"
    back = wire.unpack_fragment_body(body)
    assert back == (mid, 2, 5, 0x01020304, b"chunk")


def test_hello_bodies():
    nid = bytes(16)
    body = wire.pack_hello(nid, [0, 4])
    assert body == nid + b"\x02\x00\x04"
    parsed_nid, codes = wire.parse_hello(body)
    assert parsed_nid == nid and codes == [0, 4]

    ack = wire.pack_hello_ack(nid, 4, [4])
    parsed_nid, negotiated, codes = wire.parse_hello_ack(ack)
    assert negotiated == 4 and codes == [4]
    ack_none = wire.pack_hello_ack(nid, None, [0])
    assert wire.parse_hello_ack(ack_none)[1] is None


def test_tagged_fields_round_trip():
    eid = EntityId(bytes(16), bytes(range(16)))
    w = (
        wire.TagWriter()
        .add_str(wire.T_OP, "create")
        .add_int(wire.T_COUNT, 42)
        .add_id(wire.T_ID, eid)
        .add(wire.T_PAYLOAD, b"\x00\x01")
        .add(wire.T_PAYLOAD, b"\x02")
    )
    r = wire.TagReader(w.bytes())
    assert r.str(wire.T_OP) == "create"
    assert r.int(wire.T_COUNT) == 42
    assert r.id(wire.T_ID) == eid
    assert r.all(wire.T_PAYLOAD) == [b"\x00\x01", b"\x02"]
    assert r.joined(wire.T_PAYLOAD) == b"\x00\x01\x02"
    assert r.str(wire.T_SELECT, "fallback") == "fallback"
    with pytest.raises(CorruptFrame):
        r.first(wire.T_RECORD)


def test_tagged_fields_chunk_large_values():
    blob = bytes(200_000)
    w = wire.TagWriter().add(wire.T_SNAPSHOT, blob)
    r = wire.TagReader(w.bytes())
    assert len(r.all(wire.T_SNAPSHOT)) > 1
    assert r.joined(wire.T_SNAPSHOT) == blob


def test_truncated_tagged_fields_rejected():
    w = wire.TagWriter().add_str(wire.T_OP, "x").bytes()
    with pytest.raises(CorruptFrame):
        wire.TagReader(w[:-1])
