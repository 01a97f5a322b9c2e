"""Message plane tests: queues, fragmentation oracles, migration buffers."""

from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from dget.codec import DeflateCodec, NullCodec, get_codec
from dget.errors import (
    AlreadyBuffering,
    InconsistentTotal,
    PayloadTooLarge,
    QueueFull,
)
from dget.ids import EntityId
from dget.messaging import (
    Channel,
    Connector,
    DelayedChannelManager,
    Fragment,
    Kind,
    MAX_PAYLOAD,
    Message,
    expected_fragments,
)


def eid(n: int, local: int = 1) -> EntityId:
    return EntityId(bytes([n]) * 16, bytes([local]) * 16)


def msg(payload: bytes = b"", src: int = 1, dst: int = 2, kind: Kind = Kind.REQUEST) -> Message:
    return Message(src=eid(src), dst=eid(dst), kind=kind, payload=payload)


def make_channel(max_body: int = 2048, codec: str = "null", channel_id: int = 7) -> Channel:
    return Channel(channel_id, eid(1), max_body, get_codec(codec))


class Ids:
    def __init__(self):
        self._n = 0

    def fresh(self) -> bytes:
        self._n += 1
        return self._n.to_bytes(16, "big")


# -- message encoding ------------------------------------------------------------


def test_message_encode_layout():
    m = msg(b"xyz")
    raw = m.encode()
    assert len(raw) == 85 + 3
    assert raw[:32] == m.src.to_bytes()
    assert raw[32:64] == m.dst.to_bytes()
    assert Message.decode(raw) == m


def test_zero_byte_payload_round_trip():
    m = msg(b"")
    assert Message.decode(m.encode()) == m


def test_payload_cap_enforced():
    m = msg(b"x" * (MAX_PAYLOAD + 1))
    with pytest.raises(PayloadTooLarge):
        m.encode()


# -- connector FIFO -----------------------------------------------------------------


def test_connector_fifo_order():
    c = Connector(eid(2))
    m1, m2 = msg(b"1"), msg(b"2")
    c.push_inbound(m1)
    c.push_inbound(m2)
    assert c.pop_inbound() is m1
    assert c.pop_inbound() is m2
    assert c.pop_inbound() is None


def test_connector_bounded():
    c = Connector(eid(2), capacity=2)
    c.push_inbound(msg(b"1"))
    c.push_inbound(msg(b"2"))
    with pytest.raises(QueueFull):
        c.push_inbound(msg(b"3"))


# -- fragmentation ---------------------------------------------------------------------


def test_fragment_count_matches_ceiling_division():
    ch = make_channel(max_body=2048)
    m = msg(b"a" * (5000 - 85))  # serialized length exactly 5000
    frags = ch.fragment(m, Ids().fresh())
    assert [len(f.body) for f in frags] == [2048, 2048, 904]
    assert all(f.total == 3 for f in frags)
    assert [f.index for f in frags] == [0, 1, 2]


def test_empty_message_yields_one_fragment():
    ch = make_channel()
    frags = ch.fragment(msg(b""), Ids().fresh())
    assert len(frags) == 1
    assert frags[0].total == 1
    # an empty payload still serializes the 85-byte envelope
    assert len(frags[0].body) == 85


def test_compression_applied_only_when_it_shrinks():
    ch = make_channel(max_body=16384, codec="deflate")
    redundant = ch.fragment(msg(b"z" * 100_000), Ids().fresh())
    assert all(f.flags & 1 for f in redundant)
    assert len(redundant) == 1  # compresses far below one fragment body
    for payload in (random.Random(1).randbytes(3000), b"z" * 3000, b""):
        m = msg(payload)
        shrinks = len(DeflateCodec().encode(m.encode())) < len(m.encode())
        frags = ch.fragment(m, Ids().fresh())
        assert all(bool(f.flags & 1) == shrinks for f in frags)


def test_compressed_round_trip_byte_exact():
    ids = Ids()
    sender = make_channel(max_body=2048, codec="deflate")
    receiver = make_channel(max_body=2048, codec="deflate")
    m = msg(b"q" * 100_000)
    frags = sender.fragment(m, ids.fresh())
    assert all(f.flags & 1 for f in frags)
    out = None
    for f in frags:
        result = receiver.accept(f)
        if result is not None:
            assert out is None
            out = result
    assert out == m


def test_reassembly_all_permutations():
    """Oracle: fragment then reassemble under every arrival order of 3 pieces."""
    ids = Ids()
    payload = bytes(random.Random(7).randbytes(5000))
    m = msg(payload)
    sender = make_channel(max_body=2048)
    frags = sender.fragment(m, ids.fresh())
    assert len(frags) == 3
    for order in itertools.permutations(range(3)):
        receiver = make_channel(max_body=2048)
        seen = []
        for i in order:
            result = receiver.accept(frags[i])
            if result is not None:
                seen.append(result)
        assert len(seen) == 1
        assert seen[0] == m
        assert seen[0].payload == payload


def test_duplicate_fragment_is_ignored():
    ids = Ids()
    sender = make_channel(max_body=2048)
    receiver = make_channel(max_body=2048)
    frags = sender.fragment(msg(b"d" * 5000), ids.fresh())
    assert receiver.accept(frags[0]) is None
    assert receiver.accept(frags[0]) is None  # duplicate mid-assembly
    assert receiver.accept(frags[1]) is None
    result = receiver.accept(frags[2])
    assert result is not None
    assert receiver.accept(frags[2]) is None  # duplicate after completion
    assert receiver.pending() in (0, 1)


def test_inconsistent_total_raises():
    receiver = make_channel(channel_id=9)
    mid = bytes(16)
    receiver.accept(Fragment(mid, 0, 2, 9, 0, b"a"))
    with pytest.raises(InconsistentTotal):
        receiver.accept(Fragment(mid, 1, 3, 9, 0, b"b"))


def test_reassembly_eviction_after_timeout():
    receiver = Channel(7, eid(1), 2048, NullCodec(), reassembly_timeout_ms=30_000)
    mid = bytes(16)
    receiver.accept(Fragment(mid, 0, 2, 7, 0, b"a"), now_ms=0)
    assert receiver.sweep(now_ms=29_999) == 0
    assert receiver.sweep(now_ms=30_000) == 1
    assert receiver.pending() == 0


@settings(max_examples=60, deadline=None)
@given(
    length=st.integers(min_value=0, max_value=65_536),
    max_body=st.sampled_from([512, 2048, 16384]),
    codec=st.sampled_from(["null", "deflate"]),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_identity_property(length, max_body, codec, seed):
    rng = random.Random(seed)
    payload = rng.randbytes(length) if rng.random() < 0.5 else bytes([seed % 256]) * length
    m = msg(payload)
    sender = Channel(3, eid(1), max_body, get_codec(codec))
    receiver = Channel(3, eid(1), max_body, get_codec(codec))
    frags = sender.fragment(m, seed.to_bytes(16, "big"))
    if codec == "null":
        assert len(frags) == expected_fragments(len(m.encode()), max_body)
    rng.shuffle(frags)
    results = [r for r in (receiver.accept(f) for f in frags) if r is not None]
    assert len(results) == 1
    assert results[0] == m


# -- delayed channel manager -------------------------------------------------------------


def test_delayed_buffer_holds_and_releases_in_order():
    mgr = DelayedChannelManager(capacity=1024)
    subject = eid(5)
    mgr.begin(subject)
    messages = [msg(str(i).encode(), dst=5) for i in range(3)]
    for m in messages:
        mgr.capture(subject, m)
    assert mgr.held_count(subject) == 3
    released = mgr.take_all(subject)
    assert released == messages
    assert not mgr.is_buffering(subject)


def test_delayed_begin_twice_rejected():
    mgr = DelayedChannelManager()
    subject = eid(5)
    mgr.begin(subject)
    with pytest.raises(AlreadyBuffering):
        mgr.begin(subject)


def test_delayed_capacity_boundary():
    mgr = DelayedChannelManager(capacity=1024)
    subject = eid(5)
    mgr.begin(subject)
    for i in range(1024):
        mgr.capture(subject, msg(b"x", dst=5))
    with pytest.raises(QueueFull):
        mgr.capture(subject, msg(b"overflow", dst=5))


def test_flush_empty_buffer_counts_zero():
    mgr = DelayedChannelManager()
    subject = eid(5)
    mgr.begin(subject)
    assert mgr.take_all(subject) == []
