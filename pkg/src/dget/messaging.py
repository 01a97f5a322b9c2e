"""Internal message plane.

Entities exchange Message envelopes through per-entity Connectors (a pair
of dedicated FIFO queues).  Traffic leaving the node flows through a
Channel, which serializes, optionally compresses, and splits each message
into fragments sized for the pipe, and reassembles inbound fragments in
any arrival order.  The DelayedChannelManager parks traffic addressed to
an entity while it is being moved and releases it, in order, afterwards.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterator, Optional

from .errors import (
    AlreadyBuffering,
    ChecksumMismatch,
    InconsistentTotal,
    PayloadTooLarge,
    QueueFull,
)
from .ids import ID_LEN, EntityId
from .wire import FLAG_COMPRESSED

MAX_PAYLOAD = 2**24 - 1

_MSG_FIXED = struct.Struct(">B16sI")  # kind, correlation, payloadLength
WIRE_OVERHEAD = 2 * 2 * ID_LEN + _MSG_FIXED.size  # src + dst + fixed tail


class Kind(IntEnum):
    REQUEST = 0
    REPLY = 1
    EVENT = 2
    CONTROL = 3


NO_CORRELATION = b"\x00" * ID_LEN


@dataclass(slots=True)
class Message:
    src: EntityId
    dst: EntityId
    kind: Kind
    correlation: bytes = NO_CORRELATION
    payload: bytes = b""

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge("payload %d > %d" % (len(self.payload), MAX_PAYLOAD))
        return (
            self.src.to_bytes()
            + self.dst.to_bytes()
            + _MSG_FIXED.pack(int(self.kind), self.correlation, len(self.payload))
            + self.payload
        )

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        if len(data) < WIRE_OVERHEAD:
            raise ChecksumMismatch("message truncated")
        src = EntityId.from_bytes(data[: 2 * ID_LEN])
        dst = EntityId.from_bytes(data[2 * ID_LEN : 4 * ID_LEN])
        kind, correlation, length = _MSG_FIXED.unpack_from(data, 4 * ID_LEN)
        payload = bytes(data[WIRE_OVERHEAD:])
        if len(payload) != length:
            raise ChecksumMismatch("payload length mismatch")
        return cls(src, dst, Kind(kind), bytes(correlation), payload)


@dataclass(slots=True)
class Fragment:
    message_id: bytes
    index: int
    total: int
    channel_id: int
    flags: int
    body: bytes


class Connector:
    """The dedicated inbound/outbound queue pair owned by one entity."""

    __slots__ = ("owner", "capacity", "inbound", "outbound", "closed")

    def __init__(self, owner: EntityId, capacity: int = 4096):
        self.owner = owner
        self.capacity = capacity
        self.inbound: deque[Message] = deque()
        self.outbound: deque[Message] = deque()
        self.closed = False

    def push_inbound(self, m: Message) -> None:
        if len(self.inbound) >= self.capacity:
            raise QueueFull("inbound queue of %s full" % self.owner.short())
        self.inbound.append(m)

    def pop_inbound(self) -> Optional[Message]:
        return self.inbound.popleft() if self.inbound else None

    def push_outbound(self, m: Message) -> None:
        if len(self.outbound) >= self.capacity:
            raise QueueFull("outbound queue of %s full" % self.owner.short())
        self.outbound.append(m)

    def pop_outbound(self) -> Optional[Message]:
        return self.outbound.popleft() if self.outbound else None

    def drain_inbound(self) -> list[Message]:
        held = list(self.inbound)
        self.inbound.clear()
        return held

    def close(self) -> None:
        self.closed = True
        self.inbound.clear()
        self.outbound.clear()


@dataclass(slots=True)
class _Partial:
    total: int
    flags: int
    parts: dict[int, bytes]
    born_ms: int


class Channel:
    """Bi-directional fragmenter/reassembler bound to one pipe.

    Outgoing messages are serialized, compressed when that helps, and cut
    into bodies of at most ``max_fragment_body`` bytes.  Incoming fragments
    are accepted in any order; the full message is returned exactly once,
    when the last missing piece arrives.
    """

    def __init__(
        self,
        channel_id: int,
        local_entity: Optional[EntityId],
        max_fragment_body: int,
        codec,
        reassembly_timeout_ms: int = 30_000,
    ):
        self.channel_id = channel_id
        self.local_entity = local_entity
        self.max_fragment_body = max_fragment_body
        self.codec = codec
        self.reassembly_timeout_ms = reassembly_timeout_ms
        self._partials: dict[bytes, _Partial] = {}

    def fragment(self, m: Message, message_id: bytes) -> list[Fragment]:
        data = m.encode()
        flags = 0
        packed = self.codec.encode(data)
        if len(packed) < len(data) and self.codec.name != "null":
            data = packed
            flags = FLAG_COMPRESSED
        view = memoryview(data)
        size = self.max_fragment_body
        chunks = [bytes(view[off : off + size]) for off in range(0, len(data), size)] or [b""]
        total = len(chunks)
        return [
            Fragment(message_id, i, total, self.channel_id, flags, chunk)
            for i, chunk in enumerate(chunks)
        ]

    def accept(self, f: Fragment, now_ms: int = 0) -> Optional[Message]:
        if f.channel_id != self.channel_id:
            raise InconsistentTotal("fragment for channel %d on channel %d" % (f.channel_id, self.channel_id))
        if f.total < 1 or not (0 <= f.index < f.total):
            raise InconsistentTotal("index %d outside total %d" % (f.index, f.total))
        part = self._partials.get(f.message_id)
        if part is None:
            part = _Partial(total=f.total, flags=f.flags, parts={}, born_ms=now_ms)
            self._partials[f.message_id] = part
        elif part.total != f.total or part.flags != f.flags:
            raise InconsistentTotal(
                "message %s: total/flags %d/%d vs %d/%d"
                % (f.message_id.hex()[:8], f.total, f.flags, part.total, part.flags)
            )
        if f.index in part.parts:
            return None  # duplicate, first wins
        part.parts[f.index] = f.body
        if len(part.parts) < part.total:
            return None
        del self._partials[f.message_id]
        data = b"".join(part.parts[i] for i in range(part.total))
        if part.flags & FLAG_COMPRESSED:
            try:
                data = self.codec.decode(data)
            except Exception as exc:
                raise ChecksumMismatch("decompression failed: %s" % exc) from exc
        return Message.decode(data)

    def sweep(self, now_ms: int) -> int:
        """Evict partial reassemblies older than the timeout; returns count."""
        stale = [
            mid
            for mid, part in self._partials.items()
            if now_ms - part.born_ms >= self.reassembly_timeout_ms
        ]
        for mid in stale:
            del self._partials[mid]
        return len(stale)

    def pending(self) -> int:
        return len(self._partials)


def expected_fragments(serialized_len: int, max_fragment_body: int) -> int:
    return max(1, -(-serialized_len // max_fragment_body))


class BufferState(IntEnum):
    BUFFERING = 0
    FLUSHED = 1


@dataclass(slots=True)
class DelayedBuffer:
    subject: EntityId
    capacity: int = 1024
    held: deque[Message] = field(default_factory=deque)
    state: BufferState = BufferState.BUFFERING

    def capture(self, m: Message) -> None:
        if self.state is not BufferState.BUFFERING:
            raise QueueFull("buffer for %s already flushed" % self.subject.short())
        if len(self.held) >= self.capacity:
            raise QueueFull("delayed buffer for %s full" % self.subject.short())
        self.held.append(m)


class DelayedChannelManager:
    """Holds traffic for entities that are mid-move.

    begin() starts buffering; take_all() closes the buffer and returns the
    held messages in arrival order, exactly once.  The caller decides
    whether they are forwarded to the new location or re-delivered locally
    (move committed vs aborted).
    """

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self._buffers: dict[EntityId, DelayedBuffer] = {}

    def begin(self, subject: EntityId) -> DelayedBuffer:
        if subject in self._buffers:
            raise AlreadyBuffering(subject.short())
        buf = DelayedBuffer(subject=subject, capacity=self.capacity)
        self._buffers[subject] = buf
        return buf

    def is_buffering(self, subject: EntityId) -> bool:
        buf = self._buffers.get(subject)
        return buf is not None and buf.state is BufferState.BUFFERING

    def capture(self, subject: EntityId, m: Message) -> None:
        self._buffers[subject].capture(m)

    def take_all(self, subject: EntityId) -> list[Message]:
        buf = self._buffers.pop(subject)
        buf.state = BufferState.FLUSHED
        held = list(buf.held)
        buf.held.clear()
        return held

    def held_count(self, subject: EntityId) -> int:
        buf = self._buffers.get(subject)
        return len(buf.held) if buf else 0


def forward_in_order(messages: list[Message], send: Callable[[Message], None]) -> int:
    for m in messages:
        send(m)
    return len(messages)


def iter_fifo_pairs(messages: list[Message]) -> Iterator[tuple[EntityId, EntityId]]:
    for m in messages:
        yield (m.src, m.dst)
