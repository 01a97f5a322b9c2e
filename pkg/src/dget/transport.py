"""External communication layer.

A uniform Transport interface hides the concrete byte protocol; a Pipe is
the single logical conduit between two nuclei, created by a HELLO /
HELLO_ACK exchange that negotiates the protocol and teaches both routing
tables what the peer supports.  Fragments from many channels are
multiplexed over one pipe; PING/PONG probes detect dead peers.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

from .codec import get_codec
from .errors import (
    ConnectTimeout,
    CorruptFrame,
    DgetError,
    FrameTooLarge,
    HandshakeVersionMismatch,
    NoCommonProtocol,
    PipeClosed,
    Unroutable,
    UnsupportedProtocol,
)
from .ids import EntityId, NucleusId
from .messaging import Channel, Fragment, Message
from .runtime import Future, Timer
from . import wire
from .wire import (
    F_CONTROL,
    F_FRAGMENT,
    F_HELLO,
    F_HELLO_ACK,
    F_PING,
    F_PONG,
    FRAME_NAMES,
    Frame,
    T_ENDPOINT,
    T_OP,
    T_REASON,
    TagReader,
    TagWriter,
)

log = logging.getLogger(__name__)


class ProtocolId(IntEnum):
    TCP = 0
    UDP = 1
    TLS_TCP = 2
    HTTP = 3
    SIM = 4


PROTOCOL_NAMES = {
    ProtocolId.TCP: "tcp",
    ProtocolId.UDP: "udp",
    ProtocolId.TLS_TCP: "tls-tcp",
    ProtocolId.HTTP: "http",
    ProtocolId.SIM: "sim",
}
PROTOCOL_CODES = {name: pid for pid, name in PROTOCOL_NAMES.items()}


def protocol_from_name(name: str) -> ProtocolId:
    try:
        return PROTOCOL_CODES[name]
    except KeyError:
        raise UnsupportedProtocol(name) from None


def negotiate(local: list[ProtocolId], remote: set[ProtocolId]) -> ProtocolId:
    """First protocol of the local preference order the remote also supports."""
    if not local:
        raise NoCommonProtocol("empty local preference list")
    for pid in local:
        if pid in remote:
            return pid
    raise NoCommonProtocol(
        "local %s vs remote %s"
        % ([PROTOCOL_NAMES[p] for p in local], sorted(PROTOCOL_NAMES[p] for p in remote))
    )


@dataclass(slots=True)
class RoutingEntry:
    nucleus: NucleusId
    endpoints: list[str] = field(default_factory=list)
    supported: set[ProtocolId] = field(default_factory=set)
    negotiated: Optional[ProtocolId] = None
    last_seen: int = 0
    dead: bool = False
    retry_at: int = 0


class RoutingTable:
    """Per-nucleus view of peers: endpoints, protocol support, liveness."""

    def __init__(self, stale_after_ms: int = 300_000):
        self.stale_after_ms = stale_after_ms
        self._entries: dict[NucleusId, RoutingEntry] = {}

    def upsert(
        self,
        nucleus: NucleusId,
        now_ms: int,
        endpoints: Optional[list[str]] = None,
        supported: Optional[set[ProtocolId]] = None,
        negotiated: Optional[ProtocolId] = None,
    ) -> RoutingEntry:
        entry = self._entries.get(nucleus)
        if entry is None:
            entry = RoutingEntry(nucleus=nucleus)
            self._entries[nucleus] = entry
        if endpoints is not None:
            entry.endpoints = list(endpoints)
        if supported is not None:
            entry.supported = set(supported)
        if negotiated is not None:
            entry.negotiated = negotiated
        entry.last_seen = now_ms
        entry.dead = False
        return entry

    def get(self, nucleus: NucleusId) -> Optional[RoutingEntry]:
        return self._entries.get(nucleus)

    def refresh(self, nucleus: NucleusId, now_ms: int) -> None:
        entry = self._entries.get(nucleus)
        if entry is not None:
            entry.last_seen = now_ms
            entry.dead = False

    def mark_dead(self, nucleus: NucleusId, retry_at_ms: int) -> None:
        entry = self._entries.get(nucleus)
        if entry is not None:
            entry.dead = True
            entry.retry_at = retry_at_ms

    def remove(self, nucleus: NucleusId) -> None:
        self._entries.pop(nucleus, None)

    def known(self) -> list[RoutingEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def evict_stale(self, now_ms: int) -> list[NucleusId]:
        stale = [
            nid
            for nid, e in self._entries.items()
            if now_ms - e.last_seen >= self.stale_after_ms
        ]
        for nid in stale:
            del self._entries[nid]
        return stale


class Link:
    """A connected frame conduit; implementations assign the callbacks."""

    on_frame: Callable[[bytes], None]
    on_close: Callable[[], None]

    def send(self, frame_bytes: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class Transport:
    """Factory for links of one concrete protocol."""

    protocol: ProtocolId

    def listen(self, address: str, on_link: Callable[[Link], None]) -> None:
        raise NotImplementedError

    def connect(self, address: str) -> Future:
        raise NotImplementedError

    def stop(self) -> None:
        pass


class StubTransport(Transport):
    """Registered protocol code without an implementation behind it."""

    def __init__(self, protocol: ProtocolId):
        self.protocol = protocol

    def listen(self, address: str, on_link: Callable[[Link], None]) -> None:
        raise UnsupportedProtocol(PROTOCOL_NAMES[self.protocol])

    def connect(self, address: str) -> Future:
        f = Future()
        f.fail(UnsupportedProtocol(PROTOCOL_NAMES[self.protocol]))
        return f


class PipeState(IntEnum):
    CONNECTING = 0
    OPEN = 1
    CLOSED = 2


class Pipe:
    """One logical link between two nuclei, bound to one protocol."""

    def __init__(self, manager: "PipeManager", remote: NucleusId, protocol: ProtocolId,
                 link: Link, initiated_by_self: bool):
        self.manager = manager
        self.remote = remote
        self.protocol = protocol
        self.link = link
        self.initiated_by_self = initiated_by_self
        self.state = PipeState.OPEN
        self.channels: dict[int, Channel] = {}
        self._entity_channel: dict[EntityId, int] = {}
        owner = manager.owner
        # even ids belong to the lexicographically smaller nucleus
        self._next_channel = 2 if owner.id < remote else 1
        self._pending_pongs = 0
        self._ping_token = 0
        self._ping_timer: Optional[Timer] = None
        self._sweep_timer: Optional[Timer] = None
        link.on_frame = self.on_frame
        link.on_close = lambda: self.close("link-closed")
        self._arm_timers()

    # -- outgoing ----------------------------------------------------------

    def channel_for(self, local_entity: EntityId) -> Channel:
        cid = self._entity_channel.get(local_entity)
        if cid is None:
            cid = self._next_channel
            self._next_channel += 2
            self._entity_channel[local_entity] = cid
            self.channels[cid] = self._make_channel(cid, local_entity)
        return self.channels[cid]

    def _make_channel(self, cid: int, local_entity: Optional[EntityId]) -> Channel:
        cfg = self.manager.owner.config
        return Channel(
            channel_id=cid,
            local_entity=local_entity,
            max_fragment_body=cfg.fragment_body,
            codec=get_codec(cfg.codec),
            reassembly_timeout_ms=cfg.reassembly_timeout_ms,
        )

    def send_message(self, m: Message) -> None:
        channel = self.channel_for(m.src)
        message_id = self.manager.owner.ids.fresh()
        for frag in channel.fragment(m, message_id):
            self.dispatch(frag)

    def dispatch(self, frag: Fragment) -> None:
        if self.state is not PipeState.OPEN:
            raise PipeClosed("pipe to %s is %s" % (self.remote.hex()[:8], self.state.name))
        body = wire.pack_fragment_body(
            frag.message_id, frag.index, frag.total, frag.channel_id, frag.body
        )
        if len(body) > self.manager.owner.config.max_frame_body:
            raise FrameTooLarge("%d bytes" % len(body))
        self._send_frame(F_FRAGMENT, frag.flags, body)

    def send_control(self, writer: TagWriter) -> None:
        if self.state is not PipeState.OPEN:
            raise PipeClosed("pipe to %s" % self.remote.hex()[:8])
        self._send_frame(F_CONTROL, 0, writer.bytes())

    def _send_frame(self, frame_type: int, flags: int, body: bytes) -> None:
        self.manager.owner.trace(
            "frame.send",
            "peer=%s type=%s len=%d" % (self.remote.hex()[:8], FRAME_NAMES[frame_type], len(body)),
        )
        self.link.send(wire.pack_frame(frame_type, flags, body))

    # -- incoming ----------------------------------------------------------

    def on_frame(self, raw: bytes) -> None:
        owner = self.manager.owner
        try:
            frame = wire.parse_frame(raw)
        except (CorruptFrame, HandshakeVersionMismatch) as exc:
            owner.counters.bump("corrupt_frames")
            owner.trace("frame.drop", "peer=%s reason=%s" % (self.remote.hex()[:8], exc.code))
            return
        owner.trace(
            "frame.recv",
            "peer=%s type=%s len=%d"
            % (self.remote.hex()[:8], FRAME_NAMES.get(frame.frame_type, "?"), len(frame.body)),
        )
        if frame.frame_type == F_FRAGMENT:
            self._on_fragment(frame)
        elif frame.frame_type == F_PING:
            self._send_frame(F_PONG, 0, frame.body)
        elif frame.frame_type == F_PONG:
            self._pending_pongs = 0
            owner.routing.refresh(self.remote, owner.executor.now_ms())
        elif frame.frame_type == F_CONTROL:
            self.manager.on_pipe_control(self, TagReader(frame.body))
        elif frame.frame_type == F_HELLO:
            # peer restarted and re-dialed on the same link id (sim only)
            self.manager.on_unexpected_hello(self, frame)
        # HELLO_ACK on an open pipe is stale handshake residue; ignore

    def _on_fragment(self, frame: Frame) -> None:
        owner = self.manager.owner
        message_id, index, total, cid, chunk = wire.unpack_fragment_body(frame.body)
        channel = self.channels.get(cid)
        if channel is None:
            channel = self._make_channel(cid, None)
            self.channels[cid] = channel
        frag = Fragment(message_id, index, total, cid, frame.flags, chunk)
        try:
            message = channel.accept(frag, owner.executor.now_ms())
        except DgetError as exc:
            owner.counters.bump("reassembly_errors")
            owner.trace("frame.drop", "peer=%s reason=%s" % (self.remote.hex()[:8], exc.code))
            return
        if message is not None:
            owner.on_remote_message(message, self)

    # -- liveness ----------------------------------------------------------

    def _arm_timers(self) -> None:
        cfg = self.manager.owner.config
        executor = self.manager.owner.executor
        self._ping_timer = executor.call_later(cfg.ping_interval_ms, self._ping_tick)
        sweep_every = max(1000, cfg.reassembly_timeout_ms // 3)
        self._sweep_timer = executor.call_later(sweep_every, self._sweep_tick)

    def _ping_tick(self) -> None:
        if self.state is not PipeState.OPEN:
            return
        cfg = self.manager.owner.config
        if self._pending_pongs >= cfg.ping_misses:
            self.close("dead")
            return
        self._pending_pongs += 1
        self._ping_token += 1
        try:
            self._send_frame(F_PING, 0, wire.pack_token(self._ping_token))
        except Exception:
            self.close("link-error")
            return
        self._ping_timer = self.manager.owner.executor.call_later(
            cfg.ping_interval_ms, self._ping_tick
        )

    def _sweep_tick(self) -> None:
        if self.state is not PipeState.OPEN:
            return
        owner = self.manager.owner
        now = owner.executor.now_ms()
        evicted = sum(ch.sweep(now) for ch in self.channels.values())
        if evicted:
            owner.counters.bump("reassembly_evictions", evicted)
        self._sweep_timer = owner.executor.call_later(
            max(1000, owner.config.reassembly_timeout_ms // 3), self._sweep_tick
        )

    def close(self, reason: str) -> None:
        if self.state is PipeState.CLOSED:
            return
        self.state = PipeState.CLOSED
        if self._ping_timer:
            self._ping_timer.cancel()
        if self._sweep_timer:
            self._sweep_timer.cancel()
        try:
            self.link.close()
        except Exception:
            pass
        self.manager.on_pipe_closed(self, reason)


class _Dial:
    __slots__ = ("link", "address", "abandoned", "timer")

    def __init__(self, address: str):
        self.link: Optional[Link] = None
        self.address = address
        self.abandoned = False
        self.timer: Optional[Timer] = None


class _Slot:
    __slots__ = ("remote", "pipe", "waiters", "pending", "dial")

    def __init__(self, remote: NucleusId):
        self.remote = remote
        self.pipe: Optional[Pipe] = None
        self.waiters: list[Future] = []
        self.pending: deque[Message] = deque()
        self.dial: Optional[_Dial] = None


class PipeManager:
    """Owns every pipe of one nucleus plus its routing table.

    Guarantees at most one OPEN pipe per remote nucleus: when both sides
    dial at once the pipe initiated by the lexicographically smaller
    nucleus id survives and the other side's attempt is rejected.
    """

    def __init__(self, owner):
        self.owner = owner
        self.routing = RoutingTable(stale_after_ms=owner.config.route_stale_ms)
        self._slots: dict[NucleusId, _Slot] = {}
        self._transports: dict[ProtocolId, Transport] = {}
        self._protocol_order: list[ProtocolId] = [
            protocol_from_name(name) for name in owner.config.protocols
        ]

    # -- registration ------------------------------------------------------

    def register_transport(self, transport: Transport) -> None:
        self._transports[transport.protocol] = transport

    def supported_codes(self) -> list[int]:
        return [int(p) for p in self._protocol_order]

    def open_pipes(self) -> list[Pipe]:
        return [
            s.pipe
            for _, s in sorted(self._slots.items())
            if s.pipe is not None and s.pipe.state is PipeState.OPEN
        ]

    def pipe_to(self, nid: NucleusId) -> Optional[Pipe]:
        slot = self._slots.get(nid)
        if slot and slot.pipe and slot.pipe.state is PipeState.OPEN:
            return slot.pipe
        return None

    # -- opening -----------------------------------------------------------

    def open_pipe(self, remote: NucleusId, hint_endpoints: Optional[list[str]] = None) -> Future:
        slot = self._slots.setdefault(remote, _Slot(remote))
        f = Future()
        if slot.pipe is not None and slot.pipe.state is PipeState.OPEN:
            f.ok(slot.pipe)
            return f
        slot.waiters.append(f)
        if slot.dial is None:
            entry = self.routing.get(remote)
            endpoints = hint_endpoints or (entry.endpoints if entry else [])
            if not endpoints:
                self._fail_slot(slot, Unroutable("no endpoints for %s" % remote.hex()[:8]))
                return f
            self._start_dial(slot, endpoints[0])
        return f

    def dial_address(self, address: str) -> Future:
        """Bootstrap dial: the peer's nucleus id is learned from the ACK."""
        f = Future()
        dial = _Dial(address)
        transport = self._pick_transport()
        connect_f = transport.connect(address)

        def connected(cf: Future) -> None:
            if cf.error is not None:
                if dial.timer:
                    dial.timer.cancel()
                f.fail(ConnectTimeout(str(cf.error)))
                return
            link: Link = cf.result()
            dial.link = link
            link.on_frame = lambda raw: self._on_dial_frame(dial, raw, None, f)
            link.on_close = lambda: None
            self._send_hello(link)

        dial.timer = self.owner.executor.call_later(
            self.owner.config.connect_timeout_ms, self._dial_timeout, dial, None, f
        )
        connect_f.on_done(connected)
        return f

    def _pick_transport(self) -> Transport:
        for pid in self._protocol_order:
            t = self._transports.get(pid)
            if t is not None and not isinstance(t, StubTransport):
                return t
        raise UnsupportedProtocol("no usable transport configured")

    def _start_dial(self, slot: _Slot, address: str) -> None:
        dial = _Dial(address)
        slot.dial = dial
        try:
            transport = self._pick_transport()
        except UnsupportedProtocol as exc:
            slot.dial = None
            self._fail_slot(slot, exc)
            return
        dial.timer = self.owner.executor.call_later(
            self.owner.config.connect_timeout_ms, self._dial_timeout, dial, slot, None
        )
        connect_f = transport.connect(address)

        def connected(cf: Future) -> None:
            if dial.abandoned:
                if cf.error is None:
                    cf.result().close()
                return
            if cf.error is not None:
                if dial.timer:
                    dial.timer.cancel()
                slot.dial = None
                self._fail_slot(slot, ConnectTimeout(str(cf.error)))
                return
            link: Link = cf.result()
            dial.link = link
            link.on_frame = lambda raw: self._on_dial_frame(dial, raw, slot, None)
            link.on_close = lambda: None
            self._send_hello(link)

        connect_f.on_done(connected)

    def _send_hello(self, link: Link) -> None:
        body = wire.pack_hello(self.owner.id, self.supported_codes())
        link.send(wire.pack_frame(F_HELLO, 0, body))
        self.owner.trace("frame.send", "peer=? type=HELLO len=%d" % len(body))

    def _dial_timeout(self, dial: _Dial, slot: Optional[_Slot], f: Optional[Future]) -> None:
        if dial.abandoned:
            return
        dial.abandoned = True
        if dial.link is not None:
            try:
                dial.link.close()
            except Exception:
                pass
        if slot is not None:
            if slot.dial is dial:
                slot.dial = None
            if not (slot.pipe and slot.pipe.state is PipeState.OPEN):
                self._fail_slot(slot, ConnectTimeout(dial.address))
        if f is not None and not f.done:
            f.fail(ConnectTimeout(dial.address))

    def _on_dial_frame(self, dial: _Dial, raw: bytes, slot: Optional[_Slot], f: Optional[Future]) -> None:
        if dial.abandoned:
            return
        try:
            frame = wire.parse_frame(raw)
        except HandshakeVersionMismatch as exc:
            self._abort_dial(dial, slot, f, exc)
            return
        except CorruptFrame as exc:
            self.owner.counters.bump("corrupt_frames")
            self.owner.trace("frame.drop", "peer=? reason=%s" % exc.code)
            return
        if frame.frame_type == F_CONTROL:
            reader = TagReader(frame.body)
            if reader.str(T_OP, "") == "pipe.reject":
                # peer kept its own attempt; its HELLO opens the surviving pipe
                dial.abandoned = True
                if dial.link:
                    dial.link.close()
                if slot is not None and slot.dial is dial:
                    slot.dial = None
                return
        if frame.frame_type != F_HELLO_ACK:
            return
        remote_nid, negotiated, codes = wire.parse_hello_ack(frame.body)
        if dial.timer:
            dial.timer.cancel()
        if negotiated is None:
            self._abort_dial(dial, slot, f, NoCommonProtocol("peer %s" % remote_nid.hex()[:8]))
            return
        protocol = ProtocolId(negotiated)
        if protocol not in self._protocol_order:
            self._abort_dial(dial, slot, f, NoCommonProtocol("peer chose %s" % protocol.name))
            return
        now = self.owner.executor.now_ms()
        self.routing.upsert(
            remote_nid,
            now,
            endpoints=[dial.address],
            supported={ProtocolId(c) for c in codes},
            negotiated=protocol,
        )
        real_slot = slot if slot is not None else self._slots.setdefault(remote_nid, _Slot(remote_nid))
        if real_slot.dial is dial:
            real_slot.dial = None
        pipe = Pipe(self, remote_nid, protocol, dial.link, initiated_by_self=True)
        self._adopt_pipe(real_slot, pipe)
        if f is not None and not f.done:
            f.ok(pipe)

    def _abort_dial(self, dial: _Dial, slot: Optional[_Slot], f: Optional[Future], exc: DgetError) -> None:
        dial.abandoned = True
        if dial.timer:
            dial.timer.cancel()
        if dial.link:
            try:
                dial.link.close()
            except Exception:
                pass
        if slot is not None:
            if slot.dial is dial:
                slot.dial = None
            self._fail_slot(slot, exc)
        if f is not None and not f.done:
            f.fail(exc)

    # -- inbound -----------------------------------------------------------

    def on_inbound_link(self, link: Link) -> None:
        link.on_frame = lambda raw: self._on_pre_hello_frame(link, raw)
        link.on_close = lambda: None

    def _on_pre_hello_frame(self, link: Link, raw: bytes) -> None:
        try:
            frame = wire.parse_frame(raw)
        except HandshakeVersionMismatch:
            link.close()
            return
        except CorruptFrame as exc:
            self.owner.counters.bump("corrupt_frames")
            self.owner.trace("frame.drop", "peer=? reason=%s" % exc.code)
            return
        if frame.frame_type != F_HELLO:
            return  # ignore anything before the handshake
        remote_nid, codes_ordered = wire.parse_hello(frame.body)
        self._handle_hello(link, remote_nid, codes_ordered)

    def _handle_hello(self, link: Link, remote_nid: NucleusId, codes_ordered: list[int]) -> None:
        self.owner.trace("frame.recv", "peer=%s type=HELLO len=%d" % (remote_nid.hex()[:8], 0))
        slot = self._slots.setdefault(remote_nid, _Slot(remote_nid))
        if slot.pipe is not None and slot.pipe.state is PipeState.OPEN:
            keep_existing = slot.pipe.initiated_by_self and self.owner.id < remote_nid
            if keep_existing:
                self._reject_link(link)
                return
            slot.pipe.close("superseded")
        if slot.dial is not None and not slot.dial.abandoned:
            if remote_nid < self.owner.id:
                slot.dial.abandoned = True
                if slot.dial.timer:
                    slot.dial.timer.cancel()
                if slot.dial.link:
                    slot.dial.link.close()
                slot.dial = None
            else:
                self._reject_link(link)
                return
        mine = set(self._protocol_order)
        chosen: Optional[ProtocolId] = None
        for code in codes_ordered:
            if ProtocolId(code) in mine:
                chosen = ProtocolId(code)
                break
        ack = wire.pack_hello_ack(self.owner.id, None if chosen is None else int(chosen), self.supported_codes())
        link.send(wire.pack_frame(F_HELLO_ACK, 0, ack))
        self.owner.trace("frame.send", "peer=%s type=HELLO_ACK len=%d" % (remote_nid.hex()[:8], len(ack)))
        if chosen is None:
            link.close()
            return
        now = self.owner.executor.now_ms()
        self.routing.upsert(
            remote_nid,
            now,
            supported={ProtocolId(c) for c in codes_ordered},
            negotiated=chosen,
        )
        pipe = Pipe(self, remote_nid, chosen, link, initiated_by_self=False)
        self._adopt_pipe(slot, pipe)

    def _reject_link(self, link: Link) -> None:
        body = TagWriter().add_str(T_OP, "pipe.reject").add_str(T_REASON, "duplicate").bytes()
        try:
            link.send(wire.pack_frame(F_CONTROL, 0, body))
            link.close()
        except Exception:
            pass

    # -- adoption / teardown -------------------------------------------------

    def _adopt_pipe(self, slot: _Slot, pipe: Pipe) -> None:
        slot.pipe = pipe
        self.owner.trace(
            "pipe.open",
            "peer=%s proto=%s init=%s"
            % (pipe.remote.hex()[:8], PROTOCOL_NAMES[pipe.protocol], "self" if pipe.initiated_by_self else "peer"),
        )
        if self.owner.listen_address():
            info = (
                TagWriter()
                .add_str(T_OP, "endpoint.info")
                .add_str(T_ENDPOINT, self.owner.listen_address())
            )
            pipe.send_control(info)
        waiters, slot.waiters = slot.waiters, []
        for w in waiters:
            w.ok(pipe)
        pending, slot.pending = slot.pending, deque()
        for m in pending:
            try:
                pipe.send_message(m)
            except DgetError as exc:
                self.owner.on_send_failed(m, exc)
        self.owner.on_pipe_open(pipe.remote)

    def _fail_slot(self, slot: _Slot, exc: DgetError) -> None:
        waiters, slot.waiters = slot.waiters, []
        for w in waiters:
            w.fail(exc)
        pending, slot.pending = slot.pending, deque()
        for m in pending:
            self.owner.on_send_failed(m, exc)

    def on_pipe_closed(self, pipe: Pipe, reason: str) -> None:
        self.owner.trace("pipe.close", "peer=%s reason=%s" % (pipe.remote.hex()[:8], reason))
        slot = self._slots.get(pipe.remote)
        if slot is not None and slot.pipe is pipe:
            slot.pipe = None
            if reason in ("dead", "link-error", "link-closed"):
                now = self.owner.executor.now_ms()
                cfg = self.owner.config
                self.routing.mark_dead(pipe.remote, now + cfg.ping_interval_ms * cfg.ping_misses)
            self._fail_slot(slot, PipeClosed(reason))
        self.owner.on_pipe_down(pipe.remote, reason)

    def on_pipe_control(self, pipe: Pipe, reader: TagReader) -> None:
        op = reader.str(T_OP, "")
        if op == "endpoint.info":
            endpoints = [e.decode("utf-8") for e in reader.all(T_ENDPOINT)]
            if endpoints:
                self.routing.upsert(pipe.remote, self.owner.executor.now_ms(), endpoints=endpoints)
        elif op == "leave":
            self.owner.on_peer_leave(pipe.remote)
            pipe.close("leave")
        elif op == "pipe.reject":
            pipe.close("rejected")

    def on_unexpected_hello(self, pipe: Pipe, frame: Frame) -> None:
        remote_nid, codes = wire.parse_hello(frame.body)
        pipe.close("rehandshake")
        self._handle_hello(pipe.link, remote_nid, codes)

    # -- message path --------------------------------------------------------

    def send_to(self, remote: NucleusId, m: Message) -> None:
        """Queue a message toward a remote nucleus, opening the pipe if needed."""
        slot = self._slots.setdefault(remote, _Slot(remote))
        if slot.pipe is not None and slot.pipe.state is PipeState.OPEN:
            slot.pipe.send_message(m)
            return
        slot.pending.append(m)
        if slot.dial is None:
            entry = self.routing.get(remote)
            endpoints = entry.endpoints if entry else []
            if not endpoints:
                slot.pending.pop()
                self.owner.on_send_failed(m, Unroutable("no endpoints for %s" % remote.hex()[:8]))
                return
            self._start_dial(slot, endpoints[0])

    def leave_all(self) -> None:
        for pipe in self.open_pipes():
            try:
                pipe.send_control(TagWriter().add_str(T_OP, "leave"))
            except DgetError:
                pass
            pipe.close("local-leave")

    def close_all(self) -> None:
        for pipe in self.open_pipes():
            pipe.close("shutdown")
