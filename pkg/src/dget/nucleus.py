"""The per-node kernel.

Owns the entity registry, the security engine, the pipe manager, and the
discovery service; routes every message (local queue move, forwarding
record, or remote pipe); runs the four-phase migration protocol; and
exposes the admin surface the manager entity serves.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Callable, Optional

from .config import NucleusConfig
from .cores import DiscoveryCore, GroupCore, ManagerCore, SecurityCore, instantiate_core
from .discovery import DiscoveryService, ResourceAdvert
from .entity import (
    ActivityRecord,
    ActivityState,
    CapabilityDescriptor,
    CapabilityKind,
    EntityController,
    EntityCore,
    Registered,
    decode_record,
    encode_record,
    pack_snapshot,
    restore_snapshot,
)
from .errors import (
    AccessDenied,
    CapabilitySelectionRequired,
    ConnectTimeout,
    CoreInitFailed,
    DgetError,
    DuplicateId,
    InvalidConfig,
    MigrationInProgress,
    NoMatchingCapability,
    PipeClosed,
    QueueFull,
    RequestTimeout,
    SnapshotFailed,
    UnknownActivity,
    UnknownCapability,
    UnknownEntity,
    Unroutable,
    from_code,
)
from .ids import (
    EntityId,
    IdSource,
    LOCAL_DISCOVERY,
    LOCAL_MANAGER,
    LOCAL_SECURITY,
    NucleusId,
    RandomIdSource,
)
from .messaging import Connector, DelayedChannelManager, Kind, Message, NO_CORRELATION
from .runtime import Executor, Future, Timer
from .security import PrincipalId, SecurityEngine, verify_principal
from .transport import PipeManager, Transport
from .wire import (
    T_DEST,
    T_ERROR_CODE,
    T_ERROR_DETAIL,
    T_ID,
    T_MAC,
    T_MODE,
    T_OP,
    T_PRINCIPAL,
    T_RECORD,
    T_SELECT,
    T_SNAPSHOT,
    TagReader,
    TagWriter,
)

log = logging.getLogger(__name__)

# the action vocabulary evaluated when snapshotting rights at create time
ACTIONS = ("create", "invoke", "migrate", "delete", "subscribe", "notify")


class Counters:
    """Named diagnostic counters; not part of the deterministic trace."""

    def __init__(self) -> None:
        self.values: dict[str, int] = {}

    def bump(self, name: str, amount: int = 1) -> None:
        self.values[name] = self.values.get(name, 0) + amount

    def get(self, name: str) -> int:
        return self.values.get(name, 0)


@dataclass(slots=True)
class Tombstone:
    location: Optional[NucleusId]  # None = deleted, otherwise forward here
    expiry_ms: int


@dataclass(slots=True)
class _PendingRpc:
    future: Future
    timer: Timer
    remote: NucleusId
    parse_tags: bool


class Nucleus:
    def __init__(
        self,
        config: NucleusConfig,
        executor: Executor,
        name: str = "",
        trace_sink: Optional[Callable[[str, str, str], None]] = None,
        ids: Optional[IdSource] = None,
        rng: Optional[random.Random] = None,
    ):
        self.config = config
        self.executor = executor
        self.ids = ids or RandomIdSource()
        self.rng = rng or random.Random()
        self.id: NucleusId = self._assign_id(config.node_id)
        self.name = name or self.id.hex()[:8]
        self._trace_sink = trace_sink
        self.dead = False

        self.registry: dict[EntityId, Registered] = {}
        self.tombstones: dict[EntityId, Tombstone] = {}
        self.counters = Counters()
        self.security = SecurityEngine()
        self.delayed = DelayedChannelManager(capacity=config.delayed_capacity)
        self.pipes = PipeManager(self)
        self.discovery = DiscoveryService(self)

        self._pending: dict[bytes, _PendingRpc] = {}
        self._rpc_per_nucleus: dict[NucleusId, int] = {}
        self._booted = False

    def _assign_id(self, configured: str) -> NucleusId:
        if configured == "auto":
            return self.ids.fresh()
        try:
            nid = bytes.fromhex(configured)
        except ValueError as exc:
            raise InvalidConfig("node.id must be 32 hex chars or auto") from exc
        if len(nid) != 16:
            raise InvalidConfig("node.id must name 16 bytes")
        return nid

    # -- plumbing the transport expects ------------------------------------------

    def trace(self, kind: str, detail: str) -> None:
        if self.dead:
            return
        if self._trace_sink is not None:
            self._trace_sink(self.name, kind, detail)

    @property
    def routing(self):
        return self.pipes.routing

    def listen_address(self) -> str:
        return self.config.listen

    def log_exception(self, context: str, exc: Exception) -> None:
        log.warning("%s: %s: %s", context, type(exc).__name__, exc)

    def install_transport(self, transport: Transport) -> None:
        self.pipes.register_transport(transport)

    # -- boot / shutdown -----------------------------------------------------------

    def boot(self) -> "Nucleus":
        if self._booted:
            return self
        if self.config.listen:
            self._listen_transport().listen(self.config.listen, self.pipes.on_inbound_link)
        self._register_system_entities()
        self.discovery.start()
        if self.config.bootstrap:
            self.executor.post(self.discovery.join, list(self.config.bootstrap))
        self.executor.call_later(self.config.forward_ttl_ms, self._sweep_tombstones)
        self._booted = True
        self.trace("boot", "id=%s" % self.id.hex())
        return self

    def _listen_transport(self) -> Transport:
        for name in self.config.protocols:
            for transport in self.pipes._transports.values():
                if transport.protocol.name.lower().replace("_", "-") == name.replace("_", "-"):
                    return transport
        # fall back to the first registered transport
        for transport in self.pipes._transports.values():
            return transport
        raise InvalidConfig("no transport installed")

    def _register_system_entities(self) -> None:
        system = [
            (LOCAL_SECURITY, "system.security", "security", SecurityCore()),
            (LOCAL_MANAGER, "system.manager", "manager", ManagerCore()),
            (LOCAL_DISCOVERY, "system.discovery", "discovery", DiscoveryCore()),
        ]
        for local, cap_name, service, core in system:
            descriptor = CapabilityDescriptor(
                id=EntityId(self.id, local),
                kind=CapabilityKind.ATOMIC,
                capabilities=[cap_name],
                attributes={"type": "system", "service": service, "name": cap_name},
            )
            self.register_capability(descriptor, admin=self.config.admin, core=core)

    def shutdown(self, graceful: bool = True) -> None:
        if self.dead:
            return
        if graceful:
            for eid in sorted(self.registry, key=lambda e: e.to_bytes()):
                entry = self.registry.get(eid)
                if entry is not None and entry.is_activity:
                    try:
                        self._terminate_activity(entry)
                    except DgetError:
                        pass
            self.pipes.leave_all()
            self.trace("node.leave", "graceful=1")
        self.discovery.stop()
        self.pipes.close_all()
        self.dead = True

    def kill(self) -> None:
        """Crash: silence without any goodbye; peers detect via ping timeouts."""
        self.dead = True

    def _sweep_tombstones(self) -> None:
        if self.dead:
            return
        now = self.executor.now_ms()
        expired = [eid for eid, tomb in self.tombstones.items() if now >= tomb.expiry_ms]
        for eid in expired:
            del self.tombstones[eid]
        self.executor.call_later(self.config.forward_ttl_ms, self._sweep_tombstones)

    # -- registry -------------------------------------------------------------------

    def lookup(self, eid: EntityId) -> Optional[Registered]:
        return self.registry.get(eid)

    def capability_descriptor(self, cap_id: EntityId) -> CapabilityDescriptor:
        entry = self.registry.get(cap_id)
        if entry is None or not isinstance(entry.record, CapabilityDescriptor):
            raise UnknownCapability(cap_id.short())
        return entry.record

    def find_capability_by_name(self, name: str) -> Optional[Registered]:
        for eid in sorted(self.registry, key=lambda e: e.to_bytes()):
            entry = self.registry[eid]
            if isinstance(entry.record, CapabilityDescriptor) and name in entry.record.capabilities:
                return entry
        return None

    def register_capability(
        self, descriptor: CapabilityDescriptor, admin: str, core: Optional[EntityCore] = None
    ) -> EntityId:
        descriptor.validate()
        if descriptor.id in self.registry:
            raise DuplicateId(descriptor.id.short())
        descriptor.attributes.setdefault("name", descriptor.capabilities[0])
        connector = Connector(descriptor.id, capacity=self.config.connector_capacity)
        entry = Registered(record=descriptor, connector=connector, controller=None, core=core, admin=admin)  # type: ignore[arg-type]
        entry.controller = EntityController(self, entry)
        self.registry[descriptor.id] = entry
        self.tombstones.pop(descriptor.id, None)
        self.discovery.advertise(self._advert_for(descriptor))
        self.trace("entity.created", "id=%s kind=%s" % (descriptor.id.local.hex()[:8], descriptor.kind.value))
        return descriptor.id

    def _advert_for(self, descriptor: CapabilityDescriptor) -> ResourceAdvert:
        return ResourceAdvert(
            capability=descriptor.id,
            home=self.id,
            home_endpoint=self.listen_address(),
            attributes=dict(descriptor.attributes),
            version=descriptor.version,
        )

    def readvertise(self, cap_id: EntityId) -> None:
        descriptor = self.capability_descriptor(cap_id)
        descriptor.version += 1
        self.discovery.advertise(self._advert_for(descriptor))

    # -- message routing ----------------------------------------------------------------

    def deliver(self, m: Message) -> None:
        """Route one message: rpc completion, local queue, forward, or pipe."""
        if self.dead:
            return
        if m.correlation != NO_CORRELATION and self._maybe_resolve_rpc(m):
            return
        entry = self.registry.get(m.dst)
        if entry is not None:
            record = entry.record
            if isinstance(record, ActivityRecord) and (
                record.state is ActivityState.MIGRATING or self.delayed.is_buffering(m.dst)
            ):
                self.delayed.capture(m.dst, m)
                return
            entry.connector.push_inbound(m)
            self.trace(
                "deliver",
                "dst=%s src=%s kind=%s len=%d data=%s"
                % (m.dst.local.hex()[:8], m.src.local.hex()[:8], m.kind.name, len(m.payload),
                   m.payload[:16].hex()),
            )
            entry.controller.kick()
            return
        tomb = self.tombstones.get(m.dst)
        if tomb is not None and self.executor.now_ms() < tomb.expiry_ms:
            if tomb.location is None:
                raise UnknownEntity("%s was deleted" % m.dst.short())
            self.trace("forward", "dst=%s to=%s" % (m.dst.local.hex()[:8], tomb.location.hex()[:8]))
            self.send_remote(m, tomb.location)
            return
        if m.dst.nucleus != self.id:
            self.send_remote(m, m.dst.nucleus)
            return
        raise UnknownEntity(m.dst.short())

    def send_remote(self, m: Message, nid: NucleusId) -> None:
        if nid == self.id:
            raise UnknownEntity(m.dst.short())
        entry = self.pipes.routing.get(nid)
        now = self.executor.now_ms()
        if entry is not None and entry.dead and now < entry.retry_at:
            raise Unroutable("peer %s is down" % nid.hex()[:8])
        self.pipes.send_to(nid, m)

    def _maybe_resolve_rpc(self, m: Message) -> bool:
        pending = self._pending.get(m.correlation)
        if pending is None:
            return False
        if m.kind is Kind.REPLY:
            self._settle_rpc(m.correlation, pending)
            try:
                pending.future.ok(TagReader(m.payload) if pending.parse_tags else m.payload)
            except DgetError as exc:
                pending.future.fail(exc)
            return True
        if m.kind is Kind.CONTROL:
            try:
                reader = TagReader(m.payload)
                if reader.str(T_OP, "") == "error":
                    self._settle_rpc(m.correlation, pending)
                    pending.future.fail(
                        from_code(reader.str(T_ERROR_CODE, "error"), reader.str(T_ERROR_DETAIL, ""))
                    )
                    return True
            except DgetError:
                pass
        return False

    def _settle_rpc(self, correlation: bytes, pending: _PendingRpc) -> None:
        self._pending.pop(correlation, None)
        pending.timer.cancel()
        count = self._rpc_per_nucleus.get(pending.remote, 0)
        if count <= 1:
            self._rpc_per_nucleus.pop(pending.remote, None)
        else:
            self._rpc_per_nucleus[pending.remote] = count - 1

    def on_remote_message(self, m: Message, pipe) -> None:
        try:
            self.deliver(m)
        except QueueFull as exc:
            self.counters.bump("backpressure_drops")
            self._error_back(m, exc)
        except DgetError as exc:
            self.counters.bump("undeliverable")
            self._error_back(m, exc)

    def on_send_failed(self, m: Message, exc: DgetError) -> None:
        pending = self._pending.get(m.correlation) if m.correlation != NO_CORRELATION else None
        if pending is not None:
            self._settle_rpc(m.correlation, pending)
            pending.future.fail(exc)
            return
        if m.kind is Kind.EVENT:
            self.counters.bump("undeliverable_events")
            return
        self._error_back(m, exc)

    def _error_back(self, m: Message, exc: DgetError) -> None:
        if m.kind is Kind.EVENT or m.correlation == NO_CORRELATION:
            return
        if m.src.nucleus == self.id and m.src not in self.registry:
            return
        try:
            self.reply_error(m, exc)
        except DgetError:
            self.counters.bump("error_reply_failed")

    # -- pipe event hooks -------------------------------------------------------------

    def on_pipe_open(self, nid: NucleusId) -> None:
        self.discovery.on_pipe_open(nid)

    def on_pipe_down(self, nid: NucleusId, reason: str) -> None:
        if reason in ("dead", "link-error", "link-closed"):
            self.discovery.on_peer_dead(nid)

    def on_peer_leave(self, nid: NucleusId) -> None:
        self.discovery.on_peer_leave(nid)

    def maybe_close_pipe(self, nid: NucleusId) -> None:
        """Close a pruned neighbor's pipe unless requests are still in flight."""
        if self._rpc_per_nucleus.get(nid, 0) > 0:
            return
        pipe = self.pipes.pipe_to(nid)
        if pipe is not None:
            pipe.close("pruned")

    # -- request / reply ------------------------------------------------------------------

    def _register_rpc(self, remote: NucleusId, timeout_ms: int, parse_tags: bool) -> tuple[bytes, Future]:
        correlation = self.ids.fresh()
        future = Future()
        timer = self.executor.call_later(timeout_ms, self._rpc_timeout, correlation)
        self._pending[correlation] = _PendingRpc(future, timer, remote, parse_tags)
        self._rpc_per_nucleus[remote] = self._rpc_per_nucleus.get(remote, 0) + 1
        return correlation, future

    def _rpc_timeout(self, correlation: bytes) -> None:
        pending = self._pending.get(correlation)
        if pending is None:
            return
        self._settle_rpc(correlation, pending)
        pending.future.fail(RequestTimeout("no reply within deadline"))

    def request(self, src: EntityId, dst: EntityId, payload: bytes,
                timeout_ms: Optional[int] = None) -> Future:
        correlation, future = self._register_rpc(
            dst.nucleus, timeout_ms or self.config.request_timeout_ms, parse_tags=False
        )
        m = Message(src=src, dst=dst, kind=Kind.REQUEST, correlation=correlation, payload=payload)
        self._send_or_fail(m, future)
        return future

    def request_control(self, dst: EntityId, body: bytes, timeout_ms: Optional[int] = None,
                        src_local: bytes = LOCAL_MANAGER) -> Future:
        correlation, future = self._register_rpc(
            dst.nucleus, timeout_ms or self.config.request_timeout_ms, parse_tags=True
        )
        m = Message(
            src=EntityId(self.id, src_local), dst=dst, kind=Kind.CONTROL,
            correlation=correlation, payload=body,
        )
        self._send_or_fail(m, future)
        return future

    def _send_or_fail(self, m: Message, future: Future) -> None:
        try:
            self.deliver(m)
        except DgetError as exc:
            pending = self._pending.get(m.correlation)
            if pending is not None:
                self._settle_rpc(m.correlation, pending)
            future.fail(exc)

    def request_control_raw(self, dst: EntityId, body: bytes,
                            timeout_ms: Optional[int] = None) -> Future:
        """Control rpc resolving with the raw reply payload (relay use)."""
        correlation, future = self._register_rpc(
            dst.nucleus, timeout_ms or self.config.request_timeout_ms, parse_tags=False
        )
        m = Message(
            src=EntityId(self.id, LOCAL_MANAGER), dst=dst, kind=Kind.CONTROL,
            correlation=correlation, payload=body,
        )
        self._send_or_fail(m, future)
        return future

    def control_to(self, dst: EntityId, body: bytes) -> None:
        """Fire-and-forget control message (gossip, query traffic)."""
        m = Message(
            src=EntityId(self.id, LOCAL_DISCOVERY), dst=dst, kind=Kind.CONTROL, payload=body
        )
        try:
            self.deliver(m)
        except DgetError:
            self.counters.bump("control_send_failed")

    def reply(self, request: Message, payload: bytes) -> None:
        if request.correlation == NO_CORRELATION or request.kind is Kind.EVENT:
            return
        m = Message(
            src=request.dst, dst=request.src, kind=Kind.REPLY,
            correlation=request.correlation, payload=payload,
        )
        try:
            self.deliver(m)
        except DgetError:
            self.counters.bump("reply_failed")

    def reply_error(self, request: Message, exc: BaseException) -> None:
        if request.correlation == NO_CORRELATION or request.kind is Kind.EVENT:
            return
        code = exc.code if isinstance(exc, DgetError) else "error"
        detail = str(exc)
        body = (
            TagWriter()
            .add_str(T_OP, "error")
            .add_str(T_ERROR_CODE, code)
            .add_str(T_ERROR_DETAIL, detail)
            .bytes()
        )
        m = Message(
            src=request.dst, dst=request.src, kind=Kind.CONTROL,
            correlation=request.correlation, payload=body,
        )
        self.deliver(m)

    def authenticate(self, reader: TagReader) -> PrincipalId:
        token = reader.str(T_PRINCIPAL, "")
        principal = PrincipalId.parse(token)
        if self.config.secret:
            mac = reader.str(T_MAC, "")
            if not verify_principal(self.config.secret, token, mac):
                raise AccessDenied("principal authentication failed")
        return principal

    # -- entity lifecycle -------------------------------------------------------------------

    def _rights_snapshot(self, principal: PrincipalId, descriptor: CapabilityDescriptor) -> frozenset[str]:
        return frozenset(a for a in ACTIONS if self.security.check(principal, descriptor, a).allowed)

    def _resolve_selection(self, descriptor: CapabilityDescriptor, selected: Optional[str]) -> str:
        if descriptor.kind is CapabilityKind.AGGREGATE:
            if not selected:
                raise CapabilitySelectionRequired(
                    "aggregate offers %s" % ",".join(descriptor.capabilities)
                )
            if selected not in descriptor.capabilities:
                raise UnknownCapability("%s not offered" % selected)
            return selected
        sole = descriptor.capabilities[0]
        if selected and selected != sole:
            raise UnknownCapability("%s not offered" % selected)
        return sole

    def create_activity(
        self,
        cap_entry: Registered,
        principal: PrincipalId,
        selected: Optional[str],
        params: bytes,
        _internal: bool = False,
    ) -> EntityId:
        descriptor = cap_entry.record
        if not isinstance(descriptor, CapabilityDescriptor):
            raise UnknownCapability(cap_entry.id.short())
        if not _internal:
            decision = self.security.check(principal, descriptor, "create")
            if not decision:
                raise AccessDenied("create: %s" % decision.reason)
            community = decision.community
        else:
            community = principal.name
        name = self._resolve_selection(descriptor, selected)
        self.security.charge(community, descriptor, "activities", 1)
        created_members: list[EntityId] = []
        record: Optional[ActivityRecord] = None
        try:
            if descriptor.kind is CapabilityKind.COMPOSITE:
                for member_cap in descriptor.member_capabilities:
                    member_entry = self.registry.get(member_cap)
                    if member_entry is None or not isinstance(member_entry.record, CapabilityDescriptor):
                        raise UnknownCapability("member %s" % member_cap.short())
                    created_members.append(
                        self.create_activity(member_entry, principal, None, params, _internal=True)
                    )
                core: EntityCore = GroupCore()
            else:
                core = instantiate_core(name)
            record = ActivityRecord(
                id=EntityId(self.id, self.ids.fresh()),
                capability=descriptor.id,
                selected_capability=name,
                owner=principal,
                granted_actions=self._rights_snapshot(principal, descriptor) if not _internal
                else frozenset(ACTIONS),
                owner_community=community,
                members=created_members,
            )
            connector = Connector(record.id, capacity=self.config.connector_capacity)
            entry = Registered(record=record, connector=connector, controller=None, core=core)  # type: ignore[arg-type]
            entry.controller = EntityController(self, entry)
            self.registry[record.id] = entry
            try:
                core.init(params, entry.controller.ctx)
            except DgetError:
                raise
            except Exception as exc:
                raise CoreInitFailed(str(exc)) from exc
            record.transition(ActivityState.ACTIVE)
            self.trace("entity.created", "id=%s cap=%s" % (record.id.local.hex()[:8], name))
            self.notify(entry, "activity.created", b"")
            return record.id
        except Exception:
            if record is not None and record.id in self.registry:
                del self.registry[record.id]
            for member_id in reversed(created_members):
                member = self.registry.get(member_id)
                if member is not None:
                    self._terminate_activity(member, fire_events=False)
            self.security.refund(community, descriptor, "activities", 1)
            raise

    def delete_activity(self, entry: Registered, principal: PrincipalId) -> None:
        record = entry.record
        if not isinstance(record, ActivityRecord) or record.id not in self.registry:
            raise UnknownActivity(entry.id.short())
        cap_admin = ""
        cap_entry = self.registry.get(record.capability)
        if cap_entry is not None:
            cap_admin = cap_entry.admin
        if principal.name not in (record.owner.name, cap_admin) and principal.name != self.config.admin:
            raise AccessDenied("only the owner or capability administrator may delete")
        if record.state is ActivityState.MIGRATING:
            raise MigrationInProgress(record.id.short())
        self._terminate_activity(entry)

    def _terminate_activity(self, entry: Registered, fire_events: bool = True) -> None:
        record = entry.record
        assert isinstance(record, ActivityRecord)
        if fire_events:
            self.notify(entry, "activity.terminated", b"")
        for member_id in record.members:
            member = self.registry.get(member_id)
            if member is not None:
                self._terminate_activity(member, fire_events=fire_events)
        record.transition(ActivityState.TERMINATED)
        for waiting in entry.connector.drain_inbound():
            if waiting.kind is Kind.EVENT:
                self.counters.bump("dropped_events")
            else:
                self._error_back(waiting, UnknownEntity("terminated"))
        entry.connector.close()
        del self.registry[record.id]
        self.tombstones[record.id] = Tombstone(None, self.executor.now_ms() + self.config.forward_ttl_ms)
        self.security.ledger.refund(record.owner_community, record.capability.hex(), "activities", 1)
        self.trace("entity.terminated", "id=%s" % record.id.local.hex()[:8])

    def notify(self, entry: Registered, event: str, payload: bytes) -> int:
        record = entry.record
        if not isinstance(record, ActivityRecord):
            raise UnknownActivity(entry.id.short())
        count = 0
        for subscriber in record.subscribers_of(event):
            m = Message(src=record.id, dst=subscriber, kind=Kind.EVENT, payload=payload)
            try:
                self.deliver(m)
                count += 1
            except DgetError:
                self.counters.bump("notify_failures")
        if record.subscriptions:
            self.trace("notify", "id=%s event=%s count=%d" % (record.id.local.hex()[:8], event, count))
        return count

    # -- migration ------------------------------------------------------------------------

    def migrate(self, entry: Registered, dest: NucleusId, copy: bool, done: Future) -> None:
        """Move or clone an activity to another node (four-phase protocol)."""
        record = entry.record
        if not isinstance(record, ActivityRecord):
            done.fail(UnknownActivity(entry.id.short()))
            return
        if record.state is not ActivityState.ACTIVE:
            done.fail(MigrationInProgress("activity is %s" % record.state.value))
            return
        if record.members:
            done.fail(NoMatchingCapability("composite activities do not migrate"))
            return
        if dest == self.id and not copy:
            done.ok(record.id)
            return

        moving = not copy
        if moving:
            record.transition(ActivityState.MIGRATING)
            entry.controller.paused = True
            self.delayed.begin(record.id)
            for backlog in entry.connector.drain_inbound():
                self.delayed.capture(record.id, backlog)
            self.trace("buffer.begin", "id=%s" % record.id.local.hex()[:8])

        def rollback(exc: DgetError) -> None:
            if moving:
                record.transition(ActivityState.ACTIVE)
                entry.controller.paused = False
                for held in self.delayed.take_all(record.id):
                    entry.connector.push_inbound(held)
                entry.controller.kick()
                self.trace("buffer.abort", "id=%s" % record.id.local.hex()[:8])
            done.fail(exc)

        try:
            snapshot = pack_snapshot(entry.core) if entry.core is not None else b""
        except SnapshotFailed as exc:
            rollback(exc)
            return

        wire_record = ActivityRecord(
            id=record.id,
            capability=record.capability,
            selected_capability=record.selected_capability,
            owner=record.owner,
            granted_actions=record.granted_actions,
            state=record.state if moving else ActivityState.CREATED,
            owner_community=record.owner_community,
        )
        if moving:
            wire_record.subscriptions = dict(record.subscriptions)
        body = (
            TagWriter()
            .add_str(T_OP, "migrate.offer")
            .add(T_RECORD, encode_record(wire_record))
            .add(T_SNAPSHOT, snapshot)
            .add_str(T_MODE, "move" if moving else "copy")
            .add_str(T_SELECT, record.selected_capability)
            .bytes()
        )
        offer = self.request_control(
            EntityId(dest, LOCAL_MANAGER), body, timeout_ms=self.config.migrate_timeout_ms
        )

        def offer_done(f: Future) -> None:
            if f.error is not None:
                exc = f.error
                if isinstance(exc, (RequestTimeout, ConnectTimeout, PipeClosed, Unroutable)):
                    exc = DestinationUnreachableFrom(exc)
                rollback(exc if isinstance(exc, DgetError) else DgetError(str(exc)))
                return
            reader: TagReader = f.result()
            new_id = reader.id(T_ID)
            if not moving:
                self.trace("entity.copied.out", "id=%s to=%s" % (new_id.local.hex()[:8], dest.hex()[:8]))
                done.ok(new_id)
                return
            self.tombstones[record.id] = Tombstone(
                dest, self.executor.now_ms() + self.config.forward_ttl_ms
            )
            held = self.delayed.take_all(record.id)
            record.transition(ActivityState.TERMINATED)
            entry.connector.close()
            del self.registry[record.id]
            self.security.ledger.refund(record.owner_community, record.capability.hex(), "activities", 1)
            forwarded = 0
            for m in held:
                try:
                    self.send_remote(m, dest)
                    forwarded += 1
                except DgetError:
                    self.counters.bump("flush_failures")
            self.trace(
                "entity.migrated.out",
                "id=%s to=%s flushed=%d" % (record.id.local.hex()[:8], dest.hex()[:8], forwarded),
            )
            done.ok(record.id)

        offer.on_done(offer_done)

    def accept_migration(self, record_blob: bytes, snapshot: bytes, mode: str, selected: str) -> TagWriter:
        cap_entry = self.find_capability_by_name(selected)
        if cap_entry is None:
            raise NoMatchingCapability(selected)
        descriptor = cap_entry.record
        assert isinstance(descriptor, CapabilityDescriptor)
        record = decode_record(record_blob, capability=descriptor.id)
        if mode == "move" and record.id in self.registry:
            raise DuplicateId(record.id.short())
        community = record.owner_community or record.owner.name
        self.security.charge(community, descriptor, "activities", 1)
        try:
            core = instantiate_core(selected)
            restore_snapshot(core, snapshot)
            if mode == "copy":
                record = ActivityRecord(
                    id=EntityId(self.id, self.ids.fresh()),
                    capability=descriptor.id,
                    selected_capability=record.selected_capability,
                    owner=record.owner,
                    granted_actions=record.granted_actions,
                    state=ActivityState.CREATED,
                    owner_community=community,
                )
            connector = Connector(record.id, capacity=self.config.connector_capacity)
            entry = Registered(record=record, connector=connector, controller=None, core=core)  # type: ignore[arg-type]
            entry.controller = EntityController(self, entry)
            self.registry[record.id] = entry
            self.tombstones.pop(record.id, None)
            record.transition(ActivityState.ACTIVE)
        except Exception:
            self.security.ledger.refund(community, descriptor.quota_key(), "activities", 1)
            raise
        if mode == "move":
            self.trace("entity.migrated.in", "id=%s" % record.id.local.hex()[:8])
            self.notify(entry, "activity.migrated", self.id)
        else:
            self.trace("entity.copied.in", "id=%s" % record.id.local.hex()[:8])
            self.notify(entry, "activity.created", b"")
        return TagWriter().add_id(T_ID, record.id)

    # -- admin plane ---------------------------------------------------------------------------

    def admin_deploy(self, kind: str, names: list[str], attrs: dict) -> EntityId:
        try:
            cap_kind = CapabilityKind(kind)
        except ValueError as exc:
            raise InvalidConfig("unknown capability kind %r" % kind) from exc
        if not names:
            raise InvalidConfig("deploy needs at least one capability name")
        members: list[EntityId] = []
        capabilities = names
        if cap_kind is CapabilityKind.COMPOSITE:
            capabilities = [names[0]]
            for member_name in names[1:]:
                member = self.find_capability_by_name(member_name)
                if member is None:
                    raise UnknownCapability("member %s not deployed here" % member_name)
                members.append(member.id)
        descriptor = CapabilityDescriptor(
            id=EntityId(self.id, self.ids.fresh()),
            kind=cap_kind,
            capabilities=capabilities,
            attributes=attrs,
            member_capabilities=members,
        )
        return self.register_capability(descriptor, admin=self.config.admin)

    def admin_ls(self, what: str) -> list[str]:
        lines: list[str] = []
        if what == "capabilities":
            for eid in sorted(self.registry, key=lambda e: e.to_bytes()):
                record = self.registry[eid].record
                if isinstance(record, CapabilityDescriptor):
                    attrs = " ".join("%s=%s" % (k, record.attributes[k]) for k in sorted(record.attributes))
                    lines.append(
                        "%s\t%s\t%s\t%s" % (eid.hex(), record.kind.value, ",".join(record.capabilities), attrs)
                    )
        elif what == "activities":
            for eid in sorted(self.registry, key=lambda e: e.to_bytes()):
                record = self.registry[eid].record
                if isinstance(record, ActivityRecord):
                    lines.append(
                        "%s\t%s\t%s\t%s\t%s"
                        % (eid.hex(), record.capability.hex(), record.state.value,
                           record.owner.name, record.selected_capability)
                    )
        elif what == "neighbors":
            lines = self.discovery.neighbor_lines()
        else:
            raise InvalidConfig("ls target must be capabilities|activities|neighbors")
        return lines


def DestinationUnreachableFrom(exc: BaseException):
    from .errors import DestinationUnreachable

    return DestinationUnreachable(str(exc))
