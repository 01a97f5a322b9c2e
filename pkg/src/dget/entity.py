"""Entity model: capability and activity records plus the runtime controller.

Every entity is a core (the functionality) wrapped by a controller (the
runtime).  The controller drains the entity's inbound queue one message at
a time, gates activity traffic through the security engine, answers the
uniform management interface (create, privilege edits, delete, subscribe,
notify, export and friends) and never lets a core see two concurrent
calls.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Optional, Union

from .errors import (
    AccessDenied,
    DgetError,
    DuplicateCommunity,
    IllegalTransition,
    InvalidDescriptor,
    SnapshotFailed,
    SourceRefused,
    UnknownCommunity,
    UnknownSubscription,
    UnsupportedOperation,
)
from .ids import EntityId
from .messaging import Connector, Kind, Message
from .runtime import Future
from .security import PrincipalId
from .wire import (
    T_COMMUNITY,
    T_DEST,
    T_EVENT,
    T_ID,
    T_MODE,
    T_OWNER,
    T_PARAMS,
    T_PAYLOAD,
    T_RIGHTS,
    T_SELECT,
    T_STATE,
    T_SUBSCRIBER,
    T_SUBSCRIPTION,
    T_COUNT,
    T_KIND,
    T_NAME,
    T_ATTR,
    TagReader,
    TagWriter,
)

if TYPE_CHECKING:  # pragma: no cover
    from .nucleus import Nucleus


class CapabilityKind(Enum):
    ATOMIC = "atomic"
    COMPOSITE = "composite"
    AGGREGATE = "aggregate"


@dataclass(slots=True)
class CommunityGrant:
    community: str
    rights: frozenset[str]


@dataclass(slots=True)
class CapabilityDescriptor:
    id: EntityId
    kind: CapabilityKind
    capabilities: list[str]
    attributes: dict[str, object] = field(default_factory=dict)
    member_capabilities: list[EntityId] = field(default_factory=list)
    grants: list[CommunityGrant] = field(default_factory=list)
    version: int = 1

    def validate(self) -> None:
        if not self.capabilities:
            raise InvalidDescriptor("capability list must be non-empty")
        if self.kind is CapabilityKind.ATOMIC and len(self.capabilities) != 1:
            raise InvalidDescriptor("atomic capability provides exactly one functionality")
        if self.kind is CapabilityKind.AGGREGATE and len(self.capabilities) < 2:
            raise InvalidDescriptor("aggregate capability needs at least two functionalities")
        if self.kind is CapabilityKind.COMPOSITE and not self.member_capabilities:
            raise InvalidDescriptor("composite capability needs member capabilities")

    def quota_key(self) -> str:
        return self.id.hex()

    def grant_for(self, community: str) -> Optional[CommunityGrant]:
        for g in self.grants:
            if g.community == community:
                return g
        return None


class ActivityState(Enum):
    CREATED = "created"
    ACTIVE = "active"
    MIGRATING = "migrating"
    TERMINATED = "terminated"


_LEGAL_TRANSITIONS = {
    (ActivityState.CREATED, ActivityState.ACTIVE),
    (ActivityState.ACTIVE, ActivityState.MIGRATING),
    (ActivityState.MIGRATING, ActivityState.ACTIVE),
    (ActivityState.ACTIVE, ActivityState.TERMINATED),
    (ActivityState.CREATED, ActivityState.TERMINATED),
    (ActivityState.MIGRATING, ActivityState.TERMINATED),
}


@dataclass(slots=True)
class ActivityRecord:
    id: EntityId
    capability: EntityId
    selected_capability: str
    owner: PrincipalId
    granted_actions: frozenset[str]
    state: ActivityState = ActivityState.CREATED
    # keyed (event name, subscriber wire bytes); dict keeps insertion order
    subscriptions: dict[tuple[str, bytes], None] = field(default_factory=dict)
    snapshot: Optional[bytes] = None
    owner_community: str = ""
    members: list[EntityId] = field(default_factory=list)

    def transition(self, new: ActivityState) -> None:
        if (self.state, new) not in _LEGAL_TRANSITIONS:
            raise IllegalTransition("%s -> %s" % (self.state.value, new.value))
        self.state = new

    def subscribers_of(self, event: str) -> list[EntityId]:
        found = [sub for (ev, sub) in self.subscriptions if ev == event]
        return [EntityId.from_bytes(raw) for raw in sorted(found)]


EntityRecord = Union[ActivityRecord, CapabilityDescriptor]


class CoreContext:
    """What a core may touch at runtime: its identity and the kernel services."""

    __slots__ = ("nucleus", "entity_id")

    def __init__(self, nucleus: "Nucleus", entity_id: EntityId):
        self.nucleus = nucleus
        self.entity_id = entity_id

    def now_ms(self) -> int:
        return self.nucleus.executor.now_ms()

    def request(self, dst: EntityId, payload: bytes, timeout_ms: Optional[int] = None) -> Future:
        return self.nucleus.request(self.entity_id, dst, payload, timeout_ms)


class EntityCore:
    """Base for entity functionality; subclasses override what they need."""

    SCHEMA_VERSION = 1

    def init(self, params: bytes, ctx: CoreContext) -> None:
        pass

    def handle(self, message: Message, ctx: CoreContext):
        """Process REQUEST/EVENT traffic; return reply bytes, a Future, or None."""
        return None

    def control(self, op: str, reader: TagReader, ctx: CoreContext):
        """Protocol hook for system entities; None means unsupported op."""
        return None

    def snapshot_state(self) -> bytes:
        return b""

    def restore_state(self, blob: bytes) -> None:
        pass


_SNAP_VER = struct.Struct(">H")


def pack_snapshot(core: EntityCore) -> bytes:
    try:
        return _SNAP_VER.pack(core.SCHEMA_VERSION) + core.snapshot_state()
    except DgetError:
        raise
    except Exception as exc:
        raise SnapshotFailed(str(exc)) from exc


def restore_snapshot(core: EntityCore, blob: bytes) -> None:
    if len(blob) < _SNAP_VER.size:
        raise SnapshotFailed("snapshot truncated")
    (version,) = _SNAP_VER.unpack_from(blob)
    if version != core.SCHEMA_VERSION:
        raise SnapshotFailed("schema %d, core expects %d" % (version, core.SCHEMA_VERSION))
    try:
        core.restore_state(blob[_SNAP_VER.size:])
    except DgetError:
        raise
    except Exception as exc:
        raise SnapshotFailed(str(exc)) from exc


def encode_record(rec: ActivityRecord) -> bytes:
    w = TagWriter()
    w.add_id(T_ID, rec.id)
    w.add_str(T_SELECT, rec.selected_capability)
    w.add_str(T_OWNER, rec.owner.token())
    w.add_str(T_RIGHTS, ",".join(sorted(rec.granted_actions)))
    w.add_str(T_COMMUNITY, rec.owner_community)
    w.add_str(T_STATE, rec.state.value)
    for (event, sub) in rec.subscriptions:
        w.add(T_SUBSCRIPTION, event.encode("utf-8") + b"\x00" + sub)
    return w.bytes()


def decode_record(data: bytes, capability: EntityId) -> ActivityRecord:
    r = TagReader(data)
    rights = frozenset(s for s in r.str(T_RIGHTS, "").split(",") if s)
    rec = ActivityRecord(
        id=r.id(T_ID),
        capability=capability,
        selected_capability=r.str(T_SELECT),
        owner=PrincipalId.parse(r.str(T_OWNER)),
        granted_actions=rights,
        state=ActivityState(r.str(T_STATE)),
        owner_community=r.str(T_COMMUNITY, ""),
    )
    for raw in r.all(T_SUBSCRIPTION):
        event, _, sub = raw.partition(b"\x00")
        rec.subscriptions[(event.decode("utf-8"), sub)] = None
    return rec


@dataclass(slots=True)
class Registered:
    """Registry entry: the record plus its runtime attachments."""

    record: EntityRecord
    connector: Connector
    controller: "EntityController"
    core: Optional[EntityCore]
    admin: str = ""

    @property
    def id(self) -> EntityId:
        return self.record.id

    @property
    def is_activity(self) -> bool:
        return isinstance(self.record, ActivityRecord)


class EntityController:
    """Runtime wrapper serializing all traffic into one entity."""

    def __init__(self, nucleus: "Nucleus", entry: Registered):
        self.nucleus = nucleus
        self.entry = entry
        self.ctx = CoreContext(nucleus, entry.record.id)
        self._scheduled = False
        self._busy = False
        self.paused = False

    # -- queue pump -----------------------------------------------------------

    def kick(self) -> None:
        if self._scheduled or self._busy or self.paused:
            return
        self._scheduled = True
        self.nucleus.executor.post(self._drain_one)

    def _drain_one(self) -> None:
        self._scheduled = False
        if self._busy or self.paused:
            return
        m = self.entry.connector.pop_inbound()
        if m is None:
            return
        try:
            self._handle(m)
        except DgetError as exc:
            self.nucleus.reply_error(m, exc)
        except Exception as exc:  # core bugs must not kill the node
            self.nucleus.log_exception("core failure in %s" % self.entry.id.short(), exc)
            self.nucleus.reply_error(m, DgetError("core failure: %s" % exc))
        if self.entry.connector.inbound:
            self.kick()

    def _handle(self, m: Message) -> None:
        if m.kind is Kind.CONTROL:
            self._handle_control(m)
            return
        record = self.entry.record
        if isinstance(record, ActivityRecord):
            if not self.nucleus.security.gate_dispatch(record.granted_actions):
                raise AccessDenied("invoke not granted to %s" % record.owner.name)
        if self.entry.core is None:
            raise UnsupportedOperation("entity has no functional core")
        result = self.entry.core.handle(m, self.ctx)
        self._finish_handle(m, result)

    def _finish_handle(self, m: Message, result) -> None:
        if isinstance(result, Future):
            self._busy = True

            def done(f: Future) -> None:
                self._busy = False
                if f.error is not None:
                    err = f.error if isinstance(f.error, DgetError) else DgetError(str(f.error))
                    self.nucleus.reply_error(m, err)
                elif m.kind is Kind.REQUEST:
                    self.nucleus.reply(m, f.result() or b"")
                self.kick()

            result.on_done(done)
            return
        if m.kind is Kind.REQUEST:
            self.nucleus.reply(m, result if result is not None else b"")

    # -- uniform management interface -------------------------------------------

    def _handle_control(self, m: Message) -> None:
        reader = TagReader(m.payload)
        op = reader.str(1, "")  # T_OP
        handler = _CONTROL_OPS.get(op)
        if handler is not None:
            result = handler(self, m, reader)
        elif self.entry.core is not None:
            result = self.entry.core.control(op, reader, self.ctx)
            if result is None:
                raise UnsupportedOperation("op %r" % op)
        else:
            raise UnsupportedOperation("op %r" % op)
        self._finish_control(m, result)

    def _finish_control(self, m: Message, result) -> None:
        if isinstance(result, Future):
            self._busy = True

            def done(f: Future) -> None:
                self._busy = False
                if f.error is not None:
                    err = f.error if isinstance(f.error, DgetError) else DgetError(str(f.error))
                    self.nucleus.reply_error(m, err)
                else:
                    out = f.result()
                    self.nucleus.reply(m, out.bytes() if isinstance(out, TagWriter) else (out or b""))
                self.kick()

            result.on_done(done)
            return
        if isinstance(result, TagWriter):
            self.nucleus.reply(m, result.bytes())
        else:
            self.nucleus.reply(m, result or b"")

    # handlers return TagWriter | Future | bytes

    def _need_capability(self) -> CapabilityDescriptor:
        record = self.entry.record
        if not isinstance(record, CapabilityDescriptor):
            raise UnsupportedOperation("capability operation on an activity")
        return record

    def _need_activity(self) -> ActivityRecord:
        record = self.entry.record
        if not isinstance(record, ActivityRecord):
            raise UnsupportedOperation("activity operation on a capability")
        return record

    def _op_create(self, m: Message, reader: TagReader):
        self._need_capability()
        principal = self.nucleus.authenticate(reader)
        selected = reader.str(T_SELECT, "") or None
        params = reader.joined(T_PARAMS)
        new_id = self.nucleus.create_activity(self.entry, principal, selected, params)
        return TagWriter().add_id(T_ID, new_id)

    def _op_grant_add(self, m: Message, reader: TagReader):
        cap = self._need_capability()
        principal = self.nucleus.authenticate(reader)
        self._require_admin(principal)
        community = reader.str(T_COMMUNITY)
        rights = _rights_from(reader)
        if cap.grant_for(community) is not None:
            raise DuplicateCommunity(community)
        cap.grants.append(CommunityGrant(community=community, rights=rights))
        return TagWriter()

    def _op_grant_update(self, m: Message, reader: TagReader):
        cap = self._need_capability()
        principal = self.nucleus.authenticate(reader)
        self._require_admin(principal)
        community = reader.str(T_COMMUNITY)
        grant = cap.grant_for(community)
        if grant is None:
            raise UnknownCommunity(community)
        grant.rights = _rights_from(reader)
        return TagWriter()

    def _op_grant_remove(self, m: Message, reader: TagReader):
        cap = self._need_capability()
        principal = self.nucleus.authenticate(reader)
        self._require_admin(principal)
        community = reader.str(T_COMMUNITY)
        grant = cap.grant_for(community)
        if grant is None:
            raise UnknownCommunity(community)
        cap.grants.remove(grant)
        return TagWriter()

    def _require_admin(self, principal: PrincipalId) -> None:
        if principal.name != self.entry.admin:
            raise AccessDenied("%s is not the capability administrator" % principal.name)

    def _op_delete(self, m: Message, reader: TagReader):
        self._need_activity()
        principal = self.nucleus.authenticate(reader)
        self.nucleus.delete_activity(self.entry, principal)
        return TagWriter()

    def _op_subscribe(self, m: Message, reader: TagReader):
        rec = self._need_activity()
        event = reader.str(T_EVENT)
        subscriber = reader.id(T_SUBSCRIBER)
        rec.subscriptions[(event, subscriber.to_bytes())] = None
        return TagWriter()

    def _op_unsubscribe(self, m: Message, reader: TagReader):
        rec = self._need_activity()
        event = reader.str(T_EVENT)
        subscriber = reader.id(T_SUBSCRIBER)
        key = (event, subscriber.to_bytes())
        if key not in rec.subscriptions:
            raise UnknownSubscription("%s / %s" % (event, subscriber.short()))
        del rec.subscriptions[key]
        return TagWriter()

    def _op_notify(self, m: Message, reader: TagReader):
        self._need_activity()
        event = reader.str(T_EVENT)
        payload = reader.joined(T_PAYLOAD)
        count = self.nucleus.notify(self.entry, event, payload)
        return TagWriter().add_int(T_COUNT, count)

    def _op_export(self, m: Message, reader: TagReader):
        self._need_activity()
        principal = self.nucleus.authenticate(reader)
        dest = bytes(reader.first(T_DEST))
        copy = reader.str(T_MODE, "move") == "copy"
        self._authorize_migrate(principal)
        done = Future()
        self.nucleus.migrate(self.entry, dest, copy, done)
        out = Future()
        done.on_done(lambda f: out.fail(f.error) if f.error else out.ok(TagWriter().add_id(T_ID, f.result())))
        return out

    def _op_pull(self, m: Message, reader: TagReader):
        """Receiver-initiated migration: the destination asks us to export."""
        self._need_activity()
        principal = self.nucleus.authenticate(reader)
        dest = bytes(reader.first(T_DEST))
        copy = reader.str(T_MODE, "move") == "copy"
        try:
            self._authorize_migrate(principal)
        except AccessDenied as exc:
            raise SourceRefused(exc.message) from exc
        done = Future()
        self.nucleus.migrate(self.entry, dest, copy, done)
        out = Future()
        done.on_done(lambda f: out.fail(f.error) if f.error else out.ok(TagWriter().add_id(T_ID, f.result())))
        return out

    def _authorize_migrate(self, principal: PrincipalId) -> None:
        rec = self._need_activity()
        cap = self.nucleus.capability_descriptor(rec.capability)
        decision = self.nucleus.security.check(principal, cap, "migrate")
        if not decision:
            raise AccessDenied("migrate: %s" % decision.reason)

    def _op_describe(self, m: Message, reader: TagReader):
        record = self.entry.record
        w = TagWriter()
        if isinstance(record, CapabilityDescriptor):
            w.add_str(T_KIND, record.kind.value)
            w.add_str(T_NAME, ",".join(record.capabilities))
            for key in sorted(record.attributes):
                w.add_str(T_ATTR, "%s=%s" % (key, record.attributes[key]))
        else:
            w.add_str(T_KIND, "activity")
            w.add_str(T_STATE, record.state.value)
            w.add_str(T_NAME, record.selected_capability)
            w.add_str(T_OWNER, record.owner.token())
        return w


def _rights_from(reader: TagReader) -> frozenset[str]:
    return frozenset(s for s in reader.str(T_RIGHTS, "").split(",") if s)


_CONTROL_OPS = {
    "create": EntityController._op_create,
    "grant.add": EntityController._op_grant_add,
    "grant.update": EntityController._op_grant_update,
    "grant.remove": EntityController._op_grant_remove,
    "delete": EntityController._op_delete,
    "subscribe": EntityController._op_subscribe,
    "unsubscribe": EntityController._op_unsubscribe,
    "notify": EntityController._op_notify,
    "export": EntityController._op_export,
    "pull": EntityController._op_pull,
    "describe": EntityController._op_describe,
}
