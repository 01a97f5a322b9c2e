"""Built-in entity cores.

The user-facing cores (echo, counter, recorder, ...) exist so deployments
and tests have real functionality to exercise.  The three system cores
implement the node-level protocols: admin commands and migration offers
(manager), policy editing (security), and the overlay search protocol
(discovery).
"""

from __future__ import annotations

import struct
from typing import Callable

from .entity import CoreContext, EntityCore
from .errors import AccessDenied, CoreInitFailed, UnknownCapability
from .messaging import Kind, Message
from .runtime import Future
from .security import PrincipalId
from .wire import (
    T_ATTR,
    T_CLAUSES,
    T_DEST,
    T_DOC,
    T_ID,
    T_KIND,
    T_LINE,
    T_MAC,
    T_MODE,
    T_NAME,
    T_PAYLOAD,
    T_RECORD,
    T_RULE,
    T_SELECT,
    T_SNAPSHOT,
    T_TTL,
    T_WHAT,
    TagReader,
    TagWriter,
)


class EchoCore(EntityCore):
    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is Kind.REQUEST:
            return message.payload
        return None


class UpperCore(EntityCore):
    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is Kind.REQUEST:
            return message.payload.upper()
        return None


class SortCore(EntityCore):
    """Sorts newline-separated byte lines."""

    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is Kind.REQUEST:
            return b"\n".join(sorted(message.payload.split(b"\n")))
        return None


class CountCore(EntityCore):
    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is Kind.REQUEST:
            return str(len(message.payload)).encode()
        return None


class CounterCore(EntityCore):
    """Stateful counter; the standard probe for migration state continuity."""

    SCHEMA_VERSION = 1

    def __init__(self):
        self.value = 0

    def init(self, params: bytes, ctx: CoreContext) -> None:
        if params:
            self.value = int(params.decode("ascii"))

    def handle(self, message: Message, ctx: CoreContext):
        if message.payload == b"inc":
            self.value += 1
        if message.kind is Kind.REQUEST:
            return str(self.value).encode()
        return None

    def snapshot_state(self) -> bytes:
        return struct.pack(">q", self.value)

    def restore_state(self, blob: bytes) -> None:
        (self.value,) = struct.unpack(">q", blob)


class RecorderCore(EntityCore):
    """Appends every payload it sees; REQUEST "dump" returns them all."""

    SCHEMA_VERSION = 1

    def __init__(self):
        self.seen: list[bytes] = []

    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is Kind.REQUEST and message.payload == b"dump":
            return b"\n".join(self.seen)
        self.seen.append(message.payload)
        if message.kind is Kind.REQUEST:
            return b"ok"
        return None

    def snapshot_state(self) -> bytes:
        parts = [struct.pack(">I", len(self.seen))]
        for item in self.seen:
            parts.append(struct.pack(">I", len(item)))
            parts.append(item)
        return b"".join(parts)

    def restore_state(self, blob: bytes) -> None:
        (n,) = struct.unpack_from(">I", blob)
        off = 4
        self.seen = []
        for _ in range(n):
            (length,) = struct.unpack_from(">I", blob, off)
            off += 4
            self.seen.append(blob[off : off + length])
            off += length


class FailingCore(EntityCore):
    """Always refuses to initialize; exercises create/rollback paths."""

    def init(self, params: bytes, ctx: CoreContext) -> None:
        raise CoreInitFailed("this core never starts")


class GroupCore(EntityCore):
    """Pipeline over the member activities of a composite entity.

    A request flows through each member in order; the final member's reply
    is the group's reply.
    """

    def __init__(self):
        self.members = []

    def init(self, params: bytes, ctx: CoreContext) -> None:
        entry = ctx.nucleus.lookup(ctx.entity_id)
        self.members = list(entry.record.members) if entry is not None else []

    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is not Kind.REQUEST:
            return None
        if not self.members:
            return message.payload
        out = Future()
        self._step(ctx, 0, message.payload, out)
        return out

    def _step(self, ctx: CoreContext, index: int, payload: bytes, out: Future) -> None:
        if index >= len(self.members):
            out.ok(payload)
            return
        f = ctx.request(self.members[index], payload)

        def done(reply: Future) -> None:
            if reply.error is not None:
                out.fail(reply.error)
            else:
                self._step(ctx, index + 1, reply.result(), out)

        f.on_done(done)


# -- system cores --------------------------------------------------------------


class ManagerCore(EntityCore):
    """Node management: admin commands ride the entity interface to here."""

    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is Kind.REQUEST:
            if message.payload == b"id":
                return ctx.nucleus.id.hex().encode()
            return b"ok"
        return None

    def control(self, op: str, reader: TagReader, ctx: CoreContext):
        nucleus = ctx.nucleus
        if op == "migrate.offer":
            return nucleus.accept_migration(
                reader.joined(T_RECORD),
                reader.joined(T_SNAPSHOT),
                reader.str(T_MODE, "move"),
                reader.str(T_SELECT, ""),
            )
        if op == "admin.deploy":
            principal = nucleus.authenticate(reader)
            _require_node_admin(nucleus, principal)
            names = [s for s in reader.str(T_NAME, "").split(",") if s]
            attrs = _parse_attrs(raw.decode("utf-8") for raw in reader.all(T_ATTR))
            cap_id = nucleus.admin_deploy(reader.str(T_KIND), names, attrs)
            return TagWriter().add_id(5, cap_id)  # T_ID
        if op == "admin.ls":
            lines = nucleus.admin_ls(reader.str(T_WHAT, "capabilities"))
            w = TagWriter()
            for line in lines:
                w.add_str(T_LINE, line)
            return w
        if op == "admin.policy.add":
            principal = nucleus.authenticate(reader)
            _require_node_admin(nucleus, principal)
            nucleus.security.add_line(reader.str(T_RULE))
            return TagWriter()
        if op == "admin.policy.load":
            principal = nucleus.authenticate(reader)
            _require_node_admin(nucleus, principal)
            nucleus.security.load_document(reader.str(T_DOC))
            return TagWriter()
        if op == "admin.query":
            clauses = reader.str(T_CLAUSES)
            ttl = reader.int(T_TTL, nucleus.config.query_ttl)
            found = nucleus.discovery.query(clauses, ttl)
            out = Future()

            def done(f: Future) -> None:
                if f.error is not None:
                    out.fail(f.error)
                    return
                w = TagWriter()
                for advert in f.result():
                    w.add_str(T_LINE, advert.line())
                out.ok(w)

            found.on_done(done)
            return out
        if op == "admin.import":
            # receiver-initiated migration: this node asks the source to push
            activity = reader.id(T_ID)
            copy = reader.str(T_MODE, "move") == "copy"
            pull = TagWriter().add_str(1, "pull")
            pull.add_str(4, reader.str(4, ""))  # T_PRINCIPAL passthrough
            mac = reader.str(T_MAC, "")
            if mac:
                pull.add_str(T_MAC, mac)
            pull.add(T_DEST, nucleus.id)
            pull.add_str(T_MODE, "copy" if copy else "move")
            inner = nucleus.request_control(activity, pull.bytes(),
                                            timeout_ms=nucleus.config.migrate_timeout_ms * 2)
            out = Future()

            def pulled(f: Future) -> None:
                if f.error is not None:
                    out.fail(f.error)
                else:
                    out.ok(TagWriter().add_id(5, f.result().id(5)))  # T_ID

            inner.on_done(pulled)
            return out
        if op == "admin.send":
            # relay a control body to an entity this client cannot route to
            target = reader.id(T_ID)
            inner_body = reader.joined(T_PAYLOAD)
            relayed = nucleus.request_control_raw(target, inner_body)
            out = Future()

            def sent(f: Future) -> None:
                if f.error is not None:
                    out.fail(f.error)
                else:
                    out.ok(f.result())

            relayed.on_done(sent)
            return out
        return None


def _require_node_admin(nucleus, principal: PrincipalId) -> None:
    if principal.name != nucleus.config.admin:
        raise AccessDenied("%s is not the node administrator" % principal.name)


def _parse_attrs(pairs) -> dict:
    attrs: dict[str, object] = {}
    for pair in pairs:
        key, _, value = pair.partition("=")
        try:
            attrs[key] = int(value)
        except ValueError:
            try:
                attrs[key] = float(value)
            except ValueError:
                attrs[key] = value
    return attrs


class SecurityCore(EntityCore):
    """Policy edits addressed to the node's security entity."""

    def control(self, op: str, reader: TagReader, ctx: CoreContext):
        nucleus = ctx.nucleus
        if op == "policy.add":
            principal = nucleus.authenticate(reader)
            _require_node_admin(nucleus, principal)
            nucleus.security.add_line(reader.str(T_RULE))
            return TagWriter()
        if op == "policy.load":
            principal = nucleus.authenticate(reader)
            _require_node_admin(nucleus, principal)
            nucleus.security.load_document(reader.str(T_DOC))
            return TagWriter()
        if op == "policy.dump":
            w = TagWriter()
            for line in nucleus.security.dump_lines():
                w.add_str(T_LINE, line)
            return w
        return None


class DiscoveryCore(EntityCore):
    """Overlay search protocol endpoint of one node."""

    def control(self, op: str, reader: TagReader, ctx: CoreContext):
        return ctx.nucleus.discovery.handle_control(op, reader)


# -- probe cores spawned from the system capabilities ---------------------------


class PolicyProbeCore(EntityCore):
    """Answers "<principal-token> <action>" with the current decision."""

    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is not Kind.REQUEST:
            return None
        parts = message.payload.decode("utf-8", "replace").split()
        if len(parts) < 2:
            return b"DENY malformed"
        principal = PrincipalId.parse(parts[0])
        entry = ctx.nucleus.lookup(ctx.entity_id)
        cap = ctx.nucleus.capability_descriptor(entry.record.capability)
        decision = ctx.nucleus.security.check(principal, cap, parts[1])
        return (b"ALLOW" if decision.allowed else b"DENY ") + decision.reason.encode()


class NodeInfoCore(EntityCore):
    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is not Kind.REQUEST:
            return None
        if message.payload == b"id":
            return ctx.nucleus.id.hex().encode()
        if message.payload == b"time":
            return str(ctx.now_ms()).encode()
        return b"ok"


class QueryProbeCore(EntityCore):
    """REQUEST "<clauses>" runs a bounded overlay query, replies result lines."""

    def handle(self, message: Message, ctx: CoreContext):
        if message.kind is not Kind.REQUEST:
            return None
        found = ctx.nucleus.discovery.query(message.payload.decode("utf-8"), ttl=1)
        out = Future()

        def done(f: Future) -> None:
            if f.error is not None:
                out.fail(f.error)
            else:
                out.ok("\n".join(a.line() for a in f.result()).encode())

        found.on_done(done)
        return out


CORE_FACTORIES: dict[str, Callable[[], EntityCore]] = {
    "echo": EchoCore,
    "upper": UpperCore,
    "sort": SortCore,
    "count": CountCore,
    "counter": CounterCore,
    "recorder": RecorderCore,
    "fail": FailingCore,
    "system.security": PolicyProbeCore,
    "system.manager": NodeInfoCore,
    "system.discovery": QueryProbeCore,
}


def register_core(name: str, factory: Callable[[], EntityCore]) -> None:
    CORE_FACTORIES[name] = factory


def instantiate_core(name: str) -> EntityCore:
    factory = CORE_FACTORIES.get(name)
    if factory is None:
        raise UnknownCapability("no core registered for %r" % name)
    return factory()
