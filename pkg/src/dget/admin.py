"""Admin command plane shared by the CLI, the sim harness, and tests.

Commands are plain argv lists; every verb compiles to CONTROL messages on
the uniform entity interface (usually addressed to a node's manager
entity), so an operator session is just another client of the kernel.
"""

from __future__ import annotations

import argparse
from typing import Optional

from .errors import DgetError
from .ids import EntityId, LOCAL_MANAGER, NucleusId
from .security import PrincipalId, sign_principal
from .wire import (
    T_ATTR,
    T_CLAUSES,
    T_COMMUNITY,
    T_DEST,
    T_DOC,
    T_EVENT,
    T_ID,
    T_KIND,
    T_LINE,
    T_MAC,
    T_MODE,
    T_NAME,
    T_OP,
    T_PARAMS,
    T_PAYLOAD,
    T_PRINCIPAL,
    T_RIGHTS,
    T_RULE,
    T_SELECT,
    T_SUBSCRIBER,
    T_TTL,
    T_WHAT,
    TagReader,
    TagWriter,
)


class UsageError(DgetError):
    code = "usage"


def _writer(op: str, principal: Optional[str] = None, secret: str = "") -> TagWriter:
    w = TagWriter().add_str(T_OP, op)
    if principal is not None:
        token = PrincipalId.parse(principal).token()
        w.add_str(T_PRINCIPAL, token)
        if secret:
            w.add_str(T_MAC, sign_principal(secret, token))
    return w


# -- entity interface bodies -----------------------------------------------------


def op_create(principal: str, select: Optional[str] = None, params: bytes = b"", secret: str = "") -> bytes:
    w = _writer("create", principal, secret)
    if select:
        w.add_str(T_SELECT, select)
    if params:
        w.add(T_PARAMS, params)
    return w.bytes()


def op_grant(which: str, principal: str, community: str, rights: set[str] | frozenset[str] = frozenset(),
             secret: str = "") -> bytes:
    w = _writer("grant.%s" % which, principal, secret)
    w.add_str(T_COMMUNITY, community)
    if which != "remove":
        w.add_str(T_RIGHTS, ",".join(sorted(rights)))
    return w.bytes()


def op_delete(principal: str, secret: str = "") -> bytes:
    return _writer("delete", principal, secret).bytes()


def op_subscribe(event: str, subscriber: EntityId) -> bytes:
    return _writer("subscribe").add_str(T_EVENT, event).add_id(T_SUBSCRIBER, subscriber).bytes()


def op_unsubscribe(event: str, subscriber: EntityId) -> bytes:
    return _writer("unsubscribe").add_str(T_EVENT, event).add_id(T_SUBSCRIBER, subscriber).bytes()


def op_notify(event: str, payload: bytes = b"") -> bytes:
    return _writer("notify").add_str(T_EVENT, event).add(T_PAYLOAD, payload).bytes()


def op_export(principal: str, dest: NucleusId, copy: bool, secret: str = "") -> bytes:
    w = _writer("export", principal, secret)
    w.add(T_DEST, dest)
    w.add_str(T_MODE, "copy" if copy else "move")
    return w.bytes()


def op_describe() -> bytes:
    return _writer("describe").bytes()


# -- manager (node admin) bodies ----------------------------------------------------


def op_admin_deploy(principal: str, kind: str, names: list[str], attrs: dict, secret: str = "") -> bytes:
    w = _writer("admin.deploy", principal, secret)
    w.add_str(T_KIND, kind)
    w.add_str(T_NAME, ",".join(names))
    for key in sorted(attrs):
        w.add_str(T_ATTR, "%s=%s" % (key, attrs[key]))
    return w.bytes()


def op_admin_ls(what: str) -> bytes:
    return _writer("admin.ls").add_str(T_WHAT, what).bytes()


def op_admin_policy_add(principal: str, rule: str, secret: str = "") -> bytes:
    return _writer("admin.policy.add", principal, secret).add_str(T_RULE, rule).bytes()


def op_admin_policy_load(principal: str, doc: str, secret: str = "") -> bytes:
    return _writer("admin.policy.load", principal, secret).add_str(T_DOC, doc).bytes()


def op_admin_query(clauses: str, ttl: Optional[int] = None) -> bytes:
    w = _writer("admin.query").add_str(T_CLAUSES, clauses)
    if ttl is not None:
        w.add_int(T_TTL, ttl)
    return w.bytes()


def op_admin_import(principal: str, activity: EntityId, copy: bool, secret: str = "") -> bytes:
    w = _writer("admin.import", principal, secret)
    w.add_id(T_ID, activity)
    w.add_str(T_MODE, "copy" if copy else "move")
    return w.bytes()


def op_admin_send(target: EntityId, inner: bytes) -> bytes:
    return _writer("admin.send").add_id(T_ID, target).add(T_PAYLOAD, inner).bytes()


# -- command port -------------------------------------------------------------------


class CommandPort:
    """Where admin commands run; implementations route to sim or tcp nodes."""

    def resolve(self, node: str) -> NucleusId:
        raise NotImplementedError

    def control(self, node: str, target: EntityId, body: bytes,
                timeout_ms: Optional[int] = None) -> TagReader:
        raise NotImplementedError

    def request(self, node: str, target: EntityId, payload: bytes) -> bytes:
        raise NotImplementedError

    def manager(self, node: str) -> EntityId:
        return EntityId(self.resolve(node), LOCAL_MANAGER)

    secret: str = ""

    def entity_control(self, node: str, target: EntityId, body: bytes,
                       timeout_ms: Optional[int] = None) -> TagReader:
        """Control op on an arbitrary entity, relayed via the contact node
        when the target was born elsewhere."""
        contact = self.resolve(node)
        if target.nucleus == contact:
            return self.control(node, target, body, timeout_ms)
        return self.control(node, EntityId(contact, LOCAL_MANAGER),
                            op_admin_send(target, body), timeout_ms)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # keep library callers alive; exit code 2 at the edge
        raise UsageError(message)


def build_admin_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dget", add_help=False)
    sub = parser.add_subparsers(dest="verb", required=True)

    deploy = sub.add_parser("deploy", add_help=False)
    deploy.add_argument("--node", required=False)
    deploy.add_argument("--kind", required=True, choices=["atomic", "composite", "aggregate"])
    deploy.add_argument("--capability", required=True)
    deploy.add_argument("--attr", action="append", default=[])
    deploy.add_argument("--as", dest="principal", default="admin")

    create = sub.add_parser("create", add_help=False)
    create.add_argument("--node", required=False)
    create.add_argument("--capability", required=True)
    create.add_argument("--select", default=None)
    create.add_argument("--params", default="")
    create.add_argument("--as", dest="principal", default="admin")

    ls = sub.add_parser("ls", add_help=False)
    ls.add_argument("--node", required=False)
    group = ls.add_mutually_exclusive_group()
    group.add_argument("--activities", action="store_true")
    group.add_argument("--capabilities", action="store_true")
    group.add_argument("--neighbors", action="store_true")

    delete = sub.add_parser("delete", add_help=False)
    delete.add_argument("--node", required=False)
    delete.add_argument("--activity", required=True)
    delete.add_argument("--as", dest="principal", default="admin")

    migrate = sub.add_parser("migrate", add_help=False)
    migrate.add_argument("--node", required=False)
    migrate.add_argument("--activity", required=True)
    migrate.add_argument("--to", required=True)
    migrate.add_argument("--copy", action="store_true")
    migrate.add_argument("--pull", action="store_true")
    migrate.add_argument("--as", dest="principal", default="admin")

    query = sub.add_parser("query", add_help=False)
    query.add_argument("--node", required=False)
    query.add_argument("clauses")
    query.add_argument("--ttl", type=int, default=None)

    policy = sub.add_parser("policy", add_help=False)
    policy.add_argument("action", choices=["add", "load", "show"])
    policy.add_argument("--node", required=False)
    policy.add_argument("--rule", default=None)
    policy.add_argument("--file", default=None)
    policy.add_argument("--as", dest="principal", default="admin")

    return parser


def _attrs_from_flags(pairs: list[str]) -> dict:
    attrs: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError("--attr expects k=v, got %r" % pair)
        key, _, value = pair.partition("=")
        attrs[key] = value
    return attrs


def execute_admin_command(argv: list[str], port: CommandPort,
                          default_node: Optional[str] = None) -> list[str]:
    """Run one admin verb against a port; returns printable output lines."""
    args = build_admin_parser().parse_args(argv)
    node = getattr(args, "node", None) or default_node
    if not node:
        raise UsageError("--node is required (or set DGET_NODE)")
    secret = port.secret

    if args.verb == "deploy":
        names = [s for s in args.capability.split(",") if s]
        body = op_admin_deploy(args.principal, args.kind, names, _attrs_from_flags(args.attr), secret)
        reader = port.control(node, port.manager(node), body)
        return [reader.id(T_ID).hex()]

    if args.verb == "create":
        target = EntityId.from_hex(args.capability)
        body = op_create(args.principal, args.select, args.params.encode(), secret)
        reader = port.entity_control(node, target, body)
        return [reader.id(T_ID).hex()]

    if args.verb == "ls":
        what = "capabilities"
        if args.activities:
            what = "activities"
        elif args.neighbors:
            what = "neighbors"
        reader = port.control(node, port.manager(node), op_admin_ls(what))
        return [raw.decode("utf-8") for raw in reader.all(T_LINE)]

    if args.verb == "delete":
        target = EntityId.from_hex(args.activity)
        reader = port.entity_control(node, target, op_delete(args.principal, secret))
        return []

    if args.verb == "migrate":
        activity = EntityId.from_hex(args.activity)
        if args.pull:
            # receiver-initiated: ask the destination node to pull
            body = op_admin_import(args.principal, activity, args.copy, secret)
            reader = port.control(args.to, port.manager(args.to), body,
                                  timeout_ms=30_000)
        else:
            dest = port.resolve(args.to)
            body = op_export(args.principal, dest, args.copy, secret)
            reader = port.entity_control(node, activity, body, timeout_ms=30_000)
        return [reader.id(T_ID).hex()]

    if args.verb == "query":
        reader = port.control(node, port.manager(node), op_admin_query(args.clauses, args.ttl),
                              timeout_ms=30_000)
        return [raw.decode("utf-8") for raw in reader.all(T_LINE)]

    if args.verb == "policy":
        if args.action == "add":
            if not args.rule:
                raise UsageError("policy add needs --rule")
            port.control(node, port.manager(node), op_admin_policy_add(args.principal, args.rule, secret))
            return []
        if args.action == "load":
            if not args.file:
                raise UsageError("policy load needs --file")
            with open(args.file, "r", encoding="utf-8") as fh:
                doc = fh.read()
            port.control(node, port.manager(node), op_admin_policy_load(args.principal, doc, secret))
            return []
        from .ids import LOCAL_SECURITY

        reader = port.control(node, EntityId(port.resolve(node), LOCAL_SECURITY),
                              _writer("policy.dump").bytes())
        return [raw.decode("utf-8") for raw in reader.all(T_LINE)]

    raise UsageError("unknown verb %r" % args.verb)
