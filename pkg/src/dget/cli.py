"""Operator command line.

``dget start`` runs a live node; the admin verbs (deploy, create, ls,
delete, migrate, query, policy) attach to a running node over TCP as an
ordinary client of the entity interface; ``dget sim run`` executes a
scenario file deterministically and reports the trace hash.

Exit codes: 0 success, 1 operation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import signal
import sys
import threading
from typing import Optional

from .admin import CommandPort, UsageError, execute_admin_command
from .config import NucleusConfig, load_config
from .errors import ConnectTimeout, DgetError
from .ids import EntityId, NucleusId
from .nucleus import Nucleus
from .runtime import Future, ThreadExecutor
from .simharness import run_file
from .tcpnet import TcpTransport
from .wire import TagReader

ADMIN_VERBS = ("deploy", "create", "ls", "delete", "migrate", "query", "policy")


class TcpCommandPort(CommandPort):
    """A transient client nucleus speaking the entity interface over TCP."""

    def __init__(self, secret: str = "", timeout_ms: int = 10_000):
        self.secret = secret
        self.timeout_ms = timeout_ms
        self.executor = ThreadExecutor(name="dget-cli")
        cfg = NucleusConfig(listen="", protocols=["tcp"], secret=secret)
        self.nucleus = Nucleus(cfg, self.executor, name="cli")
        self.nucleus.install_transport(TcpTransport(self.executor))
        self.nucleus.boot()
        self._resolved: dict[str, NucleusId] = {}

    def _await(self, f: Future, timeout_ms: Optional[int] = None):
        if not f.wait((timeout_ms or self.timeout_ms) / 1000.0 + 2.0):
            raise ConnectTimeout("no response")
        return f.result()

    def resolve(self, node: str) -> NucleusId:
        nid = self._resolved.get(node)
        if nid is None:
            done = Future()
            self.executor.post(lambda: self.nucleus.pipes.dial_address(node).on_done(
                lambda f: done.fail(f.error) if f.error else done.ok(f.result().remote)))
            nid = self._await(done)
            self._resolved[node] = nid
        return nid

    def control(self, node: str, target: EntityId, body: bytes,
                timeout_ms: Optional[int] = None) -> TagReader:
        self.resolve(node)
        done = Future()
        self.executor.post(lambda: self.nucleus.request_control(
            target, body, timeout_ms=timeout_ms or self.timeout_ms).on_done(
            lambda f: done.fail(f.error) if f.error else done.ok(f.result())))
        return self._await(done, timeout_ms)

    def request(self, node: str, target: EntityId, payload: bytes) -> bytes:
        self.resolve(node)
        done = Future()
        manager = EntityId(self.nucleus.id, b"\x00" * 15 + b"\x02")
        self.executor.post(lambda: self.nucleus.request(manager, target, payload).on_done(
            lambda f: done.fail(f.error) if f.error else done.ok(f.result())))
        return self._await(done)

    def close(self) -> None:
        self.executor.post(self.nucleus.shutdown, False)
        self.executor.stop()


def _cmd_start(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="dget start", add_help=True)
    parser.add_argument("--config", required=True)
    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    executor = ThreadExecutor(name="dget-node")
    nucleus = Nucleus(cfg, executor)
    nucleus.install_transport(TcpTransport(executor))
    try:
        done = Future()

        def boot() -> None:
            try:
                nucleus.boot()
                done.ok(None)
            except BaseException as exc:  # surfaced below with exit 1
                done.fail(exc)

        executor.post(boot)
        done.wait(10.0)
        done.result()
    except DgetError as exc:
        print("error\t%s\t%s" % (exc.code, exc.message), file=sys.stderr)
        return 1
    print("started\t%s\t%s" % (nucleus.id.hex(), cfg.listen), flush=True)

    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    stop.wait()
    executor.post(nucleus.shutdown, True)
    executor.stop()
    return 0


def _cmd_sim(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="dget sim", add_help=True)
    sub = parser.add_subparsers(dest="action", required=True)
    runp = sub.add_parser("run")
    runp.add_argument("--scenario", required=True)
    runp.add_argument("--expect-hash", default=None)
    runp.add_argument("--dump", default=None)
    args = parser.parse_args(argv)
    trace = run_file(args.scenario)
    digest = trace.digest()
    if args.dump:
        trace.dump(args.dump)
    print("trace-hash\t%s" % digest)
    print("trace-events\t%d" % len(trace.events))
    if args.expect_hash and args.expect_hash.lower() != digest:
        print("error\thash-mismatch\texpected %s" % args.expect_hash, file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        print("usage: dget {start|sim|%s} ..." % "|".join(ADMIN_VERBS), file=sys.stderr)
        return 2
    verb = argv[0]
    try:
        if verb == "start":
            return _cmd_start(argv[1:])
        if verb == "sim":
            return _cmd_sim(argv[1:])
        if verb in ADMIN_VERBS:
            port = TcpCommandPort(secret=os.environ.get("DGET_SECRET", ""))
            try:
                lines = execute_admin_command(argv, port, default_node=os.environ.get("DGET_NODE"))
                for line in lines:
                    print(line)
                return 0
            finally:
                port.close()
        print("usage: dget {start|sim|%s} ..." % "|".join(ADMIN_VERBS), file=sys.stderr)
        return 2
    except UsageError as exc:
        print("usage-error\t%s" % exc.message, file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except DgetError as exc:
        print("error\t%s\t%s" % (exc.code, exc.message), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
