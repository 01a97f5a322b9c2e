"""Deterministic multi-node scenario execution.

A Scenario names nodes, a link model, and a timeline of fault and command
events.  run() boots every node on one virtual-time executor, applies the
events, and returns the Trace: the ordered list of everything that
happened, whose canonical serialization is hashed so two runs of the same
(scenario, seed) can be compared bit for bit.

Scenario file format (line oriented, ``#`` comments)::

    seed = 42
    until = 20000                 # ms of virtual time; default last event + 5000
    nodes = a, b, c
    link.default.latency = 5      # ms
    link.default.drop = 0.0
    link.a.b.latency = 20         # symmetric unless both directions given
    node.a.discovery.k = 4        # per-node config override ("*" = all nodes)
    event: t=1000 crash b
    event: t=2000 leave c
    event: t=3000 partition a,b|c until=6000
    event: t=4000 deliver deploy --node a --kind atomic --capability echo
"""

from __future__ import annotations

import hashlib
import shlex
from dataclasses import dataclass, field
from typing import Callable, Optional

from .admin import CommandPort, execute_admin_command
from .config import NucleusConfig, config_overrides
from .errors import DgetError, InvalidScenario, RequestTimeout
from .ids import EntityId, NucleusId, SeededIdSource, derive_rng
from .nucleus import Nucleus
from .runtime import Future, SimExecutor
from .simnet import SimNetwork, SimTransport
from .wire import TagReader


@dataclass(slots=True)
class TraceEvent:
    t: int
    node: str
    kind: str
    detail: str

    def line(self) -> str:
        return "%d\t%s\t%s\t%s" % (self.t, self.node, self.kind, self.detail)


class Trace:
    def __init__(self) -> None:
        self.events: list[TraceEvent] = []

    def lines(self) -> list[str]:
        return [e.line() for e in self.events]

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def dump(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def filter(self, kind: Optional[str] = None, node: Optional[str] = None,
               contains: Optional[str] = None) -> list[TraceEvent]:
        out = []
        for e in self.events:
            if kind is not None and e.kind != kind:
                continue
            if node is not None and e.node != node:
                continue
            if contains is not None and contains not in e.detail:
                continue
            out.append(e)
        return out


def assert_in_trace(trace: Trace, predicate: Callable[[TraceEvent], bool]) -> bool:
    """Pure scan: does any event satisfy the predicate."""
    return any(predicate(e) for e in trace.events)


@dataclass(slots=True)
class ScenarioEvent:
    t: int
    action: str
    args: list[str] = field(default_factory=list)
    until: int = 0


@dataclass
class Scenario:
    seed: int = 0
    until: Optional[int] = None
    node_names: list[str] = field(default_factory=list)
    node_overrides: dict[str, dict[str, str]] = field(default_factory=dict)
    default_latency: int = 5
    default_drop: float = 0.0
    links: list[tuple[str, str, str, str]] = field(default_factory=list)  # a, b, key, value
    events: list[ScenarioEvent] = field(default_factory=list)
    # programmatic hooks: (t, fn(cluster)); not expressible in files
    hooks: list[tuple[int, Callable]] = field(default_factory=list)

    def end_time(self) -> int:
        if self.until is not None:
            return self.until
        last = 0
        for e in self.events:
            last = max(last, e.t, e.until)
        for t, _ in self.hooks:
            last = max(last, t)
        return last + 5_000


_NODE_KEY_SHORTHAND = {"bootstrap", "listen", "protocols", "admin", "secret", "id"}


def parse_scenario(text: str) -> Scenario:
    s = Scenario()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = "line %d: " % lineno
        if line.startswith("event:"):
            s.events.append(_parse_event(line[len("event:"):].strip(), where))
            continue
        if "=" not in line:
            raise InvalidScenario(where + "expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            if key == "seed":
                s.seed = int(value)
            elif key == "until":
                s.until = int(value)
            elif key == "nodes":
                s.node_names = [n.strip() for n in value.split(",") if n.strip()]
            elif key == "link.default.latency":
                s.default_latency = int(value)
            elif key == "link.default.drop":
                s.default_drop = float(value)
            elif key.startswith("link."):
                _, a, b, prop = key.split(".", 3)
                s.links.append((a, b, prop, value))
            elif key.startswith("node."):
                _, name, sub = key.split(".", 2)
                if sub in _NODE_KEY_SHORTHAND:
                    sub = "node." + sub
                s.node_overrides.setdefault(name, {})[sub] = value
            else:
                raise InvalidScenario(where + "unknown key %r" % key)
        except (ValueError, IndexError) as exc:
            raise InvalidScenario(where + str(exc)) from exc
    if not s.node_names:
        raise InvalidScenario("scenario names no nodes")
    return s


def _parse_event(text: str, where: str) -> ScenarioEvent:
    tokens = shlex.split(text)
    if len(tokens) < 2 or not tokens[0].startswith("t="):
        raise InvalidScenario(where + "event needs: t=<ms> <action> ...")
    t = int(tokens[0][2:])
    action = tokens[1]
    args = tokens[2:]
    if action in ("crash", "leave"):
        if len(args) != 1:
            raise InvalidScenario(where + "%s takes one node name" % action)
        return ScenarioEvent(t=t, action=action, args=args)
    if action == "partition":
        until = 0
        groups = []
        for token in args:
            if token.startswith("until="):
                until = int(token[len("until="):])
            else:
                groups.append(token)
        if not groups or until <= t:
            raise InvalidScenario(where + "partition needs groups and until=<ms> after t")
        return ScenarioEvent(t=t, action="partition", args=groups, until=until)
    if action == "deliver":
        if not args:
            raise InvalidScenario(where + "deliver needs a command")
        return ScenarioEvent(t=t, action="deliver", args=args)
    raise InvalidScenario(where + "unknown action %r" % action)


class SimCluster(CommandPort):
    """A booted scenario: the executor, network, nodes, and trace recorder."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.executor = SimExecutor()
        self.trace_obj = Trace()
        self.network = SimNetwork(self.executor, scenario.seed, trace=self._net_trace)
        self.network.default_latency_ms = scenario.default_latency
        self.network.default_drop = scenario.default_drop
        for a, b, prop, value in scenario.links:
            if prop == "latency":
                self.network.set_latency(a, b, int(value))
            elif prop == "drop":
                self.network.set_drop(a, b, float(value))
            else:
                raise InvalidScenario("unknown link property %r" % prop)
        self.nodes: dict[str, Nucleus] = {}
        self.secret = ""
        for index, name in enumerate(scenario.node_names):
            self._boot_node(index, name)

    def _record(self, node: str, kind: str, detail: str) -> None:
        self.trace_obj.events.append(TraceEvent(self.executor.now_ms(), node, kind, detail))

    def _net_trace(self, node: str, kind: str, detail: str) -> None:
        self._record(node, kind, detail)

    def _boot_node(self, index: int, name: str) -> None:
        scenario = self.scenario
        cfg = NucleusConfig(
            listen="sim:%s" % name,
            protocols=["sim"],
            bootstrap=["sim:%s" % scenario.node_names[0]] if index > 0 else [],
        )
        overrides: dict[str, str] = {}
        overrides.update(scenario.node_overrides.get("*", {}))
        overrides.update(scenario.node_overrides.get(name, {}))
        if overrides:
            config_overrides(cfg, overrides)
        nucleus = Nucleus(
            cfg,
            self.executor,
            name=name,
            trace_sink=self._record,
            ids=SeededIdSource(derive_rng(scenario.seed, "ids", name)),
            rng=derive_rng(scenario.seed, "rng", name),
        )
        nucleus.install_transport(SimTransport(self.network, name))
        nucleus.boot()
        self.nodes[name] = nucleus

    # -- time control ---------------------------------------------------------

    def run_until_time(self, t_ms: int) -> None:
        self.executor.run_until(t_ms)

    def run_for(self, ms: int) -> None:
        self.executor.run_until(self.executor.now_ms() + ms)

    def await_future(self, f: Future, limit_ms: int = 60_000):
        self.executor.run_while(lambda: not f.done, limit_ms)
        if not f.done:
            raise RequestTimeout("future unresolved after %d ms of virtual time" % limit_ms)
        return f.result()

    # -- CommandPort over the sim ------------------------------------------------

    def _node(self, node: str) -> Nucleus:
        name = node.split(":", 1)[1] if node.startswith("sim:") else node
        try:
            return self.nodes[name]
        except KeyError:
            raise InvalidScenario("unknown node %r" % node) from None

    def resolve(self, node: str) -> NucleusId:
        return self._node(node).id

    def node_name(self, nid: NucleusId) -> str:
        for name in self.scenario.node_names:
            if self.nodes[name].id == nid:
                return name
        return nid.hex()[:8]

    def control(self, node: str, target: EntityId, body: bytes,
                timeout_ms: Optional[int] = None) -> TagReader:
        nucleus = self._node(node)
        f = nucleus.request_control(target, body, timeout_ms=timeout_ms)
        return self.await_future(f, limit_ms=(timeout_ms or 10_000) + 5_000)

    def request(self, node: str, target: EntityId, payload: bytes) -> bytes:
        nucleus = self._node(node)
        f = nucleus.request(EntityId(nucleus.id, b"\x00" * 15 + b"\x02"), target, payload)
        return self.await_future(f)

    # -- scenario events -----------------------------------------------------------

    def apply_event(self, event: ScenarioEvent) -> None:
        if event.action == "crash":
            name = event.args[0]
            self._record(name, "node.crash", "")
            self.nodes[name].kill()
            self.network.crash(name)
        elif event.action == "leave":
            name = event.args[0]
            self.nodes[name].shutdown(graceful=True)
            self.network.crash(name)
            self._record(name, "node.left", "")
        elif event.action == "partition":
            groups = [set(g.split(",")) for g in event.args]
            self.network.partition(groups, event.until)
            label = "|".join(",".join(sorted(g)) for g in groups)
            self._record("-", "partition.on", label)
            self.executor.call_at(event.until, self._record, "-", "partition.off", label)
        elif event.action == "deliver":
            self._deliver_command(event.args)
        else:
            raise InvalidScenario("unknown action %r" % event.action)

    def _deliver_command(self, argv: list[str]) -> None:
        label = " ".join(argv)

        def run() -> None:
            try:
                lines = execute_admin_command(argv, self)
                self._record("-", "admin.ok", "%s -> %d lines" % (label, len(lines)))
            except DgetError as exc:
                self._record("-", "admin.err", "%s -> %s" % (label, exc.code))

        run()

    def shutdown(self) -> None:
        for name in self.scenario.node_names:
            node = self.nodes.get(name)
            if node is not None and not node.dead:
                node.dead = True


def run(scenario: Scenario) -> Trace:
    """Execute a scenario to its end time; returns the full trace."""
    cluster = SimCluster(scenario)
    for event in scenario.events:
        cluster.executor.call_at(event.t, cluster.apply_event, event)
    for t, hook in scenario.hooks:
        cluster.executor.call_at(t, hook, cluster)
    cluster.executor.run_until(scenario.end_time())
    cluster.shutdown()
    return cluster.trace_obj


def run_file(path: str) -> Trace:
    with open(path, "r", encoding="utf-8") as fh:
        scenario = parse_scenario(fh.read())
    return run(scenario)
