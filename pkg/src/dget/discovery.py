"""Decentralized resource discovery over a self-organizing overlay.

Each node stores resource adverts (its own plus whatever neighbors gossip
or query results teach it), keeps an interest profile of the attribute
clauses it queries, and periodically re-picks its neighbors: the top K
candidates by profile overlap plus E random picks that keep the overlay
connected.  Queries flood neighbor-first in score order with a hop TTL
and a duplicate-id cache, and results stream straight back to the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .errors import DgetError
from .ids import EntityId, LOCAL_DISCOVERY, NucleusId
from .runtime import Future, Timer
from .security import Clause, parse_clause
from .wire import (
    T_ADVERT,
    T_CAPABILITY,
    T_CLAUSES,
    T_ENDPOINT,
    T_HOME,
    T_HOPS,
    T_NEIGHBOR,
    T_NUCLEUS,
    T_ORIGIN,
    T_QUERY_ID,
    T_TTL,
    T_VERSION,
    T_ATTR,
    TagReader,
    TagWriter,
)

if TYPE_CHECKING:  # pragma: no cover
    from .nucleus import Nucleus

SEEN_CACHE_CAPACITY = 4096


@dataclass(slots=True)
class ResourceAdvert:
    capability: EntityId
    home: NucleusId
    home_endpoint: str
    attributes: dict[str, object]
    version: int = 1

    def line(self) -> str:
        attrs = " ".join("%s=%s" % (k, self.attributes[k]) for k in sorted(self.attributes))
        return "%s\t%s\t%s" % (self.capability.hex(), self.home.hex(), attrs)

    def encode(self) -> bytes:
        w = TagWriter()
        w.add(T_CAPABILITY, self.capability.to_bytes())
        w.add(T_HOME, self.home)
        w.add_str(T_ENDPOINT, self.home_endpoint)
        w.add_int(T_VERSION, self.version)
        for key in sorted(self.attributes):
            value = self.attributes[key]
            if isinstance(value, bool):
                kind, text = "s", str(value)
            elif isinstance(value, int):
                kind, text = "i", str(value)
            elif isinstance(value, float):
                kind, text = "f", repr(value)
            else:
                kind, text = "s", str(value)
            w.add_str(T_ATTR, "%s\t%s\t%s" % (key, kind, text))
        return w.bytes()

    @classmethod
    def decode(cls, data: bytes) -> "ResourceAdvert":
        r = TagReader(data)
        attrs: dict[str, object] = {}
        for raw in r.all(T_ATTR):
            key, kind, text = raw.decode("utf-8").split("\t", 2)
            if kind == "i":
                attrs[key] = int(text)
            elif kind == "f":
                attrs[key] = float(text)
            else:
                attrs[key] = text
        return cls(
            capability=EntityId.from_bytes(r.first(T_CAPABILITY)),
            home=bytes(r.first(T_HOME)),
            home_endpoint=r.str(T_ENDPOINT, ""),
            attributes=attrs,
            version=r.int(T_VERSION, 1),
        )


@dataclass(slots=True)
class NeighborEntry:
    nucleus: NucleusId
    score: float = 0.0
    last_interaction: int = 0


def parse_query(text: str) -> list[Clause]:
    """Space-separated clauses; ``attr in lo..hi`` spans three tokens."""
    tokens = text.split()
    clauses: list[Clause] = []
    i = 0
    while i < len(tokens):
        if i + 2 < len(tokens) + 1 and i + 1 < len(tokens) and tokens[i + 1] == "in":
            clauses.append(parse_clause(" ".join(tokens[i : i + 3])))
            i += 3
        else:
            clauses.append(parse_clause(tokens[i]))
            i += 1
    return clauses


def match_summary(clause: Clause, summary: dict[str, list[object]]) -> bool:
    values = summary.get(clause.attr)
    if not values:
        return False
    return any(clause.matches({clause.attr: v}) for v in values)


def score_neighbor(
    weights: dict[str, float], clauses: dict[str, Clause], summary: dict[str, list[object]]
) -> float:
    """Weighted clause overlap between an interest profile and an advert summary."""
    total = 0.0
    for key, weight in weights.items():
        clause = clauses.get(key)
        if clause is not None and match_summary(clause, summary):
            total += weight
    return total


@dataclass(slots=True)
class _PendingQuery:
    future: Future
    results: dict[EntityId, ResourceAdvert] = field(default_factory=dict)
    first_hit_hops: int = -1
    timer: Optional[Timer] = None
    forwards: int = 0


class DiscoveryService:
    def __init__(self, nucleus: "Nucleus"):
        self.nucleus = nucleus
        cfg = nucleus.config
        self.k = cfg.discovery_k
        self.e = cfg.discovery_e
        self.decay = cfg.discovery_decay
        self.epoch = cfg.discovery_epoch
        self.strategy = cfg.discovery_strategy
        self.adverts: dict[EntityId, ResourceAdvert] = {}
        self._by_home: dict[NucleusId, dict[EntityId, None]] = {}
        self.neighbors: dict[NucleusId, NeighborEntry] = {}
        self.profile_weights: dict[str, float] = {}
        self.profile_clauses: dict[str, Clause] = {}
        self._seen: dict[bytes, None] = {}
        self._pending: dict[bytes, _PendingQuery] = {}
        self._query_count = 0
        self._joined = False
        self._round_timer: Optional[Timer] = None

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> None:
        self._round_timer = self.nucleus.executor.call_later(
            self.nucleus.config.discovery_round_ms, self._round_tick
        )

    def stop(self) -> None:
        if self._round_timer is not None:
            self._round_timer.cancel()

    def _round_tick(self) -> None:
        if self.nucleus.dead:
            return
        if not self._joined and self.nucleus.config.bootstrap:
            self.join(self.nucleus.config.bootstrap)
        self.reorganize()
        self._gossip_local()
        self._round_timer = self.nucleus.executor.call_later(
            self.nucleus.config.discovery_round_ms, self._round_tick
        )

    # -- adverts ---------------------------------------------------------------

    def advertise(self, advert: ResourceAdvert, gossip: bool = True) -> None:
        self.store_advert(advert)
        if gossip:
            self._push_adverts(sorted(self.neighbors), [advert])

    def store_advert(self, advert: ResourceAdvert) -> bool:
        existing = self.adverts.get(advert.capability)
        if existing is not None and existing.version >= advert.version:
            return False
        if existing is not None and existing.home != advert.home:
            self._by_home.get(existing.home, {}).pop(advert.capability, None)
        self.adverts[advert.capability] = advert
        self._by_home.setdefault(advert.home, {})[advert.capability] = None
        if advert.home != self.nucleus.id and advert.home_endpoint:
            self.nucleus.pipes.routing.upsert(
                advert.home, self.nucleus.executor.now_ms(), endpoints=[advert.home_endpoint]
            )
        return True

    def withdraw(self, capability: EntityId) -> None:
        advert = self.adverts.pop(capability, None)
        if advert is not None:
            self._by_home.get(advert.home, {}).pop(capability, None)

    def purge_home(self, home: NucleusId) -> None:
        for cap in list(self._by_home.get(home, {})):
            self.adverts.pop(cap, None)
        self._by_home.pop(home, None)

    def local_adverts(self) -> list[ResourceAdvert]:
        return [self.adverts[cap] for cap in sorted(self._by_home.get(self.nucleus.id, {}), key=lambda c: c.to_bytes())]

    def summary_for(self, home: NucleusId) -> dict[str, list[object]]:
        summary: dict[str, list[object]] = {}
        for cap in self._by_home.get(home, {}):
            advert = self.adverts.get(cap)
            if advert is None:
                continue
            for key in sorted(advert.attributes):
                bucket = summary.setdefault(key, [])
                value = advert.attributes[key]
                if value not in bucket and len(bucket) < 8:
                    bucket.append(value)
        return summary

    def _push_adverts(self, targets: list[NucleusId], adverts: list[ResourceAdvert]) -> None:
        if not adverts:
            return
        w = TagWriter().add_str(1, "advert.push")
        for advert in adverts:
            w.add(T_ADVERT, advert.encode())
        body = w.bytes()
        for nid in targets:
            if nid == self.nucleus.id:
                continue
            self.nucleus.control_to(EntityId(nid, LOCAL_DISCOVERY), body)

    def _gossip_local(self) -> None:
        self._push_adverts(sorted(self.neighbors), self.local_adverts())

    # -- queries -----------------------------------------------------------------

    def query(self, clauses_text: str, ttl: Optional[int] = None) -> Future:
        """Run a query from this node; resolves with the advert list."""
        future = Future()
        try:
            clauses = parse_query(clauses_text)
        except DgetError as exc:
            future.fail(exc)
            return future
        if ttl is None:
            ttl = self.nucleus.config.query_ttl
        for clause in clauses:
            key = clause.key()
            self.profile_clauses[key] = clause
            self.profile_weights[key] = self.profile_weights.get(key, 0.0) + 1.0
        self._query_count += 1
        if self.epoch > 0 and self._query_count % self.epoch == 0:
            self._decay_profile()
            self.reorganize()

        qid = self.nucleus.ids.fresh()
        self._remember(qid)
        state = _PendingQuery(future=future)
        self._pending[qid] = state
        for advert in self._match_local(clauses):
            state.results[advert.capability] = advert
            state.first_hit_hops = 0 if state.first_hit_hops < 0 else state.first_hit_hops
        if ttl > 0:
            state.forwards = self._forward_query(qid, clauses_text, ttl - 1, self.nucleus.id,
                                                 self.nucleus.listen_address(), hops=1)
        if state.forwards == 0:
            self._finish_query(qid)
        else:
            state.timer = self.nucleus.executor.call_later(
                self.nucleus.config.query_window_ms, self._finish_query, qid
            )
        return future

    def _finish_query(self, qid: bytes) -> None:
        state = self._pending.pop(qid, None)
        if state is None:
            return
        if state.timer is not None:
            state.timer.cancel()
        results = [state.results[cap] for cap in sorted(state.results, key=lambda c: c.to_bytes())]
        self.nucleus.trace(
            "query.end",
            "qid=%s first=%d results=%d" % (qid.hex()[:8], state.first_hit_hops, len(results)),
        )
        state.future.ok(results)

    def _match_local(self, clauses: list[Clause]) -> list[ResourceAdvert]:
        out = []
        for cap in sorted(self.adverts, key=lambda c: c.to_bytes()):
            advert = self.adverts[cap]
            if all(c.matches(advert.attributes) for c in clauses):
                out.append(advert)
        return out

    def _forward_query(self, qid: bytes, clauses_text: str, ttl: int, origin: NucleusId,
                       origin_endpoint: str, hops: int) -> int:
        ranked = sorted(
            self.neighbors.values(), key=lambda n: (-n.score, n.nucleus)
        )
        count = 0
        for entry in ranked:
            if entry.nucleus == origin:
                continue
            body = (
                TagWriter()
                .add_str(1, "query.exec")
                .add(T_QUERY_ID, qid)
                .add_str(T_CLAUSES, clauses_text)
                .add_int(T_TTL, ttl)
                .add(T_ORIGIN, origin)
                .add_str(T_ENDPOINT, origin_endpoint)
                .add_int(T_HOPS, hops)
                .bytes()
            )
            self.nucleus.control_to(EntityId(entry.nucleus, LOCAL_DISCOVERY), body)
            count += 1
        return count

    def _remember(self, qid: bytes) -> bool:
        """Returns False when qid was already seen; FIFO-bounded cache."""
        if qid in self._seen:
            return False
        if len(self._seen) >= SEEN_CACHE_CAPACITY:
            oldest = next(iter(self._seen))
            del self._seen[oldest]
        self._seen[qid] = None
        return True

    # -- protocol handlers ---------------------------------------------------------

    def handle_control(self, op: str, reader: TagReader):
        if op == "advert.push":
            changed = False
            for raw in reader.all(T_ADVERT):
                changed = self.store_advert(ResourceAdvert.decode(raw)) or changed
            return b""
        if op == "query.exec":
            self._handle_exec(reader)
            return b""
        if op == "query.result":
            self._handle_result(reader)
            return b""
        if op == "sample":
            return self._handle_sample()
        return None

    def _handle_exec(self, reader: TagReader) -> None:
        qid = bytes(reader.first(T_QUERY_ID))
        if not self._remember(qid):
            return
        clauses_text = reader.str(T_CLAUSES)
        ttl = reader.int(T_TTL)
        origin = bytes(reader.first(T_ORIGIN))
        origin_endpoint = reader.str(T_ENDPOINT, "")
        hops = reader.int(T_HOPS)
        if origin_endpoint:
            self.nucleus.pipes.routing.upsert(
                origin, self.nucleus.executor.now_ms(), endpoints=[origin_endpoint]
            )
        try:
            clauses = parse_query(clauses_text)
        except DgetError:
            return
        matches = self._match_local(clauses)
        if matches:
            w = TagWriter().add_str(1, "query.result").add(T_QUERY_ID, qid).add_int(T_HOPS, hops)
            for advert in matches:
                w.add(T_ADVERT, advert.encode())
            self.nucleus.control_to(EntityId(origin, LOCAL_DISCOVERY), w.bytes())
        if ttl > 0:
            self._forward_query(qid, clauses_text, ttl - 1, origin, origin_endpoint, hops + 1)

    def _handle_result(self, reader: TagReader) -> None:
        qid = bytes(reader.first(T_QUERY_ID))
        state = self._pending.get(qid)
        hops = reader.int(T_HOPS, 0)
        for raw in reader.all(T_ADVERT):
            advert = ResourceAdvert.decode(raw)
            self.store_advert(advert)
            if state is not None:
                known = state.results.get(advert.capability)
                if known is None or known.version < advert.version:
                    state.results[advert.capability] = advert
        if state is not None:
            if state.first_hit_hops < 0 or hops < state.first_hit_hops:
                state.first_hit_hops = hops

    def _handle_sample(self) -> TagWriter:
        w = TagWriter()
        routing = self.nucleus.pipes.routing
        count = 0
        for nid in sorted(self.neighbors):
            if count >= self.k:
                break
            entry = routing.get(nid)
            if entry is None or not entry.endpoints:
                continue
            item = TagWriter().add(T_NUCLEUS, nid).add_str(T_ENDPOINT, entry.endpoints[0])
            w.add(T_NEIGHBOR, item.bytes())
            count += 1
        return w

    # -- neighborhood management ------------------------------------------------------

    def _decay_profile(self) -> None:
        dead = []
        for key in self.profile_weights:
            self.profile_weights[key] *= self.decay
            if self.profile_weights[key] < 1e-3:
                dead.append(key)
        for key in dead:
            del self.profile_weights[key]
            self.profile_clauses.pop(key, None)

    def candidate_nuclei(self) -> list[NucleusId]:
        now = self.nucleus.executor.now_ms()
        out = []
        for entry in self.nucleus.pipes.routing.known():
            if entry.nucleus == self.nucleus.id:
                continue
            if entry.dead and now < entry.retry_at:
                continue
            out.append(entry.nucleus)
        return out

    def reorganize(self) -> tuple[list[NucleusId], list[NucleusId]]:
        """Re-pick the neighbor set; returns (added, removed)."""
        candidates = self.candidate_nuclei()
        if self.strategy == "random":
            pool = list(candidates)
            self.nucleus.rng.shuffle(pool)
            chosen = pool[: self.k + self.e]
        else:
            scored = sorted(
                candidates,
                key=lambda nid: (-score_neighbor(self.profile_weights, self.profile_clauses,
                                                 self.summary_for(nid)), nid),
            )
            chosen = scored[: self.k]
            rest = [nid for nid in candidates if nid not in set(chosen)]
            self.nucleus.rng.shuffle(rest)
            chosen = chosen + rest[: self.e]
        new_set = dict.fromkeys(chosen)
        added = [nid for nid in new_set if nid not in self.neighbors]
        removed = [nid for nid in self.neighbors if nid not in new_set]
        now = self.nucleus.executor.now_ms()
        for nid in removed:
            del self.neighbors[nid]
            self.nucleus.maybe_close_pipe(nid)
        for nid in added:
            entry = NeighborEntry(nucleus=nid, last_interaction=now)
            entry.score = score_neighbor(self.profile_weights, self.profile_clauses, self.summary_for(nid))
            self.neighbors[nid] = entry
            self._connect_neighbor(nid)
        for nid, entry in self.neighbors.items():
            entry.score = score_neighbor(self.profile_weights, self.profile_clauses, self.summary_for(nid))
        if added or removed:
            self.nucleus.trace(
                "neighbor.change",
                "add=%s remove=%s"
                % (",".join(n.hex()[:8] for n in added), ",".join(n.hex()[:8] for n in removed)),
            )
        return added, removed

    def _connect_neighbor(self, nid: NucleusId) -> None:
        f = self.nucleus.pipes.open_pipe(nid)

        def done(pf: Future) -> None:
            if pf.error is not None:
                return
            self._push_adverts([nid], self.local_adverts())

        f.on_done(done)

    # -- membership events ---------------------------------------------------------

    def join(self, bootstrap: list[str]) -> None:
        """Seed the overlay from a bootstrap node; retries ride the round timer."""
        self._join_attempt(list(bootstrap), 0, self.nucleus.config.retry_base_ms)

    def _join_attempt(self, addresses: list[str], index: int, backoff_ms: int) -> None:
        if self.nucleus.dead:
            return
        if index >= len(addresses) * self.nucleus.config.retry_max_tries:
            self.nucleus.trace("join.failed", "bootstrap unreachable")
            return
        address = addresses[index % len(addresses)]
        f = self.nucleus.pipes.dial_address(address)

        def done(pf: Future) -> None:
            if self.nucleus.dead:
                return
            if pf.error is not None:
                self.nucleus.executor.call_later(
                    backoff_ms, self._join_attempt, addresses, index + 1, backoff_ms * 2
                )
                return
            pipe = pf.result()
            self._joined = True
            self._request_sample(pipe.remote)

        f.on_done(done)

    def _request_sample(self, nid: NucleusId) -> None:
        body = TagWriter().add_str(1, "sample").bytes()
        f = self.nucleus.request_control(EntityId(nid, LOCAL_DISCOVERY), body)

        def done(rf: Future) -> None:
            if rf.error is not None:
                self.reorganize()
                return
            reader = rf.result()
            now = self.nucleus.executor.now_ms()
            for raw in reader.all(T_NEIGHBOR):
                item = TagReader(raw)
                peer = bytes(item.first(T_NUCLEUS))
                endpoint = item.str(T_ENDPOINT, "")
                if peer != self.nucleus.id and endpoint:
                    self.nucleus.pipes.routing.upsert(peer, now, endpoints=[endpoint])
            self.reorganize()

        f.on_done(done)

    def on_pipe_open(self, nid: NucleusId) -> None:
        if not self.neighbors:
            # first contact seeds the neighbor set immediately
            self.neighbors[nid] = NeighborEntry(nucleus=nid, last_interaction=self.nucleus.executor.now_ms())
            self._joined = True
            self._push_adverts([nid], self.local_adverts())
            self.nucleus.trace("neighbor.change", "add=%s remove=" % nid.hex()[:8])

    def on_peer_leave(self, nid: NucleusId) -> None:
        self.nucleus.pipes.routing.remove(nid)
        self.purge_home(nid)
        if nid in self.neighbors:
            del self.neighbors[nid]
        self.reorganize()

    def on_peer_dead(self, nid: NucleusId) -> None:
        self.purge_home(nid)
        if nid in self.neighbors:
            del self.neighbors[nid]
            self.reorganize()

    def neighbor_lines(self) -> list[str]:
        out = []
        routing = self.nucleus.pipes.routing
        for nid in sorted(self.neighbors):
            entry = self.neighbors[nid]
            route = routing.get(nid)
            endpoint = route.endpoints[0] if route and route.endpoints else "?"
            out.append("%s\t%.3f\t%s" % (nid.hex(), entry.score, endpoint))
        return out
