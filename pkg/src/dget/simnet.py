"""Deterministic in-memory network for the simulation harness.

Frames travel between registered nodes with per-link latency, seeded drop
probability, partition windows, and node crashes.  Delivery order is a
pure function of (seed, schedule): latencies are integer milliseconds and
the executor breaks timestamp ties by insertion order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .errors import InvalidScenario
from .ids import derive_rng
from .runtime import Future, SimExecutor
from .transport import Link, ProtocolId, Transport


@dataclass(slots=True)
class _NodeSite:
    name: str
    acceptor: Optional[Callable[[Link], None]]
    alive: bool = True


class SimLink(Link):
    def __init__(self, network: "SimNetwork", local: str, remote: str):
        self.network = network
        self.local = local
        self.remote = remote
        self.peer: Optional["SimLink"] = None
        self.closed = False
        self.on_frame = lambda raw: None
        self.on_close = lambda: None

    def send(self, frame_bytes: bytes) -> None:
        if self.closed:
            return
        self.network.transmit(self, frame_bytes)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.network.link_closed(self)


class SimNetwork:
    def __init__(self, executor: SimExecutor, seed: int, trace: Callable[[str, str, str], None] | None = None):
        self.executor = executor
        self.seed = seed
        # trace(node, kind, detail); harness injects the recorder
        self.trace = trace or (lambda node, kind, detail: None)
        self._sites: dict[str, _NodeSite] = {}
        self._latency: dict[tuple[str, str], int] = {}
        self._drop: dict[tuple[str, str], float] = {}
        self.default_latency_ms = 5
        self.default_drop = 0.0
        self._partitions: list[tuple[list[set[str]], int]] = []
        self._rngs: dict[tuple[str, str], object] = {}
        self.dropped_frames = 0

    # -- topology ------------------------------------------------------------

    def register(self, name: str, acceptor: Optional[Callable[[Link], None]]) -> None:
        self._sites[name] = _NodeSite(name=name, acceptor=acceptor)

    def set_latency(self, a: str, b: str, ms: int, symmetric: bool = True) -> None:
        self._latency[(a, b)] = int(ms)
        if symmetric:
            self._latency[(b, a)] = int(ms)

    def set_drop(self, a: str, b: str, p: float, symmetric: bool = True) -> None:
        self._drop[(a, b)] = float(p)
        if symmetric:
            self._drop[(b, a)] = float(p)

    def latency(self, a: str, b: str) -> int:
        return self._latency.get((a, b), self.default_latency_ms)

    def drop_probability(self, a: str, b: str) -> float:
        return self._drop.get((a, b), self.default_drop)

    def crash(self, name: str) -> None:
        site = self._sites.get(name)
        if site is None:
            raise InvalidScenario("unknown node %r" % name)
        site.alive = False

    def partition(self, groups: list[set[str]], until_ms: int) -> None:
        self._partitions.append((groups, until_ms))

    def _partitioned(self, a: str, b: str, now: int) -> bool:
        for groups, until in self._partitions:
            if now >= until:
                continue
            ga = gb = None
            for i, g in enumerate(groups):
                if a in g:
                    ga = i
                if b in g:
                    gb = i
            if ga is not None and gb is not None and ga != gb:
                return True
        return False

    # -- transmission ----------------------------------------------------------

    def _rng_for(self, a: str, b: str):
        key = (a, b)
        rng = self._rngs.get(key)
        if rng is None:
            rng = derive_rng(self.seed, "link", a, b)
            self._rngs[key] = rng
        return rng

    def transmit(self, link: SimLink, frame_bytes: bytes) -> None:
        now = self.executor.now_ms()
        src, dst = link.local, link.remote
        src_site = self._sites.get(src)
        dst_site = self._sites.get(dst)
        if src_site is None or not src_site.alive:
            return
        if dst_site is None or not dst_site.alive:
            self.dropped_frames += 1
            self.trace(src, "frame.lost", "to=%s reason=dead" % dst)
            return
        if self._partitioned(src, dst, now):
            self.dropped_frames += 1
            self.trace(src, "frame.lost", "to=%s reason=partition" % dst)
            return
        p = self.drop_probability(src, dst)
        if p > 0.0 and self._rng_for(src, dst).random() < p:
            self.dropped_frames += 1
            self.trace(src, "frame.lost", "to=%s reason=drop" % dst)
            return
        peer = link.peer
        self.executor.call_at(now + self.latency(src, dst), self._deliver, peer, frame_bytes)

    def _deliver(self, peer: SimLink, frame_bytes: bytes) -> None:
        if peer is None or peer.closed:
            return
        site = self._sites.get(peer.local)
        if site is None or not site.alive:
            return
        peer.on_frame(frame_bytes)

    def link_closed(self, link: SimLink) -> None:
        peer = link.peer
        if peer is None or peer.closed:
            return
        now = self.executor.now_ms()
        self.executor.call_at(now + self.latency(link.local, link.remote), self._peer_closed, peer)

    def _peer_closed(self, peer: SimLink) -> None:
        if peer.closed:
            return
        peer.closed = True
        peer.on_close()

    # -- connection setup --------------------------------------------------------

    def connect(self, src: str, address: str) -> Future:
        """Dial sim:<name>; silence (never-resolving future) if the peer is gone."""
        f = Future()
        name = address.split(":", 1)[1] if ":" in address else address
        src_site = self._sites.get(src)
        if src_site is None or not src_site.alive:
            return f
        now = self.executor.now_ms()
        if self._partitioned(src, name, now):
            return f
        dst_site = self._sites.get(name)
        if dst_site is None or not dst_site.alive or dst_site.acceptor is None:
            return f  # never answers; the dialer's timeout fires
        a_end = SimLink(self, src, name)
        b_end = SimLink(self, name, src)
        a_end.peer = b_end
        b_end.peer = a_end
        self.executor.call_at(now + self.latency(src, name), self._accept, dst_site, b_end)
        f.ok(a_end)
        return f

    def _accept(self, site: _NodeSite, link: SimLink) -> None:
        if site.alive and site.acceptor is not None:
            site.acceptor(link)


class SimTransport(Transport):
    """Per-node facade over the shared SimNetwork."""

    protocol = ProtocolId.SIM

    def __init__(self, network: SimNetwork, node_name: str):
        self.network = network
        self.node_name = node_name

    def listen(self, address: str, on_link: Callable[[Link], None]) -> None:
        self.network.register(self.node_name, on_link)

    def connect(self, address: str) -> Future:
        return self.network.connect(self.node_name, address)
