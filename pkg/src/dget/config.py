"""Node configuration: typed defaults plus a line-oriented file format.

Files are ``key = value`` pairs, ``#`` starts a comment, unknown keys log a
warning and are kept in ``extras`` instead of failing the boot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

from .errors import InvalidConfig

log = logging.getLogger(__name__)


@dataclass
class NucleusConfig:
    node_id: str = "auto"                  # 32 hex chars or "auto"
    listen: str = ""                       # empty = client mode, no listener
    bootstrap: list[str] = field(default_factory=list)
    protocols: list[str] = field(default_factory=lambda: ["tcp"])
    admin: str = "admin"                   # capability administrator for system entities
    secret: str = ""                       # shared secret for control-body MACs ("" = trust)

    discovery_k: int = 8
    discovery_e: int = 2
    discovery_decay: float = 0.9
    discovery_epoch: int = 50              # queries per interest-decay epoch
    discovery_round_ms: int = 30_000
    discovery_strategy: str = "scored"     # scored | random
    query_ttl: int = 5
    query_window_ms: int = 2_000

    connector_capacity: int = 4096
    delayed_capacity: int = 1024
    fragment_body: int = 16384
    max_frame_body: int = 262_144
    codec: str = "deflate"                 # deflate | null
    reassembly_timeout_ms: int = 30_000
    forward_ttl_ms: int = 60_000
    route_stale_ms: int = 300_000
    connect_timeout_ms: int = 5_000
    request_timeout_ms: int = 5_000
    migrate_timeout_ms: int = 10_000
    ping_interval_ms: int = 10_000
    ping_misses: int = 3
    retry_base_ms: int = 1_000
    retry_max_tries: int = 3

    extras: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.protocols:
            raise InvalidConfig("protocols must be non-empty")
        if self.discovery_k < 1:
            raise InvalidConfig("discoveryK must be >= 1")


# file key -> (attribute, parser)
_KEYS = {
    "node.id": ("node_id", str),
    "node.listen": ("listen", str),
    "node.bootstrap": ("bootstrap", lambda v: [s.strip() for s in v.split(",") if s.strip()]),
    "node.protocols": ("protocols", lambda v: [s.strip() for s in v.split(",") if s.strip()]),
    "node.admin": ("admin", str),
    "node.secret": ("secret", str),
    "discovery.k": ("discovery_k", int),
    "discovery.e": ("discovery_e", int),
    "discovery.decay": ("discovery_decay", float),
    "discovery.epoch": ("discovery_epoch", int),
    "discovery.round.ms": ("discovery_round_ms", int),
    "discovery.strategy": ("discovery_strategy", str),
    "query.ttl": ("query_ttl", int),
    "query.window.ms": ("query_window_ms", int),
    "connector.capacity": ("connector_capacity", int),
    "delayed.capacity": ("delayed_capacity", int),
    "fragment.body": ("fragment_body", int),
    "frame.body.max": ("max_frame_body", int),
    "codec": ("codec", str),
    "reassembly.timeout.ms": ("reassembly_timeout_ms", int),
    "forward.ttl.ms": ("forward_ttl_ms", int),
    "route.stale.ms": ("route_stale_ms", int),
    "connect.timeout.ms": ("connect_timeout_ms", int),
    "request.timeout.ms": ("request_timeout_ms", int),
    "migrate.timeout.ms": ("migrate_timeout_ms", int),
    "ping.interval.ms": ("ping_interval_ms", int),
    "ping.misses": ("ping_misses", int),
    "retry.base.ms": ("retry_base_ms", int),
    "retry.max.tries": ("retry_max_tries", int),
}


def parse_config_lines(text: str) -> NucleusConfig:
    values: dict[str, object] = {}
    extras: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig("line %d: expected key = value" % lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        spec = _KEYS.get(key)
        if spec is None:
            log.warning("unknown config key %r (kept as extra)", key)
            extras[key] = value
            continue
        attr, parser = spec
        try:
            values[attr] = parser(value)
        except ValueError as exc:
            raise InvalidConfig("line %d: bad value for %s: %s" % (lineno, key, exc)) from exc
    cfg = NucleusConfig(**values)  # type: ignore[arg-type]
    cfg.extras = extras
    return cfg


def load_config(path: str) -> NucleusConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_lines(fh.read())


def config_overrides(cfg: NucleusConfig, overrides: dict[str, str]) -> NucleusConfig:
    """Apply file-format keys onto an existing config (scenario per-node keys)."""
    known = {f.name for f in fields(NucleusConfig)}
    for key, value in overrides.items():
        spec = _KEYS.get(key)
        if spec is None:
            if key in known:
                spec = (key, type(getattr(cfg, key)))
            else:
                cfg.extras[key] = value
                continue
        attr, parser = spec
        setattr(cfg, attr, parser(value))
    return cfg
