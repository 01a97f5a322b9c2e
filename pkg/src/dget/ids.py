"""Node and entity identifiers.

A NucleusId is 16 opaque bytes naming a kernel; an EntityId pairs the id of
the nucleus where the entity was born with 16 locally unique bytes.  The
birth nucleus is the default routing target for the entity; its current
location is tracked separately by forwarding records.
"""

from __future__ import annotations

import hashlib
import os
import random
from dataclasses import dataclass

ID_LEN = 16

NucleusId = bytes  # exactly ID_LEN bytes

# reserved local ids of the three system entities
LOCAL_SECURITY = b"\x00" * 15 + b"\x01"
LOCAL_MANAGER = b"\x00" * 15 + b"\x02"
LOCAL_DISCOVERY = b"\x00" * 15 + b"\x03"


@dataclass(frozen=True, slots=True)
class EntityId:
    nucleus: bytes
    local: bytes

    def __post_init__(self) -> None:
        if len(self.nucleus) != ID_LEN or len(self.local) != ID_LEN:
            raise ValueError("EntityId parts must be %d bytes" % ID_LEN)

    def to_bytes(self) -> bytes:
        return self.nucleus + self.local

    @classmethod
    def from_bytes(cls, data: bytes) -> "EntityId":
        if len(data) != 2 * ID_LEN:
            raise ValueError("EntityId wire form must be %d bytes" % (2 * ID_LEN))
        return cls(bytes(data[:ID_LEN]), bytes(data[ID_LEN:]))

    def hex(self) -> str:
        return self.nucleus.hex() + self.local.hex()

    @classmethod
    def from_hex(cls, text: str) -> "EntityId":
        return cls.from_bytes(bytes.fromhex(text))

    def short(self) -> str:
        return self.nucleus[:4].hex() + ":" + self.local[-4:].hex()


def well_known(nucleus: NucleusId, local: bytes) -> EntityId:
    return EntityId(nucleus, local)


class IdSource:
    """Source of fresh 16-byte identifiers."""

    def fresh(self) -> bytes:
        raise NotImplementedError


class RandomIdSource(IdSource):
    def fresh(self) -> bytes:
        return os.urandom(ID_LEN)


class SeededIdSource(IdSource):
    """Deterministic ids for simulation; one stream per node."""

    def __init__(self, rng: random.Random):
        self._rng = rng

    def fresh(self) -> bytes:
        return self._rng.getrandbits(8 * ID_LEN).to_bytes(ID_LEN, "big")


def derive_rng(seed: int, *labels: str) -> random.Random:
    """Split a scenario seed into an independent, reproducible stream."""
    material = ("%d/" % seed + "/".join(labels)).encode()
    sub = int.from_bytes(hashlib.sha256(material).digest()[:8], "big")
    return random.Random(sub)
