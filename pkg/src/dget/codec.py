"""Pluggable whole-message compression codecs."""

from __future__ import annotations

import zlib


class NullCodec:
    """Identity codec; never marks output as compressed."""

    name = "null"

    def encode(self, data: bytes) -> bytes:
        return data

    def decode(self, data: bytes) -> bytes:
        return data


class DeflateCodec:
    name = "deflate"

    def __init__(self, level: int = 6):
        self._level = level

    def encode(self, data: bytes) -> bytes:
        return zlib.compress(data, self._level)

    def decode(self, data: bytes) -> bytes:
        return zlib.decompress(data)


_CODECS = {
    "null": NullCodec,
    "deflate": DeflateCodec,
}


def get_codec(name: str):
    try:
        return _CODECS[name]()
    except KeyError:
        raise ValueError("unknown codec %r" % name) from None
