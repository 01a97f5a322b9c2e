"""dget: entity-based peer-to-peer grid middleware."""

__version__ = "0.1.0"
