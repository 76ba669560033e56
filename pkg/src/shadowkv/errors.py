"""Exception types shared across the package."""

from __future__ import annotations


class ShadowKVError(Exception):
    """Base class for all package-specific errors."""


class UsageError(ShadowKVError):
    """Caller violated an API precondition (e.g. unregistered thread id)."""


class ResourceExhausted(ShadowKVError):
    """A bounded structure is full and cannot grow (bucket chain, page ring)."""


class Backpressure(ShadowKVError):
    """Transient refusal: retry after draining (full pipeline, unflushed page ring)."""


class TransientConflict(ShadowKVError):
    """A compare-and-swap raced and retries were exhausted."""


class WireFormatError(ShadowKVError):
    """A frame or payload failed structural validation."""


class RoutingError(ShadowKVError):
    """No owner found for a key hash, or an endpoint is unknown."""


class ProtocolError(ShadowKVError):
    """Peer sent a message that is valid on the wire but illegal in this state."""
