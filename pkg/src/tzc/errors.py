"""Exception hierarchy for the tzc package."""


class TzcError(Exception):
    """Base class for all tzc errors."""


# -- schema -----------------------------------------------------------------

class SchemaError(TzcError):
    pass


class SchemaSyntaxError(SchemaError):
    """Malformed .msg source.  Carries 1-based line and column."""

    def __init__(self, message, line, column):
        super().__init__(f"line {line}, col {column}: {message}")
        self.line = line
        self.column = column


class UnknownTypeError(SchemaError):
    pass


class DuplicateFieldError(SchemaError):
    pass


class LayoutError(TzcError):
    """Inconsistent instance lengths or byte-count overflow while laying out
    the data part."""


# -- wire -------------------------------------------------------------------

class WireError(TzcError):
    pass


class MalformedImageError(WireError):
    """Control image or serialized buffer cannot be decoded."""


class BadMagicError(WireError):
    """Envelope does not start with the protocol magic."""


class UnsupportedVersionError(WireError):
    pass


class LengthMismatchError(WireError):
    """Data-part view does not match the layout implied by the control image."""


# -- shared memory ----------------------------------------------------------

class ShmError(TzcError):
    pass


class RegionNotFoundError(ShmError):
    pass


class RegionExistsError(ShmError):
    pass


class CorruptRegionError(ShmError):
    pass


class OversizeError(ShmError):
    """Requested payload can never fit in the region.  Permanent, unlike an
    exhausted allocation."""


class AllocationExhaustedError(ShmError):
    """No space even after reclamation under the active policy."""


class StaleBlockError(ShmError):
    """Block magic did not match: the message was reclaimed (or the slot
    reused) before this receiver attached."""


class OutOfBoundsError(ShmError):
    pass


class DoubleReleaseError(ShmError):
    pass


# -- transport / runtime ----------------------------------------------------

class TransportError(TzcError):
    pass


class EndpointCollisionError(TransportError):
    """Another live publisher already owns the socket path."""


class ConfigurationError(TzcError):
    pass


class MessageStateError(TzcError):
    """Operation not valid for the message's allocation state."""
