"""tzc: local pub/sub where the bulk of every message lives in shared
memory and only a small control record crosses a socket.

Message schemas (ROS-style .msg subset) are split by a classification pass
into a control part (fixed fields, strings, lengths, nested structure) and a
data part (variable-length arrays of fixed-size elements).  The data part is
written once into a publisher-owned shared-memory block and handed to
subscribers as read-only views; it is never serialized or copied in
transit.  Block lifetime is managed lock-free with a reference count and a
per-message magic number, reclaimed lazily under allocation pressure.
"""

from .errors import (
    AllocationExhaustedError,
    BadMagicError,
    ConfigurationError,
    CorruptRegionError,
    DoubleReleaseError,
    DuplicateFieldError,
    LayoutError,
    LengthMismatchError,
    MalformedImageError,
    MessageStateError,
    OutOfBoundsError,
    OversizeError,
    RegionExistsError,
    RegionNotFoundError,
    SchemaError,
    SchemaSyntaxError,
    ShmError,
    StaleBlockError,
    TransportError,
    TzcError,
    UnknownTypeError,
    UnsupportedVersionError,
    WireError,
)
from .schema import (
    ClassificationPlan,
    DataLayout,
    FieldDef,
    FieldKind,
    MessageSchema,
    Msg,
    Part,
    PlanStep,
    SchemaRegistry,
    Segment,
    classify,
    format_path,
    messages_equal,
    new_message,
    parse_schema,
    plan_layout,
)
from .shm import (
    BEST_EFFORT,
    BlockHandle,
    MEDIUM_EFFORT,
    Policy,
    Region,
    WORST_EFFORT,
    allocate,
    attach,
    parse_policy,
    reclaim_pass,
    region_create,
    region_open,
    release,
)
from .wire import (
    ControlEnvelope,
    decode_control,
    decode_envelope,
    encode_control,
    encode_envelope,
    full_deserialize,
    full_serialize,
)
from .runtime import Node, OutboundMessage, Publisher, Subscriber

__version__ = "0.1.0"
