"""Wire codecs.

Three layers live here:

* the classic full serializer (every field, depth first) -- the correctness
  oracle and the payload codec of the full-copy baseline transport;
* the control-image codec, which serializes only control-part fields and
  then the element counts of every data segment, never touching data-part
  payload bytes;
* the envelope codec framing what actually crosses the socket.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import counters
from .errors import (
    BadMagicError,
    LengthMismatchError,
    MalformedImageError,
    UnsupportedVersionError,
    WireError,
)
from .schema import (
    ClassificationPlan,
    FieldDef,
    FieldKind,
    MessageSchema,
    Msg,
    Part,
    element_dtype,
    get_path,
    iter_data_instances,
    length_bearing_steps,
    message_lengths,
    plan_layout,
    set_path,
)

PROTOCOL_MAGIC = b"TZC1"
PROTOCOL_VERSION = 1

_SCALAR_FMT = {
    "bool": "?", "int8": "b", "uint8": "B", "int16": "h", "uint16": "H",
    "int32": "i", "uint32": "I", "int64": "q", "uint64": "Q",
    "float32": "f", "float64": "d",
}
_SCALAR = {name: struct.Struct("<" + c) for name, c in _SCALAR_FMT.items()}
_U32 = struct.Struct("<I")


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def scalar(self, prim: str, value):
        try:
            self.buf += _SCALAR[prim].pack(value)
        except struct.error as e:
            raise WireError(f"cannot encode {value!r} as {prim}: {e}") from None

    def u32(self, value: int):
        if not 0 <= value < 2**32:
            raise WireError(f"length {value} overflows u32")
        self.buf += _U32.pack(value)

    def raw(self, data):
        self.buf += data

    def string(self, value: str):
        data = value.encode("utf-8")
        self.u32(len(data))
        self.buf += data


class _Reader:
    def __init__(self, data):
        self.view = memoryview(data)
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.view) - self.pos

    def take(self, n: int) -> memoryview:
        if self.remaining < n:
            raise MalformedImageError(
                f"buffer underrun: need {n} bytes at offset {self.pos}, "
                f"have {self.remaining}")
        out = self.view[self.pos:self.pos + n]
        self.pos += n
        return out

    def scalar(self, prim: str):
        s = _SCALAR[prim]
        return s.unpack(self.take(s.size))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedImageError(f"bad utf-8 string: {e}") from None


# -- full serialization (the oracle / baseline codec) -------------------------

def _write_field(w: _Writer, f: FieldDef, value) -> None:
    if f.kind == FieldKind.PRIMITIVE:
        w.scalar(f.element, value)
    elif f.kind == FieldKind.STRING:
        w.string(value)
    elif f.kind == FieldKind.COMPOUND:
        _write_fields(w, f.element, value)
    elif f.kind == FieldKind.FIXED_ARRAY:
        _write_array(w, f, value, f.length, prefix_count=False)
    else:  # VAR_ARRAY
        _write_array(w, f, value, None, prefix_count=True)


def _write_array(w: _Writer, f: FieldDef, value, expect: int | None,
                 prefix_count: bool) -> None:
    if f.element == "string":
        items = list(value)
        _check_len(f, items, expect)
        if prefix_count:
            w.u32(len(items))
        for s in items:
            w.string(s)
    elif f.element_fixed_length():
        dt = element_dtype(f.element)
        try:
            arr = np.asarray(value, dtype=dt)
        except (TypeError, ValueError) as e:
            raise WireError(f"field {f.name}: {e}") from None
        _check_len(f, arr, expect)
        if prefix_count:
            w.u32(len(arr))
            # Bytes of a var array of fixed elements are exactly what the
            # zero-copy path leaves in place; account for copying them.
            counters.add(arr.nbytes)
        w.raw(arr.tobytes())
    else:
        items = list(value)
        _check_len(f, items, expect)
        if prefix_count:
            w.u32(len(items))
        for item in items:
            _write_fields(w, f.element, item)


def _check_len(f: FieldDef, value, expect: int | None) -> None:
    if expect is not None and len(value) != expect:
        raise WireError(
            f"fixed array {f.name} expects {expect} elements, got {len(value)}")


def _write_fields(w: _Writer, schema: MessageSchema, msg: Msg) -> None:
    for f in schema.fields:
        try:
            value = getattr(msg, f.name)
        except AttributeError:
            raise WireError(f"message lacks field {f.name!r}") from None
        _write_field(w, f, value)


def full_serialize(msg: Msg, schema: MessageSchema) -> bytes:
    """Depth-first serialization of every field (little-endian, u32 length
    prefixes for strings and var arrays, no padding)."""
    w = _Writer()
    _write_fields(w, schema, msg)
    return bytes(w.buf)


def _read_array(r: _Reader, f: FieldDef, count: int):
    if f.element == "string":
        return [r.string() for _ in range(count)]
    if f.element_fixed_length():
        dt = element_dtype(f.element)
        raw = r.take(count * dt.itemsize)
        arr = np.frombuffer(raw, dtype=dt, count=count).copy()
        if f.kind == FieldKind.VAR_ARRAY:
            counters.add(arr.nbytes)
        return arr
    return [_read_fields(r, f.element) for _ in range(count)]


def _read_field(r: _Reader, f: FieldDef):
    if f.kind == FieldKind.PRIMITIVE:
        return r.scalar(f.element)
    if f.kind == FieldKind.STRING:
        return r.string()
    if f.kind == FieldKind.COMPOUND:
        return _read_fields(r, f.element)
    if f.kind == FieldKind.FIXED_ARRAY:
        return _read_array(r, f, f.length)
    return _read_array(r, f, r.u32())


def _read_fields(r: _Reader, schema: MessageSchema) -> Msg:
    msg = Msg(schema.name)
    for f in schema.fields:
        setattr(msg, f.name, _read_field(r, f))
    return msg


def full_deserialize(data, schema: MessageSchema) -> Msg:
    r = _Reader(data)
    msg = _read_fields(r, schema)
    if r.remaining:
        raise MalformedImageError(f"{r.remaining} trailing bytes")
    return msg


# -- control image -------------------------------------------------------------

def _resolve_field(schema: MessageSchema, path: tuple[str, ...]) -> FieldDef:
    cur = schema
    for comp in path[:-1]:
        cur = cur.field_map()[comp].element
    return cur.field_map()[path[-1]]


def _write_control_fields(w: _Writer, msg: Msg, plan: ClassificationPlan) -> None:
    for step in plan.steps:
        if step.part is Part.DATA:
            continue
        value = get_path(msg, step.path)
        if step.sub_plan is not None:
            items = list(value)
            w.u32(len(items))
            for item in items:
                _write_control_fields(w, item, step.sub_plan)
        else:
            _write_field(w, _resolve_field(plan.schema, step.path), value)


def encode_control(msg: Msg, plan: ClassificationPlan) -> bytes:
    """Serialize the control part: control fields in plan order, then one
    u32 element count per data-segment instance.  No data-part payload byte
    is read or written."""
    w = _Writer()
    _write_control_fields(w, msg, plan)
    lengths = message_lengths(msg, plan)
    for _step, _path, count in iter_data_instances(plan, lengths):
        w.u32(count)
    return bytes(w.buf)


def _ensure_containers(msg: Msg, plan: ClassificationPlan,
                       path: tuple[str, ...]) -> Msg:
    """Create intermediate compound nodes along ``path`` (exclusive)."""
    cur = msg
    cur_schema = plan.schema
    for comp in path[:-1]:
        f = cur_schema.field_map()[comp]
        nxt = getattr(cur, comp, None)
        if nxt is None:
            nxt = Msg(f.element.name)
            setattr(cur, comp, nxt)
        cur = nxt
        cur_schema = f.element
    return cur


def _read_control_fields(r: _Reader, plan: ClassificationPlan) -> Msg:
    msg = Msg(plan.schema.name)
    for step in plan.steps:
        parent = _ensure_containers(msg, plan, step.path)
        leaf = step.path[-1]
        if step.part is Part.DATA:
            setattr(parent, leaf, None)  # bound to the block afterwards
        elif step.sub_plan is not None:
            count = r.u32()
            setattr(parent, leaf,
                    [_read_control_fields(r, step.sub_plan) for _ in range(count)])
        else:
            setattr(parent, leaf,
                    _read_field(r, _resolve_field(plan.schema, step.path)))
    return msg


def _read_data_counts(r: _Reader, plan: ClassificationPlan, msg: Msg) -> list:
    lengths = []
    for step in length_bearing_steps(plan):
        if step.part is Part.DATA:
            lengths.append(r.u32())
        else:
            elems = get_path(msg, step.path)
            lengths.append([_read_data_counts(r, step.sub_plan, e)
                            for e in elems])
    return lengths


def decode_control(image, plan: ClassificationPlan, block=None) -> Msg:
    """Rebuild a message from its control image, binding every data segment
    as a zero-copy numpy view into ``block`` (a buffer exactly
    ``total_payload_bytes`` long).  Views inherit the block's writability."""
    r = _Reader(image)
    msg = _read_control_fields(r, plan)
    lengths = _read_data_counts(r, plan, msg)
    if r.remaining:
        raise MalformedImageError(f"{r.remaining} trailing bytes in control image")

    layout = plan_layout(plan, lengths)
    view = memoryview(block) if block is not None else memoryview(b"")
    if len(view) != layout.total_payload_bytes:
        raise LengthMismatchError(
            f"block holds {len(view)} payload bytes, control image implies "
            f"{layout.total_payload_bytes}")
    for (step, ipath, count), seg in zip(
            iter_data_instances(plan, lengths), layout.segments):
        arr = np.frombuffer(view, dtype=step.dtype, count=count,
                            offset=seg.offset)
        set_path(msg, ipath, arr)
    return msg


# -- envelope -------------------------------------------------------------------

@dataclass(frozen=True)
class ControlEnvelope:
    """Framed socket record pointing a control image at its data block.
    ``region_name`` is empty (offset/magic/payload zero) when the payload is
    carried inline by the full-copy baseline."""

    topic: str
    sequence: int
    region_name: str
    block_offset: int
    message_magic: int
    payload_bytes: int
    control: bytes


def encode_envelope(env: ControlEnvelope) -> bytes:
    w = _Writer()
    w.raw(PROTOCOL_MAGIC)
    w.scalar("uint8", PROTOCOL_VERSION)
    w.string(env.topic)
    w.scalar("uint64", env.sequence)
    w.string(env.region_name)
    w.scalar("uint64", env.block_offset)
    w.scalar("uint64", env.message_magic)
    w.scalar("uint64", env.payload_bytes)
    w.u32(len(env.control))
    w.raw(env.control)
    return bytes(w.buf)


def decode_envelope(data) -> ControlEnvelope:
    r = _Reader(data)
    magic = bytes(r.take(4))
    if magic != PROTOCOL_MAGIC:
        raise BadMagicError(f"bad protocol magic {magic!r}")
    version = r.scalar("uint8")
    if version != PROTOCOL_VERSION:
        raise UnsupportedVersionError(f"unsupported envelope version {version}")
    env = ControlEnvelope(
        topic=r.string(),
        sequence=r.scalar("uint64"),
        region_name=r.string(),
        block_offset=r.scalar("uint64"),
        message_magic=r.scalar("uint64"),
        payload_bytes=r.scalar("uint64"),
        control=bytes(r.take(r.u32())),
    )
    if r.remaining:
        raise MalformedImageError(f"{r.remaining} trailing bytes after envelope")
    return env
