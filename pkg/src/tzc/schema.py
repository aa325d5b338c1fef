"""Message schemas: .msg parsing, fixed-length resolution, and the
control/data classification that drives partial serialization.

A schema is split into two kinds of fields.  Variable-length arrays whose
element type has a compile-time-constant size (every primitive except
string, and compounds built only from those) carry the bulk of a message and
can live in shared memory verbatim; everything else (fixed scalars, strings,
array lengths, nested structure) forms the small control part that travels
over a socket.  ``classify`` computes that split once per schema;
``plan_layout`` turns per-instance element counts into concrete byte offsets
inside a single data-part buffer.
"""

from __future__ import annotations

import enum
import functools
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .errors import (
    DuplicateFieldError,
    LayoutError,
    SchemaSyntaxError,
    UnknownTypeError,
)

# Packed little-endian element codes, keyed by .msg primitive name.
PRIMITIVES = {
    "bool": "?",
    "int8": "<i1",
    "uint8": "<u1",
    "int16": "<i2",
    "uint16": "<u2",
    "int32": "<i4",
    "uint32": "<u4",
    "int64": "<i8",
    "uint64": "<u8",
    "float32": "<f4",
    "float64": "<f8",
}

PRIMITIVE_SIZES = {name: np.dtype(code).itemsize for name, code in PRIMITIVES.items()}

SEGMENT_ALIGN = 8

# Serialized var-array counts are u32; a single segment must also stay well
# inside 64-bit byte arithmetic.
MAX_ELEMENT_COUNT = 2**32 - 1
MAX_PAYLOAD_BYTES = 2**63 - 1


class FieldKind(enum.Enum):
    PRIMITIVE = "primitive"
    STRING = "string"
    COMPOUND = "compound"
    FIXED_ARRAY = "fixed_array"
    VAR_ARRAY = "var_array"


@dataclass(frozen=True)
class FieldDef:
    """One declared field.  ``element`` is the primitive name, the literal
    ``"string"``, or the resolved schema of a compound; for arrays it names
    the element type (arrays of arrays are not expressible)."""

    name: str
    kind: FieldKind
    element: Union[str, "MessageSchema"]
    length: int | None = None  # FIXED_ARRAY only

    @property
    def element_is_compound(self) -> bool:
        return isinstance(self.element, MessageSchema)

    def element_fixed_length(self) -> bool:
        if self.element == "string":
            return False
        if self.element_is_compound:
            return self.element.fixed_length
        return True

    def element_size(self) -> int:
        """Packed byte size of one element; only valid for fixed-length
        element types."""
        if self.element_is_compound:
            assert self.element.fixed_size_bytes is not None
            return self.element.fixed_size_bytes
        return PRIMITIVE_SIZES[self.element]


@dataclass(frozen=True)
class MessageSchema:
    name: str
    fields: tuple[FieldDef, ...]
    fixed_length: bool
    fixed_size_bytes: int | None

    def field_map(self) -> dict[str, FieldDef]:
        return {f.name: f for f in self.fields}


def _field_is_fixed(f: FieldDef) -> bool:
    if f.kind in (FieldKind.STRING, FieldKind.VAR_ARRAY):
        return False
    if f.kind == FieldKind.PRIMITIVE:
        return True
    return f.element_fixed_length()


def _field_fixed_size(f: FieldDef) -> int:
    if f.kind == FieldKind.PRIMITIVE:
        return PRIMITIVE_SIZES[f.element]
    if f.kind == FieldKind.COMPOUND:
        return f.element.fixed_size_bytes
    assert f.kind == FieldKind.FIXED_ARRAY
    return f.length * f.element_size()


class SchemaRegistry:
    """Known compound types, keyed by bare type name.  References of the form
    ``pkg/Name`` resolve on the last path component."""

    def __init__(self):
        self._schemas: dict[str, MessageSchema] = {}

    def register(self, schema: MessageSchema) -> MessageSchema:
        self._schemas[schema.name] = schema
        return schema

    def get(self, name: str) -> MessageSchema | None:
        hit = self._schemas.get(name)
        if hit is None and "/" in name:
            hit = self._schemas.get(name.rsplit("/", 1)[1])
        return hit

    def __contains__(self, name: str) -> bool:
        return self.get(name) is not None

    def __getitem__(self, name: str) -> MessageSchema:
        hit = self.get(name)
        if hit is None:
            raise UnknownTypeError(f"unknown message type {name!r}")
        return hit

    def names(self) -> list[str]:
        return sorted(self._schemas)

    def schemas(self) -> list[MessageSchema]:
        return [self._schemas[n] for n in self.names()]

    def load_directory(self, path) -> list[MessageSchema]:
        """Parse every ``*.msg`` under ``path`` (recursively).  Filenames give
        type names; files may reference each other in any order."""
        pending = {p.stem: p for p in sorted(Path(path).rglob("*.msg"))}
        loaded = []
        while pending:
            progress = False
            errors = {}
            for stem, p in list(pending.items()):
                try:
                    schema = parse_schema(p.read_text(), self, name=stem)
                except UnknownTypeError as e:
                    errors[stem] = e
                    continue
                self.register(schema)
                loaded.append(schema)
                del pending[stem]
                progress = True
            if not progress:
                name, err = next(iter(errors.items()))
                raise UnknownTypeError(f"{name}.msg: {err}")
        return loaded


_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")
_TYPE_RE = re.compile(
    r"(?P<base>[A-Za-z_][A-Za-z0-9_/]*)(?P<array>\[(?P<len>\d*)\])?$"
)


def parse_schema(text: str, registry: SchemaRegistry | None = None, *,
                 name: str = "<anonymous>") -> MessageSchema:
    """Parse one .msg definition.  Compound references must already be in
    ``registry``.  Constants (``TYPE NAME=VALUE``) and comments are accepted
    and ignored.  The parsed schema is NOT registered automatically."""
    registry = registry if registry is not None else SchemaRegistry()
    fields: list[FieldDef] = []
    seen: set[str] = set()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        # A '=' before any comment marks a constant; its value may legally
        # contain '#', so detect it before stripping comments.
        hash_pos = raw.find("#")
        eq_pos = raw.find("=")
        if eq_pos != -1 and (hash_pos == -1 or eq_pos < hash_pos):
            continue
        line = raw[:hash_pos] if hash_pos != -1 else raw
        if not line.strip():
            continue

        parts = line.split()
        if len(parts) != 2:
            col = len(line) - len(line.lstrip()) + 1
            raise SchemaSyntaxError(
                f"expected 'TYPE NAME', got {line.strip()!r}", lineno, col)
        type_tok, name_tok = parts

        m = _TYPE_RE.match(type_tok)
        if m is None:
            raise SchemaSyntaxError(
                f"bad type {type_tok!r}", lineno, line.index(type_tok) + 1)
        if not _IDENT_RE.match(name_tok):
            raise SchemaSyntaxError(
                f"bad field name {name_tok!r}", lineno, line.index(name_tok) + 1)
        if name_tok in seen:
            raise DuplicateFieldError(
                f"{name}: duplicate field name {name_tok!r} (line {lineno})")
        seen.add(name_tok)

        base = m.group("base")
        if base in PRIMITIVES or base == "string":
            element: Union[str, MessageSchema] = base
        else:
            resolved = registry.get(base)
            if resolved is None:
                raise UnknownTypeError(
                    f"{name}: unknown type {base!r} (line {lineno})")
            element = resolved

        if m.group("array") is None:
            if element == "string":
                kind = FieldKind.STRING
            elif isinstance(element, MessageSchema):
                kind = FieldKind.COMPOUND
            else:
                kind = FieldKind.PRIMITIVE
            fields.append(FieldDef(name_tok, kind, element))
        elif m.group("len"):
            fields.append(FieldDef(name_tok, FieldKind.FIXED_ARRAY, element,
                                   length=int(m.group("len"))))
        else:
            fields.append(FieldDef(name_tok, FieldKind.VAR_ARRAY, element))

    fixed = all(_field_is_fixed(f) for f in fields)
    size = sum(_field_fixed_size(f) for f in fields) if fixed else None
    return MessageSchema(name, tuple(fields), fixed, size)


# -- numpy element dtypes -----------------------------------------------------

@functools.lru_cache(maxsize=None)
def _schema_dtype(schema: MessageSchema) -> np.dtype:
    entries = []
    for f in schema.fields:
        if f.kind == FieldKind.PRIMITIVE:
            entries.append((f.name, PRIMITIVES[f.element]))
        elif f.kind == FieldKind.COMPOUND:
            entries.append((f.name, _schema_dtype(f.element)))
        elif f.kind == FieldKind.FIXED_ARRAY:
            sub = (PRIMITIVES[f.element] if not f.element_is_compound
                   else _schema_dtype(f.element))
            entries.append((f.name, sub, (f.length,)))
        else:
            raise ValueError(
                f"{schema.name}.{f.name} is variable-length; no packed dtype")
    dt = np.dtype(entries)
    assert dt.itemsize == (schema.fixed_size_bytes or 0)
    return dt


def element_dtype(element: Union[str, MessageSchema]) -> np.dtype:
    """Packed little-endian dtype for a fixed-length element type."""
    if isinstance(element, MessageSchema):
        if not element.fixed_length:
            raise ValueError(f"{element.name} is not fixed-length")
        return _schema_dtype(element)
    if element == "string":
        raise ValueError("strings have no fixed dtype")
    return np.dtype(PRIMITIVES[element])


# -- classification ------------------------------------------------------------

class Part(enum.Enum):
    CONTROL = "control"
    DATA = "data"


@dataclass(frozen=True)
class PlanStep:
    """One traversal step.  ``path`` is relative to the plan's root message.
    DATA steps carry the packed element size/dtype of the array they move to
    shared memory; a CONTROL step for a var array of variable-length
    compounds carries the element type's own plan, executed per element."""

    path: tuple[str, ...]
    part: Part
    element_size: int | None = None
    element_type: Union[str, "MessageSchema", None] = None
    sub_plan: Union["ClassificationPlan", None] = None

    @property
    def dtype(self) -> np.dtype:
        assert self.part is Part.DATA
        return element_dtype(self.element_type)


@dataclass(frozen=True)
class ClassificationPlan:
    schema: MessageSchema
    steps: tuple[PlanStep, ...]

    @property
    def data_steps(self) -> tuple[PlanStep, ...]:
        return tuple(s for s in self.steps if s.part is Part.DATA)

    def has_data(self) -> bool:
        return any(
            s.part is Part.DATA
            or (s.sub_plan is not None and s.sub_plan.has_data())
            for s in self.steps
        )


def _control(path) -> PlanStep:
    return PlanStep(tuple(path), Part.CONTROL)


@functools.lru_cache(maxsize=None)
def classify(schema: MessageSchema) -> ClassificationPlan:
    """Split ``schema`` into control and data steps.

    Var arrays of fixed-length element types become DATA steps.  Var arrays
    of variable-length compounds stay in the control part but carry a
    sub-plan so their elements' inner arrays can still reach shared memory.
    A plain compound field is opened up only when something inside it could
    land in the data part; otherwise it is one opaque control step.  All
    remaining shapes (strings, string arrays, fixed arrays of variable
    compounds) fall back to the control part and merely lose the zero-copy
    fast path.
    """
    steps: list[PlanStep] = []
    for f in schema.fields:
        steps.extend(_classify_field(f, (f.name,)))
    return ClassificationPlan(schema, tuple(steps))


def _classify_field(f: FieldDef, path: tuple[str, ...]) -> list[PlanStep]:
    if f.kind == FieldKind.VAR_ARRAY:
        if f.element == "string":
            return [_control(path)]
        if f.element_fixed_length():
            return [PlanStep(path, Part.DATA,
                             element_size=f.element_size(),
                             element_type=f.element)]
        sub = classify(f.element)
        return [PlanStep(path, Part.CONTROL, element_type=f.element,
                         sub_plan=sub)]
    if f.kind == FieldKind.COMPOUND and not f.element.fixed_length:
        inner = classify(f.element)
        if inner.has_data():
            return [PlanStep(path + s.path, s.part, s.element_size,
                             s.element_type, s.sub_plan)
                    for s in inner.steps]
    return [_control(path)]


# -- data-part layout ----------------------------------------------------------

# An instance-lengths tree parallels a plan's length-bearing steps, in order:
# an int element count for each DATA step, and a list of per-element subtrees
# for each CONTROL step that carries a sub-plan.
LengthTree = list


def length_bearing_steps(plan: ClassificationPlan) -> list[PlanStep]:
    return [s for s in plan.steps if s.part is Part.DATA or s.sub_plan is not None]


def iter_data_instances(plan: ClassificationPlan, lengths: LengthTree,
                        prefix: tuple = ()) -> Iterator[tuple[PlanStep, tuple, int]]:
    """Depth-first (step, instance path, element count) for every concrete
    data segment, expanding sub-plans per element."""
    bearing = length_bearing_steps(plan)
    if len(lengths) != len(bearing):
        raise LayoutError(
            f"expected {len(bearing)} length entries for {plan.schema.name}, "
            f"got {len(lengths)}")
    for step, entry in zip(bearing, lengths):
        if step.part is Part.DATA:
            if not isinstance(entry, int) or entry < 0:
                raise LayoutError(f"bad element count {entry!r} at {step.path}")
            if entry > MAX_ELEMENT_COUNT:
                raise LayoutError(f"element count {entry} overflows u32")
            yield step, prefix + step.path, entry
        else:
            if not isinstance(entry, list):
                raise LayoutError(
                    f"expected per-element lengths list at {step.path}")
            for i, sub_entry in enumerate(entry):
                yield from iter_data_instances(
                    step.sub_plan, sub_entry, prefix + step.path + (i,))


@dataclass(frozen=True)
class Segment:
    path: tuple
    offset: int
    length: int


@dataclass(frozen=True)
class DataLayout:
    segments: tuple[Segment, ...]
    total_payload_bytes: int


def _align(n: int, a: int = SEGMENT_ALIGN) -> int:
    return (n + a - 1) // a * a


def plan_layout(plan: ClassificationPlan, instance_lengths: LengthTree) -> DataLayout:
    """Assign aligned offsets to every data segment.  Deterministic; the
    total is the exact end of the last segment (no trailing padding)."""
    segments = []
    offset = 0
    for step, ipath, count in iter_data_instances(plan, instance_lengths):
        nbytes = count * step.element_size
        offset = _align(offset)
        if offset + nbytes > MAX_PAYLOAD_BYTES:
            raise LayoutError("data part exceeds 2**63-1 bytes")
        segments.append(Segment(ipath, offset, nbytes))
        offset += nbytes
    return DataLayout(tuple(segments), offset)


def format_path(path: tuple) -> str:
    out = []
    for p in path:
        if isinstance(p, int):
            out[-1] += f"[{p}]"
        else:
            out.append(p)
    return ".".join(out)


# -- message values --------------------------------------------------------------

class Msg:
    """Plain attribute bag for message values; the schema travels separately."""

    def __init__(self, type_name: str = "", **fields):
        self._type = type_name
        for k, v in fields.items():
            setattr(self, k, v)

    def __repr__(self):
        vals = ", ".join(f"{k}={v!r}" for k, v in self.__dict__.items()
                         if k != "_type")
        return f"Msg({self._type or '?'}: {vals})"


def new_message(schema: MessageSchema) -> Msg:
    """Default-constructed value: zeros, empty strings, empty arrays."""
    msg = Msg(schema.name)
    for f in schema.fields:
        setattr(msg, f.name, _default_value(f))
    return msg


def _default_value(f: FieldDef):
    if f.kind == FieldKind.PRIMITIVE:
        return False if f.element == "bool" else (
            0.0 if f.element.startswith("float") else 0)
    if f.kind == FieldKind.STRING:
        return ""
    if f.kind == FieldKind.COMPOUND:
        return new_message(f.element)
    if f.kind == FieldKind.FIXED_ARRAY:
        if f.element == "string":
            return [""] * f.length
        if f.element_is_compound and not f.element.fixed_length:
            return [new_message(f.element) for _ in range(f.length)]
        return np.zeros(f.length, dtype=element_dtype(f.element))
    # VAR_ARRAY
    if f.element == "string":
        return []
    if f.element_fixed_length():
        return np.zeros(0, dtype=element_dtype(f.element))
    return []


def get_path(msg: Msg, path: tuple):
    """Fetch a (possibly nested, possibly indexed) field value."""
    cur = msg
    for p in path:
        cur = cur[p] if isinstance(p, int) else getattr(cur, p)
    return cur


def set_path(msg: Msg, path: tuple, value) -> None:
    cur = msg
    for p in path[:-1]:
        cur = cur[p] if isinstance(p, int) else getattr(cur, p)
    last = path[-1]
    if isinstance(last, int):
        cur[last] = value
    else:
        setattr(cur, last, value)


def message_lengths(msg: Msg, plan: ClassificationPlan) -> LengthTree:
    """Instance-lengths tree read off an actual message value."""
    lengths: LengthTree = []
    for step in length_bearing_steps(plan):
        value = get_path(msg, step.path)
        if step.part is Part.DATA:
            lengths.append(len(value))
        else:
            lengths.append([message_lengths(elem, step.sub_plan)
                            for elem in value])
    return lengths


def messages_equal(a: Msg, b: Msg, schema: MessageSchema) -> bool:
    """Field-by-field equality under ``schema``.  Arrays of fixed-length
    elements compare by content after normalization to the packed dtype, so
    a shared-memory view and a heap array with equal bytes are equal."""
    return all(_field_equal(f, getattr(a, f.name), getattr(b, f.name))
               for f in schema.fields)


def _field_equal(f: FieldDef, va, vb) -> bool:
    if f.kind == FieldKind.PRIMITIVE:
        return bool(va == vb)
    if f.kind == FieldKind.STRING:
        return va == vb
    if f.kind == FieldKind.COMPOUND:
        return messages_equal(va, vb, f.element)
    # arrays
    if f.element == "string":
        return list(va) == list(vb)
    if f.element_fixed_length():
        dt = element_dtype(f.element)
        return np.array_equal(np.asarray(va, dtype=dt), np.asarray(vb, dtype=dt))
    la, lb = list(va), list(vb)
    return len(la) == len(lb) and all(
        messages_equal(ea, eb, f.element) for ea, eb in zip(la, lb))
