"""Seeded random message generation for tests and demos.

Values are drawn so that a write/read round trip is bit-exact: floats are
generated at the target precision (finite only) and integers within their
dtype range.
"""

from __future__ import annotations

import numpy as np

from .schema import FieldDef, FieldKind, MessageSchema, Msg, element_dtype

_WORDS = "abcdefghijklmnopqrstuvwxyz0123456789_"


def random_string(rng: np.random.Generator, max_len: int = 8) -> str:
    n = int(rng.integers(0, max_len + 1))
    return "".join(_WORDS[i] for i in rng.integers(0, len(_WORDS), size=n))


def random_array(rng: np.random.Generator, dtype: np.dtype, n: int) -> np.ndarray:
    """Random array of any packed dtype, finite floats only."""
    if dtype.names is not None:
        arr = np.zeros(n, dtype=dtype)
        for name in dtype.names:
            sub = dtype[name]
            base, shape = (sub.subdtype if sub.subdtype else (sub, ()))
            count = n * int(np.prod(shape, dtype=int)) if shape else n
            arr[name] = random_array(rng, base, count).reshape((n, *shape))
        return arr
    if dtype.kind == "f":
        return ((rng.random(n) - 0.5) * 2e3).astype(dtype)
    if dtype.kind == "b":
        return rng.integers(0, 2, size=n).astype(dtype)
    info = np.iinfo(dtype)
    return rng.integers(info.min, int(info.max) + 1, size=n, dtype=dtype)


def random_message(schema: MessageSchema, rng: np.random.Generator,
                   max_elems: int = 8) -> Msg:
    msg = Msg(schema.name)
    for f in schema.fields:
        setattr(msg, f.name, _random_field(f, rng, max_elems))
    return msg


def _random_field(f: FieldDef, rng: np.random.Generator, max_elems: int):
    if f.kind == FieldKind.PRIMITIVE:
        return random_array(rng, element_dtype(f.element), 1)[0].item()
    if f.kind == FieldKind.STRING:
        return random_string(rng)
    if f.kind == FieldKind.COMPOUND:
        return random_message(f.element, rng, max_elems)
    n = f.length if f.kind == FieldKind.FIXED_ARRAY else int(
        rng.integers(0, max_elems + 1))
    if f.element == "string":
        return [random_string(rng) for _ in range(n)]
    if f.element_fixed_length():
        return random_array(rng, element_dtype(f.element), n)
    return [random_message(f.element, rng, max_elems) for _ in range(n)]
