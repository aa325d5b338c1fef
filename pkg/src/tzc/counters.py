"""Process-local instrumentation counter for data-part bytes copied.

Counts every byte of variable-length-array-of-fixed-type payload that gets
serialized or deserialized (i.e. the bytes the zero-copy path is supposed to
never touch).  The shared-memory path must leave this at zero between
allocation and callback entry; the full-copy baseline documents its own
cost here.
"""

_data_bytes_copied = 0


def add(nbytes: int) -> None:
    global _data_bytes_copied
    _data_bytes_copied += nbytes


def data_bytes_copied() -> int:
    return _data_bytes_copied


def reset() -> None:
    global _data_bytes_copied
    _data_bytes_copied = 0
