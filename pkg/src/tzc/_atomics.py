"""Cross-process atomic operations on mapped buffers, via libatomic.

ctypes cannot express atomic read-modify-write, so the refcount and magic
words in shared memory are manipulated through the out-of-line helpers that
libatomic exports (the same routines compilers fall back to when they cannot
inline an atomic op).  All helpers take an absolute address obtained from the
mapping's base pointer.
"""

import ctypes

# __ATOMIC_* memory-order constants
RELAXED = 0
ACQUIRE = 2
RELEASE = 3
SEQ_CST = 5

_lib = ctypes.CDLL("libatomic.so.1", use_errno=True)

_lib.__atomic_load_4.restype = ctypes.c_uint32
_lib.__atomic_load_4.argtypes = [ctypes.c_void_p, ctypes.c_int]
_lib.__atomic_store_4.restype = None
_lib.__atomic_store_4.argtypes = [ctypes.c_void_p, ctypes.c_uint32, ctypes.c_int]
_lib.__atomic_fetch_add_4.restype = ctypes.c_uint32
_lib.__atomic_fetch_add_4.argtypes = [ctypes.c_void_p, ctypes.c_uint32, ctypes.c_int]
_lib.__atomic_fetch_sub_4.restype = ctypes.c_uint32
_lib.__atomic_fetch_sub_4.argtypes = [ctypes.c_void_p, ctypes.c_uint32, ctypes.c_int]

_lib.__atomic_load_8.restype = ctypes.c_uint64
_lib.__atomic_load_8.argtypes = [ctypes.c_void_p, ctypes.c_int]
_lib.__atomic_store_8.restype = None
_lib.__atomic_store_8.argtypes = [ctypes.c_void_p, ctypes.c_uint64, ctypes.c_int]
_lib.__atomic_fetch_add_8.restype = ctypes.c_uint64
_lib.__atomic_fetch_add_8.argtypes = [ctypes.c_void_p, ctypes.c_uint64, ctypes.c_int]


def buffer_address(buf) -> int:
    """Base address of a writable buffer (e.g. an mmap).  The caller must
    keep the buffer alive for as long as the address is used."""
    return ctypes.addressof(ctypes.c_char.from_buffer(buf))


def load_u32(addr: int, order: int = SEQ_CST) -> int:
    return _lib.__atomic_load_4(addr, order)


def store_u32(addr: int, value: int, order: int = SEQ_CST) -> None:
    _lib.__atomic_store_4(addr, value, order)


def fetch_add_u32(addr: int, delta: int, order: int = SEQ_CST) -> int:
    return _lib.__atomic_fetch_add_4(addr, delta, order)


def fetch_sub_u32(addr: int, delta: int, order: int = SEQ_CST) -> int:
    return _lib.__atomic_fetch_sub_4(addr, delta, order)


def load_u64(addr: int, order: int = SEQ_CST) -> int:
    return _lib.__atomic_load_8(addr, order)


def store_u64(addr: int, value: int, order: int = SEQ_CST) -> None:
    _lib.__atomic_store_8(addr, value, order)


def fetch_add_u64(addr: int, delta: int, order: int = SEQ_CST) -> int:
    return _lib.__atomic_fetch_add_8(addr, delta, order)
