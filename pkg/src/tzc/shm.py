"""Publisher-owned shared-memory regions and message-block lifetime.

A region is a named file in /dev/shm (or ``TZC_SHM_DIR``), mapped by one
writing publisher and any number of attaching subscribers.  Each message's
data part is one block: a 40-byte header (magic, refcount, prev/next links,
payload size) followed by the 8-aligned payload.  Lifetime protocol:

* the magic number is the block's validity token; 0 means reclaimed.  A
  subscriber attaches by validate-increment-revalidate: load magic, bump the
  refcount, re-check the magic, and undo the bump if it changed.
* dropping the refcount to zero does nothing.  Blocks are reclaimed only
  when an allocation fails, oldest first, per the publication policy.
* the publisher reclaims by zeroing the magic first and then checking the
  refcount; a concurrent attacher either sees the zero and backs off, or its
  increment lands first and the publisher restores the magic and keeps the
  block.  Everything is seq-cst, so one of the two always observes the other.

Only the publisher writes the allocation cursor and the list links;
subscribers write nothing but refcount words.
"""

from __future__ import annotations

import os
import secrets
import tempfile
from dataclasses import dataclass
from pathlib import Path

import mmap

from . import _atomics as atomics
from .errors import (
    AllocationExhaustedError,
    ConfigurationError,
    CorruptRegionError,
    DoubleReleaseError,
    OutOfBoundsError,
    OversizeError,
    RegionExistsError,
    RegionNotFoundError,
    ShmError,
    StaleBlockError,
)

REGION_MAGIC = int.from_bytes(b"TZCREG01", "little")
REGION_HEADER_SIZE = 64
BLOCK_HEADER_SIZE = 40  # u64 magic, u32 refcount, u32 reserved, u64 prev/next, u64 payload
POISON_BYTE = 0xDD

# header offsets
_H_MAGIC = 0
_H_TOTAL = 8
_H_CURSOR = 16
_H_HEAD = 24
_H_TAIL = 32
_H_COUNTER = 40
_H_INCARNATION = 48
_H_FLAGS = 56

# block-header offsets
_B_MAGIC = 0
_B_REFCOUNT = 8
_B_PREV = 16
_B_NEXT = 24
_B_PAYLOAD = 32

_FLAG_DEBUG = 1


def shm_dir() -> Path:
    env = os.environ.get("TZC_SHM_DIR")
    if env:
        return Path(env)
    p = Path("/dev/shm")
    return p if p.is_dir() else Path(tempfile.gettempdir())


def _align8(n: int) -> int:
    return (n + 7) & ~7


# -- policies -----------------------------------------------------------------

@dataclass(frozen=True)
class Policy:
    """What ``allocate`` does when the region is full: reclaim every
    unreferenced block until something fits (best effort), give up as soon
    as the oldest block is still referenced (worst effort), or run a bounded
    number of reclamation passes (medium effort)."""

    kind: str
    max_attempts: int | None = None

    def __post_init__(self):
        if self.kind == "blocking":
            raise ConfigurationError(
                "blocking publication policy is rejected: it would stall the "
                "publisher on slow subscribers")
        if self.kind not in ("best_effort", "worst_effort", "medium_effort"):
            raise ConfigurationError(f"unknown policy {self.kind!r}")
        if self.kind == "medium_effort":
            if not self.max_attempts or self.max_attempts < 1:
                raise ConfigurationError(
                    "medium_effort max_attempts must be >= 1")
        elif self.max_attempts is not None:
            raise ConfigurationError(
                f"{self.kind} takes no max_attempts")


BEST_EFFORT = Policy("best_effort")
WORST_EFFORT = Policy("worst_effort")


def MEDIUM_EFFORT(max_attempts: int = 5) -> Policy:
    return Policy("medium_effort", max_attempts)


def parse_policy(text: str) -> Policy:
    """Parse ``best`` / ``worst`` / ``medium[:N]`` / ``blocking`` (rejected)."""
    name, _, arg = text.strip().lower().partition(":")
    if name in ("best", "best_effort"):
        return BEST_EFFORT
    if name in ("worst", "worst_effort"):
        return WORST_EFFORT
    if name in ("medium", "medium_effort"):
        return MEDIUM_EFFORT(int(arg) if arg else 5)
    if name == "blocking":
        return Policy("blocking")
    raise ConfigurationError(f"unknown policy {text!r}")


# -- blocks ---------------------------------------------------------------------

@dataclass
class BlockHandle:
    """A live reference to one block.  Holding it pins the block's payload;
    ``release`` drops the pin (the block itself is reclaimed later, under
    allocation pressure)."""

    region: "Region"
    offset: int
    magic: int
    payload_bytes: int
    _released: bool = False

    @property
    def payload(self) -> memoryview:
        start = self.offset + BLOCK_HEADER_SIZE
        return memoryview(self.region._mm)[start:start + self.payload_bytes]

    @property
    def refcount(self) -> int:
        return self.region._load_u32(self.offset + _B_REFCOUNT)

    def release(self) -> None:
        release(self)


@dataclass(frozen=True)
class BlockInfo:
    offset: int
    magic: int
    refcount: int
    payload_bytes: int


class Region:
    """One mapped region.  Create as the owning publisher, open as anyone
    else; only the owner may allocate or reclaim."""

    def __init__(self, name: str, path: Path, mm, fd: int, owner: bool):
        self.name = name
        self.path = path
        self._mm = mm
        self._fd = fd
        self.owner = owner
        self._base = atomics.buffer_address(mm)
        self._closed = False

    # -- lifecycle ------------------------------------------------------------

    @classmethod
    def create(cls, name: str, mem_size: int, *, debug: bool = False) -> "Region":
        if mem_size < BLOCK_HEADER_SIZE + 8:
            raise ConfigurationError(
                f"mem_size {mem_size} cannot hold even one block header")
        path = shm_dir() / name
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o600)
        except FileExistsError:
            raise RegionExistsError(f"region {name!r} already exists") from None
        total = REGION_HEADER_SIZE + mem_size
        os.ftruncate(fd, total)
        mm = mmap.mmap(fd, total)
        region = cls(name, path, mm, fd, owner=True)
        region._store_u64(_H_TOTAL, mem_size)
        region._store_u64(_H_CURSOR, REGION_HEADER_SIZE)
        region._store_u64(_H_HEAD, 0)
        region._store_u64(_H_TAIL, 0)
        region._store_u64(_H_COUNTER, 0)
        region._store_u64(_H_INCARNATION, secrets.randbits(64) | 1)
        region._store_u64(_H_FLAGS, _FLAG_DEBUG if debug else 0)
        region._store_u64(_H_MAGIC, REGION_MAGIC)  # last: marks header valid
        return region

    @classmethod
    def open(cls, name: str) -> "Region":
        path = shm_dir() / name
        try:
            fd = os.open(path, os.O_RDWR)
        except FileNotFoundError:
            raise RegionNotFoundError(f"no region named {name!r}") from None
        size = os.fstat(fd).st_size
        if size < REGION_HEADER_SIZE:
            os.close(fd)
            raise CorruptRegionError(f"region {name!r} too small ({size} bytes)")
        mm = mmap.mmap(fd, size)
        region = cls(name, path, mm, fd, owner=False)
        if region._load_u64(_H_MAGIC) != REGION_MAGIC:
            region.close()
            raise CorruptRegionError(f"region {name!r}: bad region magic")
        if REGION_HEADER_SIZE + region.total_bytes != size:
            region.close()
            raise CorruptRegionError(f"region {name!r}: size mismatch")
        return region

    def close(self, unlink: bool = False) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._mm.close()
        except BufferError:
            # Live payload views keep the mapping pinned; the OS reclaims it
            # when they are garbage collected.
            pass
        os.close(self._fd)
        if unlink:
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close(unlink=self.owner)

    # -- header accessors -------------------------------------------------------

    def _load_u32(self, off: int) -> int:
        return atomics.load_u32(self._base + off)

    def _store_u32(self, off: int, value: int) -> None:
        atomics.store_u32(self._base + off, value)

    def _load_u64(self, off: int) -> int:
        return atomics.load_u64(self._base + off)

    def _store_u64(self, off: int, value: int) -> None:
        atomics.store_u64(self._base + off, value)

    @property
    def total_bytes(self) -> int:
        return self._load_u64(_H_TOTAL)

    @property
    def debug(self) -> bool:
        return bool(self._load_u64(_H_FLAGS) & _FLAG_DEBUG)

    @property
    def data_start(self) -> int:
        return REGION_HEADER_SIZE

    @property
    def data_end(self) -> int:
        return REGION_HEADER_SIZE + self.total_bytes

    # -- introspection ------------------------------------------------------------

    def live_blocks(self) -> list[BlockInfo]:
        """Blocks on the list, head (oldest) to tail."""
        out = []
        off = self._load_u64(_H_HEAD)
        while off:
            out.append(BlockInfo(
                offset=off,
                magic=self._load_u64(off + _B_MAGIC),
                refcount=self._load_u32(off + _B_REFCOUNT),
                payload_bytes=self._load_u64(off + _B_PAYLOAD),
            ))
            off = self._load_u64(off + _B_NEXT)
        return out

    def _block_span(self, off: int) -> int:
        return BLOCK_HEADER_SIZE + _align8(self._load_u64(off + _B_PAYLOAD))

    # -- allocation ----------------------------------------------------------------

    def _require_owner(self):
        if not self.owner:
            raise ShmError("only the owning publisher may allocate or reclaim")

    def _next_magic(self) -> int:
        incarnation = self._load_u64(_H_INCARNATION)
        while True:
            counter = atomics.fetch_add_u64(self._base + _H_COUNTER, 1) + 1
            magic = (incarnation ^ counter) & (2**64 - 1)
            if magic:
                return magic

    def _find_spot(self, needed: int) -> int | None:
        live = sorted(b.offset for b in self.live_blocks())
        if not live:
            return self.data_start if self.data_start + needed <= self.data_end else None
        intervals = []
        prev_end = self.data_start
        for off in live:
            if off > prev_end:
                intervals.append((prev_end, off))
            prev_end = off + self._block_span(off)
        if prev_end < self.data_end:
            intervals.append((prev_end, self.data_end))
        cursor = self._load_u64(_H_CURSOR)
        # first fit at-or-after the cursor, then wrapped gaps from their start
        for s, e in intervals:
            start = max(s, cursor)
            if start < e and e - start >= needed:
                return start
        for s, e in intervals:
            if e - s >= needed:
                return s
        return None

    def allocate(self, payload_bytes: int, policy: Policy) -> BlockHandle:
        """Place a new block, reclaiming per ``policy`` on pressure.  Raises
        ``OversizeError`` if the payload can never fit and
        ``AllocationExhaustedError`` when the policy gives up."""
        self._require_owner()
        if payload_bytes < 0:
            raise ValueError("negative payload size")
        needed = BLOCK_HEADER_SIZE + _align8(payload_bytes)
        if needed > self.total_bytes:
            raise OversizeError(
                f"payload {payload_bytes}B needs {needed}B, region holds "
                f"{self.total_bytes}B")

        spot = self._find_spot(needed)
        if spot is None:
            if policy.kind == "worst_effort":
                # Never free past a block that is still in use: newer blocks
                # behind it will be consumed later; the new message loses.
                self.reclaim_pass(stop_at_referenced=True)
                spot = self._find_spot(needed)
            elif policy.kind == "best_effort":
                while spot is None and self.reclaim_pass() > 0:
                    spot = self._find_spot(needed)
            else:
                for _ in range(policy.max_attempts):
                    self.reclaim_pass()
                    spot = self._find_spot(needed)
                    if spot is not None:
                        break
        if spot is None:
            raise AllocationExhaustedError(
                f"no room for {payload_bytes}B payload under {policy.kind}")

        magic = self._next_magic()
        tail = self._load_u64(_H_TAIL)
        self._store_u64(spot + _B_PAYLOAD, payload_bytes)
        self._store_u64(spot + _B_PREV, tail)
        self._store_u64(spot + _B_NEXT, 0)
        self._store_u32(spot + _B_REFCOUNT, 1)  # the publisher's own handle
        self._store_u64(spot + _B_MAGIC, magic)  # last: block becomes attachable
        if tail:
            self._store_u64(tail + _B_NEXT, spot)
        else:
            self._store_u64(_H_HEAD, spot)
        self._store_u64(_H_TAIL, spot)
        self._store_u64(_H_CURSOR, spot + needed)

        handle = BlockHandle(self, spot, magic, payload_bytes)
        if self.debug:
            handle.payload[:] = bytes(payload_bytes)
        return handle

    def _unlink(self, off: int) -> None:
        prev = self._load_u64(off + _B_PREV)
        nxt = self._load_u64(off + _B_NEXT)
        if prev:
            self._store_u64(prev + _B_NEXT, nxt)
        else:
            self._store_u64(_H_HEAD, nxt)
        if nxt:
            self._store_u64(nxt + _B_PREV, prev)
        else:
            self._store_u64(_H_TAIL, prev)

    def reclaim_pass(self, *, stop_at_referenced: bool = False) -> int:
        """One head-to-tail sweep freeing refcount-0 blocks.  Returns the
        number freed.  With ``stop_at_referenced`` the sweep ends at the
        first block still in use (worst-effort semantics)."""
        self._require_owner()
        freed = 0
        off = self._load_u64(_H_HEAD)
        while off:
            nxt = self._load_u64(off + _B_NEXT)
            if self._load_u32(off + _B_REFCOUNT) == 0:
                magic = self._load_u64(off + _B_MAGIC)
                self._store_u64(off + _B_MAGIC, 0)
                if self._load_u32(off + _B_REFCOUNT) != 0:
                    # an attacher won the race; the block stays live
                    self._store_u64(off + _B_MAGIC, magic)
                    if stop_at_referenced:
                        break
                else:
                    self._unlink(off)
                    if self.debug:
                        start = off + BLOCK_HEADER_SIZE
                        size = self._load_u64(off + _B_PAYLOAD)
                        self._mm[start:start + size] = bytes([POISON_BYTE]) * size
                    freed += 1
            elif stop_at_referenced:
                break
            off = nxt
        return freed

    # -- attach / release -----------------------------------------------------------

    def attach(self, block_offset: int, expected_magic: int) -> BlockHandle:
        """Validate and pin a published block.  Raises ``StaleBlockError``
        if the message was reclaimed (or its slot reused) first."""
        if (block_offset % 8 or block_offset < self.data_start
                or block_offset + BLOCK_HEADER_SIZE > self.data_end):
            raise OutOfBoundsError(f"block offset {block_offset} out of range")
        if expected_magic == 0:
            raise StaleBlockError("zero magic can never match a live block")
        base = self._base + block_offset
        if atomics.load_u64(base + _B_MAGIC) != expected_magic:
            raise StaleBlockError(f"block at {block_offset} is gone")
        atomics.fetch_add_u32(base + _B_REFCOUNT, 1)
        if atomics.load_u64(base + _B_MAGIC) != expected_magic:
            # reclaimed between validation and increment; undo and report
            atomics.fetch_sub_u32(base + _B_REFCOUNT, 1)
            raise StaleBlockError(f"block at {block_offset} reclaimed mid-attach")
        payload_bytes = atomics.load_u64(base + _B_PAYLOAD)
        if block_offset + BLOCK_HEADER_SIZE + payload_bytes > self.data_end:
            atomics.fetch_sub_u32(base + _B_REFCOUNT, 1)
            raise CorruptRegionError(
                f"block at {block_offset} claims {payload_bytes}B payload")
        return BlockHandle(self, block_offset, expected_magic, payload_bytes)


def region_create(name: str, mem_size: int, *, debug: bool = False) -> Region:
    return Region.create(name, mem_size, debug=debug)


def region_open(name: str) -> Region:
    return Region.open(name)


def allocate(region: Region, payload_bytes: int, policy: Policy) -> BlockHandle:
    return region.allocate(payload_bytes, policy)


def attach(region: Region, block_offset: int, expected_magic: int) -> BlockHandle:
    return region.attach(block_offset, expected_magic)


def release(handle: BlockHandle) -> None:
    """Drop one reference.  The block is never freed here; a later failing
    allocation reclaims it."""
    if handle._released:
        if handle.region.debug:
            raise DoubleReleaseError(
                f"block at {handle.offset} released twice")
        return
    handle._released = True
    old = atomics.fetch_sub_u32(
        handle.region._base + handle.offset + _B_REFCOUNT, 1)
    if old == 0 and handle.region.debug:
        raise DoubleReleaseError(
            f"refcount underflow at block {handle.offset}")


def reclaim_pass(region: Region) -> int:
    return region.reclaim_pass()
