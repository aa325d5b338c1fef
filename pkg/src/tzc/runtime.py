"""Node / Publisher / Subscriber API.

Publishing is allocate-then-write: declare the element counts of the
message's data arrays, ``allocate()`` a shared-memory block (which turns
those fields into writable views), fill the views in place, then
``publish()``.  Only the control image crosses the socket; the publisher's
own block reference is dropped at publish time, so a message survives
exactly as long as subscribers hold it.

Subscribing looks like ROS: register a callback and spin.  Each delivered
envelope is validated against its block (a reclaimed block counts as a
stale loss, not an error), decoded into a message whose data arrays are
read-only views into shared memory, and handed to the callback; the view is
released when the callback returns, so keep a copy if the data must outlive
it.

Two transports share this API: the zero-copy shared-memory path and a
full-copy baseline (``transport="copy"``) that serializes the whole message
into the envelope, used for comparison benchmarks.
"""

from __future__ import annotations

import hashlib
import re
import time
import uuid as uuidlib
from typing import Callable

import numpy as np

from . import shm, transport as transport_mod
from .errors import (
    AllocationExhaustedError,
    ConfigurationError,
    CorruptRegionError,
    MessageStateError,
    OutOfBoundsError,
    RegionNotFoundError,
    StaleBlockError,
    TzcError,
    WireError,
)
from .schema import (
    ClassificationPlan,
    MessageSchema,
    Msg,
    classify,
    get_path,
    iter_data_instances,
    length_bearing_steps,
    new_message,
    plan_layout,
    set_path,
    Part,
)
from .shm import MEDIUM_EFFORT, Policy, parse_policy
from .wire import (
    ControlEnvelope,
    decode_control,
    encode_control,
    encode_envelope,
    full_deserialize,
    full_serialize,
)

UNALLOCATED = "UNALLOCATED"
ALLOCATED = "ALLOCATED"
PUBLISHED = "PUBLISHED"

_PATH_PART = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)((?:\[\d+\])*)$")


def _parse_field_path(path) -> tuple:
    """``"channels[0].values"`` -> ``("channels", 0, "values")``."""
    if isinstance(path, tuple):
        return path
    out: list = []
    for part in path.split("."):
        m = _PATH_PART.match(part)
        if not m:
            raise ConfigurationError(f"bad field path {path!r}")
        out.append(m.group(1))
        for idx in re.findall(r"\[(\d+)\]", m.group(2)):
            out.append(int(idx))
    return tuple(out)


class OutboundMessage:
    """A message being staged for publication.

    ``msg`` starts as a default-constructed value.  Set control fields
    directly; declare data-array element counts with ``resize`` while
    UNALLOCATED, and write array contents through the views that
    ``allocate`` installs.
    """

    def __init__(self, publisher: "Publisher"):
        self._pub = publisher
        self.msg = new_message(publisher.schema)
        self.state = UNALLOCATED
        self._declared: dict[tuple, int] = {}
        self._views: list[np.ndarray] = []
        self._handle: shm.BlockHandle | None = None
        self._layout = None

    def resize(self, path, count: int) -> None:
        """Declare the element count of one data-array instance, e.g.
        ``resize("points", 100)`` or ``resize("channels[0].values", 64)``."""
        if self.state != UNALLOCATED:
            raise MessageStateError("lengths are frozen once allocated")
        if count < 0:
            raise ConfigurationError("negative element count")
        self._declared[_parse_field_path(path)] = count

    def _lengths(self, msg: Msg, plan: ClassificationPlan, prefix: tuple,
                 seen: set) -> list:
        out = []
        for step in length_bearing_steps(plan):
            ipath = prefix + step.path
            if step.part is Part.DATA:
                if ipath in self._declared:
                    seen.add(ipath)
                    out.append(self._declared[ipath])
                else:
                    value = get_path(msg, step.path)
                    out.append(len(value) if value is not None else 0)
            else:
                elems = get_path(msg, step.path)
                out.append([
                    self._lengths(e, step.sub_plan, ipath + (i,), seen)
                    for i, e in enumerate(elems)])
        return out

    def allocate(self) -> bool:
        """Bind the data part.  Returns False when the region is exhausted
        under the publisher's policy (the caller decides what to do);
        impossible requests (oversize, bad paths) raise."""
        if self.state != UNALLOCATED:
            raise MessageStateError(f"allocate in state {self.state}")
        plan = self._pub.plan
        seen: set = set()
        lengths = self._lengths(self.msg, plan, (), seen)
        unknown = set(self._declared) - seen
        if unknown:
            raise ConfigurationError(
                f"resize paths do not name data arrays: "
                f"{sorted(map(str, unknown))}")
        layout = plan_layout(plan, lengths)

        if self._pub.region is None:  # full-copy baseline: plain heap arrays
            for (step, ipath, count) in iter_data_instances(plan, lengths):
                arr = np.zeros(count, dtype=step.dtype)
                self._views.append(arr)
                set_path(self.msg, ipath, arr)
            self.state = ALLOCATED
            return True

        try:
            handle = self._pub.region.allocate(
                layout.total_payload_bytes, self._pub.policy)
        except AllocationExhaustedError:
            return False
        payload = handle.payload
        for (step, ipath, count), seg in zip(
                iter_data_instances(plan, lengths), layout.segments):
            arr = np.frombuffer(payload, dtype=step.dtype, count=count,
                                offset=seg.offset)
            self._views.append(arr)
            set_path(self.msg, ipath, arr)
        self._handle = handle
        self._layout = layout
        self.state = ALLOCATED
        return True


class Publisher:
    """One topic endpoint backed by one owned shared-memory region."""

    def __init__(self, topic: str, schema: MessageSchema, mem_size: int,
                 policy: Policy | str = None, transport: str = "tzc",
                 debug: bool = False):
        if isinstance(policy, str):
            policy = parse_policy(policy)
        self.topic = topic
        self.schema = schema
        self.plan = classify(schema)
        self.policy = policy if policy is not None else MEDIUM_EFFORT()
        self.transport = transport
        self.uuid = uuidlib.uuid4().hex[:12]
        self.sequence = 0
        if transport == "tzc":
            topic_hash = hashlib.sha1(topic.encode()).hexdigest()[:8]
            self.region = shm.Region.create(
                f"tzc.{topic_hash}.{self.uuid}", mem_size, debug=debug)
        elif transport == "copy":
            self.region = None
        else:
            raise ConfigurationError(f"unknown transport {transport!r}")
        try:
            self.endpoint = transport_mod.listen(topic, self.uuid)
        except TzcError:
            if self.region is not None:
                self.region.close(unlink=True)
            raise
        self._closed = False

    def new_message(self) -> OutboundMessage:
        return OutboundMessage(self)

    def wait_for_subscribers(self, count: int, timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            self.endpoint.service()
            if self.endpoint.connection_count >= count:
                return True
            time.sleep(0.01)
        return False

    def publish(self, om: OutboundMessage) -> None:
        """Broadcast the control part.  No data-part byte is copied or
        serialized; the publisher's block reference is dropped here."""
        if om.state != ALLOCATED:
            raise MessageStateError(f"publish in state {om.state}")
        if om._pub is not self:
            raise ConfigurationError("message belongs to another publisher")
        if self.region is None:
            control = full_serialize(om.msg, self.schema)
            env = ControlEnvelope(self.topic, self.sequence, "", 0, 0, 0,
                                  control)
        else:
            control = encode_control(om.msg, self.plan)
            env = ControlEnvelope(
                self.topic, self.sequence, self.region.name,
                om._handle.offset, om._handle.magic,
                om._layout.total_payload_bytes, control)
        self.endpoint.broadcast(encode_envelope(env))
        if om._handle is not None:
            om._handle.release()
        for arr in om._views:
            arr.flags.writeable = False
        om.state = PUBLISHED
        self.sequence += 1

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.endpoint.close()
        if self.region is not None:
            self.region.close(unlink=True)


class Subscriber:
    """Topic subscription delivering validated messages to one callback."""

    def __init__(self, topic: str, schema: MessageSchema,
                 callback: Callable[[Msg], None],
                 rescan_interval: float = 1.0, ident: int | None = None):
        self.topic = topic
        self.schema = schema
        self.plan = classify(schema)
        self.callback = callback
        self.link = transport_mod.SubscriberLink(
            topic, rescan_interval=rescan_interval, ident=ident)
        self.counters = {"delivered": 0, "stale": 0, "decode_error": 0,
                         "callback_error": 0}
        self._regions: dict[str, shm.Region] = {}

    def _region(self, name: str) -> shm.Region:
        region = self._regions.get(name)
        if region is None:
            region = shm.Region.open(name)
            self._regions[name] = region
        return region

    def _handle_envelope(self, env: ControlEnvelope) -> bool:
        """Returns True when the callback ran."""
        if env.region_name == "":
            try:
                msg = full_deserialize(env.control, self.schema)
            except WireError:
                self.counters["decode_error"] += 1
                return False
            return self._invoke(msg)
        try:
            region = self._region(env.region_name)
        except (RegionNotFoundError, CorruptRegionError):
            # publisher vanished and took the region with it
            self.counters["stale"] += 1
            return False
        try:
            handle = region.attach(env.block_offset, env.message_magic)
        except StaleBlockError:
            self.counters["stale"] += 1
            return False
        except (OutOfBoundsError, CorruptRegionError):
            self.counters["decode_error"] += 1
            return False
        try:
            view = handle.payload.toreadonly()
            if len(view) != env.payload_bytes:
                self.counters["decode_error"] += 1
                return False
            try:
                msg = decode_control(env.control, self.plan, view)
            except (WireError, TzcError):
                self.counters["decode_error"] += 1
                return False
            return self._invoke(msg)
        finally:
            handle.release()

    def _invoke(self, msg: Msg) -> bool:
        self.counters["delivered"] += 1
        try:
            self.callback(msg)
        except Exception:
            self.counters["callback_error"] += 1
        return True

    def close(self) -> None:
        self.link.close()
        for region in self._regions.values():
            region.close()
        self._regions.clear()


class Node:
    """Owns publishers and subscribers; drive subscriptions with ``spin``.
    Confine a node (and everything it owns) to one thread."""

    def __init__(self, name: str = ""):
        self.name = name
        self.publishers: list[Publisher] = []
        self.subscribers: list[Subscriber] = []

    def advertise(self, topic: str, schema: MessageSchema, mem_size: int,
                  policy: Policy | str = None, transport: str = "tzc",
                  debug: bool = False) -> Publisher:
        pub = Publisher(topic, schema, mem_size, policy=policy,
                        transport=transport, debug=debug)
        self.publishers.append(pub)
        return pub

    def subscribe(self, topic: str, schema: MessageSchema,
                  callback: Callable[[Msg], None],
                  rescan_interval: float = 1.0,
                  ident: int | None = None) -> Subscriber:
        sub = Subscriber(topic, schema, callback,
                         rescan_interval=rescan_interval, ident=ident)
        self.subscribers.append(sub)
        return sub

    def spin_once(self, timeout: float = 0.0) -> int:
        """Wait up to ``timeout`` for traffic, dispatch everything that
        arrived, and return the number of callbacks invoked."""
        deadline = time.monotonic() + timeout
        handled = 0
        for sub in self.subscribers:
            budget = max(0.0, deadline - time.monotonic()) if handled == 0 else 0.0
            for env in sub.link.poll_wait(budget):
                handled += bool(sub._handle_envelope(env))
        return handled

    def spin(self) -> None:
        while True:
            self.spin_once(0.1)

    def close(self) -> None:
        for pub in self.publishers:
            pub.close()
        for sub in self.subscribers:
            sub.close()
        self.publishers.clear()
        self.subscribers.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
