"""DCMD updates: wire format, role-based routing and the in-process bus.

Frame layout (little-endian)::

    magic  "DCMD"        4 bytes
    version              u8   (currently 1)
    payload length       u32
    payload              see _encode_payload

Strings are a u32 byte length followed by UTF-8.  Doubles are IEEE-754
binary64, so values round-trip bit-exactly.  Timestamps are i64 microseconds
since 1970-01-01 (naive, simulated clock).
"""

from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .assessment import AssessmentResult, DetectionRecord, HazardAssessment, represent_assessment
from .graphstore import Store, StoreError

MAGIC = b"DCMD"
VERSION = 1
HEADER = struct.Struct("<4sBI")

KNOWN_OBJECT = "known_object"
NEW_OBJECT = "new_object"
HAZARD = "hazard"
VERIFICATION = "verification"
KINDS = (KNOWN_OBJECT, NEW_OBJECT, HAZARD, VERIFICATION)

RCC = "RCC"
_EPOCH = datetime(1970, 1, 1)


# -- messages ------------------------------------------------------------------------------


@dataclass(frozen=True)
class DcmdObject:
    """One assessed object carried by an update."""

    identity: str
    obj_name: str
    general_class: str
    position: tuple[float, float, float]
    height: float
    width: float
    obj_CL: float
    position_CL: float
    size_CL: float
    posterior: float
    is_known: bool
    is_hazard: bool = False
    hazard_probability: float | None = None
    hazard_status: str = ""

    def __post_init__(self):
        if not 0.0 <= self.posterior <= 1.0:
            raise ValueError(f"posterior must lie in [0, 1], got {self.posterior}")
        if self.hazard_probability is not None and not 0.0 <= self.hazard_probability <= 1.0:
            raise ValueError("hazard probability must lie in [0, 1]")


@dataclass(frozen=True)
class HazardComponent:
    identity: str
    obj_name: str
    position: tuple[float, float, float]


@dataclass(frozen=True)
class HazardInfo:
    identity: str
    obj_name: str
    probability: float
    position: tuple[float, float, float]
    components: tuple[HazardComponent, ...] = ()
    assigned_verifier: str = ""


@dataclass(frozen=True)
class VerificationInfo:
    status: str
    identity: str


@dataclass(frozen=True)
class DcmdUpdate:
    msg_id: str
    source_agent: str
    timestamp: datetime
    kind: str
    event_id: str
    area: str = ""
    objects: tuple[DcmdObject, ...] = ()
    hazard_info: HazardInfo | None = None
    verification_info: VerificationInfo | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown update kind {self.kind!r}")
        if self.kind == HAZARD and self.hazard_info is None:
            raise ValueError("hazard updates need hazard_info")
        if self.kind == VERIFICATION and self.verification_info is None:
            raise ValueError("verification updates need verification_info")


# -- codec -------------------------------------------------------------------------------------


class WireError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class BadMagicError(WireError):
    pass


class TruncatedFrameError(WireError):
    pass


class UnsupportedVersionError(WireError):
    pass


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def pack(self, fmt: str, *values) -> None:
        self.buf += struct.pack("<" + fmt, *values)

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.pack("I", len(raw))
        self.buf += raw

    def vec3(self, v: Sequence[float]) -> None:
        self.pack("3d", *v)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = memoryview(data)
        self.pos = pos
        self.end = len(data) if end is None else end

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        n = struct.calcsize(fmt)
        if self.pos + n > self.end:
            raise TruncatedFrameError("frame truncated", self.pos)
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += n
        return out

    def string(self) -> str:
        at = self.pos
        (n,) = self.unpack("I")
        if self.pos + n > self.end:
            raise TruncatedFrameError("string truncated", at)
        raw = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise WireError("invalid utf-8", at) from None

    def vec3(self) -> tuple[float, float, float]:
        return self.unpack("3d")

    def flag(self) -> bool:
        at = self.pos
        (b,) = self.unpack("B")
        if b > 1:
            raise WireError("invalid boolean byte", at)
        return bool(b)


def _micros(ts: datetime) -> int:
    return (ts - _EPOCH) // timedelta(microseconds=1)


def _encode_payload(u: DcmdUpdate) -> bytes:
    w = _Writer()
    w.string(u.msg_id)
    w.string(u.source_agent)
    w.pack("q", _micros(u.timestamp))
    w.pack("B", KINDS.index(u.kind))
    w.string(u.event_id)
    w.string(u.area)
    w.pack("I", len(u.objects))
    for o in u.objects:
        w.string(o.identity)
        w.string(o.obj_name)
        w.string(o.general_class)
        w.vec3(o.position)
        w.pack("6d", o.height, o.width, o.obj_CL, o.position_CL, o.size_CL, o.posterior)
        flags = o.is_known | (o.is_hazard << 1) | ((o.hazard_probability is not None) << 2)
        w.pack("B", flags)
        if o.hazard_probability is not None:
            w.pack("d", o.hazard_probability)
        w.string(o.hazard_status)
    w.pack("B", u.hazard_info is not None)
    if u.hazard_info is not None:
        h = u.hazard_info
        w.string(h.identity)
        w.string(h.obj_name)
        w.pack("d", h.probability)
        w.vec3(h.position)
        w.string(h.assigned_verifier)
        w.pack("I", len(h.components))
        for c in h.components:
            w.string(c.identity)
            w.string(c.obj_name)
            w.vec3(c.position)
    w.pack("B", u.verification_info is not None)
    if u.verification_info is not None:
        w.string(u.verification_info.status)
        w.string(u.verification_info.identity)
    return bytes(w.buf)


def encode_update(u: DcmdUpdate) -> bytes:
    payload = _encode_payload(u)
    return HEADER.pack(MAGIC, VERSION, len(payload)) + payload


def _decode_payload(r: _Reader) -> DcmdUpdate:
    msg_id = r.string()
    source = r.string()
    (micros,) = r.unpack("q")
    try:
        ts = _EPOCH + timedelta(microseconds=micros)
    except OverflowError:
        raise WireError("timestamp out of range", r.pos - 8) from None
    at = r.pos
    (kind_code,) = r.unpack("B")
    if kind_code >= len(KINDS):
        raise WireError(f"unknown update kind {kind_code}", at)
    event_id = r.string()
    area = r.string()
    (n_obj,) = r.unpack("I")
    objects = []
    for _ in range(n_obj):
        at = r.pos
        identity, obj_name, gclass = r.string(), r.string(), r.string()
        pos = r.vec3()
        height, width, ocl, pcl, scl, post = r.unpack("6d")
        (flags,) = r.unpack("B")
        if flags > 7:
            raise WireError("invalid object flags", r.pos - 1)
        hp = r.unpack("d")[0] if flags & 4 else None
        status = r.string()
        try:
            objects.append(DcmdObject(identity, obj_name, gclass, pos, height, width, ocl, pcl, scl,
                                      post, bool(flags & 1), bool(flags & 2), hp, status))
        except ValueError as exc:
            raise WireError(str(exc), at) from None
    hazard = None
    if r.flag():
        identity, obj_name = r.string(), r.string()
        (prob,) = r.unpack("d")
        pos = r.vec3()
        verifier = r.string()
        (n_comp,) = r.unpack("I")
        comps = tuple(HazardComponent(r.string(), r.string(), r.vec3()) for _ in range(n_comp))
        hazard = HazardInfo(identity, obj_name, prob, pos, comps, verifier)
    verification = None
    if r.flag():
        verification = VerificationInfo(r.string(), r.string())
    try:
        return DcmdUpdate(msg_id, source, ts, KINDS[kind_code], event_id, area, tuple(objects),
                          hazard, verification)
    except ValueError as exc:
        raise WireError(str(exc), r.pos) from None


def read_frame(data: bytes, offset: int = 0) -> tuple[DcmdUpdate, int]:
    """Decode the frame starting at ``offset``; return it and the next offset."""
    if len(data) - offset < HEADER.size:
        if bytes(data[offset:offset + 4]) != MAGIC[:len(data) - offset]:
            raise BadMagicError("bad magic", offset)
        raise TruncatedFrameError("frame header truncated", offset)
    magic, version, length = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise BadMagicError("bad magic", offset)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", offset + 4)
    start = offset + HEADER.size
    if start + length > len(data):
        raise TruncatedFrameError("frame truncated", len(data))
    r = _Reader(data, start, start + length)
    update = _decode_payload(r)
    if r.pos != r.end:
        raise WireError("trailing bytes in frame", r.pos)
    return update, r.end


def decode_update(data: bytes) -> DcmdUpdate:
    update, end = read_frame(data)
    if end != len(data):
        raise WireError("trailing bytes after frame", end)
    return update


def iter_frames(data: bytes) -> Iterable[DcmdUpdate]:
    pos = 0
    while pos < len(data):
        update, pos = read_frame(data, pos)
        yield update


# -- routing --------------------------------------------------------------------------------


@dataclass(frozen=True)
class RoutingPolicy:
    """Update kind -> set of recipient roles.  RCC must always be present."""

    table: Mapping[str, frozenset[str]] = field(default_factory=lambda: {
        KNOWN_OBJECT: frozenset({"Explorer", RCC}),
        NEW_OBJECT: frozenset({"Explorer", "Verifier", RCC}),
        HAZARD: frozenset({"Explorer", "Verifier", RCC}),
        VERIFICATION: frozenset({"Explorer", "Verifier", RCC}),
    })

    def __post_init__(self):
        missing = [k for k in KINDS if k not in self.table]
        if missing:
            raise ValueError(f"routing policy lacks kinds: {', '.join(missing)}")
        for kind, roles in self.table.items():
            if RCC not in roles:
                raise ValueError(f"RCC must receive {kind} updates")


def route(policy: RoutingPolicy, update: DcmdUpdate, roster: Mapping[str, str]) -> list[str]:
    """Recipients of ``update``: agents by id, then RCC; never the source."""
    roles = policy.table[update.kind]
    agents = sorted(a for a, role in roster.items() if role in roles and a != update.source_agent)
    return agents + [RCC]


# -- bus ------------------------------------------------------------------------------------------


class BusClosedError(RuntimeError):
    pass


Handler = Callable[[DcmdUpdate], None]


class Bus:
    """In-process publish/subscribe with per-sender FIFO delivery.

    Messages travel as encoded frames.  :meth:`pump` delivers everything
    queued; which sender goes next is drawn from a seeded generator, so
    cross-sender interleaving is reproducible while each sender's own
    messages always arrive in publish order.
    """

    def __init__(self, roster: Mapping[str, str], policy: RoutingPolicy | None = None, seed: int = 0):
        self.roster = dict(roster)
        self.policy = policy or RoutingPolicy()
        self._rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x0B05])
        self._handlers: dict[str, Handler] = {}
        self._queues: dict[str, deque[tuple[bytes, list[str]]]] = {}
        self._seen: set[tuple[str, str]] = set()
        self._lock = threading.RLock()
        self._closed = False

    def subscribe(self, agent: str, handler: Handler) -> None:
        if agent != RCC and agent not in self.roster:
            raise KeyError(f"agent {agent!r} is not registered")
        self._handlers[agent] = handler

    def publish(self, update: DcmdUpdate) -> list[str]:
        with self._lock:
            if self._closed:
                raise BusClosedError("bus is closed")
            recipients = route(self.policy, update, self.roster)
            self._queues.setdefault(update.source_agent, deque()).append(
                (encode_update(update), recipients))
            return recipients

    def pending(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def pump(self) -> list[tuple[str, DcmdUpdate]]:
        """Deliver queued messages; return (recipient, update) in delivery order."""
        delivered = []
        while True:
            with self._lock:
                senders = sorted(s for s, q in self._queues.items() if q)
                if not senders:
                    return delivered
                sender = senders[int(self._rng.integers(len(senders)))]
                frame, recipients = self._queues[sender].popleft()
            update = decode_update(frame)
            for agent in recipients:
                key = (agent, update.msg_id)
                if key in self._seen:
                    continue
                self._seen.add(key)
                handler = self._handlers.get(agent)
                if handler is not None:
                    handler(update)
                delivered.append((agent, update))

    def close(self) -> None:
        with self._lock:
            self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed


# -- store integration ------------------------------------------------------------------------------


def has_update(store: Store, msg_id: str) -> bool:
    return any(store.get(i).type_name == "representational_information_content"
               for i in store.find("msg_id", msg_id))


def _records(update: DcmdUpdate) -> Iterable[tuple[DetectionRecord, AssessmentResult, str]]:
    for o in update.objects:
        det = DetectionRecord(
            obj_name=o.obj_name, position=o.position, height=o.height, width=o.width,
            obj_CL=o.obj_CL, position_CL=o.position_CL, size_CL=o.size_CL,
            timestamp=update.timestamp, area=update.area, source_agent=update.source_agent,
            event_id=update.event_id)
        hazard = (HazardAssessment(o.is_hazard, o.hazard_probability)
                  if o.hazard_probability is not None else None)
        result = AssessmentResult(o.identity, o.general_class, o.posterior, o.is_known, hazard)
        yield det, result, o.hazard_status


def apply_update(store: Store, update: DcmdUpdate) -> list[int]:
    """Represent ``update`` in ``store``; a repeated msg_id is a no-op.

    All objects are written or none: a failure rolls the store back.
    """
    if has_update(store, update.msg_id):
        return []
    start = store.next_id
    inserted: list[int] = []
    try:
        for det, result, status in _records(update):
            inserted += represent_assessment(store, det, result, msg_id=update.msg_id,
                                             update_kind=update.kind, hazard_status=status or None)
    except Exception:
        store._discard_since(start)
        raise
    return inserted


def update_records(store: Store) -> set[tuple]:
    """The DCMD records held by ``store``, independent of insertion ids."""
    out = set()
    for tid in store.ids_of_type("representational_information_content"):
        attrs = store.get(tid).attributes
        out.add(tuple(sorted((k, v) for k, v in attrs.items())))
    return out
