"""Per-agent in-memory knowledge graph with schema-checked writes.

Every write goes through :meth:`Store.insert`, which validates the new
thing completely before touching any internal state, so a rejected insert
leaves the store exactly as it was.  Stores are append-only: the mission
records new versions of an object's representation instead of mutating
old ones.
"""

from __future__ import annotations

import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, Sequence, Union

from .ontology import SchemaDef, SchemaError, UnknownTypeError, load_mission_schema

if TYPE_CHECKING:
    from .scenario import Scenario

Value = Union[str, float, bool, datetime]


class StoreError(Exception):
    """Base class for rejected writes and bad queries."""


class UnknownThingTypeError(StoreError):
    pass


class UnownedAttributeError(StoreError):
    pass


class ValueKindError(StoreError):
    pass


class IllegalRolePlayerError(StoreError):
    pass


class DanglingReferenceError(StoreError):
    pass


class PatternError(StoreError):
    pass


class CorruptSnapshotError(StoreError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class SchemaMismatchError(StoreError):
    pass


@dataclass(frozen=True)
class ThingInstance:
    id: int
    type_name: str
    attributes: Mapping[str, Value] = field(default_factory=dict)
    role_players: Mapping[str, tuple[int, ...]] = field(default_factory=dict)


_EPOCH = datetime(1, 1, 1)


def quantize_time(value: datetime) -> datetime:
    """Floor a timestamp to the store's 10 ms resolution."""
    return value.replace(microsecond=value.microsecond - value.microsecond % 10_000)


def coerce_value(schema: SchemaDef, attribute: str, value: object) -> Value:
    """Check ``value`` against the attribute's value kind; return the stored form."""
    kind = schema.value_kind(attribute)
    if kind == "string" and isinstance(value, str):
        return value
    if kind == "boolean" and isinstance(value, bool):
        return value
    if kind == "double" and isinstance(value, (int, float)) and not isinstance(value, bool):
        value = float(value)
        if math.isnan(value):
            raise ValueKindError(f"{attribute}: NaN is not storable")
        return value
    if kind == "datetime" and isinstance(value, datetime):
        if value.tzinfo is not None:
            raise ValueKindError(f"{attribute}: timestamps must be naive")
        return quantize_time(value)
    raise ValueKindError(f"{attribute} expects {kind}, got {type(value).__name__}")


# -- patterns -----------------------------------------------------------------


@dataclass(frozen=True)
class Isa:
    var: str
    type_name: str


@dataclass(frozen=True)
class HasValue:
    var: str
    attribute: str
    value: Value


@dataclass(frozen=True)
class HasRange:
    var: str
    attribute: str
    low: float
    high: float


@dataclass(frozen=True)
class HasVar:
    var: str
    attribute: str
    value_var: str


@dataclass(frozen=True)
class Role:
    relation_var: str
    role: str
    player_var: str


Clause = Union[Isa, HasValue, HasRange, HasVar, Role]


@dataclass(frozen=True)
class Pattern:
    clauses: tuple[Clause, ...]

    def __init__(self, clauses: Iterable[Clause] = ()):
        object.__setattr__(self, "clauses", tuple(clauses))

    @property
    def thing_vars(self) -> list[str]:
        out: list[str] = []
        for c in self.clauses:
            names = (c.relation_var, c.player_var) if isinstance(c, Role) else (c.var,)
            for v in names:
                if v not in out:
                    out.append(v)
        return out

    @property
    def value_vars(self) -> list[str]:
        out: list[str] = []
        for c in self.clauses:
            if isinstance(c, HasVar) and c.value_var not in out:
                out.append(c.value_var)
        return out

    @property
    def variables(self) -> list[str]:
        return self.thing_vars + self.value_vars

    def check(self, schema: SchemaDef) -> None:
        bound = set()
        for c in self.clauses:
            if isinstance(c, Isa):
                bound.add(c.var)
            elif isinstance(c, Role):
                bound.update((c.relation_var, c.player_var))
        thing_vars = set(self.thing_vars)
        for c in self.clauses:
            if isinstance(c, (HasValue, HasRange, HasVar)):
                if c.var not in bound:
                    raise PatternError(f"variable {c.var} is not bound by an isa or role clause")
                if c.attribute not in schema.attribute_types:
                    raise PatternError(f"unknown attribute {c.attribute!r}")
            if isinstance(c, Isa):
                try:
                    kind = schema.kind_of(c.type_name)
                except UnknownTypeError:
                    raise PatternError(f"unknown type {c.type_name!r}") from None
                if kind == "attribute":
                    raise PatternError(f"{c.type_name!r} is an attribute type")
            if isinstance(c, HasValue):
                try:
                    coerce_value(schema, c.attribute, c.value)
                except ValueKindError as exc:
                    raise PatternError(str(exc)) from None
            if isinstance(c, HasRange):
                if schema.value_kind(c.attribute) != "double":
                    raise PatternError(f"range predicate on non-double {c.attribute!r}")
            if isinstance(c, HasVar) and c.value_var in thing_vars:
                raise PatternError(f"{c.value_var} used both as thing and value variable")


# -- store ----------------------------------------------------------------------


class Store:
    """Typed knowledge graph for one agent."""

    def __init__(self, schema: SchemaDef | None = None):
        self.schema = schema if schema is not None else load_mission_schema()
        self._things: dict[int, ThingInstance] = {}
        self._next_id = 1
        self._by_type: dict[str, list[int]] = defaultdict(list)
        self._by_attr: dict[tuple[str, type, Value], list[int]] = defaultdict(list)
        self._by_player: dict[int, list[tuple[int, str]]] = defaultdict(list)

    def __len__(self) -> int:
        return len(self._things)

    def __iter__(self) -> Iterator[ThingInstance]:
        return iter(self._things.values())

    def __contains__(self, thing_id: int) -> bool:
        return thing_id in self._things

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Store):
            return NotImplemented
        return (self.schema.digest == other.schema.digest
                and self._things == other._things and self._next_id == other._next_id)

    @property
    def next_id(self) -> int:
        return self._next_id

    def get(self, thing_id: int) -> ThingInstance:
        try:
            return self._things[thing_id]
        except KeyError:
            raise DanglingReferenceError(f"no thing with id {thing_id}") from None

    def ids_of_type(self, type_name: str) -> list[int]:
        """Ids of every thing whose type is ``type_name`` or a subtype of it."""
        try:
            types = self.schema.descendants(type_name)
        except UnknownTypeError:
            raise UnknownThingTypeError(f"unknown type {type_name!r}") from None
        return sorted(i for t in types for i in self._by_type.get(t, ()))

    def find(self, attribute: str, value: Value) -> list[int]:
        value = coerce_value(self.schema, attribute, value)
        return sorted(self._by_attr.get((attribute, type(value), value), ()))

    def relations_of(self, player_id: int) -> list[tuple[int, str]]:
        """(relation id, role) pairs in which ``player_id`` plays a role."""
        return list(self._by_player.get(player_id, ()))

    # -- writes -----------------------------------------------------------------

    def _build(self, thing_id: int, type_name: str, attributes: Mapping[str, object] | None,
               role_players: Mapping[str, Sequence[int]] | None) -> ThingInstance:
        schema = self.schema
        try:
            kind = schema.kind_of(type_name)
        except UnknownTypeError:
            raise UnknownThingTypeError(f"unknown type {type_name!r}") from None
        if kind not in ("entity", "relation") or type_name in ("entity", "relation"):
            raise UnknownThingTypeError(f"{type_name!r} cannot be instantiated")

        owned = schema.owned_attributes(type_name)
        attrs: dict[str, Value] = {}
        for name in sorted(attributes or {}):
            if name not in owned:
                raise UnownedAttributeError(f"{type_name} does not own {name!r}")
            attrs[name] = coerce_value(schema, name, attributes[name])

        players: dict[str, tuple[int, ...]] = {}
        if kind == "entity":
            if role_players:
                raise IllegalRolePlayerError(f"entity {type_name} cannot have role players")
        else:
            roles = schema.roles(type_name)
            if not role_players:
                raise IllegalRolePlayerError(f"relation {type_name} needs at least one role player")
            for role in sorted(role_players):
                if role not in roles:
                    raise IllegalRolePlayerError(f"{type_name} has no role {role!r}")
                ids = tuple(role_players[role])
                if not ids:
                    raise IllegalRolePlayerError(f"role {role!r} has no players")
                for pid in ids:
                    if isinstance(pid, bool) or not isinstance(pid, int):
                        raise DanglingReferenceError(f"role {role!r}: {pid!r} is not a thing id")
                    player = self._things.get(pid)
                    if player is None:
                        raise DanglingReferenceError(f"role {role!r}: no thing with id {pid}")
                    if not any(schema.descendants(p) & {player.type_name} for p in roles[role]):
                        raise IllegalRolePlayerError(
                            f"{player.type_name} may not play {role!r} in {type_name}")
                players[role] = ids
        return ThingInstance(thing_id, type_name, attrs, players)

    def _index(self, thing: ThingInstance) -> None:
        self._things[thing.id] = thing
        self._by_type[thing.type_name].append(thing.id)
        for name, value in thing.attributes.items():
            self._by_attr[(name, type(value), value)].append(thing.id)
        for role, ids in thing.role_players.items():
            for pid in ids:
                self._by_player[pid].append((thing.id, role))

    def insert(self, type_name: str, attributes: Mapping[str, object] | None = None,
               role_players: Mapping[str, Sequence[int]] | None = None) -> int:
        thing = self._build(self._next_id, type_name, attributes, role_players)
        self._index(thing)
        self._next_id += 1
        return thing.id

    def _discard_since(self, first_id: int) -> None:
        """Drop things with id >= ``first_id``; used to abandon a failed batch."""
        for tid in sorted((i for i in self._things if i >= first_id), reverse=True):
            thing = self._things.pop(tid)
            self._by_type[thing.type_name].remove(tid)
            if not self._by_type[thing.type_name]:
                del self._by_type[thing.type_name]
            for name, value in thing.attributes.items():
                key = (name, type(value), value)
                self._by_attr[key].remove(tid)
                if not self._by_attr[key]:
                    del self._by_attr[key]
            for role, ids in thing.role_players.items():
                for pid in ids:
                    self._by_player[pid].remove((tid, role))
                    if not self._by_player[pid]:
                        del self._by_player[pid]
        self._next_id = min(self._next_id, first_id)

    def validate(self) -> list[str]:
        """Re-check every stored thing against the schema; empty when conformant."""
        problems = []
        shadow = Store(self.schema)
        for thing in sorted(self._things.values(), key=lambda t: t.id):
            try:
                rebuilt = shadow._build(thing.id, thing.type_name, thing.attributes, thing.role_players)
            except (StoreError, SchemaError) as exc:
                problems.append(f"#{thing.id}: {exc}")
                continue
            if rebuilt != thing:
                problems.append(f"#{thing.id}: stored form differs from schema-checked form")
            shadow._index(rebuilt)
        return problems

    # -- reads ------------------------------------------------------------------

    def match(self, pattern: Pattern) -> list[dict[str, object]]:
        pattern.check(self.schema)
        return _Matcher(self, pattern).run()

    def snapshot(self) -> bytes:
        return _encode_snapshot(self)


def binding_key(pattern: Pattern, binding: Mapping[str, object]) -> tuple:
    """Sort key for bindings: thing ids in variable order, then values."""
    ids = tuple(binding[v] for v in pattern.thing_vars)
    values = tuple((type(binding[v]).__name__, binding[v]) for v in pattern.value_vars)
    return ids + values


class _Matcher:
    def __init__(self, store: Store, pattern: Pattern):
        self.store = store
        self.pattern = pattern
        self.things = store._things
        self.domains: dict[str, list[int] | None] = {v: None for v in pattern.thing_vars}
        self.roles = [c for c in pattern.clauses if isinstance(c, Role)]
        self.unary: dict[str, list[Clause]] = defaultdict(list)
        self.value_links: dict[str, list[HasVar]] = defaultdict(list)
        for c in pattern.clauses:
            if isinstance(c, HasVar):
                self.value_links[c.var].append(c)
            elif not isinstance(c, Role):
                self.unary[c.var].append(c)

    def _domain(self, var: str) -> list[int]:
        store = self.store
        dom: set[int] | None = None
        for c in self.unary[var]:
            if isinstance(c, Isa):
                ids = set(store.ids_of_type(c.type_name))
            elif isinstance(c, HasValue):
                ids = set(store.find(c.attribute, c.value))
            else:
                ids = None
            if ids is not None:
                dom = ids if dom is None else dom & ids
        if dom is None:
            dom = set(self.things)
        for c in self.unary[var]:
            if isinstance(c, HasRange):
                dom = {i for i in dom if self._in_range(self.things[i], c)}
        return sorted(dom)

    @staticmethod
    def _in_range(thing: ThingInstance, c: HasRange) -> bool:
        v = thing.attributes.get(c.attribute)
        return isinstance(v, float) and c.low <= v <= c.high

    def _order(self) -> list[str]:
        remaining = list(self.pattern.thing_vars)
        order: list[str] = []
        linked = defaultdict(set)
        for c in self.roles:
            linked[c.relation_var].add(c.player_var)
            linked[c.player_var].add(c.relation_var)
        while remaining:
            connected = [v for v in remaining if linked[v] & set(order)]
            pool = connected or remaining
            best = min(pool, key=lambda v: (len(self.domains[v]), remaining.index(v)))
            order.append(best)
            remaining.remove(best)
        return order

    def run(self) -> list[dict[str, object]]:
        for v in self.domains:
            self.domains[v] = self._domain(v)
        if any(not d for d in self.domains.values()):
            return []
        order = self._order()
        results: list[dict[str, object]] = []
        self._search(order, 0, {}, {}, results)
        results.sort(key=lambda b: binding_key(self.pattern, b))
        return results

    def _candidates(self, var: str, bound: dict[str, int]) -> Iterable[int]:
        cands: set[int] | None = None
        for c in self.roles:
            if c.relation_var == var and c.player_var in bound:
                ids = {r for r, role in self.store._by_player.get(bound[c.player_var], ())
                       if role == c.role}
            elif c.player_var == var and c.relation_var in bound:
                ids = set(self.things[bound[c.relation_var]].role_players.get(c.role, ()))
            else:
                continue
            cands = ids if cands is None else cands & ids
        if cands is None:
            return self.domains[var]
        allowed = set(self.domains[var])
        return sorted(cands & allowed)

    def _consistent(self, var: str, bound: dict[str, int]) -> bool:
        for c in self.roles:
            if c.relation_var in bound and c.player_var in bound and var in (c.relation_var, c.player_var):
                if bound[c.player_var] not in self.things[bound[c.relation_var]].role_players.get(c.role, ()):
                    return False
        return True

    def _search(self, order, depth, bound, values, results) -> None:
        if depth == len(order):
            out: dict[str, object] = dict(bound)
            out.update((k, v[1]) for k, v in values.items())
            results.append(out)
            return
        var = order[depth]
        for tid in self._candidates(var, bound):
            bound[var] = tid
            if self._consistent(var, bound):
                added = self._bind_values(var, tid, values)
                if added is not None:
                    self._search(order, depth + 1, bound, values, results)
                    for k in added:
                        del values[k]
            del bound[var]

    def _bind_values(self, var: str, tid: int, values: dict) -> list[str] | None:
        added: list[str] = []
        attrs = self.things[tid].attributes
        for c in self.value_links[var]:
            if c.attribute not in attrs:
                break
            v = attrs[c.attribute]
            key = (type(v), v)
            if c.value_var in values:
                if values[c.value_var] != key:
                    break
            else:
                values[c.value_var] = key
                added.append(c.value_var)
        else:
            return added
        for k in added:
            del values[k]
        return None


# -- module-level operations ----------------------------------------------------


def insert_thing(store: Store, type_name: str, attributes: Mapping[str, object] | None = None,
                 role_players: Mapping[str, Sequence[int]] | None = None) -> int:
    return store.insert(type_name, attributes, role_players)


def match(store: Store, pattern: Pattern) -> list[dict[str, object]]:
    return store.match(pattern)


def snapshot(store: Store) -> bytes:
    return store.snapshot()


# -- snapshot format --------------------------------------------------------------
#
#   "DKB1" | sha256(schema) 32 bytes | u64 next_id | u32 count | records
#   record := u32 length | u64 id | str type | u16 n_attrs | attr* | u16 n_roles | role*
#   attr   := str name | u8 kind | value
#   role   := str name | u32 n | u64 id*
#   str    := u32 length | utf-8 bytes
# All integers little-endian.

MAGIC = b"DKB1"
_KIND_CODES = {str: 0, float: 1, datetime: 2, bool: 3}


def _pack_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    out += struct.pack("<I", len(raw))
    out += raw


def _encode_snapshot(store: Store) -> bytes:
    out = bytearray(MAGIC)
    out += bytes.fromhex(store.schema.digest)
    out += struct.pack("<QI", store._next_id, len(store._things))
    for tid in sorted(store._things):
        thing = store._things[tid]
        rec = bytearray(struct.pack("<Q", thing.id))
        _pack_str(rec, thing.type_name)
        rec += struct.pack("<H", len(thing.attributes))
        for name in sorted(thing.attributes):
            value = thing.attributes[name]
            _pack_str(rec, name)
            code = _KIND_CODES[type(value)]
            rec += struct.pack("<B", code)
            if code == 0:
                _pack_str(rec, value)
            elif code == 1:
                rec += struct.pack("<d", value)
            elif code == 2:
                rec += struct.pack("<q", (value - _EPOCH) // timedelta(microseconds=1))
            else:
                rec += struct.pack("<B", int(value))
        rec += struct.pack("<H", len(thing.role_players))
        for role in sorted(thing.role_players):
            ids = thing.role_players[role]
            _pack_str(rec, role)
            rec += struct.pack(f"<I{len(ids)}Q", len(ids), *ids)
        out += struct.pack("<I", len(rec))
        out += rec
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise CorruptSnapshotError("truncated snapshot", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        at = self.pos
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptSnapshotError("invalid utf-8 string", at) from None


def restore(data: bytes, schema: SchemaDef | None = None) -> Store:
    """Rebuild a store from :func:`snapshot` output.

    ``schema`` defaults to the bundled mission schema; a snapshot taken
    under a different schema is rejected.
    """
    schema = schema if schema is not None else load_mission_schema()
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise CorruptSnapshotError("bad magic", 0)
    digest = bytes(r.take(32)).hex()
    if digest != schema.digest:
        raise SchemaMismatchError("snapshot was written under a different schema")
    next_id, count = r.unpack("<QI")
    store = Store(schema)
    last_id = 0
    for _ in range(count):
        rec_start = r.pos
        (length,) = r.unpack("<I")
        end = r.pos + length
        if end > len(r.data):
            raise CorruptSnapshotError("truncated record", rec_start)
        (tid,) = r.unpack("<Q")
        type_name = r.string()
        attrs: dict[str, object] = {}
        (n_attrs,) = r.unpack("<H")
        for _ in range(n_attrs):
            name = r.string()
            at = r.pos
            (code,) = r.unpack("<B")
            if code == 0:
                attrs[name] = r.string()
            elif code == 1:
                (attrs[name],) = r.unpack("<d")
            elif code == 2:
                (micros,) = r.unpack("<q")
                try:
                    attrs[name] = _EPOCH + timedelta(microseconds=micros)
                except OverflowError:
                    raise CorruptSnapshotError("timestamp out of range", at) from None
            elif code == 3:
                (flag,) = r.unpack("<B")
                attrs[name] = bool(flag)
            else:
                raise CorruptSnapshotError(f"unknown value kind {code}", at)
        players: dict[str, list[int]] = {}
        (n_roles,) = r.unpack("<H")
        for _ in range(n_roles):
            role = r.string()
            (n,) = r.unpack("<I")
            players[role] = list(r.unpack(f"<{n}Q"))
        if r.pos != end:
            raise CorruptSnapshotError("record length mismatch", rec_start)
        if tid <= last_id or tid >= next_id:
            raise CorruptSnapshotError(f"id {tid} out of order", rec_start)
        last_id = tid
        try:
            thing = store._build(tid, type_name, attrs, players or None)
        except (StoreError, SchemaError) as exc:
            raise CorruptSnapshotError(f"record violates schema ({exc})", rec_start) from None
        store._index(thing)
    if r.pos != len(r.data):
        raise CorruptSnapshotError("trailing bytes", r.pos)
    store._next_id = next_id
    return store


# -- a-priori loading ---------------------------------------------------------------


def load_a_priori(store: Store, scenario: Scenario) -> int:
    """Load mission context, class documents and known objects into ``store``.

    Returns the number of things inserted.
    """
    if len(store):
        raise StoreError("a-priori information must be loaded into an empty store")
    start = len(store)
    try:
        mission = store.insert("surveillance_mission", {
            "name": scenario.name, "description": scenario.objective})
        areas: dict[str, int] = {}
        for area in scenario.areas:
            areas[area.name] = store.insert("operational_area", {
                "area_name": area.name, "boundary": area.boundary_text()})
        for agent in scenario.agents:
            ugv = store.insert("ugv", {"name": agent.agent_id, "team_role": agent.team})
            store.insert("participates_in", role_players={"participant": [ugv], "process": [mission]})

        docs: dict[str, int] = {}
        for gc in scenario.classes:
            docs[gc.general_class] = store.insert("general_class_document", {
                "general_class": gc.general_class, "obj_name": gc.label,
                "description": gc.description})

        for known in scenario.known_objects:
            gc = scenario.class_by_name(known.general_class)
            oid = store.insert(known.general_class, {
                "name": known.name, "general_class": known.general_class,
                "obj_name": gc.label, "a_priori": True})
            x, y, z = known.position
            pos = store.insert("position_quality", {"x": x, "y": y, "z": z})
            store.insert("quality_relation", role_players={"bearer": [oid], "quality": [pos]})
            size = store.insert("size_quality", {"height": known.height, "width": known.width})
            store.insert("quality_relation", role_players={"bearer": [oid], "quality": [size]})
            store.insert("assigned_location", role_players={"located": [oid], "location": [areas[known.area]]})
            store.insert("class_description", role_players={
                "content": [docs[known.general_class]], "subject": [oid]})
    except (StoreError, SchemaError, KeyError) as exc:
        raise StoreError(f"scenario does not fit the schema: {exc}") from exc
    return len(store) - start
