"""Layered type system for the on-board knowledge graph.

Types are declared in a small line-oriented language::

    attribute name value string ;
    entity artifact sub material_entity layer(mid) ;
    entity artifact_model sub artifact, owns name, owns general_class layer(domain) ;
    relation quality_relation sub relation, relates bearer:artifact_model,
        relates quality:quality layer(mid) ;

Three roots are built in (``entity``, ``relation``, ``attribute``) and are
never declared.  Every declared entity or relation carries a layer:
``upper`` (foundational categories), ``mid`` (common-core concepts and
domain-neutral relations) or ``domain`` (mission vocabulary).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

ROOTS = ("entity", "relation", "attribute")
LAYERS = ("upper", "mid", "domain")
VALUE_KINDS = ("string", "double", "datetime", "boolean")


class SchemaError(Exception):
    """Base class for schema parse and lookup failures."""


class SchemaSyntaxError(SchemaError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column


class DuplicateTypeError(SchemaError):
    pass


class UnknownParentError(SchemaError):
    pass


class SchemaCycleError(SchemaError):
    pass


class UnknownTypeError(SchemaError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class TypeDecl:
    name: str
    layer: str = "domain"
    owns: frozenset[str] = frozenset()


@dataclass(frozen=True)
class RelationDecl:
    name: str
    # (role, allowed player types) in declaration order
    roles: tuple[tuple[str, tuple[str, ...]], ...] = ()
    layer: str = "domain"
    owns: frozenset[str] = frozenset()


@dataclass(frozen=True)
class AttributeDecl:
    name: str
    value_kind: str


@dataclass(frozen=True)
class Violation:
    kind: str
    type_name: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.type_name}: {self.detail}"


@dataclass(frozen=True, eq=True)
class SchemaDef:
    entity_types: dict[str, TypeDecl] = field(default_factory=dict)
    relation_types: dict[str, RelationDecl] = field(default_factory=dict)
    attribute_types: dict[str, AttributeDecl] = field(default_factory=dict)
    # child -> parent; attributes always point at the attribute root
    subtype_edges: dict[str, str] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash(self.digest)

    # -- lookups -----------------------------------------------------------

    @cached_property
    def names(self) -> frozenset[str]:
        return frozenset(ROOTS) | frozenset(self.entity_types) | frozenset(
            self.relation_types) | frozenset(self.attribute_types)

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(print_schema(self).encode()).hexdigest()

    def kind_of(self, name: str) -> str:
        if name in ROOTS:
            return name
        if name in self.entity_types:
            return "entity"
        if name in self.relation_types:
            return "relation"
        if name in self.attribute_types:
            return "attribute"
        raise UnknownTypeError(f"unknown type {name!r}")

    def ancestors(self, name: str) -> list[str]:
        """Return ``name`` followed by its supertypes up to its root."""
        self.kind_of(name)
        chain = [name]
        seen = {name}
        while chain[-1] in self.subtype_edges:
            parent = self.subtype_edges[chain[-1]]
            if parent in seen:
                raise SchemaCycleError(f"subtype cycle through {parent!r}")
            seen.add(parent)
            chain.append(parent)
        return chain

    @cached_property
    def _children(self) -> dict[str, list[str]]:
        children: dict[str, list[str]] = {}
        for child, parent in self.subtype_edges.items():
            children.setdefault(parent, []).append(child)
        return children

    def descendants(self, name: str) -> frozenset[str]:
        """All subtypes of ``name`` including itself."""
        self.kind_of(name)
        out = {name}
        stack = [name]
        while stack:
            for child in self._children.get(stack.pop(), ()):
                if child not in out:
                    out.add(child)
                    stack.append(child)
        return frozenset(out)

    def owned_attributes(self, name: str) -> frozenset[str]:
        owned: set[str] = set()
        for t in self.ancestors(name):
            decl = self.entity_types.get(t) or self.relation_types.get(t)
            if decl is not None:
                owned |= decl.owns
        return frozenset(owned)

    def roles(self, name: str) -> dict[str, frozenset[str]]:
        """Effective roles of a relation type, inherited roles included."""
        if self.kind_of(name) != "relation":
            raise SchemaError(f"{name!r} is not a relation type")
        out: dict[str, set[str]] = {}
        for t in reversed(self.ancestors(name)):
            decl = self.relation_types.get(t)
            if decl is None:
                continue
            for role, players in decl.roles:
                out.setdefault(role, set()).update(players)
        return {role: frozenset(players) for role, players in out.items()}

    def value_kind(self, attribute: str) -> str:
        try:
            return self.attribute_types[attribute].value_kind
        except KeyError:
            raise UnknownTypeError(f"unknown attribute {attribute!r}") from None

    def layer_of(self, name: str) -> str | None:
        decl = self.entity_types.get(name) or self.relation_types.get(name)
        return decl.layer if decl is not None else None


def is_subtype(schema: SchemaDef, child: str, parent: str) -> bool:
    schema.kind_of(parent)
    return parent in schema.ancestors(child)


# -- parsing ------------------------------------------------------------------

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>#[^\n]*)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_\-]*)|(?P<punct>[,;:()])"
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    out: list[_Tok] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise SchemaSyntaxError(f"unexpected character {text[pos]!r}",
                                    line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind in ("ident", "punct"):
            out.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    out.append(_Tok("eof", "", line, pos - line_start + 1))
    return out


class _SchemaParser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, expected: str) -> SchemaSyntaxError:
        tok = self.peek()
        found = tok.text or "end of input"
        return SchemaSyntaxError(f"expected {expected}, found {found!r}", tok.line, tok.col)

    def expect(self, text: str) -> _Tok:
        if self.peek().text != text:
            raise self.fail(repr(text))
        return self.next()

    def ident(self, what: str = "identifier") -> _Tok:
        if self.peek().kind != "ident":
            raise self.fail(what)
        return self.next()

    def parse(self):
        decls = []
        while self.peek().kind != "eof":
            decls.append(self.declaration())
        return decls

    def declaration(self):
        head = self.ident("'entity', 'relation' or 'attribute'")
        if head.text == "attribute":
            name = self.ident("attribute name")
            self.expect("value")
            kind = self.ident("value kind")
            if kind.text not in VALUE_KINDS:
                raise SchemaSyntaxError(f"unknown value kind {kind.text!r}", kind.line, kind.col)
            self.expect(";")
            return ("attribute", name, None, kind.text, [], [], None)
        if head.text not in ("entity", "relation"):
            raise SchemaSyntaxError(f"unknown declaration {head.text!r}", head.line, head.col)
        name = self.ident("type name")
        self.expect("sub")
        parent = self.ident("parent type")
        owns: list[str] = []
        roles: list[tuple[str, str]] = []
        layer = "domain"
        while True:
            tok = self.peek()
            if tok.text == ",":
                self.next()
                kw = self.ident("'owns' or 'relates'")
                if kw.text == "owns":
                    owns.append(self.ident("attribute name").text)
                elif kw.text == "relates" and head.text == "relation":
                    role = self.ident("role name").text
                    self.expect(":")
                    roles.append((role, self.ident("player type").text))
                else:
                    raise SchemaSyntaxError(f"unexpected {kw.text!r}", kw.line, kw.col)
            elif tok.text == "layer":
                self.next()
                self.expect("(")
                lt = self.ident("layer name")
                if lt.text not in LAYERS:
                    raise SchemaSyntaxError(f"unknown layer {lt.text!r}", lt.line, lt.col)
                layer = lt.text
                self.expect(")")
                self.expect(";")
                break
            elif tok.text == ";":
                self.next()
                break
            else:
                raise self.fail("',', 'layer' or ';'")
        return (head.text, name, parent, None, owns, roles, layer)


def parse_schema(text: str) -> SchemaDef:
    entities: dict[str, TypeDecl] = {}
    relations: dict[str, RelationDecl] = {}
    attributes: dict[str, AttributeDecl] = {}
    edges: dict[str, str] = {}
    where: dict[str, _Tok] = {}
    parent_at: dict[str, _Tok] = {}

    for kind, name_tok, parent_tok, value_kind, owns, roles, layer in _SchemaParser(text).parse():
        name = name_tok.text
        if name in ROOTS or name in where:
            raise DuplicateTypeError(
                f"duplicate type {name!r} at line {name_tok.line}, column {name_tok.col}")
        where[name] = name_tok
        if kind == "attribute":
            attributes[name] = AttributeDecl(name, value_kind)
            edges[name] = "attribute"
            continue
        edges[name] = parent_tok.text
        parent_at[name] = parent_tok
        if kind == "entity":
            entities[name] = TypeDecl(name, layer, frozenset(owns))
        else:
            grouped: dict[str, list[str]] = {}
            for role, player in roles:
                grouped.setdefault(role, []).append(player)
            relations[name] = RelationDecl(
                name, tuple((r, tuple(p)) for r, p in grouped.items()), layer, frozenset(owns))

    known = set(ROOTS) | set(where)
    for child, parent in edges.items():
        if parent not in known:
            tok = parent_at[child]
            raise UnknownParentError(
                f"unknown parent {parent!r} of {child!r} at line {tok.line}, column {tok.col}")
    schema = SchemaDef(entities, relations, attributes, edges)
    for name in edges:
        schema.ancestors(name)  # raises on cycles
    return schema


def print_schema(schema: SchemaDef) -> str:
    """Canonical source text; ``parse_schema(print_schema(s)) == s``."""
    lines = []
    for name in sorted(schema.attribute_types):
        lines.append(f"attribute {name} value {schema.attribute_types[name].value_kind} ;")
    for name in sorted(schema.entity_types):
        decl = schema.entity_types[name]
        parts = [f"entity {name} sub {schema.subtype_edges[name]}"]
        parts += [f"owns {a}" for a in sorted(decl.owns)]
        lines.append(", ".join(parts) + f" layer({decl.layer}) ;")
    for name in sorted(schema.relation_types):
        decl = schema.relation_types[name]
        parts = [f"relation {name} sub {schema.subtype_edges[name]}"]
        parts += [f"relates {role}:{p}" for role, players in decl.roles for p in players]
        parts += [f"owns {a}" for a in sorted(decl.owns)]
        lines.append(", ".join(parts) + f" layer({decl.layer}) ;")
    return "\n".join(lines) + ("\n" if lines else "")


def validate_schema(schema: SchemaDef) -> list[Violation]:
    out: list[Violation] = []
    declared = list(schema.entity_types) + list(schema.relation_types) + list(schema.attribute_types)

    seen: set[str] = set()
    for name in declared:
        if name in seen or name in ROOTS:
            out.append(Violation("duplicate-name", name, "name used more than once"))
        seen.add(name)

    for name in declared:
        parent = schema.subtype_edges.get(name)
        if parent is None:
            out.append(Violation("missing-parent", name, "no subtype edge"))
            continue
        if parent not in schema.names:
            out.append(Violation("unknown-parent", name, f"parent {parent!r} is not declared"))
            continue
        try:
            chain = schema.ancestors(name)
        except SchemaCycleError:
            out.append(Violation("subtype-cycle", name, "type is its own ancestor"))
            continue
        if schema.kind_of(chain[-1]) != schema.kind_of(name) or chain[-1] not in ROOTS:
            out.append(Violation("kind-mismatch", name,
                                 f"rooted at {chain[-1]!r} but declared as {schema.kind_of(name)}"))
            continue
        layer = schema.layer_of(name)
        if layer == "domain" and not any(
                schema.layer_of(a) in ("upper", "mid") for a in chain[1:]):
            out.append(Violation("orphan-domain", name, "no upper or mid layer ancestor"))

    for name in list(schema.entity_types) + list(schema.relation_types):
        decl = schema.entity_types.get(name) or schema.relation_types[name]
        if decl.layer not in LAYERS:
            out.append(Violation("bad-layer", name, f"layer {decl.layer!r}"))
        for attr in sorted(decl.owns):
            if attr not in schema.attribute_types:
                out.append(Violation("unknown-attribute", name, f"owns undeclared {attr!r}"))

    for name, decl in schema.relation_types.items():
        try:
            roles = schema.roles(name)
        except SchemaError:
            continue  # already reported as a hierarchy violation
        if not roles:
            out.append(Violation("missing-role", name, "relation declares no roles"))
        for role, players in decl.roles:
            for player in players:
                if player not in schema.names or player == "attribute" or player in schema.attribute_types:
                    out.append(Violation("unknown-player", name,
                                         f"role {role!r} allows unknown type {player!r}"))

    for name, decl in schema.attribute_types.items():
        if decl.value_kind not in VALUE_KINDS:
            out.append(Violation("bad-value-kind", name, f"value kind {decl.value_kind!r}"))
    return out


def load_mission_schema() -> SchemaDef:
    """The bundled mission schema."""
    text = resources.files("dcmd.data").joinpath("mission.schema").read_text("utf-8")
    return parse_schema(text)
