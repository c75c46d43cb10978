"""A small typed query language over :class:`~dcmd.graphstore.Store`.

Grammar::

    query      := "match" statement+ ( fetch | insert )
    statement  := VAR "isa" TYPE roles? has* ";"
                | VAR roles "isa" TYPE has* ";"
    roles      := "(" ROLE ":" VAR ("," ROLE ":" VAR)* ")"
    has        := "," "has" ATTR ( STRING | NUMBER | "true" | "false" | VAR )
    fetch      := "fetch" VAR ("," VAR)* ";"
    insert     := "insert" statement+

Reads return one row per match binding.  Inserts run once per binding, each
batch all-or-nothing.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime
from typing import Union

from .graphstore import (HasValue, HasVar, Isa, Pattern, Role, Store, StoreError,
                         coerce_value)
from .ontology import SchemaError


class QueryError(Exception):
    pass


class QuerySyntaxError(QueryError):
    def __init__(self, message: str, line: int, column: int, expected: frozenset[str] = frozenset()):
        detail = f"{message} at line {line}, column {column}"
        if expected:
            detail += f" (expected one of: {', '.join(sorted(expected))})"
        super().__init__(detail)
        self.line = line
        self.column = column
        self.expected = expected


class UnboundVariableError(QuerySyntaxError):
    pass


class QueryExecutionError(QueryError):
    pass


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


Literal = Union[str, int, float, bool]


@dataclass(frozen=True)
class Statement:
    var: str
    type_name: str
    roles: tuple[tuple[str, str], ...] = ()
    has: tuple[tuple[str, Union[Literal, Var]], ...] = ()

    @property
    def is_relation(self) -> bool:
        return bool(self.roles)


@dataclass(frozen=True)
class QueryAst:
    kind: str  # "match-read" or "match-insert"
    match: tuple[Statement, ...]
    fetch: tuple[str, ...] = ()
    inserts: tuple[Statement, ...] = ()

    @property
    def pattern(self) -> Pattern:
        return statements_to_pattern(self.match)


@dataclass(frozen=True)
class ResultSet:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]


def statements_to_pattern(statements, schema=None) -> Pattern:
    clauses = []
    for st in statements:
        clauses.append(Isa(st.var, st.type_name))
        for role, player in st.roles:
            clauses.append(Role(st.var, role, player))
        for attr, value in st.has:
            if isinstance(value, Var):
                clauses.append(HasVar(st.var, attr, value.name))
            else:
                if schema is not None:
                    value = _literal_for(schema, attr, value)
                clauses.append(HasValue(st.var, attr, value))
    return Pattern(clauses)


def _literal_for(schema, attr: str, value: Literal):
    """Datetime attributes accept ISO-8601 string literals."""
    if attr in schema.attribute_types and schema.value_kind(attr) == "datetime" and isinstance(value, str):
        try:
            return datetime.fromisoformat(value)
        except ValueError:
            raise QueryExecutionError(f"{attr}: {value!r} is not an ISO-8601 timestamp") from None
    return value


# -- lexer ----------------------------------------------------------------------

_LEX = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<var>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_\-]*)
  | (?P<string>"(?:[^"\\\n]|\\["\\/bfnrt]|\\u[0-9a-fA-F]{4})*")
  | (?P<punct>[,;:()])
""", re.VERBOSE)

KEYWORDS = {"match", "fetch", "insert", "isa", "has", "true", "false"}


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _lex(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _LEX.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            if kind == "ident" and m.group() in KEYWORDS:
                kind = "kw"
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        newlines = m.group().count("\n")
        if newlines:
            line += newlines
            line_start = m.start() + m.group().rindex("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


# -- parser ---------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.toks = _lex(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def error(self, expected: set[str]) -> QuerySyntaxError:
        tok = self.peek()
        found = repr(tok.text) if tok.text else "end of input"
        return QuerySyntaxError(f"unexpected {found}", tok.line, tok.col, frozenset(expected))

    def keyword(self, word: str) -> _Tok:
        tok = self.peek()
        if tok.kind != "kw" or tok.text != word:
            raise self.error({f"'{word}'"})
        return self.advance()

    def punct(self, ch: str) -> _Tok:
        tok = self.peek()
        if tok.kind != "punct" or tok.text != ch:
            raise self.error({f"'{ch}'"})
        return self.advance()

    def take(self, kind: str, label: str) -> _Tok:
        if self.peek().kind != kind:
            raise self.error({label})
        return self.advance()

    def at(self, kind: str, text: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def query(self) -> QueryAst:
        self.keyword("match")
        match = [self.statement()]
        while self.at("var"):
            match.append(self.statement())
        if self.at("kw", "fetch"):
            self.advance()
            names = [self.take("var", "variable").text]
            while self.at("punct", ","):
                self.advance()
                names.append(self.take("var", "variable").text)
            self.punct(";")
            kind, fetch, inserts = "match-read", tuple(names), ()
        elif self.at("kw", "insert"):
            self.advance()
            inserts = [self.statement()]
            while self.at("var"):
                inserts.append(self.statement())
            kind, fetch, inserts = "match-insert", (), tuple(inserts)
        else:
            raise self.error({"variable", "'fetch'", "'insert'"})
        if not self.at("eof"):
            raise self.error({"end of input"})
        return QueryAst(kind, tuple(match), fetch, inserts)

    def statement(self) -> Statement:
        var = self.take("var", "variable").text
        roles: list[tuple[str, str]] = []
        if self.at("punct", "("):
            roles = self.role_list()
        elif not self.at("kw", "isa"):
            raise self.error({"'isa'", "'('"})
        self.keyword("isa")
        type_name = self.take("ident", "type name").text
        # the role list may also trail the type: `$r isa part (whole: $i, ...)`
        if not roles and self.at("punct", "("):
            roles = self.role_list()
        has: list[tuple[str, Union[Literal, Var]]] = []
        while self.at("punct", ","):
            self.advance()
            self.keyword("has")
            attr = self.take("ident", "attribute name").text
            has.append((attr, self.value()))
        if not self.at("punct", ";"):
            raise self.error({"','", "';'"})
        self.advance()
        return Statement(var, type_name, tuple(roles), tuple(has))

    def role_list(self) -> list[tuple[str, str]]:
        self.punct("(")
        roles = []
        while True:
            role = self.take("ident", "role name").text
            self.punct(":")
            roles.append((role, self.take("var", "variable").text))
            if self.at("punct", ")"):
                self.advance()
                return roles
            if not self.at("punct", ","):
                raise self.error({"','", "')'"})
            self.advance()

    def value(self) -> Union[Literal, Var]:
        tok = self.peek()
        if tok.kind == "string":
            self.advance()
            return json.loads(tok.text, strict=False)
        if tok.kind == "number":
            self.advance()
            if re.fullmatch(r"-?\d+", tok.text):
                return int(tok.text)
            return float(tok.text)
        if tok.kind == "kw" and tok.text in ("true", "false"):
            self.advance()
            return tok.text == "true"
        if tok.kind == "var":
            self.advance()
            return Var(tok.text)
        raise self.error({"string", "number", "'true'", "'false'", "variable"})


def _check_variables(ast: QueryAst, text: str) -> None:
    thing_vars: set[str] = set()
    value_vars: set[str] = set()
    for st in ast.match:
        thing_vars.add(st.var)
        thing_vars.update(p for _, p in st.roles)
    for st in ast.match:
        for _, value in st.has:
            if isinstance(value, Var):
                value_vars.add(value.name)
    clash = thing_vars & value_vars
    if clash:
        raise UnboundVariableError(f"{sorted(clash)[0]} is used as both a thing and a value", 1, 1)
    for name in ast.fetch:
        if name not in thing_vars and name not in value_vars:
            raise UnboundVariableError(f"fetched variable {name} is not bound by the match", 1, 1)
    introduced = {st.var for st in ast.inserts}
    seen: set[str] = set()
    for st in ast.inserts:
        if st.var in thing_vars or st.var in value_vars or st.var in seen:
            raise UnboundVariableError(f"insert would rebind {st.var}", 1, 1)
        seen.add(st.var)
        for _, player in st.roles:
            if player not in thing_vars and player not in introduced:
                raise UnboundVariableError(f"unbound variable {player}", 1, 1)
        for _, value in st.has:
            if isinstance(value, Var) and value.name not in value_vars:
                raise UnboundVariableError(f"unbound variable {value.name}", 1, 1)


def parse_query(text: str | bytes) -> QueryAst:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise QuerySyntaxError(f"input is not UTF-8 (byte {exc.start})", 1, 1) from None
    ast = _Parser(text).query()
    _check_variables(ast, text)
    return ast


# -- unparse ----------------------------------------------------------------------


def _render_value(value) -> str:
    if isinstance(value, Var):
        return value.name
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    return repr(value)


def _render_statement(st: Statement) -> str:
    head = st.var
    if st.roles:
        head += " (" + ", ".join(f"{r}: {p}" for r, p in st.roles) + ")"
    parts = [f"{head} isa {st.type_name}"]
    parts += [f"has {a} {_render_value(v)}" for a, v in st.has]
    return ", ".join(parts) + ";"


def unparse(ast: QueryAst) -> str:
    out = ["match"] + [_render_statement(st) for st in ast.match]
    if ast.kind == "match-read":
        out.append("fetch " + ", ".join(ast.fetch) + ";")
    else:
        out.append("insert")
        out += [_render_statement(st) for st in ast.inserts]
    return " ".join(out)


# -- execution --------------------------------------------------------------------


def execute(store: Store, ast: QueryAst | str) -> ResultSet:
    if isinstance(ast, str):
        ast = parse_query(ast)
    try:
        pattern = statements_to_pattern(ast.match, store.schema)
        bindings = store.match(pattern)
    except (StoreError, SchemaError) as exc:
        raise QueryExecutionError(f"match failed: {exc}") from exc

    if ast.kind == "match-read":
        rows = tuple(tuple(b[v] for v in ast.fetch) for b in bindings)
        return ResultSet(ast.fetch, rows)

    columns = tuple(st.var for st in ast.inserts)
    rows = []
    for binding in bindings:
        batch = []
        for st in ast.inserts:
            attrs = {}
            for attr, value in st.has:
                if isinstance(value, Var):
                    value = binding[value.name]
                attrs[attr] = _literal_for(store.schema, attr, value)
            players: dict[str, list] = {}
            for role, player in st.roles:
                players.setdefault(role, []).append(player)
            batch.append((st, attrs, players))
        rows.append(_insert_batch(store, batch, binding))
    return ResultSet(columns, tuple(rows))


def _insert_batch(store: Store, batch, binding) -> tuple[int, ...]:
    created: dict[str, int] = {}
    inserted = []
    start_id = store.next_id
    try:
        for st, attrs, players in batch:
            resolved = {role: [created[p] if p in created else binding[p] for p in ps]
                        for role, ps in players.items()}
            for attr in attrs:
                attrs[attr] = coerce_value(store.schema, attr, attrs[attr]) \
                    if attr in store.schema.attribute_types else attrs[attr]
            tid = store.insert(st.type_name, attrs, resolved or None)
            created[st.var] = tid
            inserted.append(tid)
    except KeyError as exc:
        store._discard_since(start_id)
        raise QueryExecutionError(f"{_render_statement(st)}: variable {exc.args[0]} not yet inserted") from None
    except (StoreError, SchemaError) as exc:
        store._discard_since(start_id)
        raise QueryExecutionError(f"{_render_statement(st)}: {exc}") from exc
    return tuple(inserted)
