"""Discrete Bayesian networks with exact inference by variable elimination.

Factors hold dense numpy tables whose axes follow the factor's scope, so a
factor over ``(A, B)`` with ``|A| = 2, |B| = 3`` has shape ``(2, 3)`` and is
stored row-major.  :func:`brute_force_posterior` enumerates the full joint
directly from the CPTs and shares no code with the elimination path; it is
the reference the tests hold :func:`posterior` to.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

CPT_TOLERANCE = 1e-9
MAX_JOINT = 2 ** 24


class BayesError(Exception):
    pass


class CardinalityError(BayesError):
    pass


class NotInScopeError(BayesError):
    pass


class QueryInEvidenceError(BayesError):
    pass


class ImpossibleEvidenceError(BayesError):
    """The evidence has probability zero under the network."""


class JointTooLargeError(BayesError):
    pass


class NetworkFileError(BayesError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    states: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if len(self.states) < 2:
            raise BayesError(f"{self.name} needs at least two states")
        if len(set(self.states)) != len(self.states):
            raise BayesError(f"{self.name} has duplicate state labels")

    @property
    def card(self) -> int:
        return len(self.states)

    def index(self, state: str) -> int:
        try:
            return self.states.index(state)
        except ValueError:
            raise BayesError(f"{state!r} is not a state of {self.name}") from None


@dataclass(frozen=True, eq=False)
class Factor:
    scope: tuple[Variable, ...]
    values: np.ndarray

    def __post_init__(self):
        scope = tuple(self.scope)
        values = np.asarray(self.values, dtype=float).reshape([v.card for v in scope])
        if len({v.name for v in scope}) != len(scope):
            raise BayesError("factor scope repeats a variable")
        if (values < 0).any():
            raise BayesError("factor entries must be non-negative")
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "values", values)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.scope)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Factor):
            return NotImplemented
        return self.scope == other.scope and np.array_equal(self.values, other.values)

    def allclose(self, other: Factor, atol: float = 1e-12) -> bool:
        if set(self.names) != set(other.names):
            return False
        aligned = other.values.transpose([other.names.index(n) for n in self.names])
        return np.allclose(self.values, aligned, rtol=0.0, atol=atol)


def unit_factor() -> Factor:
    """The constant-1 factor over the empty scope."""
    return Factor((), np.ones(()))


def factor_product(a: Factor, b: Factor) -> Factor:
    shared = {v.name: v for v in a.scope}
    for v in b.scope:
        if v.name in shared and shared[v.name] != v:
            raise CardinalityError(f"variable {v.name} differs between factors")
    scope = a.scope + tuple(v for v in b.scope if v.name not in shared)
    names = [v.name for v in scope]

    def expand(f: Factor) -> np.ndarray:
        # move f's axes into scope order, then add singleton axes for the rest
        order = sorted(range(len(f.scope)), key=lambda i: names.index(f.scope[i].name))
        vals = f.values.transpose(order)
        present = {f.scope[i].name for i in order}
        shape = [v.card if v.name in present else 1 for v in scope]
        return vals.reshape(shape)

    return Factor(scope, expand(a) * expand(b))


def sum_out(f: Factor, var: Variable | str) -> Factor:
    name = var if isinstance(var, str) else var.name
    if name not in f.names:
        raise NotInScopeError(f"{name} is not in the factor scope {f.names}")
    axis = f.names.index(name)
    return Factor(f.scope[:axis] + f.scope[axis + 1:], f.values.sum(axis=axis))


def reduce_factor(f: Factor, evidence: Mapping[str, str]) -> Factor:
    """Restrict ``f`` to the observed states, dropping the observed axes."""
    index = []
    scope = []
    for v in f.scope:
        if v.name in evidence:
            index.append(v.index(evidence[v.name]))
        else:
            index.append(slice(None))
            scope.append(v)
    return Factor(tuple(scope), f.values[tuple(index)])


@dataclass(frozen=True, eq=False)
class BayesNet:
    variables: tuple[Variable, ...]
    parents: dict[str, tuple[str, ...]]
    cpts: dict[str, Factor] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        by_name = {v.name: v for v in self.variables}
        if len(by_name) != len(self.variables):
            raise BayesError("duplicate variable names")
        for child, ps in self.parents.items():
            for p in ps:
                if p not in by_name:
                    raise BayesError(f"{child} has unknown parent {p}")
        self.topological_order()  # rejects cycles
        for v in self.variables:
            cpt = self.cpts.get(v.name)
            if cpt is None:
                raise BayesError(f"missing CPT for {v.name}")
            expected = (v.name,) + tuple(self.parents.get(v.name, ()))
            if cpt.names != expected:
                raise BayesError(f"CPT for {v.name} has scope {cpt.names}, expected {expected}")
            sums = cpt.values.sum(axis=0)
            if not np.all(np.abs(sums - 1.0) <= CPT_TOLERANCE):
                raise BayesError(f"CPT for {v.name} has a row that does not sum to 1")

    def variable(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise BayesError(f"unknown variable {name!r}")

    def topological_order(self) -> list[str]:
        names = [v.name for v in self.variables]
        placed: list[str] = []
        done: set[str] = set()
        while len(placed) < len(names):
            ready = [n for n in names if n not in done
                     and all(p in done for p in self.parents.get(n, ()))]
            if not ready:
                raise BayesError("parent graph has a cycle")
            placed.extend(ready)
            done.update(ready)
        return placed

    @classmethod
    def from_tables(cls, variables: Sequence[Variable], parents: Mapping[str, Sequence[str]],
                    tables: Mapping[str, object]) -> BayesNet:
        """Build a network from child-major CPT arrays (child axis first)."""
        by_name = {v.name: v for v in variables}
        parents = {k: tuple(v) for k, v in parents.items()}
        cpts = {}
        for v in variables:
            scope = (v,) + tuple(by_name[p] for p in parents.get(v.name, ()))
            cpts[v.name] = Factor(scope, np.asarray(tables[v.name], dtype=float))
        return cls(tuple(variables), parents, cpts)


Evidence = Mapping[str, str]


def _check_evidence(net: BayesNet, query: str, evidence: Evidence) -> None:
    net.variable(query)
    if query in evidence:
        raise QueryInEvidenceError(f"{query} is both queried and observed")
    for name, state in evidence.items():
        net.variable(name).index(state)


def elimination_order(net: BayesNet, query: str, evidence: Evidence) -> list[str]:
    """Greedy min-fill order over the hidden variables; ties go to the smaller name."""
    _check_evidence(net, query, evidence)
    hidden = {v.name for v in net.variables} - {query} - set(evidence)
    adjacency: dict[str, set[str]] = {v.name: set() for v in net.variables if v.name not in evidence}
    for cpt in net.cpts.values():
        scope = [n for n in cpt.names if n not in evidence]
        for a, b in itertools.combinations(scope, 2):
            adjacency[a].add(b)
            adjacency[b].add(a)

    def fill(v: str) -> int:
        nbrs = sorted(adjacency[v])
        return sum(1 for a, b in itertools.combinations(nbrs, 2) if b not in adjacency[a])

    order = []
    while hidden:
        best = min(hidden, key=lambda v: (fill(v), v))
        nbrs = adjacency.pop(best)
        for a in nbrs:
            adjacency[a].discard(best)
            adjacency[a].update(nbrs - {a})
        hidden.remove(best)
        order.append(best)
    return order


def posterior(net: BayesNet, query: str, evidence: Evidence | None = None,
              order: Sequence[str] | None = None) -> dict[str, float]:
    """Exact P(query | evidence) by variable elimination."""
    evidence = dict(evidence or {})
    if order is None:
        order = elimination_order(net, query, evidence)
    else:
        _check_evidence(net, query, evidence)
        expected = {v.name for v in net.variables} - {query} - set(evidence)
        if set(order) != expected or len(order) != len(expected):
            raise BayesError("elimination order must list every hidden variable once")

    factors = [reduce_factor(net.cpts[v.name], evidence) for v in net.variables]
    for name in order:
        involved = [f for f in factors if name in f.names]
        factors = [f for f in factors if name not in f.names]
        prod = unit_factor()
        for f in involved:
            prod = factor_product(prod, f)
        factors.append(sum_out(prod, name))

    result = unit_factor()
    for f in factors:
        result = factor_product(result, f)
    qvar = net.variable(query)
    if result.names != (query,):
        result = factor_product(Factor((qvar,), np.ones(qvar.card)), result)
    z = result.values.sum()
    if not z > 0:
        raise ImpossibleEvidenceError(f"evidence {evidence} has zero probability")
    probs = result.values / z
    return {s: float(p) for s, p in zip(qvar.states, probs)}


def brute_force_posterior(net: BayesNet, query: str, evidence: Evidence | None = None) -> dict[str, float]:
    """P(query | evidence) by summing the full joint, one assignment at a time."""
    evidence = dict(evidence or {})
    _check_evidence(net, query, evidence)
    size = math.prod(v.card for v in net.variables)
    if size > MAX_JOINT:
        raise JointTooLargeError(f"joint has {size} entries (limit {MAX_JOINT})")

    names = [v.name for v in net.variables]
    pos = {n: i for i, n in enumerate(names)}
    fixed = {pos[n]: net.variable(n).index(s) for n, s in evidence.items()}
    qi = pos[query]
    tables = [(net.cpts[n].values, [pos[n]] + [pos[p] for p in net.parents.get(n, ())]) for n in names]
    ranges = [(fixed[i],) if i in fixed else range(v.card) for i, v in enumerate(net.variables)]

    totals = [0.0] * net.variable(query).card
    for assignment in itertools.product(*ranges):
        p = 1.0
        for table, axes in tables:
            p *= table[tuple(assignment[a] for a in axes)]
            if p == 0.0:
                break
        totals[assignment[qi]] += p
    z = sum(totals)
    if not z > 0:
        raise ImpossibleEvidenceError(f"evidence {evidence} has zero probability")
    return {s: t / z for s, t in zip(net.variable(query).states, totals)}


# -- network files ----------------------------------------------------------------
#
# YAML mapping of network name -> {variables, parents, cpts}.  CPT rows are
# keyed by the comma-joined parent states in parent order ("" for roots) and
# list probabilities in the child's state order.


def parse_networks(text: str) -> dict[str, BayesNet]:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise NetworkFileError(f"not valid YAML: {exc}") from None
    if not isinstance(doc, dict) or not doc:
        raise NetworkFileError("expected a mapping of network names")
    return {name: _parse_network(name, body) for name, body in doc.items()}


def _parse_network(name: str, body: object) -> BayesNet:
    where = f"{name}"
    if not isinstance(body, dict):
        raise NetworkFileError(f"{where}: expected a mapping")
    try:
        raw_vars = body["variables"]
        raw_parents = body.get("parents") or {}
        raw_cpts = body["cpts"]
    except KeyError as exc:
        raise NetworkFileError(f"{where}: missing {exc.args[0]!r}") from None
    try:
        variables = [Variable(str(n), tuple(str(s) for s in states)) for n, states in raw_vars.items()]
    except (AttributeError, TypeError, BayesError) as exc:
        raise NetworkFileError(f"{where}.variables: {exc}") from None
    by_name = {v.name: v for v in variables}
    parents = {str(k): tuple(str(p) for p in v) for k, v in raw_parents.items()}
    tables = {}
    for v in variables:
        ps = [by_name.get(p) for p in parents.get(v.name, ())]
        if None in ps:
            raise NetworkFileError(f"{where}.parents.{v.name}: unknown parent")
        rows = raw_cpts.get(v.name)
        if not isinstance(rows, dict):
            raise NetworkFileError(f"{where}.cpts.{v.name}: missing or not a mapping")
        table = np.zeros([v.card] + [p.card for p in ps])
        configs = list(itertools.product(*[p.states for p in ps]))
        for config in configs:
            key = ",".join(config)
            row = rows.get(key)
            if row is None:
                raise NetworkFileError(f"{where}.cpts.{v.name}: no row for {key!r}")
            if len(row) != v.card:
                raise NetworkFileError(f"{where}.cpts.{v.name}[{key!r}]: expected {v.card} entries")
            idx = tuple(p.index(s) for p, s in zip(ps, config))
            table[(slice(None),) + idx] = [float(x) for x in row]
        extra = set(map(str, rows)) - {",".join(c) for c in configs}
        if extra:
            raise NetworkFileError(f"{where}.cpts.{v.name}: unexpected rows {sorted(extra)}")
        tables[v.name] = table
    try:
        return BayesNet.from_tables(variables, parents, tables)
    except BayesError as exc:
        raise NetworkFileError(f"{where}: {exc}") from None


def network_text(path: str | None = None) -> str:
    if path is None:
        return resources.files("dcmd.data").joinpath("networks.yaml").read_text("utf-8")
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def load_networks(path: str | None = None) -> tuple[dict[str, BayesNet], str]:
    """Load networks from ``path`` (default: bundled file); also return its sha256."""
    text = network_text(path)
    return parse_networks(text), hashlib.sha256(text.encode("utf-8")).hexdigest()


def random_network(rng: np.random.Generator, n_vars: int, max_parents: int = 3,
                   n_states: Iterable[int] | None = None, zero_prob: float = 0.0) -> BayesNet:
    """A random DAG over ``v0..v{n-1}`` with random normalised CPTs.

    Variables are created in topological order; each picks up to
    ``max_parents`` parents among earlier variables.  With ``zero_prob`` > 0
    some CPT entries are forced to zero before normalisation.
    """
    cards = list(n_states) if n_states is not None else [2] * n_vars
    variables = [Variable(f"v{i}", tuple(f"s{k}" for k in range(cards[i]))) for i in range(n_vars)]
    parents: dict[str, tuple[str, ...]] = {}
    tables = {}
    for i, v in enumerate(variables):
        k = int(rng.integers(0, min(i, max_parents) + 1))
        ps = sorted(rng.choice(i, size=k, replace=False).tolist()) if k else []
        parents[v.name] = tuple(f"v{j}" for j in ps)
        shape = [v.card] + [cards[j] for j in ps]
        t = rng.random(shape) + 1e-3
        if zero_prob:
            t = np.where(rng.random(shape) < zero_prob, 0.0, t)
            t[0] = np.where(t.sum(axis=0) == 0, 1.0, t[0])
        tables[v.name] = t / t.sum(axis=0, keepdims=True)
    # shuffle declaration order so nothing relies on topological listing
    perm = rng.permutation(n_vars)
    return BayesNet.from_tables([variables[i] for i in perm], parents, tables)
