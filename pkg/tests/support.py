"""Independent oracles and random generators shared by the tests."""

from __future__ import annotations

import itertools
import math
from datetime import datetime, timedelta

import numpy as np

from dcmd.assessment import DetectionRecord
from dcmd.bayes import BayesNet
from dcmd.graphstore import HasRange, HasValue, HasVar, Isa, Pattern, Role, Store
from dcmd.net import (HAZARD, KINDS, VERIFICATION, DcmdObject, DcmdUpdate, HazardComponent,
                      HazardInfo, VerificationInfo)

PORT_TIME = datetime(2024, 1, 1, 14, 49, 47, 160000)

# obj_name, position, height, width, obj_CL, position_CL, size_CL
PORT_EVENT = [
    ("boat", (0.79, 1.14, 0.11), 0.18, 0.36, 0.94, 0.96, 0.98),
    ("army_maritime", (0.85, 1.09, 0.15), 0.08, 0.05, 0.79, 0.87, 0.95),
    ("army_maritime", (0.69, 1.29, 0.13), 0.08, 0.04, 0.82, 0.96, 0.98),
]


def detection(obj_name, position, height=0.1, width=0.1, cls=(0.9, 0.9, 0.9), *,
              event_id="ev1", area="village_port", agent="dcmdobot3", timestamp=PORT_TIME):
    return DetectionRecord(obj_name, position, height, width, *cls, timestamp=timestamp,
                           area=area, source_agent=agent, event_id=event_id)


def port_event_detections(event_id="dcmdobot3-e002"):
    return [detection(n, p, h, w, (a, b, c), event_id=event_id) for n, p, h, w, a, b, c in PORT_EVENT]


def humvee_event(labels=("humvee", "mounted_weapon", "army_ground"), event_id="dcmdobot3-e004"):
    positions = {"humvee": (4.8, 1.5, 0.1), "mounted_weapon": (4.85, 1.45, 0.16),
                 "army_ground": (4.65, 1.6, 0.1)}
    sizes = {"humvee": (0.12, 0.27), "mounted_weapon": (0.04, 0.08), "army_ground": (0.08, 0.045)}
    return [detection(l, positions[l], *sizes[l], (0.9, 0.92, 0.95), event_id=event_id,
                      area="village_northwest") for l in labels]


# -- Bayesian-network oracle ------------------------------------------------------------------


def joint_table(net: BayesNet) -> tuple[list[str], np.ndarray]:
    """The full joint as a dense array, built cell by cell from the CPTs."""
    names = [v.name for v in net.variables]
    cards = [len(v.states) for v in net.variables]
    joint = np.zeros(cards)
    for idx in itertools.product(*(range(c) for c in cards)):
        assign = dict(zip(names, idx))
        p = 1.0
        for v in net.variables:
            f = net.cpts[v.name]
            p *= f.values[tuple(assign[s.name] for s in f.scope)]
        joint[idx] = p
    return names, joint


def enumerate_posterior(net: BayesNet, query: str, evidence: dict[str, str]) -> dict[str, float]:
    names, joint = joint_table(net)
    index = []
    for n in names:
        var = net.variable(n)
        index.append(var.states.index(evidence[n]) if n in evidence else slice(None))
    sub = joint[tuple(index)]
    kept = [n for n in names if n not in evidence]
    axes = tuple(i for i, n in enumerate(kept) if n != query)
    marg = sub.sum(axis=axes)
    marg = marg / marg.sum()
    return dict(zip(net.variable(query).states, marg.tolist()))


# -- graph-store oracle -------------------------------------------------------------------------


def brute_force_match(store: Store, pattern: Pattern) -> list[dict]:
    """Filter the cartesian product of all things against every clause."""
    things = {t.id: t for t in store}
    tvars = pattern.thing_vars
    schema = store.schema
    out = []
    for combo in itertools.product(sorted(things), repeat=len(tvars)):
        b = dict(zip(tvars, combo))
        values: dict[str, tuple] = {}
        ok = True
        for c in pattern.clauses:
            if isinstance(c, Isa):
                ok = schema.descendants(c.type_name).__contains__(things[b[c.var]].type_name)
            elif isinstance(c, HasValue):
                v = things[b[c.var]].attributes.get(c.attribute)
                want = float(c.value) if isinstance(c.value, int) and not isinstance(c.value, bool) \
                    and schema.value_kind(c.attribute) == "double" else c.value
                ok = v is not None and type(v) is type(want) and v == want
            elif isinstance(c, HasRange):
                v = things[b[c.var]].attributes.get(c.attribute)
                ok = isinstance(v, float) and c.low <= v <= c.high
            elif isinstance(c, HasVar):
                attrs = things[b[c.var]].attributes
                if c.attribute not in attrs:
                    ok = False
                else:
                    key = (type(attrs[c.attribute]), attrs[c.attribute])
                    ok = values.setdefault(c.value_var, key) == key
            elif isinstance(c, Role):
                ok = b[c.player_var] in things[b[c.relation_var]].role_players.get(c.role, ())
            if not ok:
                break
        if ok:
            b.update((k, v[1]) for k, v in values.items())
            out.append(b)
    return out


_NAMES = ["boat", "truck", "civilian", "army_ground", "humvee"]


def random_store(rng: np.random.Generator, n_things: int = 10) -> Store:
    """A small conformant store mixing entities and relations."""
    store = Store()
    models, quals, images, objs = [], [], [], []
    for _ in range(n_things):
        choice = int(rng.integers(6))
        if choice == 0 or not models:
            models.append(store.insert(str(rng.choice(["cargo_truck", "army_ground", "watchtower"])), {
                "name": f"m{int(rng.integers(4))}", "a_priori": bool(rng.integers(2))}))
        elif choice == 1:
            quals.append(store.insert("position_quality", {
                "x": float(rng.integers(3)), "y": float(rng.integers(3)) / 2, "z": 0.0}))
        elif choice == 2:
            images.append(store.insert("processed_image", {"event_id": f"e{int(rng.integers(3))}"}))
        elif choice == 3:
            objs.append(store.insert("processed_image_object", {
                "obj_name": str(rng.choice(_NAMES)), "x": float(rng.integers(3))}))
        elif choice == 4 and quals:
            store.insert("quality_relation", role_players={
                "bearer": [int(rng.choice(models))], "quality": [int(rng.choice(quals))]})
        elif choice == 5 and images and objs:
            store.insert("part", role_players={
                "whole": [int(rng.choice(images))], "component": [int(rng.choice(objs))]})
        else:
            quals.append(store.insert("size_quality", {"height": float(rng.integers(3))}))
    return store


def random_query(rng: np.random.Generator) -> str:
    """A random match-read query over the types used by :func:`random_store`."""
    templates = [
        ['$m isa artifact_model, has name "m{a}";'],
        ["$m isa artifact_model, has name $n;", "$q isa quality;",
         "$r (bearer: $m, quality: $q) isa quality_relation;"],
        ["$p isa position_quality, has x {x};"],
        ["$p isa position_quality, has x $v;", "$o isa processed_image_object, has x $v;"],
        ["$i isa processed_image;", "$o isa processed_image_object, has obj_name \"{n}\";",
         "$r (whole: $i, component: $o) isa part;"],
        ["$m isa {t}, has a_priori {b};"],
        ["$r (bearer: $m, quality: $q) isa quality_relation;", "$m isa entity;", "$q isa entity;"],
        ["$t isa entity;"],
        ["$o isa processed_image_object, has obj_name $n, has x $v;"],
        ["$a isa artifact_model;", "$b isa artifact_model, has name $n;", "$a isa cargo_truck, has name $n;"],
    ]
    parts = templates[int(rng.integers(len(templates)))]
    body = " ".join(parts).format(
        a=int(rng.integers(4)), x=int(rng.integers(3)), n=str(rng.choice(_NAMES)),
        t=str(rng.choice(["artifact_model", "person_model", "cargo_truck"])),
        b=str(bool(rng.integers(2))).lower())
    variables = []
    for tok in body.replace(";", " ").replace(",", " ").replace("(", " ").replace(")", " ").split():
        if tok.startswith("$") and tok not in variables:
            variables.append(tok)
    k = int(rng.integers(1, len(variables) + 1))
    fetch = [variables[i] for i in sorted(rng.choice(len(variables), size=k, replace=False))]
    return f"match {body} fetch {', '.join(fetch)};"


# -- wire updates ---------------------------------------------------------------------------------


def _text(rng: np.random.Generator) -> str:
    alphabet = "abcxyz_019 é✓"
    return "".join(rng.choice(list(alphabet), size=int(rng.integers(0, 12))))


def _vec(rng) -> tuple[float, float, float]:
    return tuple(float(v) for v in rng.normal(0, 5, 3))


def random_update(rng: np.random.Generator) -> DcmdUpdate:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    objects = []
    for _ in range(int(rng.integers(0, 4))):
        hp = float(rng.random()) if rng.random() < 0.5 else None
        objects.append(DcmdObject(
            _text(rng), _text(rng), _text(rng), _vec(rng), float(rng.random()), float(rng.random()),
            float(rng.random()), float(rng.random()), float(rng.random()), float(rng.random()),
            bool(rng.integers(2)), bool(rng.integers(2)), hp, _text(rng)))
    hazard = None
    if kind == HAZARD or rng.random() < 0.2:
        comps = tuple(HazardComponent(_text(rng), _text(rng), _vec(rng))
                      for _ in range(int(rng.integers(0, 3))))
        hazard = HazardInfo(_text(rng), _text(rng), float(rng.random()), _vec(rng), comps, _text(rng))
    verification = None
    if kind == VERIFICATION or rng.random() < 0.2:
        verification = VerificationInfo(_text(rng), _text(rng))
    ts = datetime(2024, 1, 1) + timedelta(microseconds=int(rng.integers(-10**15, 10**15)))
    return DcmdUpdate(_text(rng), _text(rng), ts, kind, _text(rng), _text(rng), tuple(objects),
                      hazard, verification)


def xy_distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])
