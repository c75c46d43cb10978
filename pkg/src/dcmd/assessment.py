"""Information assessment: identity matching, evidence, inference, representation.

A detection event (all objects seen in one image) is assessed in two
stages.  The identity network decides whether each object is one of the
known objects in the a-priori information or something new; for new,
non-person artifacts the hazard network then weighs the other objects in the
same event (a weapon, a person able to operate it).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from typing import Mapping, Sequence

from .bayes import BayesNet, posterior
from .graphstore import Store
from .query import execute, parse_query

KNOWN = "known"
NEW = "new"
MATCH = "match"
NO_MATCH = "no_match"
HAZARD_RELATED_PERSON = "hazard_related_person"


class AssessmentError(Exception):
    pass


class UnknownClassError(AssessmentError):
    pass


@dataclass(frozen=True)
class AssessmentConfig:
    position_tolerance: float = 0.30
    size_tolerance: float = 0.25
    known_threshold: float = 0.5
    hazard_threshold: float = 0.5
    cl_high: float = 0.85
    cl_medium: float = 0.60
    # detector label -> general class
    classes: Mapping[str, str] = field(default_factory=lambda: {
        "boat": "rigid_hulled_inflatable_boat",
        "truck": "cargo_truck",
        "humvee": "armoured_humvee",
        "mounted_weapon": "mk19_grenade_launcher",
        "watchtower": "watchtower",
        "army_maritime": "army_maritime",
        "army_ground": "army_ground",
        "civilian": "civilian",
    })
    weapons: tuple[str, ...] = ("mounted_weapon", "mk19_grenade_launcher")
    persons: tuple[str, ...] = ("army_ground", "army_maritime", "civilian")

    def general_class(self, label: str) -> str:
        try:
            return self.classes[label]
        except KeyError:
            raise UnknownClassError(f"no general class for detector label {label!r}") from None

    def is_weapon(self, label: str) -> bool:
        return label in self.weapons or self.classes.get(label) in self.weapons

    def is_person(self, label: str) -> bool:
        return label in self.persons or self.classes.get(label) in self.persons


@dataclass(frozen=True)
class DetectionRecord:
    obj_name: str
    position: tuple[float, float, float]
    height: float
    width: float
    obj_CL: float
    position_CL: float
    size_CL: float
    timestamp: datetime
    area: str
    source_agent: str
    event_id: str

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        for name in ("height", "width", "obj_CL", "position_CL", "size_CL"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if len(self.position) != 3:
            raise ValueError("position needs x, y, z")
        for name in ("obj_CL", "position_CL", "size_CL"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not (self.height > 0 and self.width > 0):
            raise ValueError("height and width must be positive")

    def within(self, bounds: tuple[float, float]) -> bool:
        x, y, _ = self.position
        return 0.0 <= x <= bounds[0] and 0.0 <= y <= bounds[1]


@dataclass(frozen=True)
class KnownObject:
    """A known object as read back from the a-priori part of a store."""

    id: int
    name: str
    position: tuple[float, float, float]
    height: float
    width: float
    area: str


@dataclass(frozen=True)
class MatchReport:
    candidate: KnownObject | None
    object_match: str
    position_match: str
    size_match: str
    distance_to_assigned: float


@dataclass(frozen=True)
class HazardAssessment:
    is_hazard: bool
    probability: float


@dataclass(frozen=True)
class AssessmentResult:
    identity: str
    general_class: str
    posterior: float
    is_known: bool
    hazard: HazardAssessment | None = None
    evidence: Mapping[str, str] = field(default_factory=dict, compare=False)


# -- identity matching -------------------------------------------------------------


def known_object_query(general_class: str) -> str:
    return (
        "match "
        f'$o isa artifact_model, has general_class "{general_class}", has a_priori true, has name $name; '
        "$p isa position_quality, has x $x, has y $y, has z $z; "
        "$qp (bearer: $o, quality: $p) isa quality_relation; "
        "$s isa size_quality, has height $h, has width $w; "
        "$qs (bearer: $o, quality: $s) isa quality_relation; "
        "$l (located: $o, location: $a) isa assigned_location; "
        "$a isa operational_area, has area_name $area; "
        "fetch $o, $name, $x, $y, $z, $h, $w, $area;"
    )


def known_objects(store: Store, general_class: str) -> list[KnownObject]:
    rows = execute(store, parse_query(known_object_query(general_class))).rows
    return [KnownObject(o, name, (x, y, z), h, w, area) for o, name, x, y, z, h, w, area in rows]


def _xy_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _size_matches(det: DetectionRecord, known: KnownObject, tol: float) -> bool:
    return (abs(det.height - known.height) <= tol * known.height
            and abs(det.width - known.width) <= tol * known.width)


def match_identity(store: Store, det: DetectionRecord, config: AssessmentConfig | None = None,
                   exclude: frozenset[int] = frozenset()) -> MatchReport:
    """Compare a detection against the known objects of its class.

    ``exclude`` holds ids already claimed by other detections of the same
    event, so two detections never resolve to one known object.
    """
    config = config or AssessmentConfig()
    gclass = config.classes.get(det.obj_name)
    candidates = [k for k in known_objects(store, gclass) if k.id not in exclude] if gclass else []
    if not candidates:
        return MatchReport(None, NO_MATCH, NO_MATCH, NO_MATCH, math.inf)
    best = min(candidates, key=lambda k: (_xy_distance(det.position, k.position), k.id))
    dist = _xy_distance(det.position, best.position)
    return MatchReport(
        candidate=best,
        object_match=MATCH,
        position_match=MATCH if dist <= config.position_tolerance else NO_MATCH,
        size_match=MATCH if _size_matches(det, best, config.size_tolerance) else NO_MATCH,
        distance_to_assigned=dist,
    )


def discretize_cl(value: float, config: AssessmentConfig | None = None) -> str:
    config = config or AssessmentConfig()
    if value >= config.cl_high:
        return "high"
    if value >= config.cl_medium:
        return "medium"
    return "low"


def compile_evidence(report: MatchReport, det: DetectionRecord,
                     config: AssessmentConfig | None = None) -> dict[str, str]:
    matched = report.object_match == MATCH
    return {
        "object_match": report.object_match,
        "position_match": report.position_match if matched else NO_MATCH,
        "size_match": report.size_match if matched else NO_MATCH,
        "obj_CL_level": discretize_cl(det.obj_CL, config),
        "position_CL_level": discretize_cl(det.position_CL, config),
        "size_CL_level": discretize_cl(det.size_CL, config),
    }


# -- naming of new objects -----------------------------------------------------------


class _Namer:
    """Hands out ``<class><n>`` names that are unused in the store."""

    def __init__(self, store: Store):
        self.store = store
        self.taken: dict[str, int] = {}

    def next(self, prefix: str) -> str:
        if prefix not in self.taken:
            pat = re.compile(re.escape(prefix) + r"(\d+)$")
            highest = 0
            for tid in self.store.ids_of_type("artifact_model"):
                m = pat.match(str(self.store.get(tid).attributes.get("name", "")))
                if m:
                    highest = max(highest, int(m.group(1)))
            self.taken[prefix] = highest
        self.taken[prefix] += 1
        return f"{prefix}{self.taken[prefix]}"


# -- two-stage assessment --------------------------------------------------------------


def assess_object(store: Store, detections: Sequence[DetectionRecord],
                  nets: Mapping[str, BayesNet], config: AssessmentConfig | None = None
                  ) -> list[AssessmentResult]:
    """Assess every detection of one event; results follow input order."""
    config = config or AssessmentConfig()
    if len({d.event_id for d in detections}) > 1:
        raise AssessmentError("all detections must come from the same event")
    for det in detections:
        config.general_class(det.obj_name)

    # resolve candidates closest-first so each known object is claimed once
    reports: dict[int, MatchReport] = {}
    claimed: set[int] = set()
    pending = list(range(len(detections)))
    while pending:
        trial = {i: match_identity(store, detections[i], config, frozenset(claimed)) for i in pending}
        i = min(pending, key=lambda j: (trial[j].distance_to_assigned, j))
        reports[i] = trial[i]
        if trial[i].candidate is not None and trial[i].position_match == MATCH:
            claimed.add(trial[i].candidate.id)
        pending.remove(i)

    identity_net, hazard_net = nets["identity"], nets["hazard"]
    namer = _Namer(store)
    staged: list[dict] = []
    for i, det in enumerate(detections):
        evidence = compile_evidence(reports[i], det, config)
        p_known = posterior(identity_net, "object_identity", evidence)[KNOWN]
        is_known = p_known > config.known_threshold and reports[i].candidate is not None
        staged.append({"evidence": evidence, "p_known": p_known, "is_known": is_known})

    for i, det in enumerate(detections):
        s = staged[i]
        if s["is_known"] or config.is_person(det.obj_name):
            continue
        others = [d for j, d in enumerate(detections) if j != i]
        hz_evidence = {
            "object_identity": NEW,
            "weapon_present": str(any(config.is_weapon(d.obj_name) for d in others)).lower(),
            "person_present": str(any(config.is_person(d.obj_name) for d in others)).lower(),
        }
        p = posterior(hazard_net, "hazard", hz_evidence)["true"]
        s["hazard"] = HazardAssessment(p > config.hazard_threshold, p)

    event_has_hazard = any(s.get("hazard") and s["hazard"].is_hazard for s in staged)
    results = []
    for i, det in enumerate(detections):
        s = staged[i]
        gclass = config.general_class(det.obj_name)
        if s["is_known"]:
            identity = reports[i].candidate.name
            prob = s["p_known"]
        else:
            prefix = HAZARD_RELATED_PERSON if (event_has_hazard and config.is_person(det.obj_name)) else gclass
            identity = namer.next(prefix)
            prob = 1.0 - s["p_known"]
        results.append(AssessmentResult(identity, gclass, prob, s["is_known"], s.get("hazard"),
                                        s["evidence"]))
    return results


# -- representation ---------------------------------------------------------------------


def _single(store: Store, type_name: str, attribute: str, value) -> int | None:
    ids = [i for i in store.find(attribute, value) if store.get(i).type_name in
           store.schema.descendants(type_name)]
    return ids[0] if ids else None


def _subject_for(store: Store, result: AssessmentResult, det: DetectionRecord) -> tuple[int, list[int]]:
    """Id of the artifact_model the representation is about, plus new ids."""
    for tid in store.find("name", result.identity):
        thing = store.get(tid)
        if thing.type_name in store.schema.descendants("artifact_model"):
            if result.is_known == bool(thing.attributes.get("a_priori")):
                return tid, []
    if result.is_known:
        raise AssessmentError(f"no a-priori record named {result.identity!r}")
    doc = None
    for tid in store.find("general_class", result.general_class):
        if store.get(tid).type_name == "general_class_document":
            doc = tid
            break
    if doc is None:
        raise UnknownClassError(f"no general-class document for {result.general_class!r}")
    new_id = store.insert(result.general_class, {
        "name": result.identity, "general_class": result.general_class,
        "obj_name": det.obj_name, "a_priori": False})
    link = store.insert("class_description", role_players={"content": [doc], "subject": [new_id]})
    return new_id, [new_id, link]


def represent_assessment(store: Store, det: DetectionRecord, result: AssessmentResult, *,
                         msg_id: str = "", update_kind: str = "",
                         hazard_status: str | None = None) -> list[int]:
    """Write one assessed detection into ``store``; return the inserted ids."""
    inserted: list[int] = []
    image = _single(store, "processed_image", "event_id", det.event_id)
    if image is None:
        image = store.insert("processed_image", {
            "event_id": det.event_id, "timestamp": det.timestamp,
            "area_name": det.area, "source_agent": det.source_agent})
        inserted.append(image)
        area = _single(store, "operational_area", "area_name", det.area)
        if area is not None:
            inserted.append(store.insert("observed_in", role_players={
                "located": [image], "location": [area]}))

    x, y, z = det.position
    obs = store.insert("processed_image_object", {
        "obj_name": det.obj_name, "x": x, "y": y, "z": z,
        "height": det.height, "width": det.width,
        "obj_CL": det.obj_CL, "position_CL": det.position_CL, "size_CL": det.size_CL,
        "timestamp": det.timestamp, "source_agent": det.source_agent, "event_id": det.event_id})
    inserted.append(obs)
    inserted.append(store.insert("part", role_players={"whole": [image], "component": [obs]}))

    subject, created = _subject_for(store, result, det)
    inserted += created

    attrs = {
        "identity": result.identity, "probability": result.posterior,
        "is_known": result.is_known, "is_hazard": bool(result.hazard and result.hazard.is_hazard),
        "timestamp": det.timestamp, "source_agent": det.source_agent, "area_name": det.area,
    }
    if result.hazard is not None:
        attrs["hazard_probability"] = result.hazard.probability
    if hazard_status:
        attrs["hazard_status"] = hazard_status
    if msg_id:
        attrs["msg_id"] = msg_id
    if update_kind:
        attrs["update_kind"] = update_kind
    rep = store.insert("representational_information_content", attrs)
    inserted.append(rep)
    inserted.append(store.insert("information_link", role_players={
        "content": [rep], "observation": [obs], "subject": [subject]}))
    return inserted
