from __future__ import annotations

import functools
import itertools
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcmd.assessment import (AssessmentConfig, AssessmentError, DetectionRecord, UnknownClassError,
                             assess_object, compile_evidence, discretize_cl, match_identity,
                             represent_assessment)
from dcmd.bayes import load_networks, posterior
from dcmd.graphstore import Store, load_a_priori
from dcmd.scenario import load_scenario

from support import PORT_TIME, detection, humvee_event, port_event_detections

CFG = AssessmentConfig()


@functools.cache
def _shared_apriori() -> Store:
    # read-only use only: hypothesis examples must not mutate it
    store = Store()
    load_a_priori(store, load_scenario("mission_fig6"))
    return store


def identity_p_known(nets, **evidence) -> float:
    return posterior(nets["identity"], "object_identity", evidence)["known"]


# -- matching and evidence ------------------------------------------------------------------------


def test_boat_matches_its_a_priori_record(apriori):
    boat = port_event_detections()[0]
    rep = match_identity(apriori, boat)
    assert rep.candidate.name == "rigid_hulled_inflatable_boat1"
    assert rep.candidate.area == "village_port"
    assert (rep.object_match, rep.position_match, rep.size_match) == ("match",) * 3
    assert rep.distance_to_assigned == pytest.approx(0.0, abs=1e-12)


def test_humvee_has_no_candidate(apriori):
    rep = match_identity(apriori, humvee_event()[0])
    assert rep.candidate is None
    assert rep.object_match == "no_match"


def test_empty_store_gives_no_match():
    for det in port_event_detections():
        assert match_identity(Store(), det).object_match == "no_match"


def test_position_and_size_tolerances(apriori):
    far = detection("boat", (0.79 + 0.31, 1.14, 0.11), 0.18, 0.36)
    near = detection("boat", (0.79 + 0.29, 1.14, 0.11), 0.18, 0.36)
    assert match_identity(apriori, far).position_match == "no_match"
    assert match_identity(apriori, near).position_match == "match"
    big = detection("boat", (0.79, 1.14, 0.11), 0.18 * 1.26, 0.36)
    ok = detection("boat", (0.79, 1.14, 0.11), 0.18 * 1.24, 0.36 * 0.76)
    assert match_identity(apriori, big).size_match == "no_match"
    assert match_identity(apriori, ok).size_match == "match"


def test_boat_evidence():
    rep = match_identity(Store(), port_event_detections()[0])
    ev = compile_evidence(rep, port_event_detections()[0])
    assert ev["object_match"] == ev["position_match"] == ev["size_match"] == "no_match"


def test_boat_evidence_with_a_priori(apriori):
    boat = port_event_detections()[0]
    assert compile_evidence(match_identity(apriori, boat), boat) == {
        "object_match": "match", "position_match": "match", "size_match": "match",
        "obj_CL_level": "high", "position_CL_level": "high", "size_CL_level": "high"}


@pytest.mark.parametrize("value,level", [
    (0.79, "medium"), (0.85, "high"), (0.8499, "medium"), (0.60, "medium"), (0.5999, "low"),
    (0.0, "low"), (1.0, "high")])
def test_discretize_cl(value, level):
    assert discretize_cl(value) == level


# -- two-stage assessment -------------------------------------------------------------------------


def test_port_event_assessment(apriori, nets):
    results = assess_object(apriori, port_event_detections(), nets)
    assert [r.identity for r in results] == [
        "rigid_hulled_inflatable_boat1", "known_person10", "known_person11"]
    assert all(r.is_known and r.hazard is None for r in results)
    # closed form of the naive-Bayes identity net (see test_bayes)
    high = 0.2 * 0.95 * 0.9 * 0.8
    low = 0.8 * 0.5 * 0.3 * 0.65
    boat = high * 0.55 ** 3 / (high * 0.55 ** 3 + low * 0.5 ** 3)
    person = high * 0.55 ** 2 * 0.36 / (high * 0.55 ** 2 * 0.36 + low * 0.5 ** 2 * 0.4)
    assert results[0].posterior == pytest.approx(boat, abs=1e-12)
    assert results[1].posterior == pytest.approx(person, abs=1e-12)
    assert results[2].posterior == pytest.approx(person, abs=1e-12)
    assert all(0.6 <= r.posterior <= 0.8 for r in results)


def test_humvee_event_is_hazard(apriori, nets):
    hv, wpn, person = assess_object(apriori, humvee_event(), nets)
    assert hv.identity == "armoured_humvee1" and not hv.is_known
    assert hv.hazard.is_hazard and hv.hazard.probability >= 0.95
    assert hv.hazard.probability == pytest.approx(0.98, abs=1e-12)
    assert person.identity == "hazard_related_person1" and person.hazard is None
    assert wpn.identity == "mk19_grenade_launcher1"
    assert wpn.hazard is not None and not wpn.hazard.is_hazard


@pytest.mark.parametrize("labels,expected", [
    (("humvee", "army_ground"), 0.20),
    (("humvee", "mounted_weapon"), 0.40),
    (("humvee",), 0.05),
])
def test_humvee_without_both_cues_is_not_hazard(apriori, nets, labels, expected):
    results = assess_object(apriori, humvee_event(labels), nets)
    hv = results[0]
    assert hv.hazard.probability == pytest.approx(expected, abs=1e-12)
    assert hv.hazard.probability < 0.95 and not hv.hazard.is_hazard
    assert all(not r.identity.startswith("hazard_related_person") for r in results)


def test_single_known_object_has_no_hazard_stage(apriori, nets):
    (r,) = assess_object(apriori, port_event_detections()[:1], nets)
    assert r.is_known and r.hazard is None


def test_unknown_class_rejected(apriori, nets):
    with pytest.raises(UnknownClassError):
        assess_object(apriori, [detection("spaceship", (1, 1, 0))], nets)


def test_mixed_events_rejected(apriori, nets):
    dets = port_event_detections("a")[:1] + port_event_detections("b")[:1]
    with pytest.raises(AssessmentError):
        assess_object(apriori, dets, nets)


def test_assessment_is_deterministic(apriori, nets):
    a = assess_object(apriori, humvee_event(), nets)
    b = assess_object(apriori, humvee_event(), nets)
    assert a == b
    assert [r.evidence for r in a] == [r.evidence for r in b]


def test_known_object_claimed_once(apriori, nets):
    # two boats at the same spot: only one can be the a-priori boat
    dets = [detection("boat", (0.79, 1.14, 0.11), 0.18, 0.36),
            detection("boat", (0.80, 1.15, 0.11), 0.18, 0.36)]
    r = assess_object(apriori, dets, nets)
    assert [x.identity for x in r].count("rigid_hulled_inflatable_boat1") == 1


def test_detection_record_validation():
    with pytest.raises(ValueError):
        detection("boat", (0, 0, 0), cls=(1.2, 0.5, 0.5))
    with pytest.raises(ValueError):
        detection("boat", (0, 0, 0), height=0.0)


# -- invariants over the evidence lattice -----------------------------------------------------------


def test_known_object_soundness_lattice(nets):
    # class match, inside position tolerance, every CL high: known whatever the size says
    for size in ("match", "no_match"):
        p = identity_p_known(nets, object_match="match", position_match="match", size_match=size,
                             obj_CL_level="high", position_CL_level="high", size_CL_level="high")
        assert p > CFG.known_threshold


@settings(max_examples=80, deadline=None)
@given(st.floats(0.85, 1.0), st.floats(0.85, 1.0), st.floats(0.85, 1.0),
       st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(0.5, 1.6))
def test_known_object_soundness_on_detections(o, p, s, dx, dy, scale):
    store = _shared_apriori()
    x, y = 0.79 + dx, 1.14 + dy
    det = detection("boat", (x, y, 0.11), 0.18 * scale, 0.36, (o, p, s))
    (r,) = assess_object(store, [det], load_networks()[0])
    assert r.is_known and r.identity == "rigid_hulled_inflatable_boat1"


def test_hazard_requires_cooccurrence(nets):
    net = nets["hazard"]
    options = {"object_identity": [None, "known", "new"], "weapon_present": [None, "true", "false"],
               "person_present": [None, "true", "false"]}
    for combo in itertools.product(*options.values()):
        ev = {k: v for k, v in zip(options, combo) if v is not None}
        if posterior(net, "hazard", ev)["true"] >= 0.95:
            assert ev.get("weapon_present") == "true" and ev.get("person_present") == "true"


# -- representation ---------------------------------------------------------------------------------


def _class_docs_of(store, subject):
    return [r for r, role in store.relations_of(subject)
            if store.get(r).type_name == "class_description" and role == "subject"]


def _represent_all(store, dets, results, **kw):
    for det, res in zip(dets, results):
        represent_assessment(store, det, res, **kw)


def test_boat_representation(apriori, nets):
    dets = port_event_detections()
    _represent_all(apriori, dets, assess_object(apriori, dets, nets))
    reps = [t for t in apriori if t.type_name == "representational_information_content"]
    boat = next(t for t in reps if t.attributes["identity"] == "rigid_hulled_inflatable_boat1")
    assert boat.attributes["timestamp"] == PORT_TIME
    assert boat.attributes["area_name"] == "village_port"
    (link,) = [r for r, _ in apriori.relations_of(boat.id) if apriori.get(r).type_name == "information_link"]
    subject = apriori.get(link).role_players["subject"][0]
    assert apriori.get(subject).attributes["name"] == "rigid_hulled_inflatable_boat1"
    assert apriori.get(subject).attributes["a_priori"] is True
    assert apriori.validate() == []


def test_one_processed_image_per_event(apriori, nets):
    dets = port_event_detections()
    _represent_all(apriori, dets, assess_object(apriori, dets, nets))
    (image,) = apriori.ids_of_type("processed_image")
    parts = [r for r, role in apriori.relations_of(image) if role == "whole"]
    assert len(parts) == 3
    objs = {apriori.get(r).role_players["component"][0] for r in parts}
    assert {apriori.get(o).attributes["obj_name"] for o in objs} == {"boat", "army_maritime"}


def test_every_representation_links_one_class_document(apriori, nets):
    for dets in (port_event_detections(), humvee_event()):
        _represent_all(apriori, dets, assess_object(apriori, dets, nets))
    reps = [t for t in apriori if t.type_name == "representational_information_content"]
    assert len(reps) == 6
    for rep in reps:
        (link,) = [r for r, _ in apriori.relations_of(rep.id) if apriori.get(r).type_name == "information_link"]
        subject = apriori.get(link).role_players["subject"][0]
        assert len(_class_docs_of(apriori, subject)) == 1


def test_new_entity_created_for_humvee(apriori, nets):
    dets = humvee_event()
    _represent_all(apriori, dets, assess_object(apriori, dets, nets))
    (hv,) = apriori.ids_of_type("armoured_humvee")
    assert apriori.get(hv).attributes["name"] == "armoured_humvee1"
    assert apriori.get(hv).attributes["a_priori"] is False
    # a second assessment of a new event names the next humvee
    again = assess_object(apriori, humvee_event(event_id="later"), nets)
    assert again[0].identity == "armoured_humvee2"


def test_reassessment_versions_coexist(apriori, nets):
    dets = port_event_detections()
    _represent_all(apriori, dets, assess_object(apriori, dets, nets))
    later = [DetectionRecord(d.obj_name, d.position, d.height, d.width, d.obj_CL, d.position_CL,
                             d.size_CL, d.timestamp + timedelta(seconds=60), d.area, "dcmdobot4", "ev2")
             for d in dets]
    _represent_all(apriori, later, assess_object(apriori, later, nets))
    boat_reps = [t for t in apriori if t.type_name == "representational_information_content"
                 and t.attributes["identity"] == "rigid_hulled_inflatable_boat1"]
    assert sorted(t.attributes["timestamp"] for t in boat_reps) == [
        PORT_TIME, PORT_TIME + timedelta(seconds=60)]
    assert len(apriori.ids_of_type("processed_image")) == 2
    assert apriori.validate() == []
