"""Explorer and Verifier agents and the deterministic mission runner.

Time advances in scheduler ticks (10 ms by default).  The runner wakes every
agent whose next action is due, in agent-id order, then pumps the bus so
updates published in a tick are delivered within it.  Agents never touch each
other's stores; everything they learn from one another arrives as a
:class:`~dcmd.net.DcmdUpdate`.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .assessment import AssessmentError, AssessmentResult, DetectionRecord, assess_object
from .bayes import BayesNet, load_networks
from .graphstore import Store, load_a_priori
from .net import (HAZARD, KNOWN_OBJECT, NEW_OBJECT, RCC, VERIFICATION, Bus, DcmdObject,
                  DcmdUpdate, HazardComponent, HazardInfo, RoutingPolicy, VerificationInfo,
                  apply_update)
from .ontology import SchemaDef
from .scenario import EXPLORER, VERIFIER, Scenario, Waypoint, agent_rng, sense

IDLE = "Idle"
EXPLORING = "Exploring"
EN_ROUTE = "EnRoute"
VERIFYING = "Verifying"
DONE = "Done"


class DeadlockError(RuntimeError):
    pass


def format_time(ts) -> str:
    return ts.strftime("%H:%M:%S.%f")[:-4]


# -- log ------------------------------------------------------------------------------------------


@dataclass
class MissionLog:
    """Event records ordered by (tick, agent, sequence)."""

    records: list[dict[str, Any]] = field(default_factory=list)
    _seq: dict[str, int] = field(default_factory=dict, repr=False)

    def add(self, tick: int, time: str, agent: str, event: str, **data: Any) -> None:
        seq = self._seq.get(agent, 0)
        self._seq[agent] = seq + 1
        self.records.append({"tick": tick, "time": time, "agent": agent, "seq": seq,
                             "event": event, **data})

    def ordered(self) -> list[dict[str, Any]]:
        return sorted(self.records, key=lambda r: (r["tick"], r["agent"], r["seq"]))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.ordered())

    @staticmethod
    def from_jsonl(text: str) -> "MissionLog":
        log = MissionLog()
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                log.records.append(rec)
                log._seq[rec["agent"]] = max(log._seq.get(rec["agent"], 0), rec["seq"] + 1)
        return log

    def events(self, event: str, agent: str | None = None) -> list[dict[str, Any]]:
        return [r for r in self.ordered()
                if r["event"] == event and (agent is None or r["agent"] == agent)]


# -- agent state ----------------------------------------------------------------------------------


@dataclass
class HazardTask:
    update_msg: str
    info: HazardInfo
    objects: Mapping[str, DcmdObject]


@dataclass
class AgentState:
    agent_id: str
    role: str
    phase: str
    position: tuple[float, float]
    store: Store
    rng: np.random.Generator
    waypoint_queue: deque[Waypoint] = field(default_factory=deque)
    pending_verifications: deque[HazardTask] = field(default_factory=deque)
    wake: int | None = None
    target: tuple[float, float] | None = None
    events: int = 0
    published: int = 0
    # verifier roster as seen from the update stream: id -> (position, open hazards)
    roster: dict[str, list] = field(default_factory=dict)

    def check(self) -> None:
        if self.phase in (EN_ROUTE, VERIFYING) and not self.pending_verifications:
            raise AssertionError(f"{self.agent_id} is {self.phase} with nothing to verify")


@dataclass
class MissionResult:
    log: MissionLog
    stores: dict[str, Store]
    summary: dict[str, Any]
    success: bool
    states: dict[str, AgentState] = field(default_factory=dict, repr=False)


# -- mission ------------------------------------------------------------------------------------------


class Mission:
    def __init__(self, scenario: Scenario, seed: int, nets: Mapping[str, BayesNet] | None = None,
                 cpt_digest: str = "", policy: RoutingPolicy | None = None,
                 schema: SchemaDef | None = None):
        self.scenario = scenario
        self.seed = seed
        if nets is None:
            nets, cpt_digest = load_networks()
        self.nets = nets
        self.cpt_digest = cpt_digest
        self.config = scenario.assessment
        self.timing = scenario.timing
        self.log = MissionLog()
        self.tick = 0
        roster = {a.agent_id: a.team for a in scenario.agents}
        self.bus = Bus(roster, policy, seed)
        self.published: list[DcmdUpdate] = []
        self.states: dict[str, AgentState] = {}
        verifiers = {a.agent_id: [tuple(a.start), set()] for a in scenario.team(VERIFIER)}
        for cfg in sorted(scenario.agents, key=lambda a: a.agent_id):
            store = Store(schema)
            load_a_priori(store, scenario)
            st = AgentState(
                agent_id=cfg.agent_id, role=cfg.team,
                phase=EXPLORING if cfg.team == EXPLORER else IDLE,
                position=tuple(cfg.start), store=store, rng=agent_rng(seed, cfg.agent_id),
                waypoint_queue=deque(cfg.waypoints),
                roster={k: [v[0], set(v[1])] for k, v in verifiers.items()})
            if cfg.team == EXPLORER:
                if st.waypoint_queue:
                    st.wake = (self.timing.ticks(cfg.start_delay)
                               + self.timing.travel_ticks(st.position, st.waypoint_queue[0].position))
                else:
                    st.phase = DONE
            self.states[cfg.agent_id] = st
            self.bus.subscribe(cfg.agent_id, self._handler(st))
        self.bus.subscribe(RCC, self._rcc_handler)

    # -- helpers

    def now(self) -> str:
        return format_time(self.timing.timestamp(self.tick))

    def emit(self, agent: str, event: str, **data: Any) -> None:
        self.log.add(self.tick, self.now(), agent, event, **data)

    def set_phase(self, st: AgentState, phase: str) -> None:
        if st.phase != phase:
            self.emit(st.agent_id, "phase", **{"from": st.phase, "to": phase})
            st.phase = phase

    def publish(self, st: AgentState, update: DcmdUpdate) -> None:
        apply_update(st.store, update)
        recipients = self.bus.publish(update)
        self.published.append(update)
        self.emit(st.agent_id, "publish", msg_id=update.msg_id, kind=update.kind,
                  recipients=recipients, objects=[o.identity for o in update.objects])

    def next_msg_id(self, st: AgentState) -> str:
        st.published += 1
        return f"{st.agent_id}-m{st.published:03d}"

    # -- message handling

    def _track(self, st: AgentState, update: DcmdUpdate) -> None:
        if update.kind == HAZARD and update.hazard_info.assigned_verifier in st.roster:
            st.roster[update.hazard_info.assigned_verifier][1].add(update.hazard_info.identity)
        if update.kind == VERIFICATION and update.source_agent in st.roster:
            entry = st.roster[update.source_agent]
            entry[1].discard(update.verification_info.identity)
            for o in update.objects:
                if o.identity == update.verification_info.identity:
                    entry[0] = o.position[:2]

    def _handler(self, st: AgentState):
        def handle(update: DcmdUpdate) -> None:
            inserted = apply_update(st.store, update)
            self.emit(st.agent_id, "receive", msg_id=update.msg_id, kind=update.kind,
                      source=update.source_agent, inserted=len(inserted))
            self._track(st, update)
            if (update.kind == HAZARD and st.role == VERIFIER
                    and update.hazard_info.assigned_verifier == st.agent_id):
                st.pending_verifications.append(
                    HazardTask(update.msg_id, update.hazard_info,
                               {o.identity: o for o in update.objects}))
                self.emit(st.agent_id, "assigned", hazard=update.hazard_info.identity,
                          msg_id=update.msg_id)
                if st.phase == IDLE and st.wake is None:
                    st.wake = self.tick + 1
        return handle

    def _rcc_handler(self, update: DcmdUpdate) -> None:
        self.emit(RCC, "observe", msg_id=update.msg_id, kind=update.kind,
                  source=update.source_agent, objects=[o.identity for o in update.objects])

    # -- explorer

    def choose_verifier(self, st: AgentState, position) -> str:
        if not st.roster:
            return ""
        def key(vid):
            pos, open_ = st.roster[vid]
            return (bool(open_), math.hypot(pos[0] - position[0], pos[1] - position[1]), vid)
        return min(st.roster, key=key)

    def build_update(self, st: AgentState, dets: list[DetectionRecord],
                     results: list[AssessmentResult], event_id: str) -> DcmdUpdate:
        objects = tuple(
            DcmdObject(r.identity, d.obj_name, r.general_class, d.position, d.height, d.width,
                       d.obj_CL, d.position_CL, d.size_CL, r.posterior, r.is_known,
                       bool(r.hazard and r.hazard.is_hazard),
                       r.hazard.probability if r.hazard else None)
            for d, r in zip(dets, results))
        hazards = [o for o in objects if o.is_hazard]
        hazard_info = None
        if hazards:
            main = max(hazards, key=lambda o: (o.hazard_probability, -objects.index(o)))
            comps = tuple(HazardComponent(o.identity, o.obj_name, o.position)
                          for o in objects if o is not main)
            verifier = self.choose_verifier(st, main.position)
            hazard_info = HazardInfo(main.identity, main.obj_name, main.hazard_probability,
                                     main.position, comps, verifier)
            kind = HAZARD
        elif all(o.is_known for o in objects):
            kind = KNOWN_OBJECT
        else:
            kind = NEW_OBJECT
        return DcmdUpdate(self.next_msg_id(st), st.agent_id, dets[0].timestamp, kind, event_id,
                          dets[0].area, objects, hazard_info)

    def explorer_step(self, st: AgentState) -> None:
        wp = st.waypoint_queue.popleft()
        st.position = wp.position
        st.events += 1
        event_id = f"{st.agent_id}-e{st.events:03d}"
        reading = sense(self.scenario, st.agent_id, wp, st.rng,
                        timestamp=self.timing.timestamp(self.tick), event_id=event_id)
        dets = list(reading.detections)
        self.emit(st.agent_id, "sense", waypoint=wp.name, event_id=event_id,
                  detections=[d.obj_name for d in dets])
        if dets:
            try:
                results = assess_object(st.store, dets, self.nets, self.config)
            except AssessmentError as exc:
                self.emit(st.agent_id, "assessment_error", event_id=event_id, error=str(exc))
                results = None
            if results is not None:
                self.emit(st.agent_id, "assess", event_id=event_id, results=[
                    {"obj_name": d.obj_name, "identity": r.identity, "is_known": r.is_known,
                     "probability": round(r.posterior, 6),
                     "hazard": None if r.hazard is None else round(r.hazard.probability, 6)}
                    for d, r in zip(dets, results)])
                update = self.build_update(st, dets, results, event_id)
                self.publish(st, update)
                if update.kind == HAZARD:
                    self.emit(st.agent_id, "hazard_detected", hazard=update.hazard_info.identity,
                              area=update.area, verifier=update.hazard_info.assigned_verifier)
                    self._track(st, update)
        dwell = self.timing.ticks(self.timing.dwell + self.timing.dwell_per_detection * len(dets))
        if st.waypoint_queue:
            st.wake = self.tick + dwell + self.timing.travel_ticks(
                st.position, st.waypoint_queue[0].position)
        else:
            st.wake = None
            self.set_phase(st, DONE)

    # -- verifier

    def _standoff(self, start, goal) -> tuple[float, float]:
        dx, dy = goal[0] - start[0], goal[1] - start[1]
        dist = math.hypot(dx, dy)
        if dist <= self.timing.standoff:
            return tuple(start)
        f = (dist - self.timing.standoff) / dist
        return (start[0] + f * dx, start[1] + f * dy)

    def verify(self, st: AgentState, task: HazardTask) -> DcmdUpdate:
        st.events += 1
        event_id = f"{st.agent_id}-e{st.events:03d}"
        reading = sense(self.scenario, st.agent_id, st.position, st.rng,
                        timestamp=self.timing.timestamp(self.tick), event_id=event_id)
        self.emit(st.agent_id, "sense", event_id=event_id,
                  detections=[d.obj_name for d in reading.detections])
        info = task.info
        wanted = [HazardComponent(info.identity, info.obj_name, info.position), *info.components]
        free = list(reading.detections)
        found: dict[str, DetectionRecord] = {}
        for comp in wanted:
            near = [d for d in free if d.obj_name == comp.obj_name and math.hypot(
                d.position[0] - comp.position[0],
                d.position[1] - comp.position[1]) <= self.config.position_tolerance]
            if near:
                best = min(near, key=lambda d: math.hypot(d.position[0] - comp.position[0],
                                                          d.position[1] - comp.position[1]))
                found[comp.identity] = best
                free.remove(best)
        confirmed = len(found) == len(wanted)
        status = f"{'verified' if confirmed else 'unconfirmed'}_by_{st.agent_id}"
        objects = []
        for comp in wanted:
            orig = task.objects.get(comp.identity)
            d = found.get(comp.identity)
            src = d if d is not None else orig
            if src is None:
                continue
            objects.append(DcmdObject(
                comp.identity, src.obj_name, orig.general_class if orig else "", src.position,
                src.height, src.width, src.obj_CL, src.position_CL, src.size_CL,
                orig.posterior if orig else 0.0, False, orig.is_hazard if orig else False,
                orig.hazard_probability if orig else None, status))
        self.emit(st.agent_id, "verification", hazard=info.identity, status=status,
                  confirmed=sorted(found))
        area = reading.detections[0].area if reading.detections else (
            self.scenario.area_at(*st.position) or "outside")
        return DcmdUpdate(self.next_msg_id(st), st.agent_id, reading.timestamp, VERIFICATION,
                          event_id, area, tuple(objects),
                          verification_info=VerificationInfo(status, info.identity))

    def verifier_step(self, st: AgentState) -> None:
        if st.phase == IDLE:
            if not st.pending_verifications:
                st.wake = None
                return
            task = st.pending_verifications[0]
            st.target = self._standoff(st.position, task.info.position)
            self.set_phase(st, EN_ROUTE)
            st.wake = self.tick + max(1, self.timing.travel_ticks(st.position, st.target))
        elif st.phase == EN_ROUTE:
            st.position = st.target
            self.set_phase(st, VERIFYING)
            update = self.verify(st, st.pending_verifications[0])
            self.publish(st, update)
            st.roster[st.agent_id][0] = st.position
            st.roster[st.agent_id][1].discard(update.verification_info.identity)
            st.wake = self.tick + self.timing.ticks(
                self.timing.dwell + self.timing.dwell_per_detection * len(update.objects))
        elif st.phase == VERIFYING:
            st.pending_verifications.popleft()
            if st.pending_verifications:
                task = st.pending_verifications[0]
                st.target = self._standoff(st.position, task.info.position)
                self.set_phase(st, EN_ROUTE)
                st.wake = self.tick + max(1, self.timing.travel_ticks(st.position, st.target))
            else:
                self.set_phase(st, IDLE)
                st.wake = None

    # -- loop

    def run(self) -> MissionResult:
        self.emit("mission", "start", scenario=self.scenario.name, seed=self.seed,
                  cpt_sha256=self.cpt_digest, agents={a: s.role for a, s in self.states.items()})
        max_tick = self.timing.ticks(self.timing.max_time)
        while True:
            for aid in sorted(self.states):
                st = self.states[aid]
                if st.wake is not None and st.wake <= self.tick:
                    st.wake = None
                    if st.role == EXPLORER:
                        self.explorer_step(st)
                    else:
                        self.verifier_step(st)
                    st.check()
            self.bus.pump()
            wakes = [s.wake for s in self.states.values() if s.wake is not None]
            if not wakes:
                break
            nxt = min(wakes)
            if nxt > max_tick:
                raise DeadlockError(self._diagnose(f"time limit of {self.timing.max_time} s reached"))
            self.tick = max(nxt, self.tick + 1)
        stuck = [s for s in self.states.values() if s.phase not in (DONE, IDLE) or s.pending_verifications]
        if stuck:
            raise DeadlockError(self._diagnose("no agent can progress"))
        self.bus.close()
        summary = self.summarize()
        self.emit("mission", "end", success=summary["success"])
        return MissionResult(self.log, {a: s.store for a, s in self.states.items()}, summary,
                             summary["success"], self.states)

    def _diagnose(self, reason: str) -> str:
        parts = [f"{a}: phase={s.phase} wake={s.wake} pending={len(s.pending_verifications)}"
                 for a, s in sorted(self.states.items())]
        return f"{reason} at tick {self.tick}; " + "; ".join(parts)

    def summarize(self) -> dict[str, Any]:
        tol = self.config.position_tolerance
        known = {}
        for k in self.scenario.known_objects:
            hits = [(u, o) for u in self.published if u.kind != VERIFICATION for o in u.objects
                    if o.identity == k.name and o.is_known
                    and math.hypot(o.position[0] - k.position[0], o.position[1] - k.position[1]) <= tol]
            known[k.name] = ({"confirmed": True, "by": hits[0][0].source_agent,
                              "at": format_time(hits[0][0].timestamp), "area": hits[0][0].area}
                             if hits else {"confirmed": False})
        hazards = []
        for u in self.published:
            if u.kind != HAZARD:
                continue
            h = u.hazard_info
            ver = [v for v in self.published if v.kind == VERIFICATION
                   and v.verification_info.identity == h.identity]
            entry = {"identity": h.identity, "obj_name": h.obj_name, "area": u.area,
                     "probability": round(h.probability, 6), "detected_by": u.source_agent,
                     "detected_at": format_time(u.timestamp), "assigned_verifier": h.assigned_verifier,
                     "components": [c.identity for c in h.components],
                     "status": ver[-1].verification_info.status if ver else "unverified"}
            if ver:
                entry["verified_by"] = ver[-1].source_agent
                entry["verified_at"] = format_time(ver[-1].timestamp)
            hazards.append(entry)
        all_known = all(v["confirmed"] for v in known.values())
        all_verified = all(h["status"].startswith("verified_by_") for h in hazards)
        return {
            "scenario": self.scenario.name, "seed": self.seed, "cpt_sha256": self.cpt_digest,
            "known_objects": known, "hazards": hazards,
            "known_confirmed": sum(v["confirmed"] for v in known.values()),
            "hazards_verified": sum(h["status"].startswith("verified_by_") for h in hazards),
            "updates_published": len(self.published),
            "end_time": self.now(), "end_tick": self.tick,
            "success": all_known and all_verified,
        }


def run_mission(scenario: Scenario, seed: int, nets: Mapping[str, BayesNet] | None = None,
                cpt_digest: str = "", policy: RoutingPolicy | None = None,
                schema: SchemaDef | None = None) -> MissionResult:
    """Run ``scenario`` to completion; deterministic for a given seed."""
    return Mission(scenario, seed, nets, cpt_digest, policy, schema).run()


def explorer_step(mission: Mission, state: AgentState) -> AgentState:
    """Advance an Explorer by one action at the mission's current tick."""
    if state.role != EXPLORER:
        raise ValueError(f"{state.agent_id} is not an Explorer")
    mission.explorer_step(state)
    return state


def verifier_step(mission: Mission, state: AgentState) -> AgentState:
    """Advance a Verifier by one action at the mission's current tick."""
    if state.role != VERIFIER:
        raise ValueError(f"{state.agent_id} is not a Verifier")
    mission.verifier_step(state)
    return state
