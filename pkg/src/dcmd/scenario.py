"""Scenario configuration and the synthetic detector that replaces perception.

A scenario file is YAML.  It describes the testbed bounds, the named
operational areas, the a-priori known objects, the ground-truth world, the
agent teams with their waypoints, and the noise model of the detector.  See
``data/mission_fig6.yaml`` for a documented example.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml
from shapely.geometry import Point, Polygon

from .assessment import AssessmentConfig, DetectionRecord
from .graphstore import quantize_time

EXPLORER = "Explorer"
VERIFIER = "Verifier"
TEAMS = (EXPLORER, VERIFIER)


class ScenarioError(ValueError):
    """Invalid scenario; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class Area:
    name: str
    polygon: tuple[tuple[float, float], ...]

    def contains(self, x: float, y: float) -> bool:
        return Polygon(self.polygon).covers(Point(x, y))

    def boundary_text(self) -> str:
        return " ".join(f"{x:g},{y:g}" for x, y in self.polygon)


@dataclass(frozen=True)
class ObjectClass:
    label: str
    general_class: str
    description: str = ""


@dataclass(frozen=True)
class KnownObject:
    name: str
    general_class: str
    area: str
    position: tuple[float, float, float]
    height: float
    width: float


@dataclass(frozen=True)
class WorldObject:
    label: str
    position: tuple[float, float, float]
    height: float
    width: float
    known_as: str | None = None
    hazard: bool = False
    civilian: bool = False


@dataclass(frozen=True)
class Waypoint:
    name: str
    position: tuple[float, float]


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    team: str
    start: tuple[float, float]
    waypoints: tuple[Waypoint, ...] = ()
    start_delay: float = 0.0


@dataclass(frozen=True)
class Noise:
    position_sigma: float = 0.05
    size_sigma: float = 0.05
    obj_cl: tuple[float, float] = (0.75, 0.99)
    position_cl: tuple[float, float] = (0.75, 0.99)
    size_cl: tuple[float, float] = (0.75, 0.99)


@dataclass(frozen=True)
class Timing:
    origin: datetime = datetime(2024, 1, 1, 14, 49)
    tick: float = 0.01
    speed: float = 0.1
    dwell: float = 3.0
    dwell_per_detection: float = 2.0
    standoff: float = 0.25
    max_time: float = 3600.0

    def ticks(self, seconds: float) -> int:
        return int(math.ceil(round(seconds / self.tick, 6)))

    def travel_ticks(self, a: Sequence[float], b: Sequence[float]) -> int:
        return self.ticks(math.hypot(b[0] - a[0], b[1] - a[1]) / self.speed)

    def timestamp(self, tick: int) -> datetime:
        return quantize_time(self.origin + timedelta(milliseconds=round(tick * self.tick * 1000)))


@dataclass(frozen=True)
class Scenario:
    name: str
    objective: str = ""
    seed: int = 0
    bounds: tuple[float, float] = (6.0, 2.0)
    sensing_radius: float = 0.5
    areas: tuple[Area, ...] = ()
    classes: tuple[ObjectClass, ...] = ()
    known_objects: tuple[KnownObject, ...] = ()
    world: tuple[WorldObject, ...] = ()
    agents: tuple[AgentSpec, ...] = ()
    noise: Noise = field(default_factory=Noise)
    timing: Timing = field(default_factory=Timing)
    assessment: AssessmentConfig = field(default_factory=AssessmentConfig)

    def class_by_name(self, general_class: str) -> ObjectClass:
        for c in self.classes:
            if c.general_class == general_class:
                return c
        raise KeyError(general_class)

    def agent(self, agent_id: str) -> AgentSpec:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    def team(self, team: str) -> list[AgentSpec]:
        return [a for a in self.agents if a.team == team]

    def area_at(self, x: float, y: float) -> str | None:
        for area in self.areas:
            if area.contains(x, y):
                return area.name
        return None

    def in_bounds(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.bounds[0] and 0.0 <= y <= self.bounds[1]


# -- loading ------------------------------------------------------------------------------


class _Fields:
    """Typed access into a YAML mapping that reports dotted field paths."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ScenarioError(path, "expected a mapping")
        self.data = data
        self.path = path

    def sub(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, default=...):
        if key not in self.data:
            if default is ...:
                raise ScenarioError(self.sub(key), "missing required field")
            return default
        return _convert(self.data[key], kind, self.sub(key))


def _convert(value: Any, kind, path: str):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ScenarioError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ScenarioError(path, f"expected an integer, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str) or not value:
            raise ScenarioError(path, f"expected a non-empty string, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ScenarioError(path, f"expected true or false, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ScenarioError(path, "expected a list")
        return value
    if isinstance(kind, tuple):  # fixed-length numeric vector
        n = kind[0]
        if not isinstance(value, (list, tuple)) or len(value) not in kind:
            raise ScenarioError(path, f"expected {' or '.join(map(str, kind))} numbers")
        return tuple(_convert(v, float, f"{path}[{i}]") for i, v in enumerate(value)) + \
            (0.0,) * (n - len(value))
    raise TypeError(kind)


def _cl_range(f: _Fields, key: str, default: tuple[float, float]) -> tuple[float, float]:
    lo, hi = f.get(key, (2,), default)
    if not 0.0 <= lo <= hi <= 1.0:
        raise ScenarioError(f.sub(key), "confidence range must satisfy 0 <= low <= high <= 1")
    return lo, hi


def _parse_origin(value: Any, path: str) -> datetime:
    if isinstance(value, datetime):
        return quantize_time(value.replace(tzinfo=None))
    try:
        return quantize_time(datetime.fromisoformat(str(value)))
    except ValueError:
        raise ScenarioError(path, f"not an ISO timestamp: {value!r}") from None


def scenario_from_dict(data: Any) -> Scenario:
    top = _Fields(data, "")
    bounds = top.get("bounds", (2,), (6.0, 2.0))
    if min(bounds) <= 0:
        raise ScenarioError("bounds", "bounds must be positive")

    noise_f = _Fields(top.data.get("noise", {}), "noise")
    cl_default = _cl_range(noise_f, "cl_range", (0.75, 0.99))
    noise = Noise(
        position_sigma=noise_f.get("position_sigma", float, 0.05),
        size_sigma=noise_f.get("size_sigma", float, 0.05),
        obj_cl=_cl_range(noise_f, "obj_cl", cl_default),
        position_cl=_cl_range(noise_f, "position_cl", cl_default),
        size_cl=_cl_range(noise_f, "size_cl", cl_default),
    )
    if noise.position_sigma < 0 or noise.size_sigma < 0:
        raise ScenarioError("noise", "sigmas must be non-negative")

    tf = _Fields(top.data.get("timing", {}), "timing")
    timing = Timing(
        origin=_parse_origin(tf.data.get("origin", "2024-01-01T14:49:00"), "timing.origin"),
        tick=tf.get("tick", float, 0.01),
        speed=tf.get("speed", float, 0.1),
        dwell=tf.get("dwell", float, 3.0),
        dwell_per_detection=tf.get("dwell_per_detection", float, 2.0),
        standoff=tf.get("standoff", float, 0.25),
        max_time=tf.get("max_time", float, 3600.0),
    )
    if timing.tick <= 0 or timing.speed <= 0 or timing.max_time <= 0:
        raise ScenarioError("timing", "tick, speed and max_time must be positive")
    if min(timing.dwell, timing.dwell_per_detection, timing.standoff) < 0:
        raise ScenarioError("timing", "dwell and standoff must be non-negative")

    classes = []
    for i, raw in enumerate(top.get("classes", list, [])):
        f = _Fields(raw, f"classes[{i}]")
        classes.append(ObjectClass(f.get("label", str), f.get("general_class", str),
                                   f.get("description", str, "")))
    labels = [c.label for c in classes]
    if len(set(labels)) != len(labels):
        raise ScenarioError("classes", "duplicate class label")

    af = _Fields(top.data.get("assessment", {}), "assessment")
    base = AssessmentConfig()
    assessment = AssessmentConfig(
        position_tolerance=af.get("position_tolerance", float, base.position_tolerance),
        size_tolerance=af.get("size_tolerance", float, base.size_tolerance),
        known_threshold=af.get("known_threshold", float, base.known_threshold),
        hazard_threshold=af.get("hazard_threshold", float, base.hazard_threshold),
        cl_high=af.get("cl_high", float, base.cl_high),
        cl_medium=af.get("cl_medium", float, base.cl_medium),
        classes={c.label: c.general_class for c in classes} if classes else base.classes,
        weapons=tuple(_convert(w, str, f"assessment.weapons[{i}]")
                      for i, w in enumerate(af.get("weapons", list, list(base.weapons)))),
        persons=tuple(_convert(p, str, f"assessment.persons[{i}]")
                      for i, p in enumerate(af.get("persons", list, list(base.persons)))),
    )

    areas = []
    for i, raw in enumerate(top.get("areas", list, [])):
        f = _Fields(raw, f"areas[{i}]")
        pts = f.get("polygon", list)
        poly = tuple(_convert(p, (2,), f"areas[{i}].polygon[{j}]") for j, p in enumerate(pts))
        if len(poly) < 3 or not Polygon(poly).is_valid or Polygon(poly).area <= 0:
            raise ScenarioError(f.sub("polygon"), "needs a simple polygon with positive area")
        areas.append(Area(f.get("name", str), poly))

    known = []
    for i, raw in enumerate(top.get("known_objects", list, [])):
        f = _Fields(raw, f"known_objects[{i}]")
        known.append(KnownObject(
            name=f.get("name", str), general_class=f.get("general_class", str),
            area=f.get("area", str), position=f.get("position", (3, 2)),
            height=f.get("height", float), width=f.get("width", float)))

    world = []
    for i, raw in enumerate(top.get("world", list, [])):
        f = _Fields(raw, f"world[{i}]")
        world.append(WorldObject(
            label=f.get("label", str), position=f.get("position", (3, 2)),
            height=f.get("height", float), width=f.get("width", float),
            known_as=f.get("known_as", str, None), hazard=f.get("hazard", bool, False),
            civilian=f.get("civilian", bool, False)))

    agents = []
    for i, raw in enumerate(top.get("agents", list, [])):
        f = _Fields(raw, f"agents[{i}]")
        wps = []
        for j, wraw in enumerate(f.get("waypoints", list, [])):
            wf = _Fields(wraw, f"agents[{i}].waypoints[{j}]")
            wps.append(Waypoint(wf.get("name", str), wf.get("position", (2,))))
        agents.append(AgentSpec(
            agent_id=f.get("id", str), team=f.get("team", str), start=f.get("start", (2,)),
            waypoints=tuple(wps), start_delay=f.get("start_delay", float, 0.0)))

    seed = top.get("seed", int, 0)
    scenario = Scenario(
        name=top.get("name", str), objective=top.get("objective", str, ""), seed=seed,
        bounds=bounds, sensing_radius=top.get("sensing_radius", float, 0.5),
        areas=tuple(areas), classes=tuple(classes), known_objects=tuple(known),
        world=tuple(world), agents=tuple(agents), noise=noise, timing=timing,
        assessment=assessment)
    validate_scenario(scenario)
    return scenario


def validate_scenario(s: Scenario) -> None:
    """Check cross-field invariants; raise ScenarioError on the first problem."""
    if s.sensing_radius <= 0:
        raise ScenarioError("sensing_radius", "must be positive")
    area_names = [a.name for a in s.areas]
    if len(set(area_names)) != len(area_names):
        raise ScenarioError("areas", "duplicate area name")
    gclasses = {c.general_class for c in s.classes}
    for i, area in enumerate(s.areas):
        for j, (x, y) in enumerate(area.polygon):
            if not s.in_bounds(x, y):
                raise ScenarioError(f"areas[{i}].polygon[{j}]", "vertex outside bounds")
    names = set()
    for i, k in enumerate(s.known_objects):
        path = f"known_objects[{i}]"
        if k.name in names:
            raise ScenarioError(f"{path}.name", f"duplicate known object {k.name!r}")
        names.add(k.name)
        if k.general_class not in gclasses:
            raise ScenarioError(f"{path}.general_class", f"unknown general class {k.general_class!r}")
        if k.area not in area_names:
            raise ScenarioError(f"{path}.area", f"unknown area {k.area!r}")
        if not s.areas[area_names.index(k.area)].contains(*k.position[:2]):
            raise ScenarioError(f"{path}.position", f"not inside assigned area {k.area!r}")
        if k.height <= 0 or k.width <= 0:
            raise ScenarioError(path, "height and width must be positive")
    labels = {c.label for c in s.classes}
    for i, w in enumerate(s.world):
        path = f"world[{i}]"
        if w.label not in labels:
            raise ScenarioError(f"{path}.label", f"unknown class label {w.label!r}")
        if not s.in_bounds(*w.position[:2]):
            raise ScenarioError(f"{path}.position", "outside bounds")
        if w.height <= 0 or w.width <= 0:
            raise ScenarioError(path, "height and width must be positive")
        if w.known_as is not None and w.known_as not in names:
            raise ScenarioError(f"{path}.known_as", f"no known object {w.known_as!r}")
    ids = set()
    for i, a in enumerate(s.agents):
        path = f"agents[{i}]"
        if a.agent_id in ids or a.agent_id == "RCC":
            raise ScenarioError(f"{path}.id", f"duplicate or reserved agent id {a.agent_id!r}")
        ids.add(a.agent_id)
        if a.team not in TEAMS:
            raise ScenarioError(f"{path}.team", f"team must be one of {', '.join(TEAMS)}")
        if not s.in_bounds(*a.start):
            raise ScenarioError(f"{path}.start", "outside bounds")
        if a.start_delay < 0:
            raise ScenarioError(f"{path}.start_delay", "must be non-negative")
        for j, wp in enumerate(a.waypoints):
            if not s.in_bounds(*wp.position):
                raise ScenarioError(f"{path}.waypoints[{j}].position", "waypoint outside bounds")


def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("dcmd.data").iterdir()
                  if p.name.startswith("mission_") and p.name.endswith(".yaml"))


def scenario_text(source: str | Path) -> str:
    """Text of a scenario file, or of a bundled scenario given by name."""
    path = Path(source)
    if path.suffix in (".yaml", ".yml") or path.exists():
        return path.read_text(encoding="utf-8")
    bundled = resources.files("dcmd.data").joinpath(f"{source}.yaml")
    if bundled.is_file():
        return bundled.read_text(encoding="utf-8")
    raise FileNotFoundError(f"no scenario file or bundled scenario named {str(source)!r}")


def load_scenario(source: str | Path) -> Scenario:
    try:
        data = yaml.safe_load(scenario_text(source))
    except yaml.YAMLError as exc:
        raise ScenarioError("", f"scenario does not parse: {exc}") from None
    return scenario_from_dict(data)


# -- synthetic sensing ---------------------------------------------------------------------


@dataclass(frozen=True)
class SensorReading:
    event_id: str
    timestamp: datetime
    detections: tuple[DetectionRecord, ...]


def agent_rng(seed: int, agent_id: str) -> np.random.Generator:
    """Independent stream per agent so scheduling order cannot perturb draws."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(agent_id.encode())])


def _in_footprint(scenario: Scenario, centre: Sequence[float], obj: WorldObject) -> bool:
    return math.hypot(obj.position[0] - centre[0], obj.position[1] - centre[1]) <= scenario.sensing_radius


def visible_objects(scenario: Scenario, position: Sequence[float]) -> list[WorldObject]:
    return [w for w in scenario.world if _in_footprint(scenario, position, w)]


def sense(scenario: Scenario, agent: str, waypoint: Waypoint | Sequence[float],
          rng: np.random.Generator, *, timestamp: datetime | None = None,
          event_id: str | None = None) -> SensorReading:
    """Emit one noisy detection per world object inside the sensing radius."""
    pos = waypoint.position if isinstance(waypoint, Waypoint) else tuple(waypoint)
    timestamp = quantize_time(timestamp or scenario.timing.origin)
    event_id = event_id or f"{agent}-{timestamp:%H%M%S%f}"
    area = scenario.area_at(pos[0], pos[1]) or "outside"
    n = scenario.noise
    bx, by = scenario.bounds
    dets = []
    for obj in visible_objects(scenario, pos):
        dx, dy, dz = rng.normal(0.0, 1.0, 3) * n.position_sigma
        dh, dw = rng.normal(0.0, 1.0, 2) * n.size_sigma
        cls = [rng.uniform(lo, hi) if hi > lo else lo
               for lo, hi in (n.obj_cl, n.position_cl, n.size_cl)]
        x, y, z = obj.position
        dets.append(DetectionRecord(
            obj_name=obj.label,
            position=(min(max(x + dx, 0.0), bx), min(max(y + dy, 0.0), by), max(z + dz, 0.0)),
            height=max(obj.height * (1.0 + dh), 1e-3),
            width=max(obj.width * (1.0 + dw), 1e-3),
            obj_CL=float(cls[0]), position_CL=float(cls[1]), size_CL=float(cls[2]),
            timestamp=timestamp, area=area, source_agent=agent, event_id=event_id))
    return SensorReading(event_id, timestamp, tuple(dets))
