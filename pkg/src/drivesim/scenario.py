"""Declarative scenario documents: parsing, canonical serialization, binding.

A scenario names a map, the ego missions, a table of traffic actors, the
traffic flows that spawn them, and any bubbles. See ``docs/scenario_format.md``
for the full schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bubbles import BubbleSpec
from .road import LanePosition, RoadNetwork, Route, RoutingError, load_map, route_between
from .traffic import BoundFlow, FlowSpec, TrafficActorSpec, bind_flow, sample_actor
from .vehicle import VehicleModel

SCENARIO_FORMAT = 1
DEFAULT_GOAL_RADIUS = 3.0
DEFAULT_MAX_STEPS = 600

__all__ = [
    "Mission", "ScenarioSpec", "BoundScenario", "BoundMission", "ScenarioError",
    "parse_scenario", "load_scenario", "scenario_to_document", "bind_scenario", "sample_actor",
]


class ScenarioError(ValueError):
    """Malformed, inconsistent or unbindable scenario."""


Triple = tuple[str, int, float]


@dataclass(frozen=True)
class Mission:
    agent_id: str
    start: Triple
    goal: Triple
    goal_radius: float = DEFAULT_GOAL_RADIUS


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    map_path: str
    missions: tuple[Mission, ...] = ()
    actors: dict[str, TrafficActorSpec] = field(default_factory=dict)
    flows: tuple[FlowSpec, ...] = ()
    bubbles: tuple[BubbleSpec, ...] = ()
    seed: int = 0
    max_episode_steps: int = DEFAULT_MAX_STEPS
    reward_weights: dict[str, float] | None = None
    base_dir: str = field(default=".", compare=False)

    def resolved_map_path(self) -> Path:
        p = Path(self.map_path)
        return p if p.is_absolute() else Path(self.base_dir) / p


@dataclass(frozen=True)
class BoundMission:
    mission: Mission
    start: LanePosition
    goal: LanePosition
    route: Route


@dataclass(frozen=True)
class BoundScenario:
    spec: ScenarioSpec
    network: RoadNetwork = field(compare=False)
    missions: tuple[BoundMission, ...]
    flows: tuple[BoundFlow, ...] = field(compare=False)

    @property
    def name(self) -> str:
        return self.spec.name

    def mission(self, agent_id: str) -> BoundMission:
        for m in self.missions:
            if m.mission.agent_id == agent_id:
                return m
        raise KeyError(agent_id)


# --- parsing -------------------------------------------------------------------

def _check_keys(obj: Any, allowed: set[str], where: str, required: set[str] = frozenset()):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise ScenarioError(f"{where}: missing key(s) {sorted(missing)}")


def _triple(v, where: str) -> Triple:
    if not (isinstance(v, (list, tuple)) and len(v) == 3 and isinstance(v[0], str)):
        raise ScenarioError(f"{where}: expected [edge, lane_index, offset]")
    try:
        return (v[0], int(v[1]), float(v[2]))
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: bad lane index or offset") from None


def _actor(name: str, raw: dict) -> TrafficActorSpec:
    where = f"actor {name!r}"
    _check_keys(raw, {"speed", "lane_changing_model", "junction_model", "vehicle"}, where)
    speed = raw.get("speed", {})
    lc = raw.get("lane_changing_model", {})
    jm = raw.get("junction_model", {})
    _check_keys(speed, {"mean", "sigma"}, f"{where}.speed")
    _check_keys(lc, {"impatience", "cooperative"}, f"{where}.lane_changing_model")
    _check_keys(jm, {"drive_after_red_time", "drive_after_yellow_time", "impatience"},
                f"{where}.junction_model")
    try:
        return TrafficActorSpec(
            name=name,
            speed_mean=float(speed.get("mean", 1.0)),
            speed_sigma=float(speed.get("sigma", 0.0)),
            lc_impatience=float(lc.get("impatience", 0.0)),
            lc_cooperative=float(lc.get("cooperative", 1.0)),
            junction_impatience=float(jm.get("impatience", 0.0)),
            drive_after_red_time=float(jm.get("drive_after_red_time", -1.0)),
            drive_after_yellow_time=float(jm.get("drive_after_yellow_time", -1.0)),
            vehicle=VehicleModel.from_dict(raw["vehicle"]) if raw.get("vehicle") else None,
        )
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def _flow(i: int, raw: dict, actors: dict) -> FlowSpec:
    where = f"flows[{i}]"
    _check_keys(raw, {"route", "rate", "actors"}, where, {"route", "rate", "actors"})
    _check_keys(raw["route"], {"begin", "end"}, f"{where}.route", {"begin", "end"})
    mix = raw["actors"]
    if not isinstance(mix, dict) or not mix:
        raise ScenarioError(f"{where}: actors must be a non-empty name -> weight object")
    for name in mix:
        if name not in actors:
            raise ScenarioError(f"{where}: unknown actor {name!r}")
    try:
        rate = float(raw["rate"])
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: rate must be a number") from None
    try:
        return FlowSpec(
            begin=_triple(raw["route"]["begin"], f"{where}.route.begin"),
            end=_triple(raw["route"]["end"], f"{where}.route.end"),
            rate=rate,
            actors=tuple(sorted((str(k), float(v)) for k, v in mix.items())),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from None


def _bubble(i: int, raw: dict) -> BubbleSpec:
    where = f"bubbles[{i}]"
    _check_keys(raw, {"id", "center", "half_extents", "rotation", "airlock_margin", "agent",
                      "capacity", "active_window"}, where, {"id", "center", "half_extents", "agent"})
    try:
        window = raw.get("active_window")
        return BubbleSpec(
            id=str(raw["id"]),
            center=(float(raw["center"][0]), float(raw["center"][1])),
            half_extents=(float(raw["half_extents"][0]), float(raw["half_extents"][1])),
            rotation=float(raw.get("rotation", 0.0)),
            airlock_margin=float(raw.get("airlock_margin", 10.0)),
            agent_ref=str(raw["agent"]),
            capacity=int(raw.get("capacity", 1)),
            active_window=(float(window[0]), float(window[1])) if window is not None else None,
        )
    except (TypeError, ValueError, IndexError) as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def parse_scenario(document, base_dir: str | Path = ".") -> ScenarioSpec:
    """Parse a scenario document (dict or JSON text) into an unbound spec."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"malformed scenario JSON: {exc}") from None
    _check_keys(document, {"format", "name", "map", "seed", "max_episode_steps", "missions",
                           "actors", "flows", "bubbles", "reward_weights"}, "scenario",
                {"format", "map"})
    if document["format"] != SCENARIO_FORMAT:
        raise ScenarioError(f"unsupported scenario format {document['format']!r}")

    missions = []
    seen = set()
    for i, raw in enumerate(document.get("missions", [])):
        _check_keys(raw, {"agent_id", "start", "goal", "goal_radius"}, f"missions[{i}]",
                    {"agent_id", "start", "goal"})
        aid = str(raw["agent_id"])
        if aid in seen:
            raise ScenarioError(f"duplicate mission agent id {aid!r}")
        seen.add(aid)
        radius = float(raw.get("goal_radius", DEFAULT_GOAL_RADIUS))
        if radius <= 0:
            raise ScenarioError(f"missions[{i}]: goal_radius must be positive")
        missions.append(Mission(aid, _triple(raw["start"], f"missions[{i}].start"),
                                _triple(raw["goal"], f"missions[{i}].goal"), radius))

    raw_actors = document.get("actors", {})
    if not isinstance(raw_actors, dict):
        raise ScenarioError("actors must be an object")
    actors = {name: _actor(name, raw) for name, raw in sorted(raw_actors.items())}
    flows = tuple(_flow(i, raw, actors) for i, raw in enumerate(document.get("flows", [])))
    bubbles = tuple(_bubble(i, raw) for i, raw in enumerate(document.get("bubbles", [])))
    if len({b.id for b in bubbles}) != len(bubbles):
        raise ScenarioError("duplicate bubble id")
    weights = document.get("reward_weights")
    if weights is not None:
        _check_keys(weights, {"collision", "goal", "off_road", "wrong_way"}, "reward_weights")
        weights = {k: float(v) for k, v in sorted(weights.items())}
    steps = int(document.get("max_episode_steps", DEFAULT_MAX_STEPS))
    if steps < 1:
        raise ScenarioError("max_episode_steps must be at least 1")
    seed = int(document.get("seed", 0))
    if not 0 <= seed < 2 ** 64:
        raise ScenarioError("seed must be an unsigned 64-bit integer")
    return ScenarioSpec(
        name=str(document.get("name", "scenario")),
        map_path=str(document["map"]),
        missions=tuple(missions),
        actors=actors,
        flows=flows,
        bubbles=tuple(sorted(bubbles, key=lambda b: b.id)),
        seed=seed,
        max_episode_steps=steps,
        reward_weights=weights,
        base_dir=str(base_dir),
    )


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}") from None
    return parse_scenario(text, base_dir=path.parent)


def _actor_doc(a: TrafficActorSpec) -> dict:
    doc = {
        "speed": {"mean": a.speed_mean, "sigma": a.speed_sigma},
        "lane_changing_model": {"impatience": a.lc_impatience, "cooperative": a.lc_cooperative},
        "junction_model": {
            "drive_after_red_time": a.drive_after_red_time,
            "drive_after_yellow_time": a.drive_after_yellow_time,
            "impatience": a.junction_impatience,
        },
    }
    if a.vehicle is not None:
        doc["vehicle"] = dict(vars(a.vehicle))
    return doc


def scenario_to_document(spec: ScenarioSpec) -> dict:
    """Canonical document; ``parse_scenario`` of it gives back ``spec``."""
    doc = {
        "format": SCENARIO_FORMAT,
        "name": spec.name,
        "map": spec.map_path,
        "seed": spec.seed,
        "max_episode_steps": spec.max_episode_steps,
        "missions": [
            {"agent_id": m.agent_id, "start": list(m.start), "goal": list(m.goal),
             "goal_radius": m.goal_radius}
            for m in spec.missions
        ],
        "actors": {name: _actor_doc(a) for name, a in sorted(spec.actors.items())},
        "flows": [
            {"route": {"begin": list(f.begin), "end": list(f.end)}, "rate": f.rate,
             "actors": dict(f.actors)}
            for f in spec.flows
        ],
        "bubbles": [
            {"id": b.id, "center": list(b.center), "half_extents": list(b.half_extents),
             "rotation": b.rotation, "airlock_margin": b.airlock_margin, "agent": b.agent_ref,
             "capacity": b.capacity,
             "active_window": list(b.active_window) if b.active_window else None}
            for b in spec.bubbles
        ],
    }
    if spec.reward_weights is not None:
        doc["reward_weights"] = dict(spec.reward_weights)
    return doc


# --- binding -------------------------------------------------------------------

def _resolve(network: RoadNetwork, triple: Triple, where: str) -> LanePosition:
    try:
        return network.resolve(*triple)
    except KeyError as exc:
        raise ScenarioError(f"{where}: cannot resolve {list(triple)}: {exc.args[0]}") from None


def bind_scenario(spec, network: RoadNetwork | None = None, zoo=None) -> BoundScenario:
    """Resolve every triple, compute mission and flow routes, check bubbles.

    Accepts an already bound scenario, which is re-bound from its spec
    (binding is idempotent). ``zoo`` (any container of agent names) enables
    checking bubble agent references.
    """
    if isinstance(spec, BoundScenario):
        network = network or spec.network
        spec = spec.spec
    if network is None:
        try:
            network = load_map(spec.resolved_map_path())
        except ValueError as exc:
            raise ScenarioError(f"map {spec.resolved_map_path()}: {exc}") from None
    missions = []
    for m in spec.missions:
        start = _resolve(network, m.start, f"mission {m.agent_id!r} start")
        goal = _resolve(network, m.goal, f"mission {m.agent_id!r} goal")
        try:
            route = route_between(network, start, goal)
        except RoutingError:
            raise ScenarioError(f"unreachable mission {m.agent_id!r}: no route "
                                f"{list(m.start)} -> {list(m.goal)}") from None
        missions.append(BoundMission(m, start, goal, route))
    flows = []
    for i, f in enumerate(spec.flows):
        _resolve(network, f.begin, f"flows[{i}].begin")
        _resolve(network, f.end, f"flows[{i}].end")
        try:
            flows.append(bind_flow(network, i, f))
        except RoutingError:
            raise ScenarioError(f"flows[{i}]: route {list(f.begin)} -> {list(f.end)} unreachable") from None
    for b in spec.bubbles:
        reach = (b.half_extents[0] ** 2 + b.half_extents[1] ** 2) ** 0.5
        if not network.lanes_near(b.center[0], b.center[1], reach):
            raise ScenarioError(f"bubble {b.id!r} does not cover any lane")
        if zoo is not None and b.agent_ref not in zoo:
            raise ScenarioError(f"bubble {b.id!r}: unknown zoo agent {b.agent_ref!r}")
    return BoundScenario(spec, network, tuple(missions), tuple(flows))
