"""Simulation core: world state, the fixed step order, events and episode logs.

One step advances the world by ``DT`` in this order:

1. social agents act (remote ones may be substituted on timeout);
2. ego and social commands are applied through the vehicle models;
3. traffic steps;
4. bubble transitions run and states are reconciled;
5. collisions are detected;
6. per-ego events are evaluated;
7. finished egos and crashed vehicles are despawned;
8. observations are sensed, stacked and rewarded;
9. the step is appended to the episode log and the clock advances.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .agents import AgentInterface, default_zoo, to_command
from .bubbles import TRAFFIC, BubbleManager, Slot, ego_owner
from .road import LanePosition, RoutingError, lane_to_world, route_between, route_progress, wrap_angle
from .scenario import BoundMission, BoundScenario, ScenarioError, bind_scenario, scenario_to_document
from .sensing import (ObservationFrame, StackedObservation, compute_reward, locate, sense_frame,
                      stack_frames)
from .traffic import TrafficProvider
from .vehicle import (DEFAULT_MODEL, DT, FULL_BRAKE, LaneFollower, LaneFollowing, OffRoadError,
                      VehicleState, apply_command)

log = logging.getLogger(__name__)

LOG_FORMAT = "drivesim-episode"
LOG_VERSION = 1
HASH_CELL = 10.0
WRONG_WAY_STEPS = 5
STATE_DIGITS = 6


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class EventFlags:
    collision: bool = False
    off_road: bool = False
    reached_goal: bool = False
    wrong_way: bool = False
    timeout: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AgentResult:
    observation: StackedObservation
    reward: float
    done: bool
    info: dict


@dataclass
class EgoRecord:
    agent_id: str
    vehicle_id: str
    mission: BoundMission
    interface: AgentInterface
    controller: LaneFollower
    state: VehicleState
    model: object = DEFAULT_MODEL
    history: list = field(default_factory=list)
    progress: float = 0.0
    wrong_way_run: int = 0
    target: float | None = None
    done: bool = False
    events: EventFlags = EventFlags()


@dataclass
class World:
    scenario: BoundScenario
    seed: int
    rng: np.random.Generator
    traffic: TrafficProvider
    bubbles: BubbleManager
    time: float = 0.0
    step_index: int = 0
    controlled: dict = field(default_factory=dict)
    ownership: dict = field(default_factory=dict)
    egos: dict = field(default_factory=dict)
    log: "EpisodeLog | None" = None
    collisions_total: int = 0
    _step_vehicles: dict = field(default_factory=dict, repr=False)

    @property
    def network(self):
        return self.scenario.network

    def vehicles(self) -> dict[str, VehicleState]:
        """Every live vehicle state, keyed and ordered by id."""
        merged = dict(self.traffic.states())
        merged.update(self.controlled)
        return {vid: merged[vid] for vid in sorted(merged)}

    def non_traffic_states(self) -> list[VehicleState]:
        return [self.controlled[v] for v in sorted(self.controlled)]

    def live_agents(self) -> list[str]:
        return [a for a in sorted(self.egos) if not self.egos[a].done]

    @property
    def finished(self) -> bool:
        if self.step_index >= self.scenario.spec.max_episode_steps:
            return True
        return bool(self.egos) and not self.live_agents()


# --- collisions ----------------------------------------------------------------

def broad_phase(vehicles, cell: float = HASH_CELL) -> list[tuple[int, int]]:
    """Candidate index pairs sharing a uniform-grid cell, sorted."""
    grid: dict[tuple[int, int], list[int]] = {}
    for k, v in enumerate(vehicles):
        r = 0.5 * math.hypot(v.length, v.width)
        for i in range(math.floor((v.x - r) / cell), math.floor((v.x + r) / cell) + 1):
            for j in range(math.floor((v.y - r) / cell), math.floor((v.y + r) / cell) + 1):
                grid.setdefault((i, j), []).append(k)
    pairs = set()
    for members in grid.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                pairs.add((members[a], members[b]))
    return sorted(pairs)


def detect_collisions(vehicles) -> list[tuple[str, str]]:
    """Overlapping vehicle pairs ``(id_a, id_b)`` with ``id_a < id_b``, sorted."""
    vs = sorted(vehicles.values() if isinstance(vehicles, dict) else vehicles, key=lambda v: v.id)
    out = []
    for a, b in broad_phase(vs):
        va, vb = vs[a], vs[b]
        if kernels.obb_overlap(va.x, va.y, va.heading, va.length, va.width,
                               vb.x, vb.y, vb.heading, vb.length, vb.width):
            out.append((va.id, vb.id))
    return out


# --- events ----------------------------------------------------------------------

def detect_events(world: World, ego: EgoRecord, collided: bool) -> EventFlags:
    net = world.network
    st = ego.state
    pos, dist = net.project(st.x, st.y)
    lane = net.lanes[pos.lane_id]
    off_road = dist > lane.off_road_margin()
    goal = ego.mission.goal
    gx, gy, _ = lane_to_world(net.lanes[goal.lane_id], goal.s)
    reached = math.hypot(st.x - gx, st.y - gy) <= ego.mission.mission.goal_radius
    if abs(wrap_angle(st.heading - lane.heading_at(pos.s))) > math.pi / 2:
        ego.wrong_way_run += 1
    else:
        ego.wrong_way_run = 0
    timeout = (not reached) and world.step_index >= world.scenario.spec.max_episode_steps
    return EventFlags(collided, off_road, reached, ego.wrong_way_run >= WRONG_WAY_STEPS, timeout)


def mission_progress(world: World, ego: EgoRecord) -> float:
    net = world.network
    route = ego.mission.route
    pos, _ = net.project(ego.state.x, ego.state.y, route.lane_ids)
    return route_progress(route, pos)


# --- episode log ----------------------------------------------------------------------

def _r(v: float) -> float:
    return round(float(v), STATE_DIGITS)


def state_row(v: VehicleState) -> list:
    return [v.id, _r(v.x), _r(v.y), _r(v.heading), _r(v.speed), _r(v.accel), _r(v.steering),
            v.owner]


def encode_for_log(action):
    from .protocol import encode_action
    return encode_action(action)


class EpisodeLog:
    """Newline-delimited JSON: one header line, then one record per step."""

    def __init__(self, header: dict):
        self.header = header
        self.records: list[dict] = []

    def append(self, record: dict):
        if record["step"] != len(self.records):
            raise EngineError(f"non-contiguous log record {record['step']}")
        self.records.append(record)

    def lines(self):
        yield json.dumps(self.header, sort_keys=True, separators=(",", ":"))
        for r in self.records:
            yield json.dumps(r, sort_keys=True, separators=(",", ":"))

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def write(self, path):
        """Write atomically; a ``.gz`` suffix compresses."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.dumps().encode()
        if path.suffix == ".gz":
            buf = io.BytesIO()
            with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
                gz.write(data)
            data = buf.getvalue()
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)

    @classmethod
    def parse(cls, text: str) -> "EpisodeLog":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines:
            raise EngineError("empty episode log")
        header = json.loads(lines[0])
        if header.get("format") != LOG_FORMAT:
            raise EngineError("not an episode log")
        out = cls(header)
        for l in lines[1:]:
            out.append(json.loads(l))
        return out

    @classmethod
    def read(cls, path) -> "EpisodeLog":
        path = Path(path)
        raw = path.read_bytes()
        if path.suffix == ".gz":
            raw = gzip.decompress(raw)
        return cls.parse(raw.decode())


def config_hash(scenario: BoundScenario) -> str:
    doc = {"scenario": scenario_to_document(scenario.spec), "dt": DT,
           "log_version": LOG_VERSION, "map": str(scenario.spec.map_path)}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# --- reset / step -------------------------------------------------------------------------

def _frame(world: World, state: VehicleState, goal, route, bev: bool) -> ObservationFrame:
    vehicles = list(world._step_vehicles.values())
    return sense_frame(world.network, state, vehicles, goal, route, bev=bev)


def reset(scenario, seed: int | None = None, interfaces: dict | None = None, zoo=None,
          record: bool = True):
    """Start an episode.

    Returns ``(world, results)`` with one :class:`AgentResult` per mission.
    """
    scenario = scenario if isinstance(scenario, BoundScenario) else bind_scenario(scenario)
    seed = scenario.spec.seed if seed is None else int(seed)
    zoo = zoo or default_zoo()
    net = scenario.network
    rng = np.random.Generator(np.random.PCG64(seed))
    traffic = TrafficProvider(net, scenario.flows, scenario.spec.actors)
    bubbles = BubbleManager(scenario.spec.bubbles, zoo.build)
    world = World(scenario, seed, rng, traffic, bubbles)
    interfaces = interfaces or {}
    starts = {}
    for bm in sorted(scenario.missions, key=lambda m: m.mission.agent_id):
        aid = bm.mission.agent_id
        key = (bm.start.lane_id, round(bm.start.s, 6), round(bm.start.t, 6))
        if key in starts:
            raise ScenarioError(f"missions {starts[key]!r} and {aid!r} share a start position")
        starts[key] = aid
        x, y, h = lane_to_world(net.lanes[bm.start.lane_id], bm.start.s, bm.start.t)
        vid = f"ego-{aid}"
        st = VehicleState(vid, x, y, h, 0.0, 0.0, 0.0, DEFAULT_MODEL.length, DEFAULT_MODEL.width,
                          ego_owner(aid))
        ctl = LaneFollower(net, route=bm.route.lane_ids)
        world.egos[aid] = EgoRecord(aid, vid, bm, interfaces.get(aid) or AgentInterface(), ctl, st)
        world.controlled[vid] = st
        world.ownership[vid] = ego_owner(aid)
    states = list(world.controlled.values())
    for p, q in detect_collisions(states):
        raise ScenarioError(f"mission starts overlap: {p} and {q}")
    world._step_vehicles = world.vehicles()
    results = {}
    for aid in sorted(world.egos):
        ego = world.egos[aid]
        ego.progress = mission_progress(world, ego)
        f = _frame(world, ego.state, ego.mission.goal, ego.mission.route, ego.interface.bev)
        ego.history.append(f)
        results[aid] = AgentResult(stack_frames(ego.history), 0.0, False,
                                   {"events": EventFlags().to_dict(), "raw_reward": 0.0})
    if record:
        world.log = EpisodeLog({
            "format": LOG_FORMAT, "version": LOG_VERSION, "scenario": scenario.name,
            "seed": seed, "config_hash": config_hash(scenario), "dt": DT,
            "max_episode_steps": scenario.spec.max_episode_steps,
            "agents": {aid: {"vehicle": world.egos[aid].vehicle_id,
                             "route": world.egos[aid].mission.route.to_dict(),
                             "goal_radius": world.egos[aid].mission.mission.goal_radius}
                       for aid in sorted(world.egos)},
            "initial": [state_row(v) for v in world._step_vehicles.values()],
        })
    return world, results


def _lane_limit(frame: ObservationFrame | None, world: World, state: VehicleState) -> float:
    if frame is not None:
        return frame.speed_limit
    pos, _ = world.network.project(state.x, state.y)
    return world.network.lanes[pos.lane_id].speed_limit


def _drive(world: World, state: VehicleState, model, command, controller, info: dict):
    """Apply one command; a vehicle that has lost its lane brakes."""
    try:
        new, low, extra = apply_command(state, model, command, DT, world.network, controller)
    except OffRoadError:
        info["lost_lane"] = True
        new, low, extra = apply_command(state, model, FULL_BRAKE, DT)
    info.update(extra)
    return replace(new, owner=state.owner), low


def _social_route(world: World, slot: Slot, state: VehicleState):
    rec = slot.record
    pos, _ = world.network.project(state.x, state.y)
    try:
        return route_between(world.network, LanePosition(pos.lane_id, pos.s),
                             LanePosition(rec.goal_lane, rec.goal_s))
    except RoutingError:
        return None


def step(world: World, actions: dict) -> dict:
    """Advance the world one step; returns ``{agent_id: AgentResult}`` for egos live at entry."""
    net = world.network
    live = world.live_agents()
    missing = [a for a in live if a not in actions]
    if missing:
        raise EngineError(f"missing actions for agents {missing}")
    unknown = sorted(set(actions) - set(world.egos))
    if unknown:
        raise EngineError(f"actions for unknown agents {unknown}")
    now = world.time
    record = {"step": world.step_index, "time": round(now + DT, 9)}
    infos = {aid: {} for aid in live}

    # (1) social agents act
    social_actions = {}
    social_subs = {}
    for slot in world.bubbles.captured():
        obs = stack_frames(slot.history) if slot.history else None
        if obs is None:
            social_actions[slot.vehicle_id] = LaneFollowing(0.0, 0)
            continue
        act = slot.agent.act(obs)
        sub = getattr(slot.agent, "last_substitution", None)
        if sub:
            social_subs[slot.vehicle_id] = sub
        social_actions[slot.vehicle_id] = act

    # (2) apply ego and social commands
    logged_actions = {}
    for aid in live:
        ego = world.egos[aid]
        act = actions[aid]
        last = ego.history[-1] if ego.history else None
        cmd = to_command(act, ego.state.speed, _lane_limit(last, world, ego.state), ego.target)
        if isinstance(cmd, LaneFollowing):
            ego.target = cmd.target_speed
        logged_actions[aid] = encode_for_log(act)
        new, low = _drive(world, ego.state, ego.model, cmd, ego.controller, infos[aid])
        if "lane_change" in infos[aid]:
            infos[aid]["lane_change"]["direction"] = cmd.lane_change
        ego.state = new
        world.controlled[ego.vehicle_id] = new
    social_info = {}
    for slot in world.bubbles.captured():
        vid = slot.vehicle_id
        state = world.controlled[vid]
        if slot.controller is None:
            slot.route = _social_route(world, slot, state)
            slot.controller = LaneFollower(net, route=slot.route.lane_ids if slot.route else ())
        last = slot.history[-1] if slot.history else None
        act = social_actions[vid]
        cmd = to_command(act, state.speed, _lane_limit(last, world, state))
        info = {}
        new, _ = _drive(world, state, slot.record.model, cmd, slot.controller, info)
        world.controlled[vid] = new
        if info:
            social_info[vid] = info
    if social_actions:
        record["social_actions"] = {v: encode_for_log(a) for v, a in sorted(social_actions.items())}
    if social_subs:
        record["social_substitutions"] = dict(sorted(social_subs.items()))

    # (3) traffic
    traffic_events = world.traffic.step(now, DT, world.rng, world.non_traffic_states())

    # (4) bubbles
    handovers, bubble_events = world.bubbles.step(world)
    traffic_events.extend(bubble_events)

    # (5) collisions
    vehicles = world.vehicles()
    collisions = detect_collisions(vehicles)
    crashed = {v for pair in collisions for v in pair}
    world.collisions_total += len(collisions)

    # (6) events
    world.step_index += 1
    world.time = world.step_index * DT
    flags = {}
    for aid in live:
        ego = world.egos[aid]
        flags[aid] = detect_events(world, ego, ego.vehicle_id in crashed)
        ego.events = flags[aid]

    # (7) despawn
    for aid in live:
        ego = world.egos[aid]
        f = flags[aid]
        if f.collision or f.reached_goal or f.off_road or f.timeout:
            ego.done = True
            world.controlled.pop(ego.vehicle_id, None)
            world.ownership.pop(ego.vehicle_id, None)
    for vid in sorted(crashed):
        owner = world.ownership.get(vid)
        if owner == TRAFFIC:
            traffic_events.extend(world.traffic.despawn(vid, "collision"))
            del world.ownership[vid]
        elif owner is not None and owner.startswith("social:"):
            world.bubbles.slots.pop(vid, None)
            del world.controlled[vid]
            del world.ownership[vid]
            traffic_events.append({"event": "despawn", "id": vid, "reason": "collision"})
    for slot in world.bubbles.captured():
        vid = slot.vehicle_id
        state = world.controlled[vid]
        reason = None
        pos, dist = locate(net, state, slot.route)
        if dist > net.lanes[pos.lane_id].off_road_margin():
            reason = "off_road"
        elif slot.route is not None:
            try:
                if route_progress(slot.route, pos) >= slot.route.total_length - 1.0:
                    reason = "route_end"
            except RoutingError:
                pass
        elif not net.lanes[pos.lane_id].successors and pos.s >= net.lanes[pos.lane_id].length - 1.0:
            reason = "route_end"
        if reason:
            del world.bubbles.slots[vid]
            del world.controlled[vid]
            del world.ownership[vid]
            traffic_events.append({"event": "despawn", "id": vid, "reason": reason})
    for e in traffic_events:
        if e.get("event") == "spawn":
            world.ownership[e["id"]] = TRAFFIC
        elif e.get("event") == "despawn" and world.ownership.get(e["id"]) == TRAFFIC \
                and e["id"] not in world.traffic.vehicles:
            del world.ownership[e["id"]]
    _check_ownership(world)

    # (8) sense, stack, reward
    world._step_vehicles = world.vehicles()
    results = {}
    weights = world.scenario.spec.reward_weights
    rewards = {}
    ego_log = {}
    for aid in live:
        ego = world.egos[aid]
        prev = ego.progress
        ego.progress = mission_progress(world, ego)
        raw, shaped = compute_reward(prev, ego.progress, flags[aid], weights)
        f = _frame(world, ego.state, ego.mission.goal, ego.mission.route, ego.interface.bev)
        ego.history.append(f)
        info = infos[aid]
        info["events"] = flags[aid].to_dict()
        info["raw_reward"] = raw
        results[aid] = AgentResult(stack_frames(ego.history), shaped, ego.done, info)
        rewards[aid] = [raw, shaped]
        ego_log[aid] = {"progress": ego.progress, "speed_limit": f.speed_limit,
                        "neighbors": len(f.neighbors), "done": ego.done}
    for vid in sorted(world.bubbles.slots):
        slot = world.bubbles.slots[vid]
        state = world._step_vehicles.get(vid)
        if state is None:
            continue
        rec = slot.record or world.traffic.vehicles.get(vid)
        if rec is None:
            continue
        goal = LanePosition(rec.goal_lane, rec.goal_s)
        bev = getattr(getattr(slot.agent, "interface", None), "bev", False)
        slot.history.append(_frame(world, state, goal, slot.route, bev))
        del slot.history[:-3]

    # (9) log
    if world.log is not None:
        record.update({
            "vehicles": [state_row(v) for v in world._step_vehicles.values()],
            "actions": logged_actions,
            "rewards": rewards,
            "events": {aid: flags[aid].to_dict() for aid in live},
            "ego": ego_log,
            "info": {aid: {k: v for k, v in infos[aid].items() if k not in ("events", "raw_reward")}
                     for aid in live},
        })
        if social_info:
            record["social_info"] = social_info
        if traffic_events:
            record["traffic_events"] = traffic_events
        if handovers:
            record["handovers"] = [h.to_dict() for h in handovers]
        if collisions:
            record["collisions"] = [list(p) for p in collisions]
        world.log.append(record)
    return results


def _check_ownership(world: World):
    expected = set(world.traffic.vehicles) | set(world.controlled)
    if set(world.ownership) != expected:
        raise EngineError(f"ownership table out of sync: {sorted(set(world.ownership) ^ expected)}")
    for vid in world.traffic.vehicles:
        if world.ownership[vid] != TRAFFIC or vid in world.controlled:
            raise EngineError(f"vehicle {vid} has conflicting owners")


def world_hash(world: World, include_time: bool = True) -> str:
    doc = {"vehicles": [state_row(v) for v in world.vehicles().values()],
           "ownership": dict(sorted(world.ownership.items())),
           "rng": world.rng.bit_generator.state}
    if include_time:
        doc["time"] = [world.step_index, world.time]
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def close_episode(world: World):
    """Close agent sessions held by bubble slots."""
    for slot in world.bubbles.slots.values():
        if slot.agent is not None:
            slot.agent.close()
    world.bubbles.slots.clear()


def run_episode(scenario, seed: int, agents: dict, zoo=None, max_steps: int | None = None):
    """Run one episode with per-mission agent instances; returns the world (with log).

    ``agents`` maps agent id to an object with ``act(StackedObservation)``.
    Remote substitutions are recorded in the step info.
    """
    interfaces = {aid: getattr(a, "interface", None) for aid, a in agents.items()}
    world, results = reset(scenario, seed, interfaces, zoo)
    limit = world.scenario.spec.max_episode_steps if max_steps is None else max_steps
    try:
        while not world.finished and world.step_index < limit:
            acts = {}
            subs = {}
            for aid in world.live_agents():
                acts[aid] = agents[aid].act(results[aid].observation)
                sub = getattr(agents[aid], "last_substitution", None)
                if sub:
                    subs[aid] = sub
            results = step(world, acts)
            if subs and world.log is not None:
                world.log.records[-1]["substitutions"] = subs
    finally:
        close_episode(world)
    return world


def replay(scenario, log: EpisodeLog, zoo=None) -> EpisodeLog:
    """Re-run a recorded episode from its seed and ego actions."""
    from .protocol import decode_action
    world, _ = reset(scenario, log.header["seed"], zoo=zoo)
    for rec in log.records:
        acts = {aid: decode_action(a) for aid, a in rec["actions"].items()}
        step(world, acts)
        if "substitutions" in rec:
            world.log.records[-1]["substitutions"] = rec["substitutions"]
    close_episode(world)
    return world.log


class Env:
    """Gym-style wrapper: ``reset()`` then ``step(actions)`` until all agents are done."""

    def __init__(self, scenario, zoo=None, interfaces=None):
        self.scenario = scenario if isinstance(scenario, BoundScenario) else bind_scenario(scenario)
        self.zoo = zoo
        self.interfaces = interfaces
        self.world = None

    def reset(self, seed: int | None = None):
        if self.world is not None:
            close_episode(self.world)
        self.world, results = reset(self.scenario, seed, self.interfaces, self.zoo)
        return {a: r.observation for a, r in results.items()}

    def step(self, actions: dict):
        results = step(self.world, actions)
        obs = {a: r.observation for a, r in results.items()}
        rewards = {a: r.reward for a, r in results.items()}
        dones = {a: r.done for a, r in results.items()}
        dones["__all__"] = self.world.finished
        infos = {a: r.info for a, r in results.items()}
        return obs, rewards, dones, infos

    def close(self):
        if self.world is not None:
            close_episode(self.world)
