"""Background traffic: flow spawning, IDM car following, MOBIL lane changes.

Traffic vehicles are rectangles moving in lane coordinates. They carry no
steering state; lateral motion during a lane change is a linear blend of the
lateral offset over :data:`LANE_CHANGE_DURATION` seconds.

Junctions are handled with per-lane reservations: a vehicle may only cross
its stop line once it holds its junction lane, and no two conflicting
junction lanes are ever held at the same time. Requests are served in
arrival order; a vehicle may jump the queue over earlier arrivals that are
still far from the stop line, more readily the higher its
``junction_impatience``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .road import Lane, LanePosition, RoadNetwork, Route, RoutingError, lane_to_world, route_between
from .vehicle import VehicleModel, VehicleState

LANE_CHANGE_DURATION = 3.0
LANE_CHANGE_INTERVAL = 1.0
LOOKAHEAD = 150.0
APPROACH_DISTANCE = 50.0
MAX_PENDING = 20
#: Distance to the lane end under which a route-required change turns cooperative.
MERGE_ZONE = 120.0


@dataclass(frozen=True)
class IDMParams:
    accel: float = 1.5
    decel: float = 2.0
    min_gap: float = 2.0
    headway: float = 1.5
    exponent: float = 4.0
    max_decel: float = 9.0


IDM = IDMParams()


def idm_acceleration(v: float, v_lead: float | None, gap: float, desired_speed: float,
                     params: IDMParams = IDM) -> float:
    """Intelligent Driver Model acceleration.

    ``v_lead=None`` (or an infinite gap) means free road. The result is
    bounded below by ``-params.max_decel``.
    """
    p = params
    free = 1.0 - (v / desired_speed) ** p.exponent
    if v_lead is None or math.isinf(gap):
        return max(p.accel * free, -p.max_decel)
    if gap <= 0.0:
        return -p.max_decel
    s_star = p.min_gap + max(0.0, v * p.headway + v * (v - v_lead) / (2.0 * math.sqrt(p.accel * p.decel)))
    return max(p.accel * (free - (s_star / gap) ** 2), -p.max_decel)


def idm_equilibrium_gap(v: float, desired_speed: float, params: IDMParams = IDM) -> float:
    """Closed-form steady-state gap behind a leader cruising at ``v``."""
    p = params
    return (p.min_gap + v * p.headway) / math.sqrt(1.0 - (v / desired_speed) ** p.exponent)


# --- actors and flows ---------------------------------------------------------

@dataclass(frozen=True)
class TrafficActorSpec:
    name: str
    speed_mean: float = 1.0
    speed_sigma: float = 0.0
    lc_impatience: float = 0.0
    lc_cooperative: float = 1.0
    junction_impatience: float = 0.0
    drive_after_red_time: float = -1.0
    drive_after_yellow_time: float = -1.0
    vehicle: VehicleModel | None = None

    def __post_init__(self):
        if not self.speed_mean > 0:
            raise ValueError(f"actor {self.name!r}: speed mean must be positive")
        if self.speed_sigma < 0:
            raise ValueError(f"actor {self.name!r}: speed sigma must be non-negative")
        for k in ("lc_impatience", "lc_cooperative", "junction_impatience"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ValueError(f"actor {self.name!r}: {k} must be in [0, 1]")

    @property
    def model(self) -> VehicleModel:
        return self.vehicle or VehicleModel()


@dataclass(frozen=True)
class FlowSpec:
    begin: tuple[str, int, float]
    end: tuple[str, int, float]
    rate: float
    actors: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("negative rate")
        if self.rate == 0:
            raise ValueError("flow rate must be positive")
        if any(w < 0 for _, w in self.actors):
            raise ValueError("negative actor weight")
        if sum(w for _, w in self.actors) <= 0:
            raise ValueError("actor weights sum to zero")


def sample_actor(actor_mix, rng: np.random.Generator, actors: dict | None = None):
    """Weighted draw from ``actor_mix`` (pairs or mapping of name -> weight).

    Consumes exactly one uniform from ``rng``. Returns the actor spec when an
    ``actors`` table is given, else the name.
    """
    items = sorted(actor_mix.items()) if isinstance(actor_mix, dict) else list(actor_mix)
    total = sum(w for _, w in items)
    u = rng.random() * total
    acc = 0.0
    chosen = items[-1][0]
    for name, w in items:
        acc += w
        if u < acc:
            chosen = name
            break
    return actors[chosen] if actors is not None else chosen


# --- lane change decision -----------------------------------------------------

@dataclass(frozen=True)
class Neighbor:
    speed: float
    gap: float
    desired_speed: float


@dataclass(frozen=True)
class LaneSide:
    available: bool = False
    leader: Neighbor | None = None
    follower: Neighbor | None = None


@dataclass(frozen=True)
class Surroundings:
    current: LaneSide
    left: LaneSide = LaneSide()
    right: LaneSide = LaneSide()
    #: route-required direction (+1 left, -1 right, 0 none)
    mandatory: int = 0


@dataclass(frozen=True)
class LaneChangeParams:
    politeness: float
    threshold: float
    safe_decel: float = 4.0
    min_gap: float = IDM.min_gap
    idm: IDMParams = IDM

    @classmethod
    def from_actor(cls, actor: TrafficActorSpec) -> "LaneChangeParams":
        return cls(politeness=actor.lc_cooperative,
                   threshold=0.4 * (1.0 - actor.lc_impatience) + 0.1)


@dataclass(frozen=True)
class Ego:
    """The deciding vehicle's own longitudinal state."""

    speed: float
    desired_speed: float
    length: float = 4.6


def _acc(v, v0, lead: Neighbor | None, gap: float | None, p: IDMParams):
    if lead is None:
        return idm_acceleration(v, None, math.inf, v0, p)
    return idm_acceleration(v, lead.speed, lead.gap if gap is None else gap, v0, p)


def _incentive(ego: Ego, cur: LaneSide, side: LaneSide, params: LaneChangeParams):
    """``(incentive, safe)`` for moving into ``side``."""
    p = params.idm
    L = ego.length
    if side.leader is not None and side.leader.gap < params.min_gap:
        return -math.inf, False
    if side.follower is not None and side.follower.gap < params.min_gap:
        return -math.inf, False
    a_self = _acc(ego.speed, ego.desired_speed, cur.leader, None, p)
    a_self_new = _acc(ego.speed, ego.desired_speed, side.leader, None, p)
    gain = a_self_new - a_self
    others = 0.0
    safe = a_self_new >= -params.safe_decel
    if side.follower is not None:
        f = side.follower
        before_gap = (f.gap + L + side.leader.gap) if side.leader is not None else math.inf
        before = idm_acceleration(f.speed, side.leader.speed if side.leader else None,
                                  before_gap, f.desired_speed, p)
        after = idm_acceleration(f.speed, ego.speed, f.gap, f.desired_speed, p)
        others += after - before
        if after < -params.safe_decel:
            safe = False
    if cur.follower is not None:
        f = cur.follower
        before = idm_acceleration(f.speed, ego.speed, f.gap, f.desired_speed, p)
        after_gap = (f.gap + L + cur.leader.gap) if cur.leader is not None else math.inf
        after = idm_acceleration(f.speed, cur.leader.speed if cur.leader else None,
                                 after_gap, f.desired_speed, p)
        others += after - before
    return gain + params.politeness * others, safe


def lane_change_decision(vehicle: Ego, neighbors: Surroundings, params: LaneChangeParams) -> int:
    """MOBIL decision: -1 (right), 0 (stay) or +1 (left).

    A route-required change skips the incentive test but never the safety
    test. Ties between sides go left.
    """
    best, best_val = 0, -math.inf
    for direction, side in ((1, neighbors.left), (-1, neighbors.right)):
        if not side.available:
            continue
        val, safe = _incentive(vehicle, neighbors.current, side, params)
        if not safe:
            continue
        if neighbors.mandatory == direction:
            return direction
        if neighbors.mandatory != 0:
            continue
        if val > params.threshold and val > best_val:
            best, best_val = direction, val
    return best


# --- provider -----------------------------------------------------------------

@dataclass
class BoundFlow:
    index: int
    spec: FlowSpec
    route: Route
    groups: tuple[str, ...]
    pending: deque = field(default_factory=deque)


@dataclass
class TrafficVehicle:
    """A traffic-controlled rectangle in lane coordinates.

    ``speed_factor`` multiplies the current lane's speed limit to give the
    desired speed; it is drawn once at spawn.
    """

    id: str
    actor: TrafficActorSpec
    model: VehicleModel
    speed_factor: float
    lane_id: str
    s: float
    speed: float
    groups: tuple[str, ...]
    group_index: int
    goal_lane: str
    goal_s: float
    flow_index: int = -1
    accel: float = 0.0
    blend_from: str | None = None
    blend_t0: float = 0.0
    blend_elapsed: float = 0.0
    next_decision: float = 0.0
    reserved: str | None = None

    @property
    def lateral(self) -> float:
        if self.blend_from is None:
            return 0.0
        return self.blend_t0 * max(0.0, 1.0 - self.blend_elapsed / LANE_CHANGE_DURATION)

    def desired_speed(self, net: RoadNetwork) -> float:
        return self.speed_factor * net.lanes[self.lane_id].speed_limit

    def pose(self, net: RoadNetwork) -> tuple[float, float, float]:
        lane = net.lanes[self.lane_id]
        x, y, h = lane_to_world(lane, min(max(self.s, 0.0), lane.length), self.lateral)
        if self.blend_from is not None:
            rate = -self.blend_t0 / LANE_CHANGE_DURATION
            h = h + math.atan2(rate, max(self.speed, 1.0))
        return x, y, h

    def to_state(self, net: RoadNetwork) -> VehicleState:
        x, y, h = self.pose(net)
        return VehicleState(self.id, x, y, h, self.speed, self.accel, 0.0,
                            self.model.length, self.model.width, "traffic")


@dataclass(frozen=True)
class Occupant:
    s: float
    id: str
    speed: float
    length: float
    desired_speed: float


class TrafficProvider:
    """Owns every traffic-controlled vehicle and the junction reservations."""

    def __init__(self, network: RoadNetwork, flows: list[BoundFlow] = (),
                 actors: dict[str, TrafficActorSpec] | None = None, params: IDMParams = IDM):
        self.network = network
        # fresh spawn queues: bound flows are shared between episodes
        self.flows = [replace(f, pending=deque()) for f in flows]
        self.actors = dict(actors or {})
        self.params = params
        self.vehicles: dict[str, TrafficVehicle] = {}
        self.counter = 0
        self.requests: dict[str, float] = {}
        self.reservations: dict[str, set[str]] = {}
        self.entered: set[str] = set()
        self.retired: set[str] = set()
        self._mandatory: dict[str, int] = {}

    # --- path helpers ---------------------------------------------------------
    def _next_lane(self, tv: TrafficVehicle, lane: Lane, group_index: int):
        """Successor of ``lane`` that continues the route, with its group index."""
        net = self.network
        if group_index + 1 >= len(tv.groups):
            return None, group_index
        nxt_group = tv.groups[group_index + 1]
        for succ in sorted(lane.successors):
            if net.group_of(succ) == nxt_group:
                return net.lanes[succ], group_index + 1
        return None, group_index

    def _lane_leads_on(self, tv: TrafficVehicle, lane_id: str) -> bool:
        if tv.group_index + 1 >= len(tv.groups):
            return True
        return self._next_lane(tv, self.network.lanes[lane_id], tv.group_index)[0] is not None

    def _mandatory_direction(self, tv: TrafficVehicle) -> int:
        net = self.network
        if self._lane_leads_on(tv, tv.lane_id):
            return 0
        for direction, attr in ((1, "left_neighbor"), (-1, "right_neighbor")):
            lid = getattr(net.lanes[tv.lane_id], attr)
            while lid is not None:
                if self._lane_leads_on(tv, lid):
                    return direction
                lid = getattr(net.lanes[lid], attr)
        return 0

    def _at_goal(self, tv: TrafficVehicle, lane: Lane, s: float) -> bool:
        net = self.network
        if tv.group_index + 1 < len(tv.groups):
            return False
        goal = net.lanes[tv.goal_lane]
        if lane.id == goal.id:
            return s >= tv.goal_s
        if net.group_of(lane.id) == net.group_of(goal.id):
            return s * goal.length / lane.length >= tv.goal_s
        return s >= lane.length

    # --- occupancy ------------------------------------------------------------
    def _occupancy(self, others) -> dict[str, list[Occupant]]:
        net = self.network
        occ: dict[str, list[Occupant]] = {}
        for vid in sorted(self.vehicles):
            tv = self.vehicles[vid]
            v0 = tv.desired_speed(net)
            occ.setdefault(tv.lane_id, []).append(Occupant(tv.s, vid, tv.speed, tv.model.length, v0))
            if tv.blend_from is not None and tv.blend_from != tv.lane_id:
                src = net.lanes[tv.blend_from]
                k = src.length / net.lanes[tv.lane_id].length
                occ.setdefault(src.id, []).append(Occupant(tv.s * k, vid, tv.speed, tv.model.length, v0))
        for vs in others:
            for lid in net.lanes_near(vs.x, vs.y, 6.0):
                lane = net.lanes[lid]
                pos, dist = net.project_onto_lane(lane, vs.x, vs.y)
                reach = 0.5 * (lane.width + vs.width)
                if dist < reach and abs(pos.t) < reach:
                    occ.setdefault(lid, []).append(
                        Occupant(pos.s, vs.id, vs.speed, vs.length, lane.speed_limit))
        for lst in occ.values():
            lst.sort(key=lambda o: (o.s, o.id))
        return occ

    def _leader(self, tv: TrafficVehicle, lane: Lane, s: float, occ, group_index: int):
        """``(gap, leader_speed, limit_ahead)`` for the nearest obstacle ahead.

        Obstacles are vehicles and virtual stop lines (unreserved junction
        entry, unfinished mandatory lane change). ``limit_ahead`` is
        ``(distance, speed_limit)`` of the next slower lane, or ``None``.
        Returns an infinite gap and ``None`` speed on a free road.
        """
        half = 0.5 * tv.model.length
        dist = 0.0
        cur, cs, gi = lane, s, group_index
        first = True
        slower = None
        while dist < LOOKAHEAD:
            for o in occ.get(cur.id, ()):
                if o.id == tv.id:
                    continue
                if o.s > cs or (not first and o.s >= cs):
                    return dist + (o.s - cs) - half - 0.5 * o.length, o.speed, slower
            first = False
            dist += cur.length - cs
            nxt, ngi = self._next_lane(tv, cur, gi)
            if nxt is None:
                if gi + 1 >= len(tv.groups):
                    return math.inf, None, slower
                return dist - half, 0.0, slower
            if self.network.is_junction_lane(nxt.id) and tv.reserved != nxt.id:
                return dist - half, 0.0, slower
            if slower is None and nxt.speed_limit < lane.speed_limit:
                slower = (dist, nxt.speed_limit)
            cur, cs, gi = nxt, 0.0, ngi
        return math.inf, None, slower

    def _follower(self, vid: str, lane_id: str, s: float, length: float, occ):
        """Nearest vehicle behind ``s`` on the lane or, failing that, on its predecessors."""
        best = None
        for o in occ.get(lane_id, ()):
            if o.id == vid or o.s > s:
                continue
            best = o
        if best is not None:
            return Neighbor(best.speed, s - best.s - 0.5 * (length + best.length), best.desired_speed)
        found = None
        for pred in sorted(self.network.predecessors(lane_id)):
            plen = self.network.lanes[pred].length
            cands = [o for o in occ.get(pred, ()) if o.id != vid]
            if not cands:
                continue
            o = cands[-1]
            gap = s + plen - o.s - 0.5 * (length + o.length)
            if found is None or gap < found.gap:
                found = Neighbor(o.speed, gap, o.desired_speed)
        return found

    def _accel(self, tv: TrafficVehicle, occ) -> float:
        net = self.network
        lane = net.lanes[tv.lane_id]
        v0 = tv.desired_speed(net)
        gap, v_lead, slower = self._leader(tv, lane, tv.s, occ, tv.group_index)
        a = idm_acceleration(tv.speed, v_lead, gap, v0, self.params)
        if slower is not None:
            d, limit = slower
            v_next = tv.speed_factor * limit
            if tv.speed > v_next:
                a = min(a, max(-(tv.speed ** 2 - v_next ** 2) / (2.0 * max(d, 1.0)), -self.params.decel))
        a = min(a, self._merge_accel(tv, lane, occ, v0))
        if tv.blend_from is not None and tv.blend_from != tv.lane_id:
            src = net.lanes[tv.blend_from]
            ks = tv.s * src.length / lane.length
            for o in occ.get(src.id, ()):
                if o.id != tv.id and o.s > ks:
                    g = o.s - ks - 0.5 * (tv.model.length + o.length)
                    a = min(a, idm_acceleration(tv.speed, o.speed, g, v0, self.params))
                    break
        return a

    def _merge_accel(self, tv: TrafficVehicle, lane: Lane, occ, v0: float) -> float:
        """Cooperative merging.

        A vehicle that must change lanes drops back behind the nearest
        vehicle ahead in the target lane; a vehicle with a merger ahead in a
        neighbouring lane yields to it, from a distance that grows with its
        ``lc_cooperative``.
        """
        net = self.network
        a = math.inf
        half = 0.5 * tv.model.length
        direction = self._mandatory.get(tv.id, 0)
        if direction and tv.blend_from is None and lane.length - tv.s < MERGE_ZONE:
            target = lane.left_neighbor if direction > 0 else lane.right_neighbor
            if target is not None:
                k = net.lanes[target].length / lane.length
                for o in occ.get(target, ()):
                    if o.id != tv.id and o.s > tv.s * k:
                        gap = max(o.s - tv.s * k - half - 0.5 * o.length, 0.5)
                        a = min(a, idm_acceleration(tv.speed, o.speed, gap, v0, self.params))
                        break
        reach = 30.0 + 100.0 * tv.actor.lc_cooperative
        for side, toward in ((lane.left_neighbor, -1), (lane.right_neighbor, 1)):
            if side is None:
                continue
            k = lane.length / net.lanes[side].length
            for o in occ.get(side, ()):
                if o.id == tv.id or self._mandatory.get(o.id, 0) != toward:
                    continue
                other = self.vehicles[o.id]
                if other.blend_from is not None:
                    continue
                s_o = o.s * k
                if s_o <= tv.s or s_o - tv.s > 30.0:
                    continue
                if net.lanes[side].length - o.s > reach:
                    continue
                gap = max(s_o - tv.s - half - 0.5 * o.length, 0.5)
                a = min(a, idm_acceleration(tv.speed, o.speed, gap, v0, self.params))
                break
        return a

    # --- junctions --------------------------------------------------------------
    def _junction_ahead(self, tv: TrafficVehicle):
        """``(junction_lane, distance_to_stop_line, entry_lane)`` within the approach zone."""
        net = self.network
        lane = net.lanes[tv.lane_id]
        if net.is_junction_lane(lane.id):
            return None
        dist = lane.length - tv.s
        cur, gi = lane, tv.group_index
        while dist <= APPROACH_DISTANCE:
            nxt, gi = self._next_lane(tv, cur, gi)
            if nxt is None:
                return None
            if net.is_junction_lane(nxt.id):
                return nxt.id, dist, cur.id
            dist += nxt.length
            cur = nxt
        return None

    def _hold(self, vid: str, lane_id: str):
        self.reservations.setdefault(lane_id, set()).add(vid)
        self.vehicles[vid].reserved = lane_id

    def _drop(self, vid: str):
        tv = self.vehicles.get(vid)
        lane_id = tv.reserved if tv is not None else None
        for lid in ([lane_id] if lane_id else sorted(self.reservations)):
            holders = self.reservations.get(lid)
            if holders is not None:
                holders.discard(vid)
                if not holders:
                    del self.reservations[lid]
        if tv is not None:
            tv.reserved = None
        self.entered.discard(vid)

    def _blocked(self, lane_id: str, vid: str, foreign: set[str]) -> bool:
        for other in self.network.conflicts(lane_id):
            if other in foreign or (self.reservations.get(other, set()) - {vid}):
                return True
        return False

    def _update_junctions(self, now: float, foreign: set[str]):
        net = self.network
        ahead: dict[str, tuple[str, float, str]] = {}
        queues: dict[str, list[tuple[float, str]]] = {}
        for vid in sorted(self.vehicles):
            tv = self.vehicles[vid]
            if net.is_junction_lane(tv.lane_id):
                if tv.reserved != tv.lane_id:
                    # inside without a reservation (handback): claim it
                    if tv.reserved:
                        self._drop(vid)
                    self._hold(vid, tv.lane_id)
                self.entered.add(vid)
                self.requests.pop(vid, None)
                continue
            if vid in self.entered:
                if tv.s >= 0.5 * tv.model.length or tv.lane_id not in net.lanes[tv.reserved].successors:
                    self._drop(vid)
                continue
            hit = self._junction_ahead(tv)
            if tv.reserved is not None and (hit is None or hit[0] != tv.reserved):
                self._drop(vid)
            if hit is None:
                self.requests.pop(vid, None)
                continue
            ahead[vid] = hit
            queues.setdefault(hit[2], []).append((hit[1], vid))
            if tv.reserved is None:
                self.requests.setdefault(vid, now)

        # first come first served along each approach lane: nobody may
        # overtake an unserved vehicle ahead of it
        eligible = set()
        for queue in queues.values():
            for _, vid in sorted(queue):
                eligible.add(vid)
                if self.vehicles[vid].reserved is None:
                    break

        waiting: list[str] = []
        for vid in sorted(self.requests, key=lambda k: (self.requests[k], k)):
            if vid not in eligible:
                continue
            tv = self.vehicles[vid]
            jlane = ahead[vid][0]
            ok = not self._blocked(jlane, vid, foreign)
            if ok:
                conflicts = net.conflicts(jlane)
                tolerance = 2.0 + 4.0 * (1.0 - tv.actor.junction_impatience)
                for wid in waiting:
                    wlane, wdist, _ = ahead[wid]
                    if wlane not in conflicts:
                        continue
                    w = self.vehicles[wid]
                    # time to reach its stopping point in front of the line
                    slack = wdist - 0.5 * w.model.length - self.params.min_gap - 1.0
                    t_arrive = max(slack, 0.0) / max(w.speed, 1.0)
                    if t_arrive <= tolerance:
                        ok = False
                        break
            if ok:
                self._hold(vid, jlane)
                del self.requests[vid]
            else:
                waiting.append(vid)

    # --- stepping -----------------------------------------------------------------
    def step(self, now: float, dt: float, rng: np.random.Generator, others=()) -> list[dict]:
        """Advance every traffic vehicle one step.

        ``others`` are the non-traffic vehicle states (egos, social agents);
        traffic reacts to them but never moves them. Returns the step's
        events (spawns, despawns, lane changes, spawn requests).
        """
        net = self.network
        events: list[dict] = []
        others = list(others)
        occ = self._occupancy(others)
        foreign = set()
        for lid, lst in occ.items():
            if net.is_junction_lane(lid) and any(o.id not in self.vehicles for o in lst):
                foreign.add(lid)
        self._update_junctions(now, foreign)

        ids = sorted(self.vehicles)
        self._mandatory = {vid: self._mandatory_direction(self.vehicles[vid]) for vid in ids}
        accels = {vid: self._accel(self.vehicles[vid], occ) for vid in ids}

        for vid in ids:
            tv = self.vehicles[vid]
            if tv.blend_from is not None or tv.reserved is not None or now + 1e-9 < tv.next_decision:
                continue
            if net.is_junction_lane(tv.lane_id):
                continue
            tv.next_decision = now + LANE_CHANGE_INTERVAL
            direction = self._decide_lane_change(tv, occ)
            if direction:
                self._start_lane_change(tv, direction, events)
                occ = self._occupancy(others)

        for vid in ids:
            tv = self.vehicles[vid]
            a = accels[vid]
            v0 = tv.speed
            v1 = v0 + a * dt
            if v1 < 0.0:
                ds = v0 * v0 / (-2.0 * a)
                v1 = 0.0
            else:
                ds = 0.5 * (v0 + v1) * dt
            tv.accel = (v1 - v0) / dt
            tv.speed = v1
            if tv.blend_from is not None:
                tv.blend_elapsed += dt
            self._move(tv, ds, events)
            if tv.blend_from is not None and tv.blend_elapsed >= LANE_CHANGE_DURATION - 1e-9:
                tv.blend_from = None
                tv.blend_t0 = 0.0
                tv.blend_elapsed = 0.0

        self._spawn(dt, rng, others, events)
        return events

    def _move(self, tv: TrafficVehicle, ds: float, events):
        net = self.network
        lane = net.lanes[tv.lane_id]
        s = tv.s + ds
        while True:
            if self._at_goal(tv, lane, s):
                self._despawn(tv.id, "route_end", events)
                return
            if s <= lane.length:
                break
            nxt, gi = self._next_lane(tv, lane, tv.group_index)
            if nxt is None:
                # mandatory lane change not made yet: wait at the lane end
                s, tv.speed, tv.accel = lane.length, 0.0, 0.0
                break
            if net.is_junction_lane(nxt.id) and tv.reserved != nxt.id:
                s = min(s, lane.length - 0.5 * tv.model.length)
                tv.speed, tv.accel = 0.0, 0.0
                break
            s -= lane.length
            if tv.blend_from is not None:
                if tv.blend_from == lane.id:
                    tv.blend_from = nxt.id
                else:
                    nsrc, _ = self._next_lane(tv, net.lanes[tv.blend_from], tv.group_index)
                    tv.blend_from = nsrc.id if nsrc is not None else None
                    if nsrc is None:
                        tv.blend_t0 = 0.0
            lane = nxt
            tv.lane_id = nxt.id
            tv.group_index = gi
        tv.s = s

    def _decide_lane_change(self, tv: TrafficVehicle, occ) -> int:
        net = self.network
        lane = net.lanes[tv.lane_id]
        mandatory = self._mandatory_direction(tv)
        ego = Ego(tv.speed, tv.desired_speed(net), tv.model.length)

        def side(lane_id: str | None) -> LaneSide:
            if lane_id is None:
                return LaneSide(False)
            if mandatory == 0 and not self._lane_leads_on(tv, lane_id):
                return LaneSide(False)
            other = net.lanes[lane_id]
            s = tv.s * other.length / lane.length
            gap, v_lead, _ = self._leader(tv, other, s, occ, tv.group_index)
            leader = Neighbor(v_lead, gap, v_lead) if v_lead is not None else None
            return LaneSide(True, leader, self._follower(tv.id, lane_id, s, tv.model.length, occ))

        gap, v_lead, _ = self._leader(tv, lane, tv.s, occ, tv.group_index)
        current = LaneSide(True, Neighbor(v_lead, gap, v_lead) if v_lead is not None else None,
                           self._follower(tv.id, lane.id, tv.s, tv.model.length, occ))
        surroundings = Surroundings(current, side(lane.left_neighbor), side(lane.right_neighbor),
                                    mandatory)
        return lane_change_decision(ego, surroundings, LaneChangeParams.from_actor(tv.actor))

    def _start_lane_change(self, tv: TrafficVehicle, direction: int, events):
        net = self.network
        lane = net.lanes[tv.lane_id]
        target = lane.left_neighbor if direction > 0 else lane.right_neighbor
        x, y, _ = tv.pose(net)
        pos, _ = net.project_onto_lane(net.lanes[target], x, y)
        events.append({"event": "lane_change", "id": tv.id, "from": lane.id, "to": target})
        tv.blend_from = lane.id
        tv.blend_t0 = pos.t
        tv.blend_elapsed = 0.0
        tv.lane_id = target
        tv.s = pos.s

    # --- spawning ---------------------------------------------------------------
    def _spawn(self, dt, rng, others, events):
        for flow in self.flows:
            if rng.random() < flow.spec.rate * dt:
                actor = sample_actor(flow.spec.actors, rng, self.actors)
                factor = rng.normal(actor.speed_mean, actor.speed_sigma) if actor.speed_sigma > 0 \
                    else actor.speed_mean
                factor = float(min(max(factor, 0.5), 1.5))
                if len(flow.pending) >= MAX_PENDING:
                    events.append({"event": "spawn_dropped", "flow": flow.index})
                else:
                    flow.pending.append((actor, factor))
                    events.append({"event": "spawn_request", "flow": flow.index})
            if flow.pending:
                actor, factor = flow.pending[0]
                if self._try_insert(flow, actor, factor, self._occupancy(others), events):
                    flow.pending.popleft()

    def _try_insert(self, flow: BoundFlow, actor: TrafficActorSpec, factor: float, occ, events) -> bool:
        net = self.network
        p = self.params
        start = flow.route.start
        lane = net.lanes[start.lane_id]
        model = actor.model
        desired = factor * lane.speed_limit
        probe = TrafficVehicle("", actor, model, factor, lane.id, start.s, 0.0, flow.groups, 0,
                               flow.route.goal.lane_id, flow.route.goal.s, flow.index)
        gap, v_lead, _ = self._leader(probe, lane, start.s, occ, 0)
        v = desired if v_lead is None or gap > 100.0 else min(desired, v_lead)
        if v_lead is not None and gap < p.min_gap + v * p.headway:
            return False
        follower = self._follower("", lane.id, start.s, model.length, occ)
        if follower is not None and follower.gap < p.min_gap + follower.speed * p.headway:
            return False
        self.counter += 1
        vid = f"traffic-{self.counter:06d}"
        probe.id, probe.speed = vid, v
        self.vehicles[vid] = probe
        events.append({"event": "spawn", "id": vid, "flow": flow.index, "actor": actor.name,
                       "desired_speed": desired, "speed": v})
        return True

    # --- ownership changes --------------------------------------------------------
    def _despawn(self, vid: str, reason: str, events):
        if vid not in self.vehicles:
            return
        self._drop(vid)
        del self.vehicles[vid]
        self.requests.pop(vid, None)
        self.retired.add(vid)
        events.append({"event": "despawn", "id": vid, "reason": reason})

    def despawn(self, vid: str, reason: str) -> list[dict]:
        events: list[dict] = []
        self._despawn(vid, reason, events)
        return events

    def release(self, vid: str) -> TrafficVehicle:
        """Remove a vehicle from traffic control (handover to an agent)."""
        self._drop(vid)
        self.requests.pop(vid, None)
        return self.vehicles.pop(vid)

    def adopt(self, tv: TrafficVehicle):
        """Take (back) control of a vehicle."""
        tv.reserved = None
        tv.next_decision = 0.0
        self.vehicles[tv.id] = tv

    def states(self) -> dict[str, VehicleState]:
        return {vid: self.vehicles[vid].to_state(self.network) for vid in sorted(self.vehicles)}


def step_traffic(world, dt: float, rng: np.random.Generator) -> list[dict]:
    """Advance the world's traffic provider; see :meth:`TrafficProvider.step`."""
    return world.traffic.step(world.time, dt, rng, world.non_traffic_states())


def route_groups(network: RoadNetwork, lane_ids) -> tuple[str, ...]:
    """Collapse a lane route into its sequence of edge groups."""
    groups: list[str] = []
    for lid in lane_ids:
        g = network.group_of(lid)
        if not groups or groups[-1] != g:
            groups.append(g)
    return tuple(groups)


def bind_flow(network: RoadNetwork, index: int, spec: FlowSpec) -> BoundFlow:
    start = network.resolve(*spec.begin)
    goal = network.resolve(*spec.end)
    route = route_between(network, start, goal)
    return BoundFlow(index, spec, route, route_groups(network, route.lane_ids))


def traffic_vehicle_from_state(network: RoadNetwork, state: VehicleState, actor: TrafficActorSpec,
                               speed_factor: float, goal: LanePosition, flow_index: int = -1):
    """Rebuild a traffic vehicle from an agent-driven state (handback).

    The pose is projected onto the nearest lane; the lateral offset is kept,
    clamped into the lane, and blended back to the centre line. The route is
    re-derived toward ``goal``, falling back to following successors when
    the goal is unreachable from the new lane.

    Returns ``(vehicle, distance_from_centerline, lane_position)``.
    """
    pos, dist = network.project(state.x, state.y)
    lane = network.lanes[pos.lane_id]
    t = max(-lane.half_width, min(lane.half_width, pos.t))
    try:
        lane_ids = route_between(network, LanePosition(lane.id, pos.s), goal).lane_ids
        goal_lane, goal_s = goal.lane_id, goal.s
    except RoutingError:
        lane_ids = [lane.id]
        cur = lane
        while cur.successors and len(lane_ids) < 50:
            cur = network.lanes[sorted(cur.successors)[0]]
            if cur.id in lane_ids:
                break
            lane_ids.append(cur.id)
        goal_lane, goal_s = cur.id, cur.length
    groups = route_groups(network, lane_ids)
    model = replace(actor.model, length=state.length, width=state.width)
    tv = TrafficVehicle(state.id, actor, model, speed_factor, lane.id, pos.s, state.speed,
                        groups, 0, goal_lane, goal_s, flow_index,
                        blend_from=lane.id if t != 0.0 else None, blend_t0=t)
    return tv, dist, LanePosition(lane.id, pos.s, t)
