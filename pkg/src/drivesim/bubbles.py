"""Bubbles: regions where social agents take over traffic vehicles.

A bubble is an oriented rectangle (the interior) surrounded by an airlock
band of ``airlock_margin`` metres. A traffic vehicle entering the airlock
gets an agent reserved for it; on reaching the interior the agent takes
control. Once the vehicle is back outside the grown rectangle control
returns to the traffic provider.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from .road import LanePosition
from .traffic import traffic_vehicle_from_state

OUTSIDE, AIRLOCK, INTERIOR = "outside", "airlock", "interior"


class Zone(str, enum.Enum):
    OUTSIDE = OUTSIDE
    AIRLOCK = AIRLOCK
    INTERIOR = INTERIOR


@dataclass(frozen=True)
class BubbleSpec:
    id: str
    center: tuple[float, float]
    half_extents: tuple[float, float]
    rotation: float = 0.0
    airlock_margin: float = 10.0
    agent_ref: str = "keep_lane"
    capacity: int = 1
    active_window: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.airlock_margin > 0:
            raise ValueError(f"bubble {self.id!r}: airlock_margin must be positive")
        if self.capacity < 1:
            raise ValueError(f"bubble {self.id!r}: capacity must be at least 1")
        if min(self.half_extents) <= 0:
            raise ValueError(f"bubble {self.id!r}: half extents must be positive")
        if self.active_window is not None and self.active_window[1] < self.active_window[0]:
            raise ValueError(f"bubble {self.id!r}: active window ends before it starts")

    def active(self, time: float) -> bool:
        w = self.active_window
        return w is None or w[0] <= time <= w[1]

    def corners(self, grow: float = 0.0) -> list[tuple[float, float]]:
        """Rectangle corners counter-clockwise, optionally grown by ``grow``."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        hx, hy = self.half_extents[0] + grow, self.half_extents[1] + grow
        cx, cy = self.center
        return [(cx + c * u - s * v, cy + s * u + c * v)
                for u, v in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy))]


def _inside_convex(corners, x: float, y: float) -> bool:
    """Point in (or on) a convex polygon given counter-clockwise."""
    n = len(corners)
    for k in range(n):
        x0, y0 = corners[k]
        x1, y1 = corners[(k + 1) % n]
        if (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0.0:
            return False
    return True


def classify_zone(bubble: BubbleSpec, point) -> Zone:
    """Zone of ``point`` relative to ``bubble`` (boundaries belong inside)."""
    x, y = float(point[0]), float(point[1])
    if _inside_convex(bubble.corners(), x, y):
        return Zone.INTERIOR
    if _inside_convex(bubble.corners(bubble.airlock_margin), x, y):
        return Zone.AIRLOCK
    return Zone.OUTSIDE


# --- ownership ---------------------------------------------------------------

TRAFFIC = "traffic"


def social_owner(instance: str) -> str:
    return f"social:{instance}"


def ego_owner(agent_id: str) -> str:
    return f"ego:{agent_id}"


@dataclass(frozen=True)
class HandoverEvent:
    vehicle_id: str
    from_owner: str
    to_owner: str
    time: float
    pose: tuple[float, float, float, float]
    bubble_id: str

    def __post_init__(self):
        if self.from_owner == self.to_owner:
            raise ValueError("handover must change the owner")

    @property
    def acquire(self) -> bool:
        return self.from_owner == TRAFFIC

    def to_dict(self) -> dict:
        return {"event": "handover", "id": self.vehicle_id, "from": self.from_owner,
                "to": self.to_owner, "time": self.time, "pose": list(self.pose),
                "bubble": self.bubble_id}


@dataclass
class Slot:
    """A social-agent instance reserved for (and later driving) one vehicle."""

    vehicle_id: str
    bubble_id: str
    instance: str
    agent: object
    entered: int
    record: object = None  # TrafficVehicle kept for the handback
    captured: bool = False
    controller: object = None
    route: object = None
    history: list = field(default_factory=list)

    @property
    def owner(self) -> str:
        return social_owner(self.instance)


def reconcile_to_agent(state, model):
    """Traffic -> agent: same pose and speed, steering and accel zeroed, full model attached."""
    return replace(state, accel=0.0, steering=0.0, length=model.length, width=model.width)


def reconcile_to_traffic(network, state, record):
    """Agent -> traffic: rebuild the traffic vehicle from the agent-driven state.

    Returns ``(TrafficVehicle, distance_from_lane, LanePosition)``; the caller
    must despawn the vehicle when the distance exceeds the lane's off-road margin.
    """
    goal = LanePosition(record.goal_lane, record.goal_s)
    return traffic_vehicle_from_state(network, state, record.actor, record.speed_factor,
                                      goal, record.flow_index)


def reconcile_handover(network, vehicle, direction: str, record=None):
    """Reconcile a vehicle's state across a handover.

    ``direction`` is ``"to_agent"`` (``vehicle`` is a traffic vehicle) or
    ``"to_traffic"`` (``vehicle`` is a :class:`VehicleState` and ``record``
    the traffic vehicle it was captured from).
    """
    if direction == "to_agent":
        return reconcile_to_agent(vehicle.to_state(network), vehicle.model)
    if direction == "to_traffic":
        return reconcile_to_traffic(network, vehicle, record)
    raise ValueError(f"unknown handover direction {direction!r}")


class BubbleManager:
    """Per-episode bubble bookkeeping: reservations, captures and releases.

    Bubbles are processed in id order and a vehicle belongs to at most one
    bubble at a time (the first one by id it is seen in). A released vehicle
    spends at least one step under traffic control before it can be taken
    again, even by another bubble.
    """

    def __init__(self, bubbles, build_agent=None):
        self.bubbles = sorted(bubbles, key=lambda b: b.id)
        self.by_id = {b.id: b for b in self.bubbles}
        self.build_agent = build_agent or (lambda ref: None)
        self.slots: dict[str, Slot] = {}
        self.instances = 0
        self.entries = 0
        self.entered_at: dict[str, int] = {}
        self.released_at: dict[str, int] = {}
        self.overflowed: set[str] = set()

    def captured(self) -> list[Slot]:
        return [self.slots[v] for v in sorted(self.slots) if self.slots[v].captured]

    def _count(self, bubble_id: str) -> int:
        return sum(1 for s in self.slots.values() if s.bubble_id == bubble_id)

    def _zone(self, bubble: BubbleSpec, state) -> Zone:
        return classify_zone(bubble, (state.x, state.y))

    def release_all(self, world):
        return self.step(world, force_release=True)

    def step(self, world, force_release: bool = False):
        """Process zone transitions for one engine step.

        ``world`` supplies ``network``, ``time``, ``step_index``, ``traffic``
        (the traffic provider), ``controlled`` (states of non-traffic
        vehicles) and ``ownership``. Returns ``(handovers, events)``.
        """
        net, now, k = world.network, world.time, world.step_index
        handovers: list[HandoverEvent] = []
        events: list[dict] = []

        # releases
        for vid in sorted(self.slots):
            slot = self.slots[vid]
            if not slot.captured:
                continue
            if vid not in world.controlled:
                # vehicle gone (collision, route end); nothing to hand back
                del self.slots[vid]
                continue
            bubble = self.by_id[slot.bubble_id]
            state = world.controlled[vid]
            if not force_release and bubble.active(now) and self._zone(bubble, state) != Zone.OUTSIDE:
                continue
            del self.slots[vid]
            del world.controlled[vid]
            tv, dist, _ = reconcile_to_traffic(net, state, slot.record)
            if dist > net.lanes[tv.lane_id].off_road_margin():
                del world.ownership[vid]
                events.append({"event": "despawn", "id": vid, "reason": "handback_off_road",
                               "distance": dist})
                continue
            world.traffic.adopt(tv)
            world.ownership[vid] = TRAFFIC
            self.released_at[vid] = k
            self.entered_at.pop(vid, None)
            handovers.append(HandoverEvent(vid, slot.owner, TRAFFIC, now,
                                           (state.x, state.y, state.heading, state.speed),
                                           bubble.id))
        if force_release:
            return handovers, events

        # reservations and captures
        traffic = world.traffic
        candidates: dict[str, list[tuple[int, str, Zone]]] = {}
        for vid in sorted(traffic.vehicles):
            if self.released_at.get(vid) == k:
                continue
            state = traffic.vehicles[vid].to_state(net)
            slot = self.slots.get(vid)
            if slot is not None:
                zone = self._zone(self.by_id[slot.bubble_id], state)
                if zone == Zone.OUTSIDE or not self.by_id[slot.bubble_id].active(now):
                    del self.slots[vid]
                    self.entered_at.pop(vid, None)
                elif zone == Zone.INTERIOR:
                    handovers.append(self._capture(world, slot))
                continue
            home = None
            for bubble in self.bubbles:
                if not bubble.active(now):
                    continue
                zone = self._zone(bubble, state)
                if zone != Zone.OUTSIDE:
                    home = (bubble, zone)
                    break
            if home is None:
                self.entered_at.pop(vid, None)
                self.overflowed.discard(vid)
                continue
            if vid not in self.entered_at:
                self.entries += 1
                self.entered_at[vid] = self.entries
            candidates.setdefault(home[0].id, []).append((self.entered_at[vid], vid, home[1]))

        for bid in sorted(candidates):
            bubble = self.by_id[bid]
            for entered, vid, zone in sorted(candidates[bid]):
                if self._count(bid) >= bubble.capacity:
                    if vid not in self.overflowed:
                        self.overflowed.add(vid)
                        events.append({"event": "bubble_full", "id": vid, "bubble": bid})
                    continue
                self.overflowed.discard(vid)
                self.instances += 1
                instance = f"{bubble.agent_ref}-{self.instances:04d}"
                slot = Slot(vid, bid, instance, self.build_agent(bubble.agent_ref), entered)
                self.slots[vid] = slot
                events.append({"event": "reserve", "id": vid, "bubble": bid, "instance": instance})
                if zone == Zone.INTERIOR:
                    handovers.append(self._capture(world, slot))
        return handovers, events

    def _capture(self, world, slot: Slot) -> HandoverEvent:
        net = world.network
        tv = world.traffic.release(slot.vehicle_id)
        state = reconcile_to_agent(tv.to_state(net), tv.model)
        owner = slot.owner
        state = replace(state, owner=owner)
        slot.record = tv
        slot.captured = True
        world.controlled[slot.vehicle_id] = state
        world.ownership[slot.vehicle_id] = owner
        return HandoverEvent(slot.vehicle_id, TRAFFIC, owner, world.time,
                             (state.x, state.y, state.heading, state.speed), slot.bubble_id)


def step_transitions(manager: BubbleManager, world, zoo=None):
    """Run one step of bubble transitions; see :meth:`BubbleManager.step`."""
    if zoo is not None:
        manager.build_agent = zoo
    return manager.step(world)
