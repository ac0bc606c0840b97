"""Observations and rewards.

Every agent-controlled vehicle gets one :class:`ObservationFrame` per step;
agents see the last three frames stacked. All vectors are in the ego frame
(x forward, y left).
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .road import Lane, LanePosition, RoadNetwork, Route, lane_to_world, wrap_angle
from .vehicle import VehicleState

NEIGHBOR_RADIUS = 50.0
MAX_NEIGHBORS = 8
WAYPOINTS = 10
WAYPOINT_SPACING = 1.0
BEV_SIZE = 80
BEV_RESOLUTION = 0.5
STACK = 3
LANE_VALUE = 0.5
VEHICLE_VALUE = 1.0

DEFAULT_REWARD_WEIGHTS = {"collision": -10.0, "goal": 20.0, "off_road": -5.0, "wrong_way": -2.0}


@dataclass(frozen=True)
class NeighborObs:
    rel_distance: float
    speed: float
    dx: float
    dy: float


@dataclass(frozen=True, eq=False)
class ObservationFrame:
    goal_rel: tuple[float, float]
    dist_to_center: float
    speed: float
    steering: float
    heading_errors: tuple[float, ...]
    neighbors: tuple[NeighborObs, ...]
    bev: np.ndarray = field(repr=False)
    #: slowest speed limit on the route within braking range
    speed_limit: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, ObservationFrame):
            return NotImplemented
        return frame_to_wire(self) == frame_to_wire(other)

    __hash__ = None


@dataclass(frozen=True)
class StackedObservation:
    frames: tuple[ObservationFrame, ObservationFrame, ObservationFrame]

    def __post_init__(self):
        if len(self.frames) != STACK:
            raise ValueError(f"a stacked observation holds exactly {STACK} frames")

    @property
    def latest(self) -> ObservationFrame:
        return self.frames[-1]


def stack_frames(history) -> StackedObservation:
    """Last three frames, oldest first; the first frame pads a short history."""
    history = list(history)
    if not history:
        raise ValueError("no frames since reset")
    last = history[-STACK:]
    return StackedObservation(tuple([last[0]] * (STACK - len(last)) + last))


# --- geometry helpers --------------------------------------------------------

def to_ego(ego: VehicleState, x: float, y: float) -> tuple[float, float]:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    dx, dy = x - ego.x, y - ego.y
    return c * dx + s * dy, -s * dx + c * dy


def _next_on_route(network: RoadNetwork, lane: Lane, route_lanes) -> Lane | None:
    if not lane.successors:
        return None
    for succ in lane.successors:
        if succ in route_lanes:
            return network.lanes[succ]
    for succ in lane.successors:
        # successor of a parallel lane of the route
        if network.group_of(succ) in {network.group_of(l) for l in route_lanes}:
            return network.lanes[succ]
    return network.lanes[sorted(lane.successors)[0]]


def locate(network: RoadNetwork, state: VehicleState, route: Route | None):
    """Lane position of a vehicle, preferring lanes of its route."""
    if route is not None:
        pos, dist = network.project(state.x, state.y, route.lane_ids)
        lane = network.lanes[pos.lane_id]
        if dist <= lane.off_road_margin():
            return pos, dist
    return network.project(state.x, state.y)


def route_waypoints(network: RoadNetwork, pos: LanePosition, route: Route | None,
                    count: int = WAYPOINTS, spacing: float = WAYPOINT_SPACING):
    """``count`` waypoints (x, y, heading) ahead of ``pos``, ``spacing`` apart."""
    route_lanes = set(route.lane_ids) if route is not None else set()
    lane = network.lanes[pos.lane_id]
    s = pos.s
    out = []
    for k in range(1, count + 1):
        s_k = s + k * spacing
        cur = lane
        while s_k > cur.length:
            nxt = _next_on_route(network, cur, route_lanes)
            if nxt is None:
                break
            s_k -= cur.length
            cur = nxt
        if s_k > cur.length:
            x, y, h = lane_to_world(cur, cur.length)
            extra = s_k - cur.length
            out.append((x + extra * math.cos(h), y + extra * math.sin(h), h))
        else:
            out.append(lane_to_world(cur, s_k))
    return out


def upcoming_speed_limit(network: RoadNetwork, pos: LanePosition, route: Route | None,
                         speed: float, decel: float = 2.0) -> float:
    """Lowest limit on the path within comfortable braking distance."""
    route_lanes = set(route.lane_ids) if route is not None else set()
    lane = network.lanes[pos.lane_id]
    limit = lane.speed_limit
    horizon = max(20.0, speed * speed / (2.0 * decel) + 10.0)
    d = lane.length - pos.s
    cur = lane
    while d < horizon:
        cur = _next_on_route(network, cur, route_lanes)
        if cur is None:
            break
        limit = min(limit, cur.speed_limit)
        d += cur.length
    return limit


# --- frame construction --------------------------------------------------------

def nearest_neighbors(ego: VehicleState, others, radius: float = NEIGHBOR_RADIUS,
                      limit: int = MAX_NEIGHBORS) -> list[tuple[float, VehicleState]]:
    """``(distance, state)`` of the nearest ``limit`` vehicles within ``radius``; ties by id."""
    cands = []
    for o in others:
        if o.id == ego.id:
            continue
        d = math.hypot(o.x - ego.x, o.y - ego.y)
        if d <= radius:
            cands.append((d, o.id, o))
    cands.sort(key=lambda c: (c[0], c[1]))
    return [(d, o) for d, _, o in cands[:limit]]


def sense_frame(network: RoadNetwork, ego: VehicleState, vehicles, goal: LanePosition,
                route: Route | None = None, bev: bool = True) -> ObservationFrame:
    """Build one observation frame for ``ego``.

    ``vehicles`` holds every live vehicle state (the ego may be included).
    """
    pos, _ = locate(network, ego, route)
    gx, gy, _ = lane_to_world(network.lanes[goal.lane_id], goal.s)
    wps = route_waypoints(network, pos, route)
    heading_errors = tuple(wrap_angle(h - ego.heading) for _, _, h in wps)
    neighbors = []
    for d, o in nearest_neighbors(ego, vehicles):
        dx, dy = to_ego(ego, o.x, o.y)
        neighbors.append(NeighborObs(d, o.speed, dx, dy))
    grid = rasterize_bev(network, ego, vehicles) if bev else np.zeros((0, 0), np.float32)
    return ObservationFrame(
        goal_rel=to_ego(ego, gx, gy),
        dist_to_center=pos.t,
        speed=ego.speed,
        steering=ego.steering,
        heading_errors=heading_errors,
        neighbors=tuple(neighbors),
        bev=grid,
        speed_limit=upcoming_speed_limit(network, pos, route, ego.speed),
    )


def rasterize_bev(network: RoadNetwork, ego: VehicleState, vehicles, size: int = BEV_SIZE,
                  resolution: float = BEV_RESOLUTION) -> np.ndarray:
    """Ego-centred, ego-aligned grey-scale grid (rows: forward, columns: left).

    Lane surface is painted where a cell centre lies on a lane segment's
    rectangle; vehicles mark every cell their footprint overlaps.
    """
    grid = np.zeros((size, size), dtype=np.float32)
    half = 0.5 * size * resolution
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    seg = network._segments
    if len(seg):
        mx, my = 0.5 * (seg[:, 0] + seg[:, 2]), 0.5 * (seg[:, 1] + seg[:, 3])
        ddx, ddy = seg[:, 2] - seg[:, 0], seg[:, 3] - seg[:, 1]
        seg_len = np.sqrt(ddx * ddx + ddy * ddy)
        widths = np.array([network.lanes[o].width for o in network._seg_owner])
        reach = half * math.sqrt(2.0) + 0.5 * seg_len + 0.5 * widths
        keep = np.nonzero(np.hypot(mx - ego.x, my - ego.y) <= reach)[0]
        if len(keep):
            rx, ry = mx[keep] - ego.x, my[keep] - ego.y
            rects = np.empty((len(keep), 5))
            rects[:, 0] = c * rx + s * ry
            rects[:, 1] = -s * rx + c * ry
            rects[:, 2] = np.arctan2(ddy[keep], ddx[keep]) - ego.heading
            rects[:, 3] = 0.5 * seg_len[keep]
            rects[:, 4] = 0.5 * widths[keep]
            kernels.rasterize_rects(grid, rects, LANE_VALUE, resolution, False)
    rows = []
    for v in vehicles:
        dx, dy = to_ego(ego, v.x, v.y)
        r = 0.5 * math.hypot(v.length, v.width)
        if abs(dx) > half + r or abs(dy) > half + r:
            continue
        rows.append((dx, dy, v.heading - ego.heading, 0.5 * v.length, 0.5 * v.width))
    if not any(v.id == ego.id for v in vehicles):
        rows.append((0.0, 0.0, 0.0, 0.5 * ego.length, 0.5 * ego.width))
    if rows:
        kernels.rasterize_rects(grid, np.array(rows, dtype=np.float64), VEHICLE_VALUE, resolution, True)
    return grid


# --- rewards -------------------------------------------------------------------

def compute_reward(prev_progress: float, new_progress: float, events, weights=None):
    """``(raw, shaped)`` reward for one step.

    ``events`` is an :class:`EventFlags` or a mapping with the same keys.
    """
    w = dict(DEFAULT_REWARD_WEIGHTS)
    if weights:
        w.update(weights)
    get = events.get if isinstance(events, dict) else lambda k, d=False: getattr(events, k, d)
    raw = new_progress - prev_progress
    shaped = (raw
              + w["collision"] * bool(get("collision", False))
              + w["goal"] * bool(get("reached_goal", False))
              + w["off_road"] * bool(get("off_road", False))
              + w["wrong_way"] * bool(get("wrong_way", False)))
    return raw, shaped


# --- wire encoding ---------------------------------------------------------------

def encode_bev(grid: np.ndarray) -> str:
    """Pack a BEV grid at 2 bits per cell (0, 0.5, 1 -> 0, 1, 2), base64.

    Cell ``k`` in row-major order occupies bits ``2*(k%4)`` of byte ``k//4``.
    """
    codes = np.rint(np.asarray(grid, dtype=np.float32).ravel() * 2.0).astype(np.uint8)
    pad = (-len(codes)) % 4
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, np.uint8)])
    q = codes.reshape(-1, 4)
    packed = (q[:, 0] | (q[:, 1] << 2) | (q[:, 2] << 4) | (q[:, 3] << 6)).astype(np.uint8)
    return base64.b64encode(packed.tobytes()).decode("ascii")


def decode_bev(text: str, shape: tuple[int, int]) -> np.ndarray:
    packed = np.frombuffer(base64.b64decode(text), dtype=np.uint8)
    codes = np.stack([(packed >> (2 * k)) & 3 for k in range(4)], axis=1).ravel()
    n = shape[0] * shape[1]
    return (codes[:n].astype(np.float32) / 2.0).reshape(shape)


def frame_to_wire(frame: ObservationFrame) -> dict:
    return {
        "goal_rel": [frame.goal_rel[0], frame.goal_rel[1]],
        "dist_to_center": frame.dist_to_center,
        "speed": frame.speed,
        "steering": frame.steering,
        "heading_errors": list(frame.heading_errors),
        "neighbors": [[n.rel_distance, n.speed, n.dx, n.dy] for n in frame.neighbors],
        "speed_limit": frame.speed_limit,
        "bev_shape": list(frame.bev.shape),
        "bev": encode_bev(frame.bev) if frame.bev.size else "",
    }


def frame_from_wire(d: dict) -> ObservationFrame:
    shape = tuple(d["bev_shape"])
    bev = decode_bev(d["bev"], shape) if d["bev"] else np.zeros(shape, np.float32)
    return ObservationFrame(
        goal_rel=(float(d["goal_rel"][0]), float(d["goal_rel"][1])),
        dist_to_center=float(d["dist_to_center"]),
        speed=float(d["speed"]),
        steering=float(d["steering"]),
        heading_errors=tuple(float(h) for h in d["heading_errors"]),
        neighbors=tuple(NeighborObs(*(float(v) for v in n)) for n in d["neighbors"]),
        bev=bev,
        speed_limit=float(d["speed_limit"]),
    )


def stacked_to_wire(obs: StackedObservation) -> list[dict]:
    return [frame_to_wire(f) for f in obs.frames]


def stacked_from_wire(frames: list[dict]) -> StackedObservation:
    return StackedObservation(tuple(frame_from_wire(f) for f in frames))
