"""Lane-graph road network: map loading, lane geometry, projection, routing."""

from __future__ import annotations

import bisect
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

MAP_FORMAT = 1

#: Extra lateral slack beyond the lane half-width before a point is off-road.
OFF_ROAD_EXTRA = 1.0

#: Routing cost of one lane change, in metres of equivalent travel.
LANE_CHANGE_COST = 5.0


class MapError(ValueError):
    """Base class for map loading problems."""


class MapParseError(MapError):
    pass


class MapLinkError(MapError):
    pass


class MapGeometryError(MapError):
    pass


class RoutingError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True, eq=False)
class Lane:
    id: str
    centerline: tuple[tuple[float, float], ...]
    width: float
    speed_limit: float
    successors: tuple[str, ...] = ()
    left_neighbor: str | None = None
    right_neighbor: str | None = None
    # derived
    cumulative: tuple[float, ...] = field(default=(), repr=False)
    segments: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, id, centerline, width, speed_limit, successors=(),
              left_neighbor=None, right_neighbor=None):
        pts = tuple((float(x), float(y)) for x, y in centerline)
        if len(pts) < 2:
            raise MapGeometryError(f"lane {id!r}: centerline needs at least 2 points")
        cum = [0.0]
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            d = math.sqrt((x1 - x0) ** 2 + (y1 - y0) ** 2)
            if d <= 0.0:
                raise MapGeometryError(f"lane {id!r}: repeated centerline point ({x0}, {y0})")
            cum.append(cum[-1] + d)
        if width <= 0 or speed_limit <= 0:
            raise MapGeometryError(f"lane {id!r}: width and speed_limit must be positive")
        segs = np.array([(a[0], a[1], b[0], b[1]) for a, b in zip(pts, pts[1:])], dtype=np.float64)
        return cls(
            id=id, centerline=pts, width=float(width), speed_limit=float(speed_limit),
            successors=tuple(successors), left_neighbor=left_neighbor,
            right_neighbor=right_neighbor, cumulative=tuple(cum), segments=segments_readonly(segs),
        )

    @property
    def length(self) -> float:
        return self.cumulative[-1]

    @property
    def half_width(self) -> float:
        return 0.5 * self.width

    def off_road_margin(self, extra: float = OFF_ROAD_EXTRA) -> float:
        return 0.5 * self.width + extra

    def segment_index(self, s: float) -> int:
        i = bisect.bisect_right(self.cumulative, s) - 1
        return min(max(i, 0), len(self.centerline) - 2)

    def heading_at(self, s: float) -> float:
        i = self.segment_index(s)
        (x0, y0), (x1, y1) = self.centerline[i], self.centerline[i + 1]
        return math.atan2(y1 - y0, x1 - x0)


def segments_readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LanePosition:
    lane_id: str
    s: float
    t: float = 0.0


@dataclass(frozen=True)
class RouteEntry:
    """One lane of a route and how its arclength maps to route progress.

    Progress on this lane is ``offset + scale * s - origin`` for ``s`` in
    ``[lo, hi]``.
    """

    lane_id: str
    offset: float
    scale: float
    origin: float
    lo: float
    hi: float

    def progress(self, s: float) -> float:
        return self.offset + self.scale * s - self.origin


@dataclass(frozen=True)
class Route:
    lane_ids: tuple[str, ...]
    total_length: float
    start: LanePosition
    goal: LanePosition
    entries: tuple[RouteEntry, ...] = ()
    lane_changes: int = 0

    def to_dict(self) -> dict:
        return {
            "lane_ids": list(self.lane_ids),
            "total_length": self.total_length,
            "start": [self.start.lane_id, self.start.s],
            "goal": [self.goal.lane_id, self.goal.s],
            "entries": [
                [e.lane_id, e.offset, e.scale, e.origin, e.lo, e.hi] for e in self.entries
            ],
        }


class RoadNetwork:
    """Immutable, fully linked lane graph."""

    def __init__(self, lanes: dict[str, Lane], edges: dict[str, tuple[str, ...]],
                 junctions: dict[str, tuple[str, ...]]):
        self.lanes = dict(sorted(lanes.items()))
        self.edges = dict(edges)
        self.junctions = dict(junctions)
        self._lane_edge = {}
        for eid, lids in self.edges.items():
            for idx, lid in enumerate(lids):
                self._lane_edge[lid] = (eid, idx)
        self._junction_lanes = {lid for lids in self.junctions.values() for lid in lids}
        self._predecessors: dict[str, list[str]] = {lid: [] for lid in self.lanes}
        for lane in self.lanes.values():
            for succ in lane.successors:
                self._predecessors[succ].append(lane.id)
        # flat segment table ordered by lane id, so first-minimum tie breaking
        # in the projection kernel means smallest lane id
        rows, owners, starts = [], [], []
        for lid, lane in self.lanes.items():
            for k in range(len(lane.centerline) - 1):
                owners.append(lid)
                starts.append(k)
            rows.append(lane.segments)
        self._segments = segments_readonly(np.vstack(rows)) if rows else np.zeros((0, 4))
        self._seg_owner = owners
        self._seg_index = starts
        self._conflicts: dict[str, frozenset[str]] | None = None

    # --- lookups -----------------------------------------------------------
    def lane(self, lane_id: str) -> Lane:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise KeyError(f"unknown lane {lane_id!r}") from None

    def edge_of(self, lane_id: str) -> tuple[str, int] | None:
        return self._lane_edge.get(lane_id)

    def group_of(self, lane_id: str) -> str:
        """Edge id for edge lanes, the lane's own id otherwise."""
        e = self._lane_edge.get(lane_id)
        return e[0] if e else lane_id

    def is_junction_lane(self, lane_id: str) -> bool:
        return lane_id in self._junction_lanes

    def predecessors(self, lane_id: str) -> list[str]:
        return self._predecessors[lane_id]

    def resolve(self, edge_id: str, lane_index: int, offset: float) -> LanePosition:
        """Resolve an ``(edge, lane_index, offset)`` triple.

        Negative offsets count back from the lane end.
        """
        if edge_id not in self.edges:
            raise KeyError(f"unknown edge {edge_id!r}")
        lanes = self.edges[edge_id]
        if not 0 <= lane_index < len(lanes):
            raise KeyError(f"edge {edge_id!r} has no lane index {lane_index}")
        lane = self.lanes[lanes[lane_index]]
        s = offset if offset >= 0 else lane.length + offset
        if not 0.0 <= s <= lane.length:
            raise KeyError(f"offset {offset} outside lane {lane.id!r} (length {lane.length:.2f})")
        return LanePosition(lane.id, float(s), 0.0)

    # --- geometry ----------------------------------------------------------
    def project(self, x: float, y: float, lane_ids: Iterable[str] | None = None):
        """Project a point onto the nearest lane.

        Returns ``(LanePosition, distance)``; ``distance`` is the Euclidean
        distance to the centerline (equal to ``|t|`` except past lane ends).
        """
        if lane_ids is None:
            k, u, d2, cross = kernels.project_point(x, y, self._segments)
            if k < 0:
                raise MapError("empty network")
            lane = self.lanes[self._seg_owner[k]]
            seg = self._seg_index[k]
        else:
            best = None
            for lid in sorted(set(lane_ids)):
                lane_k = self.lanes[lid]
                k, u, d2, cross = kernels.project_point(x, y, lane_k.segments)
                if best is None or d2 < best[2]:
                    best = (lane_k, k, d2, u, cross)
            if best is None:
                raise MapError("no candidate lanes")
            lane, seg, d2, u, cross = best
        return _position_on(lane, seg, u, d2, cross)

    def project_onto_lane(self, lane: Lane, x: float, y: float):
        k, u, d2, cross = kernels.project_point(x, y, lane.segments)
        return _position_on(lane, k, u, d2, cross)

    def lanes_near(self, x: float, y: float, radius: float) -> list[str]:
        """Lane ids with any segment within ``radius`` of the point."""
        seg = self._segments
        x0, y0 = seg[:, 0], seg[:, 1]
        ddx, ddy = seg[:, 2] - x0, seg[:, 3] - y0
        u = np.clip(((x - x0) * ddx + (y - y0) * ddy) / (ddx * ddx + ddy * ddy), 0.0, 1.0)
        d2 = (x - x0 - u * ddx) ** 2 + (y - y0 - u * ddy) ** 2
        hits = np.nonzero(d2 <= radius * radius)[0]
        return sorted({self._seg_owner[k] for k in hits})

    # --- junction conflicts -------------------------------------------------
    def conflicts(self, lane_id: str) -> frozenset[str]:
        """Junction lanes whose swept paths come within a car width of this one."""
        if self._conflicts is None:
            self._conflicts = _junction_conflicts(self)
        return self._conflicts.get(lane_id, frozenset())

    def conflict_pairs(self) -> list[tuple[str, str]]:
        if self._conflicts is None:
            self._conflicts = _junction_conflicts(self)
        return sorted({tuple(sorted((a, b))) for a, bs in self._conflicts.items() for b in bs})


def _position_on(lane: Lane, seg: int, u: float, d2: float, cross: float):
    (x0, y0), (x1, y1) = lane.centerline[seg], lane.centerline[seg + 1]
    seg_len = lane.cumulative[seg + 1] - lane.cumulative[seg]
    s = lane.cumulative[seg] + u * seg_len
    dist = math.sqrt(d2)
    t = cross / seg_len
    if u <= 0.0 or u >= 1.0:
        # past a vertex the perpendicular offset is the full distance, signed
        t = math.copysign(dist, cross) if cross != 0.0 else 0.0
    return LanePosition(lane.id, min(max(s, 0.0), lane.length), t), dist


CONFLICT_CLEARANCE = 3.0


def _junction_conflicts(net: RoadNetwork) -> dict[str, frozenset[str]]:
    jl = sorted(net._junction_lanes)
    out: dict[str, set[str]] = {lid: set() for lid in jl}
    dense = {lid: _densify(net.lanes[lid], 0.5) for lid in jl}
    for i, a in enumerate(jl):
        for b in jl[i + 1:]:
            pa, pb = dense[a], dense[b]
            d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)).min()
            if d < CONFLICT_CLEARANCE:
                out[a].add(b)
                out[b].add(a)
    return {k: frozenset(v) for k, v in out.items()}


def _densify(lane: Lane, step: float) -> np.ndarray:
    n = max(2, int(math.ceil(lane.length / step)) + 1)
    pts = [lane_to_world(lane, lane.length * k / (n - 1), 0.0)[:2] for k in range(n)]
    return np.array(pts)


def lane_to_world(lane: Lane, s: float, t: float = 0.0) -> tuple[float, float, float]:
    """Pose at arclength ``s`` displaced ``t`` along the left normal."""
    if not -1e-9 <= s <= lane.length + 1e-9:
        raise ValueError(f"s={s} outside lane {lane.id!r} [0, {lane.length}]")
    s = min(max(s, 0.0), lane.length)
    i = lane.segment_index(s)
    (x0, y0), (x1, y1) = lane.centerline[i], lane.centerline[i + 1]
    seg_len = lane.cumulative[i + 1] - lane.cumulative[i]
    f = (s - lane.cumulative[i]) / seg_len
    dx, dy = (x1 - x0) / seg_len, (y1 - y0) / seg_len
    x = x0 + f * (x1 - x0) - t * dy
    y = y0 + f * (y1 - y0) + t * dx
    return x, y, math.atan2(dy, dx)


def nearest_lane_position(network: RoadNetwork, point: Sequence[float]) -> LanePosition:
    """Lane position on the closest lane; ties go to the smallest lane id."""
    pos, _ = network.project(float(point[0]), float(point[1]))
    return pos


# --- map documents -----------------------------------------------------------

def load_map(document) -> RoadNetwork:
    """Build a network from a map document (dict, JSON text, or path)."""
    if isinstance(document, (str, Path)) and not str(document).lstrip().startswith("{"):
        try:
            document = Path(document).read_text()
        except OSError as exc:
            raise MapParseError(f"cannot read map {document}: {exc}") from exc
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise MapParseError(f"malformed map JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise MapParseError("map document must be an object")
    if document.get("format") != MAP_FORMAT:
        raise MapParseError(f"unsupported map format {document.get('format')!r}")
    unknown = set(document) - {"format", "lanes", "edges", "junctions", "name"}
    if unknown:
        raise MapParseError(f"unknown map keys: {sorted(unknown)}")

    lanes: dict[str, Lane] = {}
    try:
        for raw in document["lanes"]:
            extra = set(raw) - {"id", "centerline", "width", "speed_limit", "successors", "left", "right"}
            if extra:
                raise MapParseError(f"lane {raw.get('id')!r}: unknown keys {sorted(extra)}")
            lid = str(raw["id"])
            if lid in lanes:
                raise MapParseError(f"duplicate lane id {lid!r}")
            lanes[lid] = Lane.build(
                lid, raw["centerline"], float(raw.get("width", 3.5)),
                float(raw["speed_limit"]), tuple(raw.get("successors", ())),
                raw.get("left"), raw.get("right"),
            )
        edges = {str(e["id"]): tuple(e["lanes"]) for e in document.get("edges", [])}
        junctions = {str(j["id"]): tuple(j["lanes"]) for j in document.get("junctions", [])}
    except (KeyError, TypeError) as exc:
        raise MapParseError(f"malformed map: missing or bad field {exc}") from exc

    for lane in lanes.values():
        for ref in (*lane.successors, lane.left_neighbor, lane.right_neighbor):
            if ref is not None and ref not in lanes:
                raise MapLinkError(f"lane {lane.id!r} references undefined lane {ref!r}")
        if lane.left_neighbor is not None and lanes[lane.left_neighbor].right_neighbor != lane.id:
            raise MapLinkError(f"lanes {lane.id!r}/{lane.left_neighbor!r}: neighbor relation not symmetric")
        if lane.right_neighbor is not None and lanes[lane.right_neighbor].left_neighbor != lane.id:
            raise MapLinkError(f"lanes {lane.id!r}/{lane.right_neighbor!r}: neighbor relation not symmetric")
    for group in (*edges.values(), *junctions.values()):
        for ref in group:
            if ref not in lanes:
                raise MapLinkError(f"edge/junction references undefined lane {ref!r}")
    return RoadNetwork(lanes, edges, junctions)


def map_to_document(network: RoadNetwork) -> dict:
    return {
        "format": MAP_FORMAT,
        "lanes": [
            {
                "id": l.id,
                "centerline": [list(p) for p in l.centerline],
                "width": l.width,
                "speed_limit": l.speed_limit,
                "successors": list(l.successors),
                "left": l.left_neighbor,
                "right": l.right_neighbor,
            }
            for l in network.lanes.values()
        ],
        "edges": [{"id": k, "lanes": list(v)} for k, v in network.edges.items()],
        "junctions": [{"id": k, "lanes": list(v)} for k, v in network.junctions.items()],
    }


# --- routing -----------------------------------------------------------------

def route_between(network: RoadNetwork, start: LanePosition, goal: LanePosition,
                  lane_change_cost: float = LANE_CHANGE_COST) -> Route:
    """Cheapest lane path from ``start`` to ``goal``.

    Costs are travelled metres plus ``lane_change_cost`` per neighbor move.
    Lane changes keep the relative position along parallel lanes. Equal-cost
    alternatives resolve to the lexicographically smallest lane sequence.
    """
    lanes = network.lanes
    for p in (start, goal):
        lane = lanes.get(p.lane_id)
        if lane is None or not 0.0 <= p.s <= lane.length + 1e-9:
            raise RoutingError(f"invalid lane position {p}")

    # Search state is (lane, in_start_group): lanes reached only through
    # neighbor moves from the start lane are entered at the start's relative
    # position, every other lane at s=0. The key is the cost to the lane end;
    # ``scale`` converts lane metres into progress metres.
    s_lane = lanes[start.lane_id]
    frac0 = start.s / s_lane.length
    heap = [(s_lane.length - start.s, (start.lane_id,), True, 1.0)]
    settled: set[tuple[str, bool]] = set()
    found = None
    while heap:
        cost, path, in_group, scale = heapq.heappop(heap)
        lid = path[-1]
        if (lid, in_group) in settled:
            continue
        settled.add((lid, in_group))
        lane = lanes[lid]
        if lid == goal.lane_id and (not in_group or goal.s >= frac0 * lane.length - 1e-9):
            total = cost - (lane.length - goal.s) * scale
            if found is None or (total, path) < found:
                found = (total, path)
        for nb in (lane.left_neighbor, lane.right_neighbor):
            if nb is not None and nb not in path:
                k = lane.length / lanes[nb].length
                heapq.heappush(heap, (cost + lane_change_cost, path + (nb,), in_group, scale * k))
        for succ in lane.successors:
            if succ not in path:
                heapq.heappush(heap, (cost + lanes[succ].length, path + (succ,), False, 1.0))
    if found is None:
        raise RoutingError(f"goal {goal} unreachable from {start}")
    return build_route(network, found[1], start, goal)


def build_route(network: RoadNetwork, path: Sequence[str], start: LanePosition,
                goal: LanePosition) -> Route:
    """Route object for an explicit lane sequence (no search)."""
    lanes = network.lanes
    entries: list[RouteEntry] = []
    changes = 0
    for i, lid in enumerate(path):
        lane = lanes[lid]
        if i == 0:
            offset, scale, origin, lo = 0.0, 1.0, start.s, start.s
        else:
            prev = lanes[path[i - 1]]
            e_prev = entries[-1]
            if lid in (prev.left_neighbor, prev.right_neighbor):
                # parallel lane: same progress at the same relative position
                k = prev.length / lane.length
                offset, scale, origin, lo = e_prev.offset, e_prev.scale * k, e_prev.origin, e_prev.lo / k
                changes += 1
            elif lid in prev.successors:
                offset, scale, origin, lo = e_prev.progress(prev.length), 1.0, 0.0, 0.0
            else:
                raise RoutingError(f"lanes {prev.id!r} -> {lid!r} are not connected")
        hi = goal.s if i == len(path) - 1 else lane.length
        entries.append(RouteEntry(lid, offset, scale, origin, lo, hi))
    total = entries[-1].progress(goal.s)
    return Route(tuple(path), float(total), start, goal, tuple(entries), changes)


def route_progress(route: Route, position: LanePosition) -> float:
    """Distance travelled along ``route`` up to ``position``."""
    for e in route.entries:
        if e.lane_id == position.lane_id:
            return e.progress(position.s)
    raise RoutingError(f"lane {position.lane_id!r} is not on the route")


def enumerate_paths(network: RoadNetwork, start: LanePosition, goal: LanePosition,
                    lane_change_cost: float = LANE_CHANGE_COST, max_len: int = 12):
    """Every acyclic lane path start -> goal with its routing cost, sorted.

    Brute-force counterpart of :func:`route_between` for small maps.
    """
    lanes = network.lanes
    out = []

    def walk(path, start_group):
        lid = path[-1]
        if lid == goal.lane_id:
            route = build_route(network, path, start, goal)
            last = route.entries[-1]
            if not start_group or goal.s >= last.lo - 1e-9:
                out.append((route.total_length + lane_change_cost * route.lane_changes, path))
        if len(path) >= max_len:
            return
        lane = lanes[lid]
        for nb in (lane.left_neighbor, lane.right_neighbor):
            if nb is not None and nb not in path:
                walk(path + (nb,), start_group)
        for succ in lane.successors:
            if succ not in path:
                walk(path + (succ,), False)

    walk((start.lane_id,), True)
    return sorted(out)
