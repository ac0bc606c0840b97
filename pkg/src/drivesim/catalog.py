"""Benchmark maps and scenarios.

The shipped JSON under ``drivesim/data`` is generated from this module::

    python -m drivesim.catalog

Geometry conventions: lanes are 3.5 m wide, traffic drives on the right,
and lane index 0 of an edge is its rightmost lane.
"""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

LANE_WIDTH = 3.5
URBAN_LIMIT = 13.9
TURN_LATERAL_ACCEL = 3.0

BENCHMARKS = ("two_way", "double_merge", "intersection")
TRAFFIC_SETTINGS = ("no_social_vehicle", "random_social_vehicle")


def data_dir() -> Path:
    return Path(str(resources.files("drivesim") / "data"))


def scenario_path(name: str) -> Path:
    """Path of a shipped scenario, e.g. ``two_way_no_social_vehicle``."""
    return data_dir() / "scenarios" / f"{name}.json"


def _r(v: float) -> float:
    return round(v, 4)


def _lane(lid, pts, limit=URBAN_LIMIT, successors=(), left=None, right=None):
    return {
        "id": lid,
        "centerline": [[_r(x), _r(y)] for x, y in pts],
        "width": LANE_WIDTH,
        "speed_limit": limit,
        "successors": list(successors),
        "left": left,
        "right": right,
    }


def _straight(p0, p1, step=10.0):
    n = max(1, int(math.ceil(math.dist(p0, p1) / step)))
    return [(p0[0] + (p1[0] - p0[0]) * k / n, p0[1] + (p1[1] - p0[1]) * k / n) for k in range(n + 1)]


def _s_curve(p0, p1, n=40):
    """Smooth lateral shift from ``p0`` to ``p1`` along x (zero end slopes)."""
    out = []
    for k in range(n + 1):
        u = k / n
        out.append((p0[0] + (p1[0] - p0[0]) * u,
                    p0[1] + (p1[1] - p0[1]) * 0.5 * (1.0 - math.cos(math.pi * u))))
    return out


def _bezier(p0, h0, p1, h1, n=None):
    """Cubic Bezier leaving ``p0`` along ``h0`` and arriving at ``p1`` along ``h1``."""
    d = 0.55 * math.dist(p0, p1)
    c0 = (p0[0] + d * math.cos(h0), p0[1] + d * math.sin(h0))
    c1 = (p1[0] - d * math.cos(h1), p1[1] - d * math.sin(h1))
    n = n or max(8, int(math.ceil(1.5 * math.dist(p0, p1))))
    pts = []
    for k in range(n + 1):
        u = k / n
        a, b, c, e = (1 - u) ** 3, 3 * u * (1 - u) ** 2, 3 * u * u * (1 - u), u ** 3
        pts.append((a * p0[0] + b * c0[0] + c * c1[0] + e * p1[0],
                    a * p0[1] + b * c0[1] + c * c1[1] + e * p1[1]))
    return pts


def two_way_map(length: float = 200.0) -> dict:
    """Straight road, two lanes per direction."""
    w = LANE_WIDTH
    lanes = [
        _lane("west_to_east_0", _straight((0, -1.5 * w), (length, -1.5 * w)), left="west_to_east_1"),
        _lane("west_to_east_1", _straight((0, -0.5 * w), (length, -0.5 * w)), right="west_to_east_0"),
        _lane("east_to_west_0", _straight((length, 1.5 * w), (0, 1.5 * w)), left="east_to_west_1"),
        _lane("east_to_west_1", _straight((length, 0.5 * w), (0, 0.5 * w)), right="east_to_west_0"),
    ]
    return {
        "format": 1,
        "name": "two_way",
        "lanes": lanes,
        "edges": [
            {"id": "west_to_east", "lanes": ["west_to_east_0", "west_to_east_1"]},
            {"id": "east_to_west", "lanes": ["east_to_west_0", "east_to_west_1"]},
        ],
        "junctions": [],
    }


def double_merge_map(merge_length: float = 200.0, ramp: float = 60.0, offset: float = 12.0) -> dict:
    """Two one-lane roads join a two-lane weaving section and split again.

    ``top_left`` feeds the left merge lane and ``down_left`` the right one;
    the left merge lane continues into ``top_right`` and the right one into
    ``down_right``. Crossing over (e.g. ``top_left`` to ``down_right``)
    requires a lane change inside ``merge``.
    """
    w = LANE_WIDTH
    yl, yr = 0.5 * w, -0.5 * w
    L = merge_length
    lanes = [
        _lane("top_left_0", _s_curve((-ramp, offset), (0.0, yl)), successors=["merge_1"]),
        _lane("down_left_0", _s_curve((-ramp, -offset), (0.0, yr)), successors=["merge_0"]),
        _lane("merge_0", _straight((0.0, yr), (L, yr)), successors=["down_right_0"], left="merge_1"),
        _lane("merge_1", _straight((0.0, yl), (L, yl)), successors=["top_right_0"], right="merge_0"),
        _lane("top_right_0", _s_curve((L, yl), (L + ramp, offset))),
        _lane("down_right_0", _s_curve((L, yr), (L + ramp, -offset))),
    ]
    return {
        "format": 1,
        "name": "double_merge",
        "lanes": lanes,
        "edges": [
            {"id": "top_left", "lanes": ["top_left_0"]},
            {"id": "down_left", "lanes": ["down_left_0"]},
            {"id": "merge", "lanes": ["merge_0", "merge_1"]},
            {"id": "top_right", "lanes": ["top_right_0"]},
            {"id": "down_right", "lanes": ["down_right_0"]},
        ],
        "junctions": [],
    }


def intersection_map(arm: float = 100.0, box: float = 20.0) -> dict:
    """Unsignalised four-way junction with one lane per approach.

    Edges are named ``<arm>_<side>`` as seen on a north-up plan: ``top_left``
    is the southbound approach on the north arm, ``down_right`` the
    northbound approach on the south arm, ``left_down`` the eastbound
    approach on the west arm and ``right_top`` the westbound approach on the
    east arm. Their mirrored partners are the exits.
    """
    h = 0.5 * LANE_WIDTH
    e = 0.5 * box
    far = e + arm
    # (edge, entry point at the box, heading into the box) for approaches
    approaches = {
        "top_left": ((-h, e), -math.pi / 2, (-h, far)),
        "down_right": ((h, -e), math.pi / 2, (h, -far)),
        "left_down": ((-e, -h), 0.0, (-far, -h)),
        "right_top": ((e, h), math.pi, (far, h)),
    }
    # (edge, exit point at the box, heading out of the box) for exits
    exits = {
        "top_right": ((h, e), math.pi / 2, (h, far)),
        "down_left": ((-h, -e), -math.pi / 2, (-h, -far)),
        "left_top": ((-e, h), math.pi, (-far, h)),
        "right_down": ((e, -h), 0.0, (far, -h)),
    }
    # U-turn exit of each approach (not connected)
    uturn = {"top_left": "top_right", "down_right": "down_left",
                "left_down": "left_top", "right_top": "right_down"}
    lanes, junction_lanes = [], []
    for name, (p_in, hd, start) in sorted(approaches.items()):
        succs = []
        for ename, (p_out, he, _) in sorted(exits.items()):
            if ename == uturn[name]:
                continue
            jid = f"junction_{name}_{ename}"
            turn = math.remainder(he - hd, 2 * math.pi)
            if abs(turn) < 1e-9:
                pts = _straight(p_in, p_out, step=2.0)
                limit = URBAN_LIMIT
            else:
                pts = _bezier(p_in, hd, p_out, he)
                radius = math.dist(p_in, p_out) / math.sqrt(2.0)
                limit = round(min(URBAN_LIMIT, math.sqrt(TURN_LATERAL_ACCEL * radius)), 2)
            lanes.append(_lane(jid, pts, limit, successors=[f"{ename}_0"]))
            junction_lanes.append(jid)
            succs.append(jid)
        lanes.append(_lane(f"{name}_0", _straight(start, p_in), successors=succs))
    for ename, (p_out, _, end) in sorted(exits.items()):
        lanes.append(_lane(f"{ename}_0", _straight(p_out, end)))
    lanes.sort(key=lambda l: l["id"])
    return {
        "format": 1,
        "name": "intersection",
        "lanes": lanes,
        "edges": [{"id": n, "lanes": [f"{n}_0"]} for n in sorted({**approaches, **exits})],
        "junctions": [{"id": "center", "lanes": sorted(junction_lanes)}],
    }


# --- scenarios -----------------------------------------------------------------

#: The two actor archetypes of the scenario DSL example.
ACTORS = {
    "impatient_car": {
        "speed": {"mean": 1.0, "sigma": 0.2},
        "lane_changing_model": {"impatience": 1.0, "cooperative": 0.25},
        "junction_model": {"drive_after_red_time": 1.5, "drive_after_yellow_time": 1.0,
                           "impatience": 1.0},
    },
    "patient_car": {
        "speed": {"mean": 0.8, "sigma": 0.2},
        "lane_changing_model": {"impatience": 0.0, "cooperative": 0.5},
        "junction_model": {"drive_after_yellow_time": 1.0, "impatience": 0.5},
    },
}
MIX = {"impatient_car": 0.5, "patient_car": 0.5}


def _flow(begin, end, rate):
    return {"route": {"begin": list(begin), "end": list(end)}, "rate": rate, "actors": dict(MIX)}


def _missions(name: str) -> list[dict]:
    if name == "two_way":
        return [
            {"agent_id": "a0", "start": ["west_to_east", 0, 10], "goal": ["west_to_east", 0, 180]},
            {"agent_id": "a1", "start": ["east_to_west", 0, 10], "goal": ["east_to_west", 0, 180]},
        ]
    if name == "double_merge":
        return [
            {"agent_id": "a0", "start": ["top_left", 0, 10], "goal": ["down_right", 0, 30]},
            {"agent_id": "a1", "start": ["down_left", 0, 10], "goal": ["top_right", 0, 30]},
        ]
    return [
        {"agent_id": "a0", "start": ["top_left", 0, 10], "goal": ["down_left", 0, 30]},
        {"agent_id": "a1", "start": ["left_down", 0, 10], "goal": ["top_right", 0, 30]},
    ]


def _flows(name: str) -> list[dict]:
    if name == "two_way":
        return [
            _flow(("west_to_east", 0, 0), ("west_to_east", 0, -1), 0.25),
            _flow(("west_to_east", 1, 0), ("west_to_east", 1, -1), 0.25),
            _flow(("east_to_west", 0, 0), ("east_to_west", 0, -1), 0.25),
            _flow(("east_to_west", 1, 0), ("east_to_west", 1, -1), 0.25),
        ]
    if name == "double_merge":
        return [
            _flow(("down_left", 0, 30), ("merge", 0, 150), 0.15),
            _flow(("top_left", 0, 0), ("top_right", 0, -1), 0.12),
            _flow(("down_left", 0, 0), ("top_right", 0, -1), 0.1),
            _flow(("top_left", 0, 0), ("down_right", 0, -1), 0.1),
        ]
    flows = []
    for a, b in (("top_left", "down_left"), ("down_right", "top_right"), ("left_down", "right_down"),
                 ("right_top", "left_top"), ("down_right", "left_top"), ("top_left", "right_down")):
        flows.append(_flow((a, 0, 0), (b, 0, -1), 0.03))
    return flows


def benchmark_scenario(name: str, setting: str, seed: int = 42) -> dict:
    return {
        "format": 1,
        "name": f"{name}_{setting}",
        "map": f"../maps/{name}.json",
        "seed": seed,
        "max_episode_steps": 600,
        "missions": _missions(name),
        "actors": ACTORS if setting == "random_social_vehicle" else {},
        "flows": _flows(name) if setting == "random_social_vehicle" else [],
        "bubbles": [],
    }


def bubble_demo_scenario(seed: int = 7) -> dict:
    """Two-way road with a bubble over the middle, for handover studies."""
    return {
        "format": 1,
        "name": "bubble_demo",
        "map": "../maps/two_way.json",
        "seed": seed,
        "max_episode_steps": 1000,
        "missions": [],
        "actors": ACTORS,
        "flows": _flows("two_way"),
        "bubbles": [{
            "id": "b0",
            "center": [100.0, 0.0],
            "half_extents": [30.0, 8.0],
            "rotation": 0.0,
            "airlock_margin": 10.0,
            "agent": "keep_lane",
            "capacity": 6,
        }],
    }


MAPS = {"two_way": two_way_map, "double_merge": double_merge_map, "intersection": intersection_map}


def write_all(root: Path | None = None) -> list[Path]:
    root = Path(root) if root is not None else data_dir()
    written = []
    (root / "maps").mkdir(parents=True, exist_ok=True)
    (root / "scenarios").mkdir(parents=True, exist_ok=True)
    docs = {root / "maps" / f"{n}.json": f() for n, f in MAPS.items()}
    for n in BENCHMARKS:
        for s in TRAFFIC_SETTINGS:
            docs[root / "scenarios" / f"{n}_{s}.json"] = benchmark_scenario(n, s)
    docs[root / "scenarios" / "bubble_demo.json"] = bubble_demo_scenario()
    for path, doc in docs.items():
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        written.append(path)
    return written


if __name__ == "__main__":
    for p in write_all():
        print(p)
