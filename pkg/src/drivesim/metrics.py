"""Evaluation metrics computed from episode logs.

Metrics register by name through :func:`register`; :func:`evaluate` runs
every registered metric over a batch of logs. All metrics are order
invariant in the logs they receive.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .engine import LOG_VERSION, EpisodeLog

JERK_SCALE = 2.0
STEER_RATE_SCALE = 0.2
LATERAL_STEER = 0.05
SPEED_BUCKET = 2.0
INTERACTION_RANGE = 15.0
GIVE_WAY_DECEL = 1.0
CROSSING_ANGLE = 0.2
MIN_GAP = 2.0
HEADWAY = 1.5
LANE_WIDTH = 3.5


class MetricsError(ValueError):
    pass


_REGISTRY: dict[str, tuple[str, object]] = {}


def register(name: str, group: str = "custom"):
    """Decorator adding ``fn(episodes) -> float`` to the suite under ``name``."""
    def wrap(fn):
        if name in _REGISTRY:
            raise ValueError(f"metric {name!r} already registered")
        _REGISTRY[name] = (group, fn)
        return fn
    return wrap


def registered() -> dict[str, str]:
    return {name: group for name, (group, _) in sorted(_REGISTRY.items())}


# --- per-agent episode view --------------------------------------------------------

@dataclass
class AgentEpisode:
    """One ego's trajectory within one episode log."""

    scenario: str
    seed: int
    agent_id: str
    vehicle_id: str
    dt: float
    collided: bool = False
    completed: bool = False
    timed_out: bool = False
    speeds: list = field(default_factory=list)
    limits: list = field(default_factory=list)
    accels: list = field(default_factory=list)
    steerings: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    neighbor_counts: list = field(default_factory=list)
    lane_changes: list = field(default_factory=list)
    # per step: (ego row, {other id: row}) for interaction analysis
    frames: list = field(default_factory=list)


def _row(r):
    return {"x": r[1], "y": r[2], "h": r[3], "v": r[4], "a": r[5], "steer": r[6]}


def agent_episodes(log: EpisodeLog) -> list[AgentEpisode]:
    h = log.header
    out = []
    for aid in sorted(h["agents"]):
        vid = h["agents"][aid]["vehicle"]
        ep = AgentEpisode(h["scenario"], h["seed"], aid, vid, h["dt"])
        for rec in log.records:
            if aid not in rec.get("events", {}):
                continue
            ev = rec["events"][aid]
            ep.collided |= ev["collision"]
            ep.completed |= ev["reached_goal"]
            ep.timed_out |= ev["timeout"]
            rows = {r[0]: r for r in rec["vehicles"]}
            me = rows.get(vid)
            if me is None:
                continue
            ep.speeds.append(me[4])
            ep.accels.append(me[5])
            ep.steerings.append(me[6])
            ep.limits.append(rec["ego"][aid]["speed_limit"])
            ep.neighbor_counts.append(rec["ego"][aid]["neighbors"])
            ep.actions.append(rec["actions"][aid])
            lc = rec.get("info", {}).get(aid, {}).get("lane_change")
            others = {k: _row(r) for k, r in rows.items() if k != vid}
            if lc:
                ep.lane_changes.append((_row(me), lc.get("direction", 0), others))
            ep.frames.append((_row(me), others))
        out.append(ep)
    return out


def check_versions(logs) -> None:
    bad = [i for i, log in enumerate(logs) if log.header.get("version") != LOG_VERSION]
    if bad:
        raise MetricsError(f"log format version mismatch (expected {LOG_VERSION}) in logs {bad}")


def _episodes(logs) -> list[AgentEpisode]:
    logs = list(logs)
    if not logs:
        raise MetricsError("no episode logs given")
    check_versions(logs)
    eps = [ep for log in logs for ep in agent_episodes(log)]
    eps.sort(key=lambda e: (e.scenario, e.seed, e.agent_id))
    if not eps:
        raise MetricsError("logs contain no ego agents")
    return eps


# --- performance ---------------------------------------------------------------------

def collision_rate(eps) -> float:
    return sum(e.collided for e in eps) / len(eps)


def completion_rate(eps) -> float:
    return sum(e.completed for e in eps) / len(eps)


def generalization(eps, reference: str | None = None) -> float:
    """Mean over scenarios of completion relative to the reference scenario, in [0, 1]."""
    by = defaultdict(list)
    for e in eps:
        by[e.scenario].append(e)
    names = sorted(by)
    # default reference: the best-completed scenario
    ref = reference if reference is not None else max(names, key=lambda n: completion_rate(by[n]))
    if ref not in by:
        raise MetricsError(f"reference scenario {ref!r} not in logs")
    base = completion_rate(by[ref])
    if base == 0.0:
        return 0.0
    vals = [min(1.0, max(0.0, completion_rate(by[n]) / base)) for n in names]
    return sum(vals) / len(vals)


def performance_metrics(logs, reference: str | None = None):
    eps = _episodes(logs)
    return collision_rate(eps), completion_rate(eps), generalization(eps, reference)


# --- behavior ------------------------------------------------------------------------

def agility(eps) -> float:
    ratios = [min(1.0, max(0.0, v / lim)) for e in eps for v, lim in zip(e.speeds, e.limits) if lim > 0]
    return sum(ratios) / len(ratios) if ratios else 0.0


def stability(eps) -> float:
    jerks, rates = [], []
    for e in eps:
        for a0, a1 in zip(e.accels, e.accels[1:]):
            jerks.append(abs(a1 - a0) / e.dt)
        for s0, s1 in zip(e.steerings, e.steerings[1:]):
            rates.append(abs(s1 - s0) / e.dt)
    mj = sum(jerks) / len(jerks) if jerks else 0.0
    mr = sum(rates) / len(rates) if rates else 0.0
    return 1.0 / (1.0 + mj / JERK_SCALE + mr / STEER_RATE_SCALE)


def is_lateral(action: dict) -> bool:
    kind = action.get("kind")
    if kind == "Discrete":
        return action["action"] in ("turn_left", "turn_right")
    if kind == "LaneFollowing":
        return action["lane_change"] != 0
    if kind == "Continuous":
        return abs(action["steering"]) > LATERAL_STEER
    if kind == "ActuatorDynamic":
        return abs(action["steering_rate"]) > LATERAL_STEER
    return False


def control_diversity(eps) -> float:
    acts = [a for e in eps for a in e.actions]
    return sum(is_lateral(a) for a in acts) / len(acts) if acts else 0.0


def action_key(action: dict) -> str:
    """Histogram key: continuous fields rounded to one decimal."""
    def q(v):
        return round(v, 1) if isinstance(v, float) else v
    if action.get("kind") == "Trajectory":
        pts = action["points"]
        return json.dumps({"kind": "Trajectory", "end": [q(x) for x in pts[-1]]}, sort_keys=True)
    return json.dumps({k: q(v) for k, v in action.items()}, sort_keys=True)


def stochasticity(eps) -> float:
    """Sample-weighted mean normalized entropy of actions per (speed, neighbors) bucket."""
    buckets: dict[tuple, Counter] = defaultdict(Counter)
    alphabet = set()
    for e in eps:
        for v, n, a in zip(e.speeds, e.neighbor_counts, e.actions):
            k = action_key(a)
            alphabet.add(k)
            buckets[(int(v // SPEED_BUCKET), n)][k] += 1
    if len(alphabet) < 2:
        return 0.0
    norm = math.log(len(alphabet))
    total = sum(sum(c.values()) for c in buckets.values())
    acc = 0.0
    for key in sorted(buckets):
        c = buckets[key]
        n = sum(c.values())
        h = -sum((m / n) * math.log(m / n) for m in c.values())
        acc += n * h / norm
    return acc / total


def _to_frame(me: dict, other: dict) -> tuple[float, float]:
    c, s = math.cos(me["h"]), math.sin(me["h"])
    dx, dy = other["x"] - me["x"], other["y"] - me["y"]
    return c * dx + s * dy, -s * dx + c * dy


def cut_in_ratio(eps, length: float = 4.6) -> float:
    """Lane changes that land closer than ``s0 + v*T`` in front of a follower, over all lane changes."""
    total = cut = 0
    for e in eps:
        for me, direction, others in e.lane_changes:
            total += 1
            target = LANE_WIDTH * (1 if direction > 0 else -1 if direction < 0 else 0)
            for o in others.values():
                dx, dy = _to_frame(me, o)
                if dx < 0 and abs(dy - target) < 0.5 * LANE_WIDTH:
                    gap = -dx - length
                    if gap < MIN_GAP + o["v"] * HEADWAY:
                        cut += 1
                        break
    return cut / total if total else 0.0


def behavior_metrics(logs):
    eps = _episodes(logs)
    return (1.0 - collision_rate(eps), agility(eps), stability(eps), control_diversity(eps),
            stochasticity(eps), cut_in_ratio(eps))


# --- game-theoretic -------------------------------------------------------------------

def _interacting(me: dict, other: dict, prev: tuple | None) -> bool:
    dx, dy = _to_frame(me, other)
    if math.hypot(dx, dy) > INTERACTION_RANGE:
        return False
    dh = abs(math.remainder(other["h"] - me["h"], 2 * math.pi))
    if CROSSING_ANGLE < dh < math.pi - CROSSING_ANGLE:
        return True
    # merging: laterally offset by about a lane and closing in
    return prev is not None and 1.0 < abs(dy) < 1.5 * LANE_WIDTH and abs(dy) < abs(prev[1]) - 1e-6


def interaction_windows(ep: AgentEpisode) -> list[dict]:
    """Per other vehicle: from the first crossing or merging step in range until it leaves range."""
    open_: dict[str, dict] = {}
    done = []
    prev_rel: dict[str, tuple] = {}
    for me, others in ep.frames:
        for oid in sorted(others):
            o = others[oid]
            rel = _to_frame(me, o)
            if oid in open_:
                if math.hypot(*rel) > INTERACTION_RANGE:
                    done.append(open_.pop(oid))
                else:
                    open_[oid]["min_accel"] = min(open_[oid]["min_accel"], me["a"])
                    open_[oid]["end_rel"] = rel
            elif _interacting(me, o, prev_rel.get(oid)):
                open_[oid] = {"other": oid, "min_accel": me["a"], "end_rel": rel}
            prev_rel[oid] = rel
        for oid in sorted(set(open_) - set(others)):
            done.append(open_.pop(oid))
    done.extend(open_[o] for o in sorted(open_))
    return done


def giving_way_ratio(eps) -> float:
    windows = [w for e in eps for w in interaction_windows(e)]
    if not windows:
        return 0.0
    gave = sum(1 for w in windows if w["min_accel"] <= -GIVE_WAY_DECEL and w["end_rel"][0] > 0)
    return gave / len(windows)


def overtaking_ratio(eps) -> float:
    encountered = overtaken = 0
    for e in eps:
        seen: dict[str, list] = defaultdict(list)
        for me, others in e.frames:
            for oid in sorted(others):
                o = others[oid]
                dx, dy = _to_frame(me, o)
                if math.hypot(dx, dy) <= INTERACTION_RANGE:
                    same_dir = abs(math.remainder(o["h"] - me["h"], 2 * math.pi)) < math.pi / 2
                    seen[oid].append((dx, same_dir))
        for oid in sorted(seen):
            encountered += 1
            ahead = False
            for dx, same_dir in seen[oid]:
                if not same_dir:
                    continue
                if dx > 0:
                    ahead = True
                elif ahead and dx < 0:
                    overtaken += 1
                    break
    return overtaken / encountered if encountered else 0.0


def game_metrics(logs):
    eps = _episodes(logs)
    return giving_way_ratio(eps), overtaking_ratio(eps)


# --- registry and report ------------------------------------------------------------------

register("collision_rate", "performance")(collision_rate)
register("completion_rate", "performance")(completion_rate)
register("generalization", "performance")(generalization)
register("safety", "behavior")(lambda eps: 1.0 - collision_rate(eps))
register("agility", "behavior")(agility)
register("stability", "behavior")(stability)
register("control_diversity", "behavior")(control_diversity)
register("stochasticity", "behavior")(stochasticity)
register("cut_in_ratio", "behavior")(cut_in_ratio)
register("giving_way_ratio", "game")(giving_way_ratio)
register("overtaking_ratio", "game")(overtaking_ratio)


@dataclass
class MetricsReport:
    episodes: int
    population: dict
    per_agent: dict
    per_scenario: dict

    def to_dict(self) -> dict:
        return {"episodes": self.episodes, "population": self.population,
                "per_agent": self.per_agent, "per_scenario": self.per_scenario}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def radar(self, label: str = "run") -> dict:
        """Radar-plot series: metric name -> {label: value}."""
        return {k: {label: v} for k, v in self.population.items()}


def _suite(eps) -> dict:
    return {name: fn(eps) for name, (_, fn) in sorted(_REGISTRY.items())}


def evaluate(logs) -> MetricsReport:
    eps = _episodes(logs)
    per_agent = {}
    for aid in sorted({e.agent_id for e in eps}):
        per_agent[aid] = _suite([e for e in eps if e.agent_id == aid])
    per_scenario = {}
    for name in sorted({e.scenario for e in eps}):
        sub = [e for e in eps if e.scenario == name]
        per_scenario[name] = {"collision_rate": collision_rate(sub),
                              "completion_rate": completion_rate(sub),
                              "episodes": len({e.seed for e in sub}), "agent_episodes": len(sub)}
    n_logs = len({(e.scenario, e.seed) for e in eps})
    return MetricsReport(n_logs, _suite(eps), per_agent, per_scenario)


def format_rate(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def split_setting(scenario: str) -> tuple[str, str]:
    for tag in ("_no_social_vehicle", "_random_social_vehicle"):
        if scenario.endswith(tag):
            return scenario[: -len(tag)], tag[1:]
    return scenario, "default"


def table_csv(report: MetricsReport, label: str = "run") -> str:
    """One CSV row in the collision/completion table layout."""
    cols = sorted(report.per_scenario, key=lambda n: split_setting(n))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm"] + ["/".join(split_setting(c)) for c in cols])
    w.writerow([label] + [f"{format_rate(report.per_scenario[c]['collision_rate'])}/"
                          f"{format_rate(report.per_scenario[c]['completion_rate'])}" for c in cols])
    return buf.getvalue()
