import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from drivesim import kernels
from drivesim.agents import ConservativeRuleAgent, KeepLaneAgent
from drivesim.engine import (WRONG_WAY_STEPS, EngineError, Env, EpisodeLog, broad_phase,
                             detect_collisions, detect_events, replay, reset, run_episode, step,
                             world_hash)
from drivesim.road import load_map
from drivesim.scenario import ScenarioError, bind_scenario, parse_scenario
from drivesim.vehicle import LaneFollowing, VehicleState

from conftest import bound, straight_map


def scenario_on(mapdoc, missions, **extra):
    doc = {"format": 1, "name": "t", "map": "unused.json", "missions": missions, **extra}
    return bind_scenario(parse_scenario(doc), network=load_map(mapdoc))


def mission(aid, lane, s0, s1):
    return {"agent_id": aid, "start": ["road", lane, s0], "goal": ["road", lane, s1]}


@pytest.fixture(scope="module")
def single():
    return scenario_on(straight_map(length=300.0, lanes=2), [mission("a0", 0, 10.0, 250.0)],
                       max_episode_steps=300)


def vs(vid, x, y, h, length=4.6, width=1.8):
    return VehicleState(vid, x, y, h, 0.0, 0.0, 0.0, length, width, "traffic")


# --- collision detection ----------------------------------------------------------------

def rect(x, y, h, length, width):
    c, s = math.cos(h), math.sin(h)
    return Polygon([(x + c * u - s * v, y + s * u + c * v)
                    for u, v in ((length / 2, width / 2), (-length / 2, width / 2),
                                 (-length / 2, -width / 2), (length / 2, -width / 2))])


def sampled_overlap(a, b, n=60):
    """Point-sampling oracle: does any sample point of rectangle ``a`` lie in ``b``?"""
    x, y, h, L, W = a
    c, s = math.cos(h), math.sin(h)
    u, v = np.meshgrid(np.linspace(-L / 2, L / 2, n), np.linspace(-W / 2, W / 2, n // 2))
    px, py = x + c * u - s * v, y + s * u + c * v
    bx, by, bh, bL, bW = b
    cb, sb = math.cos(bh), math.sin(bh)
    du, dv = cb * (px - bx) + sb * (py - by), -sb * (px - bx) + cb * (py - by)
    return bool(np.any((np.abs(du) <= bL / 2) & (np.abs(dv) <= bW / 2)))


def test_sat_agrees_with_sampling_oracle():
    rng = np.random.default_rng(11)
    agree = total = 0
    for _ in range(1000):
        a = (0.0, 0.0, rng.uniform(-math.pi, math.pi), rng.uniform(3, 6), rng.uniform(1.5, 2.5))
        b = (*rng.uniform(-6, 6, 2), rng.uniform(-math.pi, math.pi), rng.uniform(3, 6),
             rng.uniform(1.5, 2.5))
        pa, pb = rect(*a), rect(*b)
        # tangency band: skip pairs whose separation or penetration is under 1 cm
        if pa.buffer(0.005).intersects(pb.buffer(0.005)) != pa.buffer(-0.005).intersects(pb.buffer(-0.005)):
            continue
        total += 1
        oracle = sampled_overlap(a, b) or sampled_overlap(b, a)
        agree += kernels.obb_overlap(*a, *b) == oracle
    assert total > 950
    assert agree / total >= 0.999


def test_sat_touching_and_separated():
    assert kernels.obb_overlap(0, 0, 0, 4, 2, 3.99, 0, 0, 4, 2)
    assert not kernels.obb_overlap(0, 0, 0, 4, 2, 4.01, 0, 0, 4, 2)
    # rotated rectangle whose corner pokes into the other
    assert kernels.obb_overlap(0, 0, 0, 4, 2, 3.3, 0, math.pi / 4, 2, 2)


def test_broad_phase_finds_all_overlaps():
    rng = np.random.default_rng(5)
    vs_ = [vs(f"v{k:02d}", *rng.uniform(0, 40, 2), rng.uniform(-3, 3)) for k in range(40)]
    brute = sorted((a.id, b.id) for i, a in enumerate(vs_) for b in vs_[i + 1:]
                   if kernels.obb_overlap(a.x, a.y, a.heading, a.length, a.width,
                                          b.x, b.y, b.heading, b.length, b.width))
    assert detect_collisions(vs_) == brute
    assert len(broad_phase(vs_)) < 40 * 39 // 2


# --- reset / step --------------------------------------------------------------------------

def test_reset_places_egos_at_rest(single):
    world, results = reset(single, seed=1)
    ego = world.egos["a0"]
    assert ego.vehicle_id == "ego-a0" and ego.state.speed == 0.0
    assert (ego.state.x, ego.state.y) == pytest.approx((10.0, 0.0))
    assert world.ownership == {"ego-a0": "ego:a0"}
    assert results["a0"].observation.frames[0] == results["a0"].observation.latest
    assert world.log.header["seed"] == 1 and world.log.header["initial"][0][0] == "ego-a0"


def test_shared_start_rejected():
    sc = scenario_on(straight_map(), [mission("a", 0, 10.0, 150.0), mission("b", 0, 10.0, 100.0)])
    with pytest.raises(ScenarioError, match="share a start"):
        reset(sc, seed=0)


def test_overlapping_starts_rejected():
    sc = scenario_on(straight_map(), [mission("a", 0, 10.0, 150.0), mission("b", 0, 12.0, 100.0)])
    with pytest.raises(ScenarioError, match="overlap"):
        reset(sc, seed=0)


def test_missing_and_unknown_actions(single):
    world, _ = reset(single, seed=0)
    with pytest.raises(EngineError, match="missing"):
        step(world, {})
    with pytest.raises(EngineError, match="unknown"):
        step(world, {"a0": "keep_lane", "zz": "keep_lane"})


def test_goal_reached_and_telescoping_reward(single):
    world = run_episode(single, 0, {"a0": KeepLaneAgent()})
    recs = world.log.records
    assert recs[-1]["events"]["a0"]["reached_goal"]
    assert recs[-1]["ego"]["a0"]["done"]
    raw = sum(r["rewards"]["a0"][0] for r in recs)
    assert raw == pytest.approx(recs[-1]["ego"]["a0"]["progress"] - 0.0, abs=1e-6)
    assert recs[-1]["rewards"]["a0"][1] == pytest.approx(recs[-1]["rewards"]["a0"][0] + 20.0)


def test_timeout_flag():
    sc = scenario_on(straight_map(length=300.0), [mission("a0", 0, 10.0, 250.0)],
                     max_episode_steps=20)
    world = run_episode(sc, 0, {"a0": KeepLaneAgent()})
    assert len(world.log.records) == 20
    assert world.log.records[-1]["events"]["a0"]["timeout"]


# --- events ----------------------------------------------------------------------------------

def test_off_road_threshold(single):
    world, _ = reset(single, seed=0)
    ego = world.egos["a0"]
    margin = world.network.lanes["road_0"].off_road_margin()
    ego.state = vs("ego-a0", 50.0, -(margin - 0.01), 0.0)
    assert not detect_events(world, ego, False).off_road
    ego.state = vs("ego-a0", 50.0, -(margin + 0.01), 0.0)
    assert detect_events(world, ego, False).off_road


def test_wrong_way_hysteresis(single):
    world, _ = reset(single, seed=0)
    ego = world.egos["a0"]
    ego.state = vs("ego-a0", 50.0, 0.0, math.pi)
    flags = [detect_events(world, ego, False).wrong_way for _ in range(WRONG_WAY_STEPS + 1)]
    assert flags == [False] * (WRONG_WAY_STEPS - 1) + [True, True]
    ego.state = vs("ego-a0", 50.0, 0.0, 0.0)
    assert not detect_events(world, ego, False).wrong_way
    ego.state = vs("ego-a0", 50.0, 0.0, math.pi)
    assert not detect_events(world, ego, False).wrong_way  # counter restarted


def test_collision_ends_episode():
    sc = scenario_on(straight_map(length=300.0, lanes=2),
                     [mission("a", 0, 10.0, 250.0), mission("b", 1, 30.0, 250.0)])
    world, _ = reset(sc, seed=0)
    # b steers into a's lane while stopped; a drives into it
    world.egos["b"].state = world.controlled["ego-b"] = vs("ego-b", 30.0, 0.0, 0.0)
    for _ in range(100):
        res = step(world, {a: LaneFollowing(10.0, 0) if a == "a" else LaneFollowing(0.0, 0)
                           for a in world.live_agents()})
        if world.finished:
            break
    assert res["a"].info["events"]["collision"] and res["b"].info["events"]["collision"]
    assert res["a"].reward == pytest.approx(res["a"].info["raw_reward"] - 10.0)
    assert world.log.records[-1]["collisions"] == [["ego-a", "ego-b"]]


# --- determinism and replay -------------------------------------------------------------

def test_world_hash_and_log_determinism():
    sc = bound("two_way_random_social_vehicle")
    w1 = run_episode(sc, 7, {a: KeepLaneAgent() for a in ("a0", "a1")}, max_steps=150)
    w2 = run_episode(sc, 7, {a: KeepLaneAgent() for a in ("a0", "a1")}, max_steps=150)
    assert w1.log.dumps() == w2.log.dumps()
    assert world_hash(w1) == world_hash(w2)
    w3 = run_episode(sc, 8, {a: KeepLaneAgent() for a in ("a0", "a1")}, max_steps=150)
    assert w3.log.dumps() != w1.log.dumps()


def test_world_hash_ignores_time_on_request(single):
    w1, _ = reset(single, seed=0)
    w2, _ = reset(single, seed=0)
    w2.step_index = 5
    assert world_hash(w1) != world_hash(w2)
    assert world_hash(w1, include_time=False) == world_hash(w2, include_time=False)


def test_replay_reproduces_log():
    sc = bound("double_merge_random_social_vehicle")
    world = run_episode(sc, 3, {"a0": ConservativeRuleAgent(), "a1": KeepLaneAgent()},
                        max_steps=200)
    assert replay(sc, world.log).dumps() == world.log.dumps()


@pytest.mark.parametrize("suffix", [".ndjson", ".ndjson.gz"])
def test_log_file_round_trip(tmp_path, single, suffix):
    world = run_episode(single, 0, {"a0": KeepLaneAgent()}, max_steps=30)
    path = tmp_path / f"ep{suffix}"
    world.log.write(path)
    assert EpisodeLog.read(path).dumps() == world.log.dumps()
    assert not list(tmp_path.glob("*.tmp"))


def test_log_rejects_gaps(single):
    world = run_episode(single, 0, {"a0": KeepLaneAgent()}, max_steps=3)
    lines = world.log.dumps().splitlines()
    with pytest.raises(EngineError, match="non-contiguous"):
        EpisodeLog.parse("\n".join(lines[:2] + lines[3:]))


def test_env_wrapper(single):
    env = Env(single)
    obs = env.reset(seed=0)
    assert set(obs) == {"a0"}
    total = 0.0
    done = {"__all__": False}
    while not done["__all__"]:
        obs, rew, done, info = env.step({"a0": "keep_lane"})
        total += info["a0"]["raw_reward"]
    env.close()
    assert total == pytest.approx(240.0, abs=3.5)  # goal radius
