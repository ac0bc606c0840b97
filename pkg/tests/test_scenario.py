import json

import pytest

from drivesim.catalog import scenario_path, two_way_map
from drivesim.scenario import (ScenarioError, bind_scenario, load_scenario, parse_scenario,
                               scenario_to_document)

BASE = {
    "format": 1,
    "name": "t",
    "map": "map.json",
    "missions": [{"agent_id": "a0", "start": ["west_to_east", 0, 10.0],
                  "goal": ["west_to_east", 0, 150.0]}],
    "actors": {"car": {"speed": {"mean": 1.0, "sigma": 0.1}}},
    "flows": [{"route": {"begin": ["west_to_east", 1, 0.0], "end": ["west_to_east", 1, -1.0]},
               "rate": 0.1, "actors": {"car": 1.0}}],
}


@pytest.fixture
def scen_dir(tmp_path):
    (tmp_path / "map.json").write_text(json.dumps(two_way_map()))
    return tmp_path


def write(d, doc, name="scenario.json"):
    p = d / name
    p.write_text(json.dumps(doc))
    return p


def test_load_and_bind(scen_dir):
    b = bind_scenario(load_scenario(write(scen_dir, BASE)))
    m = b.mission("a0")
    assert m.start.lane_id == "west_to_east_0" and m.goal.s == pytest.approx(150.0)
    assert m.route.total_length == pytest.approx(140.0)
    assert len(b.flows) == 1 and b.flows[0].route.lane_ids == ("west_to_east_1",)


def test_binding_is_idempotent(scen_dir):
    b = bind_scenario(load_scenario(write(scen_dir, BASE)))
    assert bind_scenario(b) == b


def test_canonical_round_trip(scen_dir):
    spec = load_scenario(write(scen_dir, BASE))
    again = parse_scenario(scenario_to_document(spec), base_dir=scen_dir)
    assert again == spec


def test_unknown_key_rejected():
    with pytest.raises(ScenarioError, match="bogus"):
        parse_scenario(dict(BASE, bogus=1))


def test_unknown_actor_in_flow():
    doc = json.loads(json.dumps(BASE))
    doc["flows"][0]["actors"] = {"truck": 1.0}
    with pytest.raises(ScenarioError, match="truck"):
        parse_scenario(doc)


def test_duplicate_mission_ids():
    doc = dict(BASE, missions=BASE["missions"] * 2)
    with pytest.raises(ScenarioError, match="duplicate"):
        parse_scenario(doc)


def test_unreachable_mission(scen_dir):
    doc = json.loads(json.dumps(BASE))
    doc["missions"][0]["goal"] = ["east_to_west", 0, 50.0]
    with pytest.raises(ScenarioError, match="unreachable mission 'a0'"):
        bind_scenario(load_scenario(write(scen_dir, doc)))


def test_bad_triple(scen_dir):
    doc = json.loads(json.dumps(BASE))
    doc["missions"][0]["start"] = ["west_to_east", 7, 0.0]
    with pytest.raises(ScenarioError, match="cannot resolve"):
        bind_scenario(load_scenario(write(scen_dir, doc)))


def test_missing_map_named(tmp_path):
    p = write(tmp_path, BASE)
    with pytest.raises(ScenarioError, match="map.json"):
        bind_scenario(load_scenario(p))


def test_bubble_off_map(scen_dir):
    doc = dict(BASE, bubbles=[{"id": "b", "center": [1000.0, 1000.0], "half_extents": [5.0, 5.0], "agent": "keep_lane"}])
    with pytest.raises(ScenarioError, match="does not cover"):
        bind_scenario(load_scenario(write(scen_dir, doc)))


def test_bubble_agent_checked_against_zoo(scen_dir, zoo):
    doc = dict(BASE, bubbles=[{"id": "b", "center": [100.0, 0.0], "half_extents": [5.0, 5.0],
                               "agent": "nope"}])
    with pytest.raises(ScenarioError, match="nope"):
        bind_scenario(load_scenario(write(scen_dir, doc)), zoo=zoo)


def test_invalid_bubble_margin():
    doc = dict(BASE, bubbles=[{"id": "b", "center": [100.0, 0.0], "half_extents": [5.0, 5.0],
                               "airlock_margin": 0.0, "agent": "keep_lane"}])
    with pytest.raises(ScenarioError, match="airlock_margin"):
        parse_scenario(doc)


@pytest.mark.parametrize("name", ["two_way", "double_merge", "intersection"])
@pytest.mark.parametrize("setting", ["no", "random"])
def test_benchmarks_bind(name, setting):
    b = bind_scenario(load_scenario(scenario_path(f"{name}_{setting}_social_vehicle")))
    assert len(b.missions) == 2
    assert bool(b.flows) == (setting == "random")


IMPATIENT = {"speed": {"mean": 1.0, "sigma": 0.2},
             "lane_changing_model": {"impatience": 1.0, "cooperative": 0.25},
             "junction_model": {"drive_after_red_time": 1.5, "drive_after_yellow_time": 1.0,
                                "impatience": 1.0}}


def test_actor_round_trips_field_for_field():
    doc = dict(BASE, actors={"impatient_car": IMPATIENT}, flows=[])
    spec = parse_scenario(doc)
    a = spec.actors["impatient_car"]
    assert (a.speed_mean, a.speed_sigma, a.lc_impatience, a.lc_cooperative) == (1.0, 0.2, 1.0, 0.25)
    assert (a.drive_after_red_time, a.drive_after_yellow_time, a.junction_impatience) == (1.5, 1.0, 1.0)
    assert scenario_to_document(spec)["actors"]["impatient_car"] == IMPATIENT


def test_agent_only_scenario_is_valid():
    spec = parse_scenario(dict(BASE, flows=[]))
    assert spec.flows == () and len(spec.missions) == 1


@pytest.mark.parametrize("rate,weight,msg", [(-1.0, 1.0, "negative rate"),
                                             (0.1, 0.0, "sum to zero")])
def test_bad_flows(rate, weight, msg):
    doc = json.loads(json.dumps(BASE))
    doc["flows"][0].update(rate=rate, actors={"car": weight})
    with pytest.raises(ScenarioError, match=msg):
        parse_scenario(doc)


def test_intersection_triple_resolves():
    b = bind_scenario(load_scenario(scenario_path("intersection_no_social_vehicle")))
    start = b.mission("a0").start
    assert start.lane_id == b.network.edges["top_left"][0] and start.s == pytest.approx(10.0)
