import math

import pytest

from drivesim.catalog import double_merge_map, intersection_map
from drivesim.road import (LanePosition, MapLinkError, MapParseError, RoutingError, enumerate_paths,
                           lane_to_world, load_map, map_to_document, nearest_lane_position,
                           route_between, route_progress)

from conftest import straight_map


def test_load_and_round_trip(two_way_net):
    again = load_map(map_to_document(two_way_net))
    assert sorted(again.lanes) == sorted(two_way_net.lanes)
    assert again.lanes["west_to_east_0"].length == pytest.approx(200.0)


def test_unknown_successor_rejected():
    doc = straight_map()
    doc["lanes"][0]["successors"] = ["nowhere"]
    with pytest.raises(MapLinkError, match="nowhere"):
        load_map(doc)


def test_asymmetric_neighbors_rejected():
    doc = straight_map(lanes=2)
    doc["lanes"][1]["right"] = None
    with pytest.raises(MapLinkError, match="symmetric"):
        load_map(doc)


def test_malformed_json():
    with pytest.raises(MapParseError):
        load_map("{not json")


def test_resolve_triples(two_way_net):
    assert two_way_net.resolve("west_to_east", 1, 10.0) == LanePosition("west_to_east_1", 10.0)
    assert two_way_net.resolve("west_to_east", 0, -20.0).s == pytest.approx(180.0)
    with pytest.raises(KeyError):
        two_way_net.resolve("west_to_east", 5, 0.0)
    with pytest.raises(KeyError):
        two_way_net.resolve("nope", 0, 0.0)


def test_lane_frame_round_trip(two_way_net):
    lane = two_way_net.lanes["west_to_east_0"]
    x, y, h = lane_to_world(lane, 42.0, 0.7)
    pos, dist = two_way_net.project_onto_lane(lane, x, y)
    assert pos.s == pytest.approx(42.0)
    assert pos.t == pytest.approx(0.7)
    assert dist == pytest.approx(0.7)
    assert h == pytest.approx(0.0)


def test_left_offset_is_positive(two_way_net):
    lane = two_way_net.lanes["east_to_west_0"]  # runs westward
    x, y, _ = lane_to_world(lane, 10.0, 1.0)
    assert y == pytest.approx(lane.centerline[0][1] - 1.0)


def test_nearest_lane(two_way_net):
    assert nearest_lane_position(two_way_net, (50.0, -5.0)).lane_id == "west_to_east_0"
    assert nearest_lane_position(two_way_net, (50.0, 4.9)).lane_id == "east_to_west_0"


def test_route_with_lane_change():
    net = load_map(double_merge_map())
    start = net.resolve("top_left", 0, 0.0)
    goal = net.resolve("down_right", 0, 30.0)
    route = route_between(net, start, goal)
    assert route.lane_ids == ("top_left_0", "merge_1", "merge_0", "down_right_0")
    assert route.lane_changes == 1
    assert route_progress(route, start) == pytest.approx(0.0)
    assert route_progress(route, goal) == pytest.approx(route.total_length)


def test_route_progress_is_monotone_along_lane():
    net = load_map(straight_map())
    route = route_between(net, LanePosition("road_0", 5.0), LanePosition("road_0", 150.0))
    vals = [route_progress(route, LanePosition("road_0", s)) for s in range(5, 151, 5)]
    assert vals == sorted(vals)
    assert vals[-1] == pytest.approx(145.0)


def test_unreachable_goal():
    net = load_map(straight_map())
    with pytest.raises(RoutingError):
        route_between(net, LanePosition("road_0", 100.0), LanePosition("road_0", 10.0))


def test_intersection_paths_and_conflicts():
    net = load_map(intersection_map())
    start = net.resolve("top_left", 0, 10.0)
    goal = net.resolve("down_left", 0, 30.0)
    paths = enumerate_paths(net, start, goal)
    assert paths and paths[0][1] == route_between(net, start, goal).lane_ids
    # straight-through paths from perpendicular approaches must conflict
    ns = [l for l in net.junctions["center"] if l.startswith("junction_top_left")]
    assert all(net.conflicts(l) for l in ns)
    assert all(net.is_junction_lane(l) for l in net.junctions["center"])
    a, b = net.conflict_pairs()[0]
    assert b in net.conflicts(a) and a in net.conflicts(b)


def test_turn_lanes_respect_lateral_accel_limit():
    net = load_map(intersection_map())
    for lid in net.junctions["center"]:
        lane = net.lanes[lid]
        assert lane.speed_limit <= 13.9 + 1e-9
        assert math.isfinite(lane.length) and lane.length > 0
