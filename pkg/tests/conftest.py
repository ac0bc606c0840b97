import math

import pytest

from drivesim.agents import default_zoo
from drivesim.catalog import scenario_path, two_way_map
from drivesim.road import load_map
from drivesim.scenario import bind_scenario, load_scenario


def straight_map(length=200.0, lanes=1, limit=13.9, width=3.5):
    """Straight eastbound road with ``lanes`` parallel lanes, lane 0 rightmost."""
    docs = []
    for k in range(lanes):
        y = k * width
        docs.append({
            "id": f"road_{k}",
            "centerline": [[x, y] for x in range(0, int(length) + 1, 10)],
            "width": width,
            "speed_limit": limit,
            "left": f"road_{k + 1}" if k + 1 < lanes else None,
            "right": f"road_{k - 1}" if k > 0 else None,
        })
    return {"format": 1, "lanes": docs,
            "edges": [{"id": "road", "lanes": [d["id"] for d in docs]}], "junctions": []}


def circle_map(radius=50.0, n=72, limit=10.0):
    pts = [[radius * math.cos(2 * math.pi * k / n), radius * math.sin(2 * math.pi * k / n)]
           for k in range(n + 1)]
    return {"format": 1, "lanes": [{"id": "ring", "centerline": pts, "width": 3.5,
                                    "speed_limit": limit}],
            "edges": [{"id": "ring", "lanes": ["ring"]}], "junctions": []}


@pytest.fixture(scope="session")
def zoo():
    return default_zoo()


@pytest.fixture(scope="session")
def two_way_net():
    return load_map(two_way_map())


@pytest.fixture(scope="session")
def straight_net():
    return load_map(straight_map(lanes=2))


_BOUND = {}


def bound(name):
    if name not in _BOUND:
        _BOUND[name] = bind_scenario(load_scenario(scenario_path(name)))
    return _BOUND[name]


@pytest.fixture
def scenario():
    return bound


# --- acceptance summary -------------------------------------------------------------

_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, [title, True])
    if rep.failed or (rep.when == "call" and not rep.passed):
        entry[1] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
