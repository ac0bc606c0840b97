import json
import shutil
from pathlib import Path

import pytest

from drivesim.agents import KeepLaneAgent
from drivesim.catalog import data_dir, scenario_path
from drivesim.cli import EXIT_AGENT, EXIT_OK, EXIT_SCENARIO, EXIT_USAGE, main
from drivesim.protocol import AgentServer


def logs_in(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.ndjson"))}


def run(tmp, *extra, scenario="two_way_no_social_vehicle", episodes=2, out="out"):
    return main(["run", "--scenario", scenario, "--episodes", str(episodes), "--seed", "42",
                 "--record", str(tmp / out), *extra])


def test_run_records_logs_and_is_deterministic(tmp_path, capsys):
    assert run(tmp_path, "--agents", "a0=keep_lane,a1=keep_lane") == EXIT_OK
    assert "two_way_no_social_vehicle: episodes=2" in capsys.readouterr().out
    first = logs_in(tmp_path / "out")
    assert sorted(first) == ["episode_0000_two_way_no_social_vehicle_seed42.ndjson",
                             "episode_0001_two_way_no_social_vehicle_seed43.ndjson"]
    assert run(tmp_path, "--agents", "a0=keep_lane,a1=keep_lane", out="again") == EXIT_OK
    assert logs_in(tmp_path / "again") == first


def test_parallel_matches_serial(tmp_path):
    args = ("--agents", "a0=conservative_rule")
    assert run(tmp_path, *args, "--parallel", "1", scenario="double_merge_random_social_vehicle",
               episodes=3, out="p1") == EXIT_OK
    assert run(tmp_path, *args, "--parallel", "2", scenario="double_merge_random_social_vehicle",
               episodes=3, out="p2") == EXIT_OK
    assert logs_in(tmp_path / "p1") == logs_in(tmp_path / "p2")


def test_multiple_scenarios_round_robin(tmp_path):
    assert main(["run", "--scenario", "two_way_no_social_vehicle", "--scenario",
                 "intersection_no_social_vehicle", "--episodes", "3", "--record",
                 str(tmp_path)]) == EXIT_OK
    names = sorted(p.name for p in tmp_path.glob("*.ndjson"))
    assert names == ["episode_0000_two_way_no_social_vehicle_seed0.ndjson",
                     "episode_0001_intersection_no_social_vehicle_seed1.ndjson",
                     "episode_0002_two_way_no_social_vehicle_seed2.ndjson"]


def test_dump_trace(tmp_path):
    trace = tmp_path / "trace.txt"
    assert run(tmp_path, "--dump-trace", str(trace), episodes=1) == EXIT_OK
    lines = trace.read_text().splitlines()
    assert lines[0].startswith("# episode 0 two_way_no_social_vehicle seed 42")
    assert "ego-a0" in lines[1]


def test_remote_agent_matches_in_process(tmp_path):
    with AgentServer(KeepLaneAgent) as server:
        assert run(tmp_path, "--agents", f"a0=remote:{server.address}", out="remote") == EXIT_OK
    assert run(tmp_path, "--agents", "a0=keep_lane", out="local") == EXIT_OK
    assert logs_in(tmp_path / "remote") == logs_in(tmp_path / "local")


def test_evaluate_writes_reports(tmp_path, capsys):
    assert run(tmp_path, "--agents", "a0=conservative_rule,a1=conservative_rule") == EXIT_OK
    capsys.readouterr()
    out = tmp_path / "report"
    assert main(["evaluate", str(tmp_path / "out"), "--out", str(out), "--label", "rule"]) == EXIT_OK
    assert capsys.readouterr().out == "algorithm,two_way/no_social_vehicle\nrule,0/1\n"
    assert (out / "table.csv").read_text().endswith("rule,0/1\n")
    report = json.loads((out / "metrics.json").read_text())
    assert report["episodes"] == 2
    assert "agility" in json.loads((out / "radar.json").read_text())


def test_evaluate_rejects_mixed_versions(tmp_path, capsys):
    assert run(tmp_path, episodes=1) == EXIT_OK
    src = next((tmp_path / "out").glob("*.ndjson"))
    lines = src.read_text().splitlines()
    header = json.loads(lines[0])
    header["version"] = 2
    bad = tmp_path / "out" / "zz_old.ndjson"
    bad.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    assert main(["evaluate", str(tmp_path / "out")]) == EXIT_SCENARIO
    assert "zz_old.ndjson" in capsys.readouterr().err


def scenario_dir(tmp_path, name="intersection_no_social_vehicle"):
    d = tmp_path / "scen"
    d.mkdir()
    doc = json.loads(scenario_path(name).read_text())
    shutil.copy(data_dir() / "maps" / "intersection.json", d / "map.json")
    doc["map"] = "map.json"
    (d / "scenario.json").write_text(json.dumps(doc))
    return d


def test_build_scenario_is_canonical(tmp_path, capsys):
    d = scenario_dir(tmp_path)
    assert main(["build-scenario", str(d)]) == EXIT_OK
    first = capsys.readouterr().out.split("sha256=")[1]
    bundle = json.loads((d / "build" / "bundle.json").read_text())
    assert set(bundle["routes"]) == {"a0", "a1"}
    assert main(["build-scenario", str(d)]) == EXIT_OK
    assert capsys.readouterr().out.split("sha256=")[1] == first


def test_build_scenario_missing_map(tmp_path, capsys):
    d = scenario_dir(tmp_path)
    (d / "map.json").unlink()
    assert main(["build-scenario", str(d)]) == EXIT_SCENARIO
    assert "map.json" in capsys.readouterr().err


def test_build_scenario_reports_json_position(tmp_path, capsys):
    d = scenario_dir(tmp_path)
    (d / "scenario.json").write_text('{"format": 1,\n "map": "map.json",,}')
    assert main(["build-scenario", str(d)]) == EXIT_SCENARIO
    err = capsys.readouterr().err
    assert "scenario.json" in err and "line 2 column 20" in err


@pytest.mark.parametrize("argv,code", [
    (["run"], EXIT_USAGE),
    (["run", "--scenario", "two_way_no_social_vehicle", "--episodes", "0"], EXIT_USAGE),
    (["run", "--scenario", "two_way_no_social_vehicle", "--parallel", "0"], EXIT_USAGE),
    (["run", "--scenario", "two_way_no_social_vehicle", "--agents", "a0"], EXIT_USAGE),
    (["run", "--scenario", "two_way_no_social_vehicle", "--agents", "a9=keep_lane"], EXIT_USAGE),
    (["run", "--scenario", "no_such_scenario"], EXIT_SCENARIO),
    (["run", "--scenario", "two_way_no_social_vehicle", "--agents", "a0=nobody"], EXIT_AGENT),
    (["run", "--scenario", "two_way_no_social_vehicle", "--agents", "a0=remote:127.0.0.1:1"],
     EXIT_AGENT),
    (["evaluate", "/nonexistent/logs"], EXIT_USAGE),
    (["frobnicate"], EXIT_USAGE),
])
def test_exit_codes(argv, code, capsys):
    try:
        got = main(argv)
    except SystemExit as e:
        got = e.code
    assert got == code
