"""Command-line entry point: run benchmarks, evaluate logs, build scenarios, serve agents.

Exit codes: 0 success, 1 usage error, 2 scenario error, 3 agent or protocol error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .agents import AgentError, default_zoo
from .catalog import scenario_path
from .engine import EpisodeLog, run_episode
from .metrics import MetricsError, evaluate, table_csv
from .road import MapError, map_to_document
from .scenario import ScenarioError, bind_scenario, load_scenario, scenario_to_document

EXIT_OK, EXIT_USAGE, EXIT_SCENARIO, EXIT_AGENT = 0, 1, 2, 3

log = logging.getLogger("drivesim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def write_atomic(path: Path, data: str | bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode()
    tmp.write_bytes(data)
    tmp.replace(path)


def resolve_scenario(ref: str) -> Path:
    """A scenario file path, or the name of a built-in benchmark scenario."""
    p = Path(ref)
    if p.is_dir():
        p = _scenario_in_dir(p)
    if p.exists():
        return p
    builtin = scenario_path(ref.removesuffix(".json"))
    if builtin.exists():
        return builtin
    raise ScenarioError(f"scenario not found: {ref}")


def _scenario_in_dir(d: Path) -> Path:
    if (d / "scenario.json").exists():
        return d / "scenario.json"
    cands = []
    for f in sorted(d.glob("*.json")):
        try:
            if "missions" in json.loads(f.read_text()) or "flows" in json.loads(f.read_text()):
                cands.append(f)
        except (json.JSONDecodeError, UnicodeDecodeError, AttributeError, TypeError):
            continue
    if len(cands) != 1:
        raise ScenarioError(f"{d}: expected exactly one scenario file, found {len(cands)}")
    return cands[0]


def parse_assignments(text: str | None) -> dict[str, str]:
    out = {}
    if not text:
        return out
    for part in text.split(","):
        if not part.strip():
            continue
        aid, sep, ref = part.partition("=")
        if not sep or not aid.strip() or not ref.strip():
            raise UsageError(f"bad agent assignment {part!r}, expected id=agent")
        out[aid.strip()] = ref.strip()
    return out


# --- run ------------------------------------------------------------------------------

def trace_lines(elog: EpisodeLog):
    for rec in elog.records:
        for row in rec["vehicles"]:
            vid, x, y, h, v, _, _, owner = row
            yield f"{rec['step']:5d} {rec['time']:8.2f} {vid:<16} {x:10.3f} {y:10.3f} {h:8.4f} {v:7.3f} {owner}"


def _run_jobs(scenarios: list[str], assignments: dict, manifest: str | None, jobs, trace: bool):
    """Worker: run the given ``(episode, scenario index, seed)`` jobs in order."""
    zoo = default_zoo()
    if manifest:
        zoo.load_manifest(manifest)
    bound = [bind_scenario(load_scenario(p), zoo=zoo) for p in scenarios]
    out = []
    for episode, si, seed in jobs:
        sc = bound[si]
        agents = {}
        try:
            for bm in sc.missions:
                aid = bm.mission.agent_id
                agents[aid] = zoo.build(assignments.get(aid, "keep_lane"))
            world = run_episode(sc, seed, agents, zoo=zoo)
        finally:
            for a in agents.values():
                a.close()
        text = world.log.dumps()
        tr = "\n".join(trace_lines(world.log)) + "\n" if trace else None
        out.append((episode, sc.name, seed, text, tr))
    return out


def run(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")
    scenarios = [str(resolve_scenario(s)) for s in args.scenario]
    assignments = parse_assignments(args.agents)
    zoo = default_zoo()
    if args.zoo_manifest:
        zoo.load_manifest(args.zoo_manifest)
    for p in scenarios:
        sc = bind_scenario(load_scenario(p), zoo=zoo)
        known = {m.mission.agent_id for m in sc.missions}
        for aid, ref in assignments.items():
            if ref not in zoo:
                raise AgentError(f"unknown agent {ref!r} for {aid}")
        extra = sorted(set(assignments) - known) if len(scenarios) == 1 else []
        if extra:
            raise UsageError(f"agents {extra} have no mission in {sc.name}")
    jobs = [(i, i % len(scenarios), args.seed + i) for i in range(args.episodes)]
    batches = [jobs[w::args.parallel] for w in range(args.parallel)]
    batches = [b for b in batches if b]
    results = []
    trace = args.dump_trace is not None
    if len(batches) == 1:
        results = _run_jobs(scenarios, assignments, args.zoo_manifest, batches[0], trace)
    else:
        with ProcessPoolExecutor(max_workers=len(batches)) as pool:
            futs = [pool.submit(_run_jobs, scenarios, assignments, args.zoo_manifest, b, trace)
                    for b in batches]
            for f in futs:
                results.extend(f.result())
    results.sort(key=lambda r: r[0])
    logs = []
    for episode, name, seed, text, tr in results:
        logs.append(EpisodeLog.parse(text))
        if args.record:
            write_atomic(Path(args.record) / f"episode_{episode:04d}_{name}_seed{seed}.ndjson", text)
    if trace:
        body = "".join(f"# episode {e} {n} seed {s}\n{tr}" for e, n, s, _, tr in results)
        write_atomic(Path(args.dump_trace), body)
    report = evaluate(logs)
    for name, row in report.per_scenario.items():
        print(f"{name}: episodes={row['episodes']} collision_rate={row['collision_rate']:.3f} "
              f"completion_rate={row['completion_rate']:.3f}")
    return EXIT_OK


# --- evaluate --------------------------------------------------------------------------------

def _log_paths(refs) -> list[Path]:
    out = []
    for r in refs:
        p = Path(r)
        if p.is_dir():
            out.extend(sorted(list(p.glob("*.ndjson")) + list(p.glob("*.ndjson.gz"))))
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"no such log: {r}")
    if not out:
        raise UsageError("no episode logs found")
    return out


def evaluate_cmd(args) -> int:
    paths = _log_paths(args.logs)
    logs = [EpisodeLog.read(p) for p in paths]
    versions = {p: l.header.get("version") for p, l in zip(paths, logs)}
    if len(set(versions.values())) > 1 or any(v != 1 for v in versions.values()):
        bad = ", ".join(f"{p} (v{v})" for p, v in versions.items() if v != 1)
        raise MetricsError(f"mixed or unsupported log versions: {bad}")
    report = evaluate(logs)
    csv_text = table_csv(report, args.label)
    if args.out:
        out = Path(args.out)
        write_atomic(out / "metrics.json", report.to_json())
        write_atomic(out / "table.csv", csv_text)
        write_atomic(out / "radar.json", json.dumps(report.radar(args.label), indent=2, sort_keys=True) + "\n")
    sys.stdout.write(csv_text)
    return EXIT_OK


# --- build-scenario ------------------------------------------------------------------------------

def bundle_document(path: Path) -> dict:
    spec = load_scenario(path)
    bound = bind_scenario(spec, zoo=default_zoo())
    return {
        "format": "drivesim-bundle",
        "version": 1,
        "scenario": scenario_to_document(spec),
        "map": map_to_document(bound.network),
        "routes": {bm.mission.agent_id: bm.route.to_dict() for bm in bound.missions},
        "flow_routes": [f.route.to_dict() for f in bound.flows],
    }


def build_scenario_cmd(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        raise ScenarioError(f"not a directory: {d}")
    path = _scenario_in_dir(d)
    try:
        doc = bundle_document(path)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    except ScenarioError as e:
        raise ScenarioError(f"{path}: {e}") from None
    text = json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    out = Path(args.out) if args.out else d / "build" / "bundle.json"
    write_atomic(out, text)
    print(f"{out} sha256={hashlib.sha256(text.encode()).hexdigest()}")
    return EXIT_OK


# --- serve-agent ------------------------------------------------------------------------------------

def serve_agent_cmd(args) -> int:
    from .protocol import AgentServer
    zoo = default_zoo()
    if args.agent not in zoo.entries:
        raise AgentError(f"unknown agent {args.agent!r}")
    factory = zoo.entries[args.agent].factory
    server = AgentServer(factory, args.host, args.port, args.delay_ms / 1000.0)
    print(f"serving {args.agent} on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drivesim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"drivesim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run benchmark episodes")
    r.add_argument("--scenario", action="append", required=True,
                   help="scenario file, directory or built-in name (repeatable)")
    r.add_argument("--episodes", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--agents", help="mission assignments, e.g. a0=keep_lane,a1=remote:host:port")
    r.add_argument("--record", help="directory for episode logs")
    r.add_argument("--parallel", type=int, default=1, help="worker processes")
    r.add_argument("--headless", action="store_true", help="accepted for compatibility; always headless")
    r.add_argument("--dump-trace", help="write a per-step plain-text trace to this file")
    r.add_argument("--zoo-manifest", help="JSON manifest of remote agent endpoints")
    r.set_defaults(fn=run)

    e = sub.add_parser("evaluate", help="compute metrics from episode logs")
    e.add_argument("logs", nargs="+", help="log files or directories")
    e.add_argument("--out", help="directory for metrics.json, table.csv and radar.json")
    e.add_argument("--label", default="run", help="row label in the table")
    e.set_defaults(fn=evaluate_cmd)

    b = sub.add_parser("build-scenario", help="validate a scenario directory and write a bundle")
    b.add_argument("dir")
    b.add_argument("--out", help="bundle path (default DIR/build/bundle.json)")
    b.set_defaults(fn=build_scenario_cmd)

    s = sub.add_parser("serve-agent", help="serve a zoo agent over the wire protocol")
    s.add_argument("--agent", default="keep_lane")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--delay-ms", type=float, default=0.0, help="artificial reply delay")
    s.set_defaults(fn=serve_agent_cmd)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"drivesim: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, MapError, MetricsError) as e:
        print(f"drivesim: scenario error: {e}", file=sys.stderr)
        return EXIT_SCENARIO
    except (AgentError, ConnectionError) as e:
        print(f"drivesim: agent error: {e}", file=sys.stderr)
        return EXIT_AGENT


if __name__ == "__main__":
    sys.exit(main())
