"""Compare the compiled and pure-Python kernel backends.

Times each kernel on identical random inputs, then runs whole episodes under
both backends (in subprocesses, since the backend is fixed at import) and
checks that the episode logs are byte-identical.

    python benchmarks/bench_kernels.py [--repeat 5] [--episodes 3]
"""

import argparse
import json
import math
import os
import subprocess
import sys
import timeit

import numpy as np

from drivesim.kernels import _pykernels

try:
    from drivesim.kernels import _ckernels
except ImportError:
    _ckernels = None

EPISODE_SNIPPET = """
import hashlib, json, sys, time
from drivesim import kernels
from drivesim.agents import KeepLaneAgent
from drivesim.catalog import scenario_path
from drivesim.engine import run_episode
from drivesim.scenario import bind_scenario, load_scenario
sc = bind_scenario(load_scenario(scenario_path(sys.argv[1])))
t0 = time.perf_counter()
digests = []
for seed in range(int(sys.argv[2])):
    agents = {bm.mission.agent_id: KeepLaneAgent() for bm in sc.missions}
    digests.append(run_episode(sc, seed, agents).log.digest())
print(json.dumps({"backend": kernels.BACKEND, "seconds": time.perf_counter() - t0,
                  "digest": hashlib.sha256("".join(digests).encode()).hexdigest()}))
"""


def kernel_cases(rng):
    pairs = [(0.0, 0.0, rng.uniform(-math.pi, math.pi), 4.6, 1.8,
              *rng.uniform(-6, 6, 2), rng.uniform(-math.pi, math.pi), 4.6, 1.8) for _ in range(2000)]
    p0 = rng.uniform(-200, 200, (400, 2))
    segments = np.ascontiguousarray(np.hstack([p0, p0 + rng.uniform(-10, 10, (400, 2))]))
    points = rng.uniform(-200, 200, (200, 2))
    rects = np.ascontiguousarray(np.column_stack([
        rng.uniform(-20, 20, 60), rng.uniform(-20, 20, 60), rng.uniform(-math.pi, math.pi, 60),
        rng.uniform(1, 5, 60), rng.uniform(0.5, 2, 60)]))

    def obb(mod):
        return lambda: [mod.obb_overlap(*p) for p in pairs]

    def proj(mod):
        return lambda: [mod.project_point(float(x), float(y), segments) for x, y in points]

    def raster(mod):
        def run():
            grid = np.zeros((80, 80), np.float32)
            mod.rasterize_rects(grid, rects, np.float32(1.0), 0.5, True)
        return run

    return {"obb_overlap x2000": obb, "project_point x200 (400 segs)": proj,
            "rasterize_rects 60 rects": raster}


def run_episodes(scenario, episodes, pure):
    env = dict(os.environ)
    if pure:
        env["DRIVESIM_PURE_PYTHON"] = "1"
    else:
        env.pop("DRIVESIM_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", EPISODE_SNIPPET, scenario, str(episodes)],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--episodes", type=int, default=3)
    ap.add_argument("--scenario", default="double_merge_random_social_vehicle")
    args = ap.parse_args(argv)

    if _ckernels is None:
        print("compiled kernels not built; only the Python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, make in kernel_cases(rng).items():
        py = min(timeit.repeat(make(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:32s} {py:10.2f}")
            continue
        cy = min(timeit.repeat(make(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {py:10.2f} {cy:10.2f} {py / cy:7.1f}x")

    print(f"\nepisodes: {args.episodes} x {args.scenario}")
    results = [run_episodes(args.scenario, args.episodes, pure=True)]
    if _ckernels is not None:
        results.append(run_episodes(args.scenario, args.episodes, pure=False))
    for r in results:
        print(f"  {r['backend']:7s} {r['seconds']:7.2f} s  log digest {r['digest'][:16]}")
    if len({r["digest"] for r in results}) > 1:
        print("backends produced different episode logs")
        return 1
    if len(results) == 2:
        print(f"  logs identical across backends; speedup {results[0]['seconds'] / results[1]['seconds']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
