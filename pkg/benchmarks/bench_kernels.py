"""Time the hot kernels with numba and with the interpreted fallback.

Each path runs in its own interpreter because the switch is read at import.
Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from srptsim import _jit
from srptsim.controller import HorizonReference, NmpcConfig, rollout, solve
from srptsim.estimation import NOMINAL_Q, DEFAULT_R, INITIAL_P, UPDATE_MASK, ekf_predict_k, ekf_update_k
from srptsim.scenario import build_track, ClosestPointTracker
from srptsim.vehicle import VehicleParams, make_plant_state, make_state, plant_step_k

repeat = int(sys.argv[1])
p = VehicleParams().array()


def plant_second():
    s = make_plant_state(Vx=6.0, delta=0.05)
    out = np.empty_like(s)
    for k in range(1000):
        plant_step_k(s, 0.1, 0.2, 0.7, 5.0, 0.001, p, out)
        s[:] = out


def ekf_second():
    x = make_state(Vx=6.0, beta=0.01, FyF=300.0)
    P = INITIAL_P.copy()
    z = np.array([0.2, 0.01, 6.0, 0.01])
    for k in range(1000):
        ekf_predict_k(x, P, 0.0, 0.0, 0.001, p, NOMINAL_Q)
        if k % 10 == 9:
            ekf_update_k(x, P, z, DEFAULT_R, p, UPDATE_MASK)


cfg = NmpcConfig()
x0 = make_state(Vx=6.0)
poses = rollout(x0, np.zeros((cfg.steps, 2)), cfg)[:, [6, 7, 2]]
poses[:, 1] += np.linspace(0, 1.0, cfg.steps + 1)
ref = HorizonReference(poses, np.full(cfg.steps + 1, 6.0), np.array([0.0, 1.0]))


def nmpc_solve():
    solve(x0, ref, cfg)


track = build_track()


def closest_points():
    tr = ClosestPointTracker(track, s0=0.0)
    for s in np.arange(0.0, 100.0, 0.1):
        x, y, _ = track.pose_at(s)
        tr.query(x, y + 0.3)


result = {"numba": _jit.USE_NUMBA}
for name, fn in (("plant 1 s (1000 steps)", plant_second), ("ekf 1 s (1000/100 Hz)", ekf_second),
                 ("nmpc solve", nmpc_solve), ("closest point x1000", closest_points)):
    t0 = time.perf_counter()
    fn()  # first call includes compilation
    first = time.perf_counter() - t0
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    result[name] = (first, best)
print(json.dumps(result))
"""


def run(flag: str, repeat: int) -> dict:
    env = dict(os.environ, SRPTSIM_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    t0 = time.perf_counter()
    fast = run("1", args.repeat)
    slow = run("0", args.repeat)
    print(f"{'kernel':26s} {'python [s]':>11s} {'numba [s]':>11s} {'speedup':>8s} "
          f"{'first call':>11s}")
    for name in fast:
        if name == "numba":
            continue
        py = slow[name][1]
        nb = fast[name][1]
        print(f"{name:26s} {py:11.4f} {nb:11.4f} {py / nb:7.1f}x {fast[name][0]:10.3f}s")
    print(f"total wall time {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
