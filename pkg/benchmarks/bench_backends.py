"""Time the numba kernels against the numpy fallback.

Each backend runs in its own interpreter (``SCL_BACKEND`` is read at import).
Numba timings exclude compilation: every stage runs once to warm up.

    python3 benchmarks/bench_backends.py [--grid 101] [--paths 20000] [--dt 0.01]
"""

import argparse
import json
import os
import subprocess
import sys

STAGES = r"""
import json, sys, time
from scl._accel import BACKEND
from scl.game import extract_free_boundaries, solve_dynkin_game
from scl.model import p0, terminal_transform
from scl.simulate import optimal_policy, run_policy, saddle_game_estimate, step_count, step_times
from scl.singular import compute_holding_cost, integrate_value

n, paths, dt = int(sys.argv[1]), int(sys.argv[2]), float(sys.argv[3])
spec = p0()
grid = spec.grid(n, n)
times = step_times(0.0, spec.T, step_count(spec.T, dt))

def solve():
    return solve_dynkin_game(spec, grid)

def stages(surf):
    fb = extract_free_boundaries(surf, spec)
    ws = integrate_value(surf, spec)
    _, H = compute_holding_cost(ws, fb, spec)
    tt = terminal_transform(spec, grid)
    pol = optimal_policy(fb, times)
    return {
        "game": lambda: saddle_game_estimate(spec, surf, fb, 0.0, 0.0, paths, dt, seed=1),
        "control": lambda: run_policy(spec, grid, H, tt, pol, 0.0, 0.0, paths, dt, seed=1),
    }

def best(fn, repeat):
    out = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        out.append(time.perf_counter() - start)
    return min(out)

repeat = 3 if BACKEND == "numba" else 1
if BACKEND == "numba":
    surf = solve()
    for f in stages(surf).values():
        f()
result = {"backend": BACKEND, "solve": best(solve, repeat)}
surf = solve()
for name, f in stages(surf).items():
    result[name] = best(f, repeat)
json.dump(result, sys.stdout)
"""


def run(backend, args):
    env = dict(os.environ, SCL_BACKEND=backend)
    proc = subprocess.run([sys.executable, "-c", STAGES, str(args.grid), str(args.paths), str(args.dt)],
                          capture_output=True, text=True, env=env, check=True)
    return json.loads(proc.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=101, help="nt = ny")
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--dt", type=float, default=0.01)
    args = ap.parse_args()
    rows = [run(b, args) for b in ("numba", "numpy")]
    print(f"P0, grid {args.grid}x{args.grid}, {args.paths} paths, dt {args.dt}")
    print(f"{'stage':<10}{'numba [s]':>12}{'numpy [s]':>12}{'speed-up':>10}")
    for stage in ("solve", "game", "control"):
        fast, slow = rows[0][stage], rows[1][stage]
        print(f"{stage:<10}{fast:>12.4f}{slow:>12.4f}{slow / fast:>10.1f}")


if __name__ == "__main__":
    main()
