"""Refinement study behind the frozen ``scheme_bias`` constant.

Runs the game and control estimators on P0 at several starting points and
time steps with many paths against a fine PDE reference, and prints the
observed ``|error| / (sqrt(dt) + dy)`` ratios.  The constant used by
``scl.simulate.SCHEME_BIAS_C`` is the largest ratio rounded up, times a
safety factor of two.

    python scripts/calibrate_scheme_bias.py [--paths N]
"""

import argparse

from scl.game import bilinear, extract_free_boundaries, solve_dynkin_game
from scl.model import p0, terminal_transform
from scl.simulate import optimal_policy, run_policy, saddle_game_estimate, step_count, step_times
from scl.singular import compute_holding_cost, integrate_value


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=400_000)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    spec = p0()
    ref_grid = spec.grid(801, 801)
    ref = solve_dynkin_game(spec, ref_grid)
    for ny in (101, 201):
        grid = spec.grid(ny, ny)
        surf = solve_dynkin_game(spec, grid)
        fb = extract_free_boundaries(surf, spec)
        ws = integrate_value(surf, spec)
        _, H = compute_holding_cost(ws, fb, spec)
        tt = terminal_transform(spec, grid)
        for dt in (1e-2, 4e-3, 1e-3):
            times = step_times(0.0, spec.T, step_count(spec.T, dt))
            pol = optimal_policy(fb, times)
            scale = dt**0.5 + grid.dy
            for x in (0.0, 0.8, 1.5):
                g = saddle_game_estimate(spec, surf, fb, 0.0, x, args.paths, dt, args.seed)
                v_ref = float(bilinear(ref_grid, ref.V, 0.0, x))
                c = run_policy(spec, grid, H, tt, pol, 0.0, x, args.paths, dt, args.seed)
                w_ref = float(bilinear(grid, ws.W, 0.0, x))
                print(f"ny={ny} dt={dt:g} x={x:g} game_err={g.mean - v_ref:+.5f} (se {g.se:.5f}) "
                      f"ratio={abs(g.mean - v_ref) / scale:.4f} control_err={c.mean - w_ref:+.5f} "
                      f"(se {c.se:.5f}) ratio={abs(c.mean - w_ref) / scale:.4f}")


if __name__ == "__main__":
    main()
