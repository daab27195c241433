"""``scl solve|verify|plotdata <config.json>``.

Exit codes: 0 when every gated check passes (an inconclusive Monte Carlo
interval does not fail a run), 1 when a check fails or the solver does not
converge, 2 for invalid input (bad config, violated assumptions, missing
cache).
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import io
from . import pipeline as pl
from .config import ConfigError, RunConfig
from .errors import AssumptionError, SolverError
from .game import REGION_NAMES, pde_residual
from .model import terminal_transform

EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2


class InputError(Exception):
    pass


def _log(msg):
    print(msg, file=sys.stderr)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(mc=replace(cfg.mc, seed=args.seed))
    if args.out is not None:
        cfg = cfg.replace(output=replace(cfg.output, directory=args.out))
    if args.general_terminal:
        cfg = cfg.replace(general_terminal=True)
    cfg.validate()
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    start = time.perf_counter()
    s = pl.solve(cfg)
    _log(f"solved {s.spec.name} on {s.grid.nt}x{s.grid.ny} in {time.perf_counter() - start:.2f} s")
    res = pde_residual(s.surface, s.spec)
    if "csv" in cfg.output.formats:
        io.write_surface_csv(out / "V.csv", s.surface)
        io.write_boundaries_csv(out / "boundaries.csv", s.boundaries)
        g = s.grid
        per_level = [res.residual[n][s.surface.region[n] == 0] for n in range(g.nt)]
        worst = [float(abs(r[r == r]).max()) if (r == r).any() else 0.0 for r in per_level]
        io.write_table(out / "residuals.csv", ["t", "max_continuation_residual", "sweeps"],
                       [g.t, worst, s.surface.sweeps])
        io.write_region_map(out / "regions.dat", s.surface)
    if "cache" in cfg.output.formats:
        io.write_cache(out / pl.CACHE_NAME, s.surface)
    counts = {name: int((s.surface.region == k).sum()) for k, name in REGION_NAMES.items()}
    io.write_keyvalue(out / "solve_report.txt", [
        ("problem", s.spec.name), ("terminal", s.surface.terminal_kind),
        ("grid.nt", s.grid.nt), ("grid.ny", s.grid.ny),
        ("max_continuation_residual", res.max_continuation),
        ("complementarity_gap", res.complementarity_gap),
        ("residual_tol", res.residual_tol), ("residual_passed", res.passed),
        *[(f"nodes[{k}]", v) for k, v in counts.items()],
        ("kinks", len(s.boundaries.kink_report)),
    ])
    _log(f"wrote results to {out}")
    return EXIT_OK if res.passed else EXIT_FAILED


def cmd_verify(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    start = time.perf_counter()
    cache = out / pl.CACHE_NAME
    s = pl.solve(cfg, cache=cache)
    if "cache" in cfg.output.formats and not s.from_cache:
        io.write_cache(cache, s.surface)
    v = pl.verify(s)
    io.write_keyvalue(out / "verification_report.txt", pl.report_lines(s, v))
    pl.write_estimates(out / "policy_estimates.csv", v.estimates)
    for c in v.checks:
        print(f"{c.status:<12} {c.name}")
    print(f"result: {v.status}")
    _log(f"verification finished in {time.perf_counter() - start:.1f} s; report in {out}")
    if v.first_failure is not None:
        _log(f"FAILED: {v.first_failure.name}")
        return EXIT_FAILED
    if v.status == "INCONCLUSIVE":
        _log("some Monte Carlo intervals are wider than mc.ci_budget; increase mc.n_paths")
    return EXIT_OK


def cmd_plotdata(cfg: RunConfig) -> int:
    out = Path(cfg.output.directory)
    cache = out / pl.CACHE_NAME
    if not cache.exists():
        raise InputError(f"no solver cache at {cache}; run `scl solve` first")
    spec, grid = pl.prepare(cfg)
    try:
        surface = io.read_cache(cache, spec)
    except ValueError as err:
        raise InputError(str(err)) from err
    if surface.grid != grid:
        raise InputError(f"{cache} was written for a different grid; rerun `scl solve`")
    s = pl.solve(cfg, cache=cache)
    c, fb = s.curves, s.boundaries
    io.write_plot_columns(out / "curves.dat", ["t", "a", "b"], [c.t, c.a, c.b])
    io.write_plot_columns(out / "free_boundaries.dat", ["t", "a_tilde", "b_tilde"],
                          [fb.t, fb.a_tilde, fb.b_tilde])
    io.write_region_map(out / "regions.dat", s.surface)
    if cfg.general_terminal:
        tt = s.transformed or terminal_transform(spec, grid)
        io.write_plot_columns(out / "terminal_segment.dat", ["t", "y"], [[spec.T, spec.T], [tt.A, tt.B]])
    _log(f"wrote plot data to {out}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "plotdata": cmd_plotdata}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scl", description="Dynkin game solver and singular-control verification")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config", help="run configuration (JSON)")
    ap.add_argument("--general-terminal", action="store_true",
                    help="allow a terminal function outside the obstacles; solve with its clamped version")
    ap.add_argument("--dump-config", action="store_true",
                    help="print the effective configuration as JSON and exit")
    ap.add_argument("--seed", type=int, help="override mc.seed")
    ap.add_argument("--out", help="override output.directory")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        cfg = load_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        return COMMANDS[args.command](cfg)
    except (ConfigError, AssumptionError, InputError) as err:
        _log(f"error: {err}")
        return EXIT_INVALID
    except SolverError as err:
        _log(f"solver failure: {err}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
