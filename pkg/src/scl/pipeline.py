"""Solve and verification stages shared by the command line and the tests.

Each acceptance-style check returns a :class:`~scl.simulate.CheckResult`
with status PASS, FAIL, INCONCLUSIVE (Monte Carlo interval wider than the
configured budget), SKIPPED (does not apply to this problem) or INFO
(diagnostic, never gating).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import expr as ex
from . import io
from .config import RunConfig
from .errors import AssumptionError
from .game import (CONTINUATION, LOWER_CONTACT, UPPER_CONTACT, FreeBoundaries, ValueSurface,
                   boundary_time_derivative_check, extract_free_boundaries, pde_residual,
                   smooth_fit_refinement, solve_dynkin_game)
from .grid import Grid
from .model import (CurvePair, ProblemSpec, TransformedTerminal, compute_ab_curves,
                    terminal_transform, validate_problem)
from .simulate import (FAIL, INCONCLUSIVE, PASS, SCHEME_BIAS_C, CheckResult, ci_status,
                       saddle_game_estimate, scheme_bias, verify_optimality)
from .singular import compute_holding_cost, default_hjb_tol, hjb_residual, integrate_value

SKIPPED, INFO = "SKIPPED", "INFO"
CACHE_NAME = "solution.scl"


@dataclass
class Solved:
    config: RunConfig
    spec: ProblemSpec
    grid: Grid
    surface: ValueSurface
    boundaries: FreeBoundaries
    curves: CurvePair
    transformed: TransformedTerminal | None
    from_cache: bool = False


def _check(name, ok, items):
    return CheckResult(name, PASS if ok else FAIL, items)


def prepare(cfg: RunConfig):
    """Spec and grid from the config, after the standing-assumption checks.

    Raises :class:`AssumptionError` listing every failed check.
    """
    spec = cfg.spec()
    grid = spec.grid(cfg.grid.nt, cfg.grid.ny)
    report = validate_problem(spec, grid, general_terminal=cfg.general_terminal)
    if not report.passed:
        failed = [line for line in report.summary().splitlines() if line.startswith("FAIL")]
        raise AssumptionError("problem assumptions violated:\n" + "\n".join(failed))
    return spec, grid


def solve(cfg: RunConfig, cache: Path | None = None) -> Solved:
    """Solve the game, reusing ``cache`` when it holds the same grid and settings."""
    spec, grid = prepare(cfg)
    kind = "g_tilde" if cfg.general_terminal else "g"
    transformed = terminal_transform(spec, grid) if cfg.general_terminal else None
    params = cfg.solver.params()
    surface = None
    from_cache = False
    if cache is not None and cache.exists():
        try:
            cached = io.read_cache(cache, spec)
        except ValueError:
            cached = None
        if (cached is not None and cached.grid == grid and cached.params == params
                and cached.terminal_kind == kind):
            surface, from_cache = cached, True
    if surface is None:
        surface = solve_dynkin_game(spec, grid, kind, params, transformed)
    curves = compute_ab_curves(spec, grid)
    fb = extract_free_boundaries(surface, spec, curves)
    return Solved(cfg, spec, grid, surface, fb, curves, transformed, from_cache)


# -- gated checks ------------------------------------------------------------------------------


def check_sandwich(s: Solved) -> CheckResult:
    surf = s.surface
    below = int((surf.V < surf.lower).sum())
    above = int((surf.V > surf.upper).sum())
    res = pde_residual(surf, s.spec)
    tol = s.config.solver.residual_tol
    return _check("sandwich_complementarity", below == 0 and above == 0 and res.complementarity_gap < tol,
                  [("nodes_below_lower", below), ("nodes_above_upper", above),
                   ("complementarity_gap", res.complementarity_gap), ("tolerance", tol),
                   ("max_continuation_residual", res.max_continuation)])


def check_regions(s: Solved) -> CheckResult:
    g = s.grid
    y = g.y[None, :]
    a = s.curves.a[:, None]
    b = s.curves.b[:, None]
    reg = s.surface.region
    between = (y > a) & (y < b)
    bad_between = int((between & (reg != CONTINUATION)).sum())
    bad_lower = int(((reg == LOWER_CONTACT) & (y > a + g.dy)).sum())
    bad_upper = int(((reg == UPPER_CONTACT) & (y < b - g.dy)).sum())
    return _check("region_structure", bad_between == bad_lower == bad_upper == 0,
                  [("between_not_continuation", bad_between), ("lower_contact_above_a", bad_lower),
                   ("upper_contact_below_b", bad_upper)])


def is_antisymmetric(spec: ProblemSpec, grid: Grid, tol: float = 1e-12) -> bool:
    """Whether the data are invariant under ``y -> -y`` with ``V -> -V`` on the grid nodes."""
    if not grid.is_symmetric() or spec.d != 0.0:
        return False
    tt, yy = grid.mesh()
    f = {k: spec.fn(k) for k in ("sigma", "f1", "f2", "h", "g")}
    pairs = [(f["sigma"](tt, yy), f["sigma"](tt, -yy)), (f["f1"](tt, yy), f["f2"](tt, -yy)),
             (f["h"](tt, yy), -f["h"](tt, -yy)), (f["g"](tt, yy), -f["g"](tt, -yy))]
    return all(np.allclose(u * np.ones_like(tt), v * np.ones_like(tt), rtol=0, atol=tol)
               for u, v in pairs)


def check_antisymmetry(s: Solved) -> CheckResult:
    if not is_antisymmetric(s.spec, s.grid):
        return CheckResult("antisymmetry", SKIPPED, [("reason", "problem is not antisymmetric")])
    V = s.surface.V
    sym = float(np.abs(V + V[:, ::-1]).max())
    fb = float(np.abs(s.boundaries.a_tilde + s.boundaries.b_tilde).max())
    return _check("antisymmetry", sym < 1e-6 and fb < 2 * s.grid.dy,
                  [("max_V_plus_mirror", sym), ("max_a_tilde_plus_b_tilde", fb),
                   ("boundary_tolerance", 2 * s.grid.dy)])


def refinement_base(grid: Grid) -> Grid:
    """The configured grid halved when possible, so three refinements end at 4x its resolution."""
    if (grid.ny - 1) % 2 == 0 and (grid.nt - 1) % 2 == 0 and grid.ny >= 41:
        return Grid(grid.T, grid.lo, grid.hi, (grid.nt - 1) // 2 + 1, (grid.ny - 1) // 2 + 1)
    return grid


def check_smooth_fit(s: Solved) -> CheckResult:
    kind = s.surface.terminal_kind
    study = smooth_fit_refinement(s.spec, refinement_base(s.grid), levels=4,
                                  params=s.config.solver.params(), terminal=kind)
    items = [(f"gap[ny={n}]", gap) for n, gap in zip(study.ny, study.gaps)]
    items += [(f"ratio[{k}]", r) for k, r in enumerate(study.ratios)]
    return _check("smooth_fit", study.within(1.5, 3.0), items)


def check_game_mc(s: Solved) -> CheckResult:
    mc = s.config.mc
    est = saddle_game_estimate(s.spec, s.surface, s.boundaries, mc.s, mc.x, mc.n_paths, mc.dt, mc.seed)
    c_bias = SCHEME_BIAS_C if mc.scheme_bias_c is None else mc.scheme_bias_c
    bias = scheme_bias(mc.dt, s.grid.dy, c_bias)
    ok = abs(est.error) <= 3 * est.se + bias
    items = [("V", est.reference), ("mean", est.mean), ("se", est.se), ("error", est.error),
             ("allowance", 3 * est.se + bias), ("scheme_bias", bias)]
    items += [(f"stops[{k}]", v) for k, v in est.stop_counts.items()]
    return CheckResult("game_monte_carlo", ci_status(ok, est.se, mc.ci_budget), items)


def check_hjb(s: Solved, ws, H) -> CheckResult:
    tol = default_hjb_tol(s.grid, base=s.config.solver.hjb_tol)
    rep = hjb_residual(ws, H, s.boundaries, s.spec, region=s.surface.region, hjb_tol=tol)
    return _check("hjb_trichotomy", rep.passed,
                  [("max_continuation", rep.max_continuation), ("tolerance", tol),
                   ("outside_positive_fraction", rep.outside_positive_fraction),
                   ("outside_min", rep.outside_min), ("outside_count", rep.outside_count),
                   ("gradient_strict_inside", rep.gradient_strict_inside),
                   ("gradient_gap_lower", rep.gradient_gap_lower),
                   ("gradient_gap_upper", rep.gradient_gap_upper),
                   ("sign_mismatches", rep.sign_mismatches)])


def check_envelope(s: Solved) -> CheckResult:
    if s.transformed is None:
        return CheckResult("terminal_envelope", SKIPPED, [("reason", "terminal g is sandwiched")])
    tt = s.transformed
    y, dy = s.grid.y, s.grid.dy
    G, Gt = tt.G, tt.G_tilde
    above = int((Gt > G).sum())
    inside = (y >= tt.A) & (y <= tt.B)
    far = (y < tt.A - dy) | (y > tt.B + dy)
    unequal_inside = int((Gt[inside] != G[inside]).sum())
    equal_far = int((Gt[far] == G[far]).sum())
    aT, bT = float(s.boundaries.a_tilde[-1]), float(s.boundaries.b_tilde[-1])
    hit = abs(aT - tt.A) <= dy and abs(bT - tt.B) <= dy
    return _check("terminal_envelope", above == 0 and unequal_inside == 0 and equal_far == 0 and hit,
                  [("A", tt.A), ("B", tt.B), ("nodes_G_tilde_above_G", above),
                   ("unequal_inside_AB", unequal_inside), ("equal_beyond_one_cell", equal_far),
                   ("a_tilde_T", aT), ("b_tilde_T", bT), ("cell", dy)])


def _fd(fn, var, t, y, h):
    """Five-point central difference in ``var``."""
    def at(k):
        return fn(t + k * h, y) if var == "t" else fn(t, y + k * h)
    return (at(-2) - 8 * at(-1) + 8 * at(1) - at(2)) / (12 * h)


def check_expressions(s: Solved, samples: int = 64, rel: float = 1e-6) -> CheckResult:
    """Symbolic derivatives of the configured expressions against finite differences.

    Sample points are on a fixed lattice inside the band; points where the
    one-sided quotients disagree (a kink of ``min``/``max``/``abs``) are skipped.
    """
    spec = s.spec
    t = np.linspace(0.05, 0.95, samples) * spec.T
    y = spec.band_lo + (spec.band_hi - spec.band_lo) * ((np.arange(samples) * 0.618034) % 1.0)
    y = 0.9 * y
    h = 1e-4
    worst = 0.0
    checked = 0
    roundtrip = True
    for name in ("sigma", "f1", "f2", "h", "g"):
        node = getattr(spec, name)
        roundtrip &= ex.parse(ex.to_text(node)) == node
        fn = ex.to_numpy(node)
        for var in ("t", "y"):
            d = ex.to_numpy(ex.differentiate(node, var))(t, y) * np.ones_like(t)
            fd = _fd(fn, var, t, y, h) * np.ones_like(t)
            left = (fn(t, y) - (fn(t - h, y) if var == "t" else fn(t, y - h))) / h
            right = ((fn(t + h, y) if var == "t" else fn(t, y + h)) - fn(t, y)) / h
            smooth = np.abs(left - right) * np.ones_like(t) < 1e-2 * (1 + np.abs(fd))
            err = np.abs(d - fd)[smooth] / np.maximum(1.0, np.abs(fd)[smooth])
            checked += int(smooth.sum())
            if err.size:
                worst = max(worst, float(err.max()))
    return _check("expression_engine", worst < rel and roundtrip,
                  [("points_checked", checked), ("max_relative_error", worst),
                   ("parse_roundtrip", bool(roundtrip))])


# -- diagnostics -------------------------------------------------------------------------------


def diagnostics(s: Solved, ws) -> CheckResult:
    td = boundary_time_derivative_check(s.surface, s.boundaries, s.spec)
    return CheckResult("diagnostics", INFO,
                       [("time_derivative_worst_a", td.worst_a), ("time_derivative_worst_b", td.worst_b),
                        ("time_derivative_tol", td.tol), ("K_hat", td.K_hat),
                        ("holding_cost_consistency_gap", ws.consistency_gap),
                        ("kinks", len(s.boundaries.kink_report))])


@dataclass
class Verification:
    checks: list
    estimates: list

    @property
    def first_failure(self):
        return next((c for c in self.checks if c.status == FAIL), None)

    @property
    def status(self) -> str:
        if self.first_failure is not None:
            return FAIL
        if any(c.status == INCONCLUSIVE for c in self.checks):
            return INCONCLUSIVE
        return PASS


def verify(s: Solved) -> Verification:
    ws = integrate_value(s.surface, s.spec)
    _, H = compute_holding_cost(ws, s.boundaries, s.spec)
    checks = [check_sandwich(s), check_regions(s), check_antisymmetry(s), check_smooth_fit(s),
              check_game_mc(s)]
    opt = verify_optimality(s.spec, s.surface, ws, s.boundaries, s.config.mc, s.transformed)
    checks += opt.checks
    checks += [check_hjb(s, ws, H), check_envelope(s), check_expressions(s), diagnostics(s, ws)]
    return Verification(checks, opt.estimates)


def report_lines(s: Solved, v: Verification) -> list:
    """Report as ``(key, value)`` pairs; contains nothing that varies between identical runs."""
    cfg = s.config
    items = [("problem", s.spec.name), ("terminal", s.surface.terminal_kind),
             ("grid.nt", s.grid.nt), ("grid.ny", s.grid.ny),
             ("mc.n_paths", cfg.mc.n_paths), ("mc.dt", cfg.mc.dt), ("mc.seed", cfg.mc.seed),
             ("mc.s", cfg.mc.s), ("mc.x", cfg.mc.x), ("mc.ci_budget", cfg.mc.ci_budget)]
    for c in v.checks:
        items.append((f"{c.name}.status", c.status))
        items += [(f"{c.name}.{k}", val) for k, val in c.items]
    items.append(("result", v.status))
    if v.first_failure is not None:
        items.append(("first_failure", v.first_failure.name))
    return items


def write_estimates(path, estimates):
    from .simulate import COST_PARTS
    cols = [[e.policy for e in estimates], [e.mean for e in estimates], [e.se for e in estimates],
            [e.n_paths for e in estimates]]
    cols += [[e.parts[k] for e in estimates] for k in COST_PARTS]
    cols.append([e.outside_fraction for e in estimates])
    return io.write_table(path, ["policy", "mean", "se", "n_paths", *COST_PARTS, "outside_fraction"],
                          [np.asarray(c, dtype=object) for c in cols])
