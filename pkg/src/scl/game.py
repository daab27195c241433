"""Backward solver for the double-obstacle problem and its diagnostics.

The value ``V`` of the stopping game solves, on ``[0, T) x (lo, hi)``,

    min(max(L V + e^{ct} h, -f1 - V), f2 - V) = 0,      V(T, .) = terminal,

with ``L = 1/2 sigma^2 d_yy + (sigma sigma' + mu) d_y + d_t``.  Each time
level is a linear complementarity problem; it is solved by projected SOR on
a theta-weighted central-difference scheme, sweeping nodes left to right.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .errors import AssumptionError, SolverError
from .grid import Grid
from .model import CurvePair, ProblemSpec, TransformedTerminal, terminal_transform

LOWER_CONTACT = -1
CONTINUATION = 0
UPPER_CONTACT = 1
REGION_NAMES = {LOWER_CONTACT: "LOWER_CONTACT", CONTINUATION: "CONTINUATION",
                UPPER_CONTACT: "UPPER_CONTACT"}


@dataclass(frozen=True)
class SolverParams:
    theta: float = 0.5
    omega: float = 1.2
    sweep_tol: float = 1e-10
    max_sweeps: int = 10000
    residual_tol: float = 1e-6
    kink_tol: float = 10.0

    def __post_init__(self):
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [1/2, 1], got {self.theta}")
        if not 1.0 < self.omega < 2.0:
            raise ValueError(f"omega must lie in (1, 2), got {self.omega}")
        if self.sweep_tol <= 0 or self.residual_tol <= 0 or self.max_sweeps < 1:
            raise ValueError("tolerances must be positive and max_sweeps >= 1")


@dataclass
class ValueSurface:
    grid: Grid
    V: np.ndarray
    region: np.ndarray
    complementarity_residual: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    params: SolverParams
    terminal_kind: str = "g"
    sweeps: np.ndarray = field(default=None, repr=False)

    @property
    def t(self):
        return self.grid.t

    @property
    def y(self):
        return self.grid.y

    def value_at(self, t, y):
        """Bilinear interpolation of ``V``."""
        return bilinear(self.grid, self.V, t, y)


def bilinear(grid: Grid, table, t, y):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    ft = np.clip(t / grid.dt, 0.0, grid.nt - 1)
    fy = np.clip((y - grid.y[0]) / grid.dy, 0.0, grid.ny - 1)
    n = np.minimum(ft.astype(int), grid.nt - 2)
    i = np.minimum(fy.astype(int), grid.ny - 2)
    wt = ft - n
    wy = fy - i
    return ((1 - wt) * ((1 - wy) * table[n, i] + wy * table[n, i + 1])
            + wt * ((1 - wy) * table[n + 1, i] + wy * table[n + 1, i + 1]))


# -- scheme pieces ----------------------------------------------------------------------


def stencil(spec: ProblemSpec, grid: Grid):
    """Coefficients of ``(L_h v)_i = alpha_i v_{i-1} + beta_i v_i + gamma_i v_{i+1}``."""
    y = grid.y
    diff = 0.5 * spec.sig(y) ** 2 * np.ones_like(y)
    drift = spec.drift_y(y) * np.ones_like(y)
    dy = grid.dy
    alpha = diff / dy**2 - drift / (2 * dy)
    beta = -2 * diff / dy**2
    gamma = diff / dy**2 + drift / (2 * dy)
    return alpha, beta, gamma


def apply_stencil(v, alpha, beta, gamma):
    """``L_h v`` at interior nodes (edges left at zero); ``v`` may be 2-D."""
    out = np.zeros_like(v)
    out[..., 1:-1] = (alpha[1:-1] * v[..., :-2] + beta[1:-1] * v[..., 1:-1]
                      + gamma[1:-1] * v[..., 2:])
    return out


def source(spec: ProblemSpec, grid: Grid):
    tt, yy = grid.mesh()
    return np.exp(spec.c * tt) * spec.fn("h")(tt, yy) * np.ones_like(tt)


@njit(cache=True)
def _psor_levels(V, lower, upper, src, alpha, beta, gamma, dt, theta, omega, tol, max_sweeps,
                 sweeps):
    """Fill ``V[:-1]`` backward from the terminal row; return ``(level, residual)``.

    ``level`` is -1 on success, otherwise the first level that failed to
    converge together with its last max update.
    """
    nt, ny = V.shape
    rhs = np.empty(ny)
    a = theta * dt
    b = (1.0 - theta) * dt
    for n in range(nt - 2, -1, -1):
        nxt = V[n + 1]
        cur = V[n]
        for i in range(1, ny - 1):
            lv = alpha[i] * nxt[i - 1] + beta[i] * nxt[i] + gamma[i] * nxt[i + 1]
            rhs[i] = nxt[i] + b * lv + dt * (theta * src[n, i] + (1.0 - theta) * src[n + 1, i])
            # warm start from the later level, projected onto this level's band
            cur[i] = min(max(nxt[i], lower[n, i]), upper[n, i])
        cur[0] = lower[n, 0]
        cur[ny - 1] = upper[n, ny - 1]
        change = 0.0
        k = 0
        while k < max_sweeps:
            change = 0.0
            for i in range(1, ny - 1):
                diag = 1.0 - a * beta[i]
                gs = (rhs[i] + a * (alpha[i] * cur[i - 1] + gamma[i] * cur[i + 1])) / diag
                new = cur[i] + omega * (gs - cur[i])
                if new < lower[n, i]:
                    new = lower[n, i]
                elif new > upper[n, i]:
                    new = upper[n, i]
                d = abs(new - cur[i])
                if d > change:
                    change = d
                cur[i] = new
            k += 1
            if change < tol:
                break
        sweeps[n] = k
        if change >= tol:
            return n, change
    return -1, 0.0


def stencil_residual(V, src, alpha, beta, gamma, dt, theta):
    """``(V^{n+1}-V^n)/dt + theta L_h V^n + (1-theta) L_h V^{n+1} + source``.

    Defined at interior nodes of levels ``0..nt-2``; NaN on the lateral edges
    and on the terminal level, which carry no equation.
    """
    LV = apply_stencil(V, alpha, beta, gamma)
    res = np.full(V.shape, np.nan)
    res[:-1, 1:-1] = ((V[1:, 1:-1] - V[:-1, 1:-1]) / dt
                      + theta * LV[:-1, 1:-1] + (1 - theta) * LV[1:, 1:-1]
                      + theta * src[:-1, 1:-1] + (1 - theta) * src[1:, 1:-1])
    return res


def classify(V, lower, upper):
    region = np.zeros(V.shape, dtype=np.int8)
    region[V == lower] = LOWER_CONTACT
    region[V == upper] = UPPER_CONTACT
    return region


def solve_dynkin_game(spec: ProblemSpec, grid: Grid, terminal: str = "g",
                      params: SolverParams | None = None,
                      transformed: TransformedTerminal | None = None) -> ValueSurface:
    """Solve the game backward from ``T``.

    ``terminal`` is ``"g"`` (requires the terminal sandwich) or ``"g_tilde"``
    (the clamped terminal of the relaxed problem).  Raises
    :class:`AssumptionError` if the obstacles cross and :class:`SolverError`
    if a level fails to converge.
    """
    params = params or SolverParams()
    if terminal not in ("g", "g_tilde"):
        raise ValueError("terminal must be 'g' or 'g_tilde'")
    tt, yy = grid.mesh()
    lower = -spec.fn("f1")(tt, yy) * np.ones_like(tt)
    upper = spec.fn("f2")(tt, yy) * np.ones_like(tt)
    if np.any(lower > upper):
        n, i = np.argwhere(lower > upper)[0]
        raise AssumptionError(f"obstacles cross: -f1 > f2 at (t, y) = ({grid.t[n]:.6g}, {grid.y[i]:.6g})")
    if terminal == "g":
        term = spec.fn("g")(spec.T, grid.y) * np.ones(grid.ny)
        bad = (term < lower[-1]) | (term > upper[-1])
        if bad.any():
            i = int(np.argmax(bad))
            raise AssumptionError(
                f"terminal g leaves [-f1(T,.), f2(T,.)] at y={grid.y[i]:.6g}; "
                "use the clamped terminal (general terminal mode)"
            )
    else:
        transformed = transformed or terminal_transform(spec, grid)
        term = transformed.g_tilde.copy()
    V = np.empty((grid.nt, grid.ny))
    V[-1] = term
    src = source(spec, grid)
    alpha, beta, gamma = stencil(spec, grid)
    sweeps = np.zeros(grid.nt, dtype=np.int64)
    level, change = _psor_levels(V, lower, upper, src, alpha, beta, gamma, grid.dt, params.theta,
                                 params.omega, params.sweep_tol, params.max_sweeps, sweeps)
    if level >= 0:
        raise SolverError(
            f"projected SOR did not converge at level {level} (t={grid.t[level]:.6g}) after "
            f"{params.max_sweeps} sweeps; last max update {change:.3g}"
        )
    res = stencil_residual(V, src, alpha, beta, gamma, grid.dt, params.theta)
    return ValueSurface(grid, V, classify(V, lower, upper), res, lower, upper, params, terminal, sweeps)


def solve_unconstrained(spec: ProblemSpec, grid: Grid, terminal, params: SolverParams | None = None,
                        lateral=None):
    """Same scheme with no projection: one banded solve per level.

    ``lateral`` gives the Dirichlet values ``(left, right)`` per level; by
    default the obstacles, as in the constrained solve.
    """
    from scipy.linalg import solve_banded

    params = params or SolverParams()
    tt, yy = grid.mesh()
    if lateral is None:
        lateral = (-spec.fn("f1")(grid.t, grid.y[0]) * np.ones(grid.nt),
                   spec.fn("f2")(grid.t, grid.y[-1]) * np.ones(grid.nt))
    src = source(spec, grid)
    alpha, beta, gamma = stencil(spec, grid)
    a = params.theta * grid.dt
    b = (1 - params.theta) * grid.dt
    m = grid.ny - 2
    ab = np.zeros((3, m))
    ab[0, 1:] = -a * gamma[1:-2]
    ab[1] = 1 - a * beta[1:-1]
    ab[2, :-1] = -a * alpha[2:-1]
    V = np.empty((grid.nt, grid.ny))
    V[-1] = terminal
    for n in range(grid.nt - 2, -1, -1):
        nxt = V[n + 1]
        lv = alpha[1:-1] * nxt[:-2] + beta[1:-1] * nxt[1:-1] + gamma[1:-1] * nxt[2:]
        rhs = nxt[1:-1] + b * lv + grid.dt * (params.theta * src[n, 1:-1]
                                              + (1 - params.theta) * src[n + 1, 1:-1])
        left, right = lateral[0][n], lateral[1][n]
        rhs[0] += a * alpha[1] * left
        rhs[-1] += a * gamma[-2] * right
        V[n, 0], V[n, -1] = left, right
        V[n, 1:-1] = solve_banded((1, 1), ab, rhs)
    return V


# -- residual report --------------------------------------------------------------------


@dataclass
class ResidualField:
    residual: np.ndarray
    region: np.ndarray
    residual_tol: float
    max_continuation: float
    max_lower: float
    min_upper: float
    complementarity_gap: float

    @property
    def passed(self) -> bool:
        tol = self.residual_tol
        return (self.max_continuation < tol and self.max_lower <= tol and self.min_upper >= -tol
                and self.complementarity_gap < tol)


def pde_residual(surface: ValueSurface, spec: ProblemSpec) -> ResidualField:
    """Stencil residual of ``L V + e^{ct} h`` with the solver's own scheme.

    The complementarity gap is the largest over nodes of
    ``min(|residual|, distance to the nearer obstacle)``, with the terminal
    level (no equation) excluded.
    """
    g = surface.grid
    p = surface.params
    alpha, beta, gamma = stencil(spec, g)
    res = stencil_residual(surface.V, source(spec, g), alpha, beta, gamma, g.dt, p.theta)
    reg = surface.region
    has = ~np.isnan(res)

    def pick(mask, fn, empty):
        vals = res[mask & has]
        return float(fn(vals)) if vals.size else empty

    dist = np.minimum(surface.V - surface.lower, surface.upper - surface.V)
    comp = np.where(has, np.minimum(np.abs(res), dist), dist)[:-1]
    return ResidualField(
        res, reg, p.residual_tol,
        pick(reg == CONTINUATION, lambda v: np.abs(v).max(), 0.0),
        pick(reg == LOWER_CONTACT, np.max, -np.inf),
        pick(reg == UPPER_CONTACT, np.min, np.inf),
        float(comp.max()),
    )


# -- free boundaries --------------------------------------------------------------------


@dataclass
class FreeBoundaries:
    t: np.ndarray
    a_tilde: np.ndarray
    b_tilde: np.ndarray
    a_index: np.ndarray
    b_index: np.ndarray
    slope_a: np.ndarray
    slope_b: np.ndarray
    kink_report: list
    curves: CurvePair | None = None

    def at(self, t):
        return np.interp(t, self.t, self.a_tilde), np.interp(t, self.t, self.b_tilde)


def _edge_offset(d1, d2, dy):
    """Sub-cell distance from the first free node back to the contact edge.

    ``V`` leaves a smooth obstacle quadratically, so the square root of the
    distance to the obstacle is locally linear; ``d1``, ``d2`` are that
    distance at the first two free nodes.  Capped at one cell.
    """
    r1, r2 = np.sqrt(max(d1, 0.0)), np.sqrt(max(d2, 0.0))
    if r2 <= r1:
        return 0.5 * dy
    return min(dy, dy * r1 / (r2 - r1))


def extract_free_boundaries(surface: ValueSurface, spec: ProblemSpec | None = None,
                            curves: CurvePair | None = None) -> FreeBoundaries:
    """Edges of the contact sets attached to the lateral boundaries, per level."""
    g = surface.grid
    y = g.y
    reg = surface.region
    V = surface.V
    nt = g.nt
    a_t = np.empty(nt)
    b_t = np.empty(nt)
    ia = np.empty(nt, dtype=int)
    ib = np.empty(nt, dtype=int)
    for n in range(nt):
        row = reg[n]
        free = np.flatnonzero(row == CONTINUATION)
        if free.size == 0:
            raise SolverError(f"empty continuation set at level {n} (t={g.t[n]:.6g}); "
                              "grid too coarse or assumptions violated")
        i = int(np.argmax(row != LOWER_CONTACT)) - 1
        j = g.ny - int(np.argmax(row[::-1] != UPPER_CONTACT))
        ia[n], ib[n] = i, j
        if n == nt - 1:
            a_t[n], b_t[n] = y[i], y[j]
            continue
        dist_lo = V[n] - surface.lower[n]
        dist_up = surface.upper[n] - V[n]
        a_t[n] = y[0] if i < 0 else y[i + 1] - _edge_offset(dist_lo[i + 1], dist_lo[i + 2], g.dy)
        b_t[n] = y[-1] if j >= g.ny else y[j - 1] + _edge_offset(dist_up[j - 1], dist_up[j - 2], g.dy)
    slope_a = np.gradient(a_t, g.t)
    slope_b = np.gradient(b_t, g.t)
    kinks = []
    thresh = surface.params.kink_tol * g.dt
    for name, curve in (("a_tilde", a_t), ("b_tilde", b_t)):
        d2 = np.abs(curve[2:] - 2 * curve[1:-1] + curve[:-2])
        for n in np.flatnonzero(d2 > thresh) + 1:
            kinks.append((name, int(n), float(g.t[n]), float(d2[n - 1])))
    return FreeBoundaries(g.t, a_t, b_t, ia, ib, slope_a, slope_b, kinks, curves)


# -- smooth fit and time-derivative diagnostics -----------------------------------------


@dataclass
class SmoothFitReport:
    t: np.ndarray
    gap_a: np.ndarray
    gap_b: np.ndarray
    window: float
    max_gap: float

    @property
    def max_gap_a(self):
        return float(np.nanmax(self.gap_a))

    @property
    def max_gap_b(self):
        return float(np.nanmax(self.gap_b))


def smooth_fit_check(surface: ValueSurface, boundaries: FreeBoundaries, spec: ProblemSpec,
                     window: float = 0.9) -> SmoothFitReport:
    """Gap between the one-sided ``dV/dy`` and the obstacle slope at ``a~``, ``b~``.

    The slope of ``V`` is the first-order difference over the first two free
    nodes, so the gap is ``O(dy)``.  ``max_gap`` is the largest gap over
    levels with ``t <= window * T``; levels closer to ``T``, where the
    boundaries jump to the terminal crossovers, are left out.
    """
    g = surface.grid
    V = surface.V
    f1y, f2y = spec.fn("f1_y"), spec.fn("f2_y")
    nt = g.nt
    gap_a = np.full(nt, np.nan)
    gap_b = np.full(nt, np.nan)
    for n in range(nt - 1):
        i, j = boundaries.a_index[n], boundaries.b_index[n]
        if 0 <= i and i + 2 < g.ny:
            slope = (V[n, i + 2] - V[n, i + 1]) / g.dy
            gap_a[n] = abs(slope + f1y(g.t[n], boundaries.a_tilde[n]))
        if j < g.ny and j - 2 >= 0:
            slope = (V[n, j - 1] - V[n, j - 2]) / g.dy
            gap_b[n] = abs(slope - f2y(g.t[n], boundaries.b_tilde[n]))
    keep = g.t <= window * g.T + 1e-12
    both = np.fmax(gap_a, gap_b)[keep]
    return SmoothFitReport(g.t, gap_a, gap_b, window, float(np.nanmax(both)))


@dataclass
class RefinementStudy:
    ny: list
    gaps: list
    ratios: list

    def within(self, lo=1.5, hi=3.0) -> bool:
        return all(lo <= r <= hi for r in self.ratios)


def smooth_fit_refinement(spec: ProblemSpec, grid: Grid, levels: int = 4,
                          params: SolverParams | None = None, terminal: str = "g") -> RefinementStudy:
    """Smooth-fit gap on ``levels`` grids, halving ``dt`` and ``dy`` together."""
    ny, gaps = [], []
    for k in range(levels):
        gk = grid.refine(2**k) if k else grid
        surf = solve_dynkin_game(spec, gk, terminal, params)
        fb = extract_free_boundaries(surf, spec)
        ny.append(gk.ny)
        gaps.append(smooth_fit_check(surf, fb, spec).max_gap)
    return RefinementStudy(ny, gaps, [a / b for a, b in zip(gaps, gaps[1:])])


@dataclass
class TimeDerivativeReport:
    t: np.ndarray
    quotient_a: np.ndarray
    quotient_b: np.ndarray
    bound_a: np.ndarray
    bound_b: np.ndarray
    tol: float
    K_hat: float
    worst_a: float
    worst_b: float

    @property
    def passed(self) -> bool:
        return self.worst_a >= -self.tol and self.worst_b >= -self.tol and np.isfinite(self.K_hat)


def boundary_time_derivative_check(surface: ValueSurface, boundaries: FreeBoundaries,
                                   spec: ProblemSpec, tol: float | None = None) -> TimeDerivativeReport:
    """Forward time quotients of ``V`` along ``a~`` and ``b~``.

    Along ``a~`` the quotient should be at least ``-f1_t``; along ``b~`` at
    most ``f2_t``.  ``worst_a``/``worst_b`` are the smallest margins
    (quotient minus bound, resp. bound minus quotient).  Levels whose
    quotient reaches the terminal level are skipped.  ``tol`` defaults to
    ``dy**2 / dt``, the size of the interpolation error in ``V``.
    """
    g = surface.grid
    V = surface.V
    y = g.y
    if tol is None:
        tol = g.dy**2 / g.dt
    levels = np.arange(g.nt - 2)
    qa = np.empty(levels.size)
    qb = np.empty(levels.size)
    for k, n in enumerate(levels):
        a, b = boundaries.a_tilde[n], boundaries.b_tilde[n]
        qa[k] = (np.interp(a, y, V[n + 1]) - np.interp(a, y, V[n])) / g.dt
        qb[k] = (np.interp(b, y, V[n + 1]) - np.interp(b, y, V[n])) / g.dt
    t = g.t[levels]
    bound_a = -spec.fn("f1_t")(t, boundaries.a_tilde[levels]) * np.ones_like(t)
    bound_b = spec.fn("f2_t")(t, boundaries.b_tilde[levels]) * np.ones_like(t)
    K = float(max(np.abs(qa).max(), np.abs(qb).max())) if levels.size else 0.0
    worst_a = float((qa - bound_a).min()) if levels.size else 0.0
    worst_b = float((bound_b - qb).min()) if levels.size else 0.0
    return TimeDerivativeReport(t, qa, qb, bound_a, bound_b, tol, K, worst_a, worst_b)


# -- cone probe -----------------------------------------------------------------------------


@dataclass
class ConeSample:
    side: str
    s: float
    x: float
    F_U: float
    F_cone: float
    difference: float
    se: float

    @property
    def holds(self) -> bool:
        """Sampled inequality within three standard errors of the paired difference."""
        if self.side == "lower":
            return self.difference >= -3 * self.se
        return self.difference <= 3 * self.se


@dataclass
class ConeProbeReport:
    eta: float
    samples: list

    @property
    def all_hold(self) -> bool:
        return all(smp.holds for smp in self.samples)


def cone_monotonicity_probe(spec: ProblemSpec, grid: Grid, surface: ValueSurface,
                            boundaries: FreeBoundaries, n_samples: int = 4, eta: float = 1.0,
                            points=None, n_paths: int = 10_000, dt: float = 1e-3, seed: int = 0,
                            curves: CurvePair | None = None) -> ConeProbeReport:
    """Sampled comparison of exit functionals with and without a cone.

    The region ``U`` is ``[a~(t), b~(t)]`` for ``t > s``, joined to the
    start point ``(s, x)`` which lies in a contact set.  The cone adds
    ``{x < y <= a(t), t - s <= eta (y - x)}`` below (mirrored above).  Both
    functionals use the same increments, so the standard error is that of
    the paired difference.  In continuous time both functionals equal the
    obstacle at ``(s, x)``; the sampled difference measures the discrete
    monitoring at the first steps and is a diagnostic only.

    ``points`` is a list of ``(side, s, x)``; otherwise ``n_samples``
    contact nodes are drawn deterministically from ``seed``.
    """
    from .model import compute_ab_curves
    from .simulate import exit_payoffs, mean_se

    curves = curves or compute_ab_curves(spec, grid)
    if points is None:
        rng = np.random.default_rng(seed)
        points = []
        levels = np.flatnonzero(grid.t < spec.T - 10 * dt)
        for k in range(n_samples):
            side = "lower" if k % 2 == 0 else "upper"
            n = int(rng.choice(levels))
            a, b = boundaries.a_tilde[n], boundaries.b_tilde[n]
            off = float(rng.uniform(0.1, 1.0))
            x = max(a - off, grid.lo + grid.dy) if side == "lower" else min(b + off, grid.hi - grid.dy)
            # the probe steps on a dt lattice ending at T
            s = spec.T - dt * round((spec.T - grid.t[n]) / dt)
            points.append((side, s, x))

    def a_ref(t):
        return np.interp(t, curves.t, curves.a)

    def b_ref(t):
        return np.interp(t, curves.t, curves.b)

    samples = []
    for side, s, x in points:
        def in_U(t, y):
            at, bt = boundaries.at(t)
            return (y >= at) & (y <= bt)

        if side == "lower":
            def in_cone(t, y, s=s, x=x):
                return (y > x) & (y <= a_ref(t)) & (t - s <= eta * (y - x))
        else:
            def in_cone(t, y, s=s, x=x):
                return (y < x) & (y >= b_ref(t)) & (t - s <= eta * (x - y))

        terminal = surface.terminal_kind
        base = exit_payoffs(spec, s, x, dt, seed, n_paths, in_U, a_ref, b_ref, terminal)
        wide = exit_payoffs(spec, s, x, dt, seed, n_paths, lambda t, y: in_U(t, y) | in_cone(t, y),
                            a_ref, b_ref, terminal)
        diff, se = mean_se(wide - base)
        samples.append(ConeSample(side, float(s), float(x), mean_se(base)[0], mean_se(wide)[0], diff, se))
    return ConeProbeReport(eta, samples)
