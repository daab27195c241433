"""Singular-control value ``W`` built from the game value, and its HJB check.

``W(s, x) = int_0^x e^{-cs} V(s, y) dy`` solves the HJB system of the
control problem with holding cost ``H(s, x) = int_0^x h(s, y) dy + C(s)``,
where ``C`` is chosen so the equation holds on the lower free boundary.

The residual ``R = 1/2 sigma^2 Wxx + mu Wx + Ws + H`` on level ``n`` pairs
the forward quotient ``(W^{n+1} - W^n) / dt`` with the same theta-weighting
of the space terms that the game solver uses.  With that pairing the
difference of ``R`` between neighbouring nodes is ``dy`` times the mean of
the solver's stencil residuals (exactly when ``sigma`` is constant and
``mu = 0``), so ``R`` inherits the solver's accuracy instead of the error
of a centred time difference across the moving contact set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverError
from .game import CONTINUATION, LOWER_CONTACT, UPPER_CONTACT, FreeBoundaries, ValueSurface
from .grid import Grid, integrate_from
from .model import ProblemSpec


@dataclass
class WSurface:
    grid: Grid
    W: np.ndarray
    Wx: np.ndarray
    Wxx: np.ndarray
    Ws: np.ndarray
    C: np.ndarray | None = None
    H: np.ndarray | None = None
    C_upper: np.ndarray | None = None
    theta: float = 0.5

    @property
    def consistency_gap(self) -> float | None:
        """Largest ``|C computed on a~ - C computed on b~|`` before the terminal level."""
        if self.C is None or self.C_upper is None:
            return None
        return float(np.abs(self.C - self.C_upper)[:-1].max())


def _d1(values, h, axis):
    return np.gradient(values, h, axis=axis, edge_order=1)


def integrate_value(surface: ValueSurface, spec: ProblemSpec, grid: Grid | None = None) -> WSurface:
    """Trapezoid antiderivative of ``e^{-cs} V`` from ``y = 0`` and its partials.

    ``Wxx`` uses the three-point second difference, which for a trapezoid
    antiderivative is exactly the centred first difference of the integrand.
    """
    grid = grid or surface.grid
    scale = np.exp(-spec.c * grid.t)[:, None]
    W = integrate_from(scale * surface.V, grid.dy, grid.origin, axis=1)
    Wx = _d1(W, grid.dy, axis=1)
    Wxx = np.empty_like(W)
    Wxx[:, 1:-1] = (W[:, 2:] - 2 * W[:, 1:-1] + W[:, :-2]) / grid.dy**2
    Wxx[:, 0] = Wxx[:, 1]
    Wxx[:, -1] = Wxx[:, -2]
    Ws = np.gradient(W, grid.dt, axis=0, edge_order=2)
    return WSurface(grid, W, Wx, Wxx, Ws, theta=surface.params.theta)


def _hjb_terms(ws: WSurface, spec: ProblemSpec, h_int):
    """``1/2 sigma^2 Wxx + mu Wx + Ws + int_0^x h``, without ``C``.

    Levels before ``T`` use the solver's time pairing; the terminal level
    falls back to the centred partials and is reported only.
    """
    y = ws.grid.y
    space = 0.5 * spec.sig(y) ** 2 * ws.Wxx + spec.mu(y) * ws.Wx + h_int
    out = space + ws.Ws
    th = ws.theta
    out[:-1] = (th * space[:-1] + (1 - th) * space[1:]
                + (ws.W[1:] - ws.W[:-1]) / ws.grid.dt)
    return out


def _h_integral(spec: ProblemSpec, grid: Grid):
    tt, yy = grid.mesh()
    return integrate_from(spec.fn("h")(tt, yy) * np.ones_like(tt), grid.dy, grid.origin, axis=1)


def _one_sided(table, grid, curve, first, step):
    """Row-wise value of ``table`` at ``curve[n]``, extrapolated from the free side.

    ``first[n]`` is the first continuation node next to the boundary and
    ``step`` (+1 or -1) points further into the continuation region.  The
    HJB terms have a kink at the free boundary, so interpolating across it
    would cost a full order of accuracy.
    """
    out = np.empty(grid.nt)
    for n in range(grid.nt):
        i = int(np.clip(first[n], 1, grid.ny - 2))
        j = i + step
        slope = (table[n, j] - table[n, i]) / (grid.y[j] - grid.y[i])
        out[n] = table[n, i] + slope * (curve[n] - grid.y[i])
    return out


def compute_holding_cost(ws: WSurface, boundaries: FreeBoundaries, spec: ProblemSpec,
                         grid: Grid | None = None):
    """``C(s)`` from the HJB equation at ``a~(s)``, and ``H = int_0^x h + C``.

    Also records ``C`` evaluated on ``b~`` in ``ws.C_upper`` as a consistency
    diagnostic.  Returns ``(C, H)`` and stores both on ``ws``.
    """
    grid = grid or ws.grid
    for name, curve in (("a_tilde", boundaries.a_tilde), ("b_tilde", boundaries.b_tilde)):
        if np.any(curve < grid.lo) or np.any(curve > grid.hi):
            raise SolverError(f"{name} leaves the band [{grid.lo}, {grid.hi}]")
    h_int = _h_integral(spec, grid)
    total = _hjb_terms(ws, spec, h_int)
    C = -_one_sided(total, grid, boundaries.a_tilde, boundaries.a_index + 1, 1)
    C_up = -_one_sided(total, grid, boundaries.b_tilde, boundaries.b_index - 1, -1)
    H = h_int + C[:, None]
    ws.C, ws.H, ws.C_upper = C, H, C_up
    return C, H


@dataclass
class HJBReport:
    residual: np.ndarray
    region: np.ndarray
    hjb_tol: float
    max_continuation: float
    outside_positive_fraction: float
    outside_min: float
    outside_count: int
    gradient_gap_lower: float
    gradient_gap_upper: float
    gradient_strict_inside: bool
    wxx_gap: float
    sign_mismatches: int

    @property
    def passed(self) -> bool:
        return (self.max_continuation < self.hjb_tol and self.outside_positive_fraction == 1.0
                and self.gradient_strict_inside)


def default_hjb_tol(grid: Grid, base: float = 1e-4, reference: Grid | None = None) -> float:
    """``base`` at the reference grid (201 x 201 on the same rectangle), scaled with ``dy + dt``."""
    ref = reference or Grid(grid.T, grid.lo, grid.hi, 201, 201)
    return base * (grid.dy + grid.dt) / (ref.dy + ref.dt)


def hjb_residual(ws: WSurface, H, boundaries: FreeBoundaries, spec: ProblemSpec,
                 region: np.ndarray | None = None, hjb_tol: float | None = None,
                 margin_cells: int = 2) -> HJBReport:
    """``R = 1/2 sigma^2 Wxx + mu Wx + Ws + H`` and the gradient constraints.

    Checks use levels before ``T`` and interior nodes.  "Outside" means more
    than ``margin_cells`` cells beyond ``[a~, b~]``.
    """
    g = ws.grid
    tol = default_hjb_tol(g) if hjb_tol is None else hjb_tol
    C = H[:, g.origin][:, None]
    R = _hjb_terms(ws, spec, H - C) + C
    y = g.y
    a = boundaries.a_tilde[:, None]
    b = boundaries.b_tilde[:, None]
    interior = np.zeros(R.shape, dtype=bool)
    interior[:-1, 1:-1] = True
    if region is None:
        region = np.where(y[None, :] < a, LOWER_CONTACT, np.where(y[None, :] > b, UPPER_CONTACT,
                                                                    CONTINUATION))
    cont = interior & (region == CONTINUATION)
    outside = interior & ((y[None, :] < a - margin_cells * g.dy) | (y[None, :] > b + margin_cells * g.dy))
    max_cont = float(np.abs(R[cont]).max()) if cont.any() else 0.0
    out_vals = R[outside]
    frac = float((out_vals > 0).mean()) if out_vals.size else 1.0
    out_min = float(out_vals.min()) if out_vals.size else np.inf

    tt, yy = g.mesh()
    scale = np.exp(-spec.c * tt)
    low = -scale * spec.fn("f1")(tt, yy)
    up = scale * spec.fn("f2")(tt, yy)
    lower_nodes = interior & (region == LOWER_CONTACT)
    upper_nodes = interior & (region == UPPER_CONTACT)
    gap_lo = float(np.abs(ws.Wx - low)[lower_nodes].max()) if lower_nodes.any() else 0.0
    gap_up = float(np.abs(ws.Wx - up)[upper_nodes].max()) if upper_nodes.any() else 0.0
    inside = interior & (y[None, :] > a + margin_cells * g.dy) & (y[None, :] < b - margin_cells * g.dy)
    strict = bool(np.all((ws.Wx > low)[inside] & (ws.Wx < up)[inside]))

    deep_lo = interior & (y[None, :] < a - margin_cells * g.dy)
    deep_up = interior & (y[None, :] > b + margin_cells * g.dy)
    wxx_lo = -scale * spec.fn("f1_y")(tt, yy)
    wxx_up = scale * spec.fn("f2_y")(tt, yy)
    wxx_gap = 0.0
    if deep_lo.any():
        wxx_gap = max(wxx_gap, float(np.abs(ws.Wxx - wxx_lo)[deep_lo].max()))
    if deep_up.any():
        wxx_gap = max(wxx_gap, float(np.abs(ws.Wxx - wxx_up)[deep_up].max()))

    # sign trichotomy against the solver's labels
    mismatch = (cont & (np.abs(R) >= tol)) | (interior & (region != CONTINUATION) & (R <= -tol))
    return HJBReport(R, region, tol, max_cont, frac, out_min, int(outside.sum()), gap_lo, gap_up,
                     strict, wxx_gap, int(mismatch.sum()))
