"""Problem data, assumption checks, reference curves and the terminal envelope."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import expr as ex
from .errors import AssumptionError
from .grid import Grid, integrate_from

ROOT_TOL = 1e-10


@dataclass(frozen=True)
class ProblemSpec:
    """One problem instance.

    ``c`` is both the drift slope of ``mu(y) = c*y + d`` and the discount
    rate; ``sigma`` depends on ``y`` only.  ``M`` bounds ``f1, f2, h, g`` on
    the band and ``eps`` bounds ``sigma`` from below.
    """

    c: float
    d: float
    sigma: ex.Expr
    f1: ex.Expr
    f2: ex.Expr
    h: ex.Expr
    g: ex.Expr
    T: float
    band_lo: float
    band_hi: float
    M: float = 10.0
    eps: float = 1e-3
    name: str = field(default="problem", compare=False)

    @classmethod
    def from_strings(cls, *, sigma, f1, f2, h, g, **kw):
        return cls(
            sigma=ex.parse(sigma), f1=ex.parse(f1), f2=ex.parse(f2), h=ex.parse(h), g=ex.parse(g), **kw
        )

    def replace(self, **changes) -> "ProblemSpec":
        for key in ("sigma", "f1", "f2", "h", "g"):
            if isinstance(changes.get(key), str):
                changes[key] = ex.parse(changes[key])
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return ProblemSpec(**values)

    def grid(self, nt: int, ny: int) -> Grid:
        return Grid(self.T, self.band_lo, self.band_hi, nt, ny)

    # symbolic pieces ---------------------------------------------------------

    @cached_property
    def derivatives(self) -> dict:
        d = ex.differentiate
        out = {"dsigma": d(self.sigma, "y")}
        for name in ("f1", "f2"):
            f = getattr(self, name)
            fy = d(f, "y")
            out[name + "_y"] = fy
            out[name + "_yy"] = d(fy, "y")
            out[name + "_t"] = d(f, "t")
        return out

    @cached_property
    def g_tilde_expr(self) -> ex.Expr:
        """Pointwise clamp of ``g`` between the terminal obstacles.

        Under the relaxed terminal assumption this equals the derivative of
        the terminal envelope scaled back by ``exp(cT)``.
        """
        lower = ex.Neg(ex.substitute(self.f1, t=self.T))
        upper = ex.substitute(self.f2, t=self.T)
        return ex.Call("clamp", (self.g, lower, upper))

    @cached_property
    def _np(self) -> dict:
        fns = {k: ex.to_numpy(getattr(self, k)) for k in ("sigma", "f1", "f2", "h", "g")}
        fns.update({k: ex.to_numpy(v) for k, v in self.derivatives.items()})
        fns["g_tilde"] = ex.to_numpy(self.g_tilde_expr)
        return fns

    def fn(self, name: str):
        """Vectorised ``f(t, y)`` for a named function or derivative."""
        return self._np[name]

    def mu(self, y):
        return self.c * np.asarray(y, dtype=float) + self.d

    def sig(self, y):
        return self._np["sigma"](0.0, y)

    def drift_y(self, y):
        """Drift of the auxiliary diffusion: ``sigma*sigma' + mu``."""
        return self.sig(y) * self._np["dsigma"](0.0, y) + self.mu(y)

    def lower_generator(self, t, y):
        """``L(-f1) + exp(c t) h`` with the generator of the auxiliary diffusion."""
        f = self._np
        s = self.sig(y)
        gen = 0.5 * s * s * f["f1_yy"](t, y) + self.drift_y(y) * f["f1_y"](t, y) + f["f1_t"](t, y)
        return -gen + np.exp(self.c * np.asarray(t)) * f["h"](t, y)

    def upper_generator(self, t, y):
        """``L f2 + exp(c t) h``."""
        f = self._np
        s = self.sig(y)
        gen = 0.5 * s * s * f["f2_yy"](t, y) + self.drift_y(y) * f["f2_y"](t, y) + f["f2_t"](t, y)
        return gen + np.exp(self.c * np.asarray(t)) * f["h"](t, y)


P0_F1 = "2 + tanh(y + 1)"
P0_F2 = "2 - tanh(y - 1)"


def p0(**overrides) -> ProblemSpec:
    """Canonical fixture: antisymmetric under ``y -> -y``, no drift or discounting."""
    kw = dict(
        c=0.0, d=0.0, sigma="1", f1=P0_F1, f2=P0_F2, h="y",
        g=f"max(-({P0_F1}), min({P0_F2}, y))", T=1.0, band_lo=-6.0, band_hi=6.0, M=10.0,
        eps=0.5, name="P0",
    )
    kw.update(overrides)
    return ProblemSpec.from_strings(**kw)


def p0_jump(**overrides) -> ProblemSpec:
    """P0 with ``g(y) = 2y``, which leaves the obstacle band outside ``[-1, 1]``."""
    kw = dict(g="2*y", name="P0-jump", M=20.0)
    kw.update(overrides)
    return p0(**kw)


# -- validation ------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    violations: int
    total: int
    worst: tuple | None = None
    worst_value: float | None = None
    message: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            line = f"{status} {c.name}: {c.violations}/{c.total} violations"
            if not c.passed and c.worst is not None:
                line += f"; worst at (t, y) = ({c.worst[0]:.6g}, {c.worst[1]:.6g}) value {c.worst_value:.6g}"
            if c.message:
                line += f"; {c.message}"
            lines.append(line)
        return "\n".join(lines)


def _margin_check(name, margin, tt, yy, message=""):
    """``margin > 0`` means satisfied; report the most negative node."""
    margin = np.asarray(margin, dtype=float)
    bad = ~(margin > 0)
    k = int(np.argmin(np.where(np.isnan(margin), -np.inf, margin)))
    idx = np.unravel_index(k, margin.shape)
    worst = (float(tt[idx]), float(yy[idx]))
    return Check(name, not bad.any(), int(bad.sum()), margin.size, worst, float(margin[idx]), message)


def validate_problem(spec: ProblemSpec, grid: Grid, general_terminal: bool = False,
                     zero_tol: float = 1e-12) -> ValidationReport:
    """Sample every standing assumption on ``grid``.

    With ``general_terminal`` the terminal sandwich is replaced by the relaxed
    crossover pattern (``g`` below ``-f1`` left of some ``A``, above ``f2``
    right of some ``B``, sandwiched in between).
    """
    tt, yy = grid.mesh()
    T = spec.T
    y = grid.y
    checks = []
    values = {}
    for name in ("sigma", "f1", "f2", "h", "g"):
        v = spec.fn(name)(tt, yy)
        values[name] = v
        finite = np.isfinite(v)
        checks.append(_margin_check(f"finite:{name}", np.where(finite, 1.0, -1.0), tt, yy,
                                    "" if finite.all() else f"{name} is not finite"))
    if not all(c.passed for c in checks):
        return ValidationReport(checks)

    f1, f2, h, g = values["f1"], values["f2"], values["h"], values["g"][-1]
    checks.append(Check("sigma independent of t", not ex.depends_on(spec.sigma, "t"), 0, 1))
    checks.append(_margin_check("sigma>=eps", values["sigma"] - spec.eps + 1e-300, tt, yy))
    checks.append(_margin_check("f2>0>-f1", np.minimum(f2, f1), tt, yy))
    bound = spec.M - np.maximum.reduce([np.abs(f1), np.abs(f2), np.abs(h), np.abs(values["g"])])
    checks.append(_margin_check("bounded by M", bound, tt, yy))

    tT = np.full_like(y, T)
    lowT, upT = -spec.fn("f1")(T, y), spec.fn("f2")(T, y)
    if general_terminal:
        checks.append(_crossover_check(y, g, lowT, upT))
    else:
        margin = np.minimum(upT - g, g - lowT) + zero_tol
        checks.append(_margin_check("f2(T,y)>=g(y)>=-f1(T,y)", margin, tT, y))

    dh = np.diff(h, axis=1)
    mid_t, mid_y = tt[:, 1:], 0.5 * (yy[:, 1:] + yy[:, :-1])
    checks.append(_margin_check("h strictly increasing", dh, mid_t, mid_y))
    checks.append(_margin_check("f1 nondecreasing", np.diff(f1, axis=1) + zero_tol, mid_t, mid_y))
    checks.append(_margin_check("f2 nonincreasing", -np.diff(f2, axis=1) + zero_tol, mid_t, mid_y))

    h0 = spec.fn("h")(grid.t, 0.0)
    checks.append(_margin_check("h(t,0)=0", 1e-9 - np.abs(h0), grid.t, np.zeros_like(h0)))
    g0 = float(spec.fn("g")(T, 0.0))
    checks.append(Check("g(0)=0", abs(g0) <= 1e-9, int(abs(g0) > 1e-9), 1, (T, 0.0), g0))

    lo_gen = spec.lower_generator(tt, yy)
    up_gen = spec.upper_generator(tt, yy)
    checks.append(_margin_check("L(-f1)+e^{ct}h strictly increasing", np.diff(lo_gen, axis=1),
                                mid_t, mid_y))
    checks.append(_margin_check("L(f2)+e^{ct}h strictly increasing", np.diff(up_gen, axis=1),
                                mid_t, mid_y))
    return ValidationReport(checks)


def _crossover_check(y, g, low, up):
    """Relaxed terminal pattern, sampled: below, then sandwiched, then above."""
    q = g - low
    r = g - up
    total = y.size
    inside = (q >= 0) & (r <= 0)
    ok = True
    message = ""
    if not inside.any():
        return Check("terminal crossover pattern", False, total, total, message="g never between obstacles")
    first, last = np.flatnonzero(inside)[[0, -1]]
    violations = int((~inside[first:last + 1]).sum())
    violations += int((q[:first] > 0).sum()) + int((r[last + 1:] < 0).sum())
    if violations:
        ok = False
        message = "g leaves the obstacle band inside [A, B]"
    if not (first <= np.searchsorted(y, 0.0) <= last):
        ok = False
        message = "need A < 0 < B"
    return Check("terminal crossover pattern", ok, violations, total, message=message)


# -- reference curves ---------------------------------------------------------------------


@dataclass
class CurvePair:
    t: np.ndarray
    a: np.ndarray
    b: np.ndarray
    residual_a: np.ndarray
    residual_b: np.ndarray

    def at(self, t):
        return np.interp(t, self.t, self.a), np.interp(t, self.t, self.b)


def _bisect(fn, lo, hi, tol=ROOT_TOL, max_iter=200):
    """Vectorised bisection of an increasing ``fn`` with ``fn(lo) < 0 < fn(hi)``.

    Stops per entry once ``|fn(mid)| < tol``; exact zeros at either bracket
    end are returned as is, preferring the end closer to 0.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    flo, fhi = fn(lo), fn(hi)
    root = np.full(lo.shape, np.nan)
    zlo, zhi = flo == 0, fhi == 0
    both = zlo & zhi
    root[both] = np.where(np.abs(lo[both]) <= np.abs(hi[both]), lo[both], hi[both])
    root[zlo & ~zhi] = lo[zlo & ~zhi]
    root[zhi & ~zlo] = hi[zhi & ~zlo]
    active = np.isnan(root)
    for _ in range(max_iter):
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        done = active & ((np.abs(fm) < tol) | (hi - lo <= 4 * np.spacing(np.abs(mid) + 1.0)))
        root[done] = mid[done]
        active &= ~done
        go_right = active & (fm < 0)
        go_left = active & (fm > 0)
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_left, mid, hi)
    root[active] = 0.5 * (lo + hi)[active]
    return root


def _bracket(samples, y, label, t):
    """Grid cell containing the unique sign change of each row of ``samples``."""
    n_t = samples.shape[0]
    lo = np.empty(n_t)
    hi = np.empty(n_t)
    for k in range(n_t):
        row = samples[k]
        if not np.all(np.diff(row) > 0):
            j = int(np.argmin(np.diff(row)))
            raise AssumptionError(
                f"{label}: defining function not strictly increasing at t={t[k]:.6g}, "
                f"y={y[j]:.6g} (increasing-generator assumption on a(t), b(t))"
            )
        if not (row[0] < 0 < row[-1]):
            raise AssumptionError(f"{label}: no sign change on the band at t={t[k]:.6g}")
        j = int(np.searchsorted(row, 0.0))
        lo[k], hi[k] = y[max(j - 1, 0)], y[j]
    return lo, hi


def compute_ab_curves(spec: ProblemSpec, grid: Grid, root_tol: float = ROOT_TOL,
                      margin: float = 0.1) -> CurvePair:
    """Roots ``a(t)``, ``b(t)`` of ``L(-f1)+e^{ct}h`` and ``L f2 + e^{ct}h`` per time level."""
    t = grid.t
    y = grid.y
    tt, yy = grid.mesh()
    curves = {}
    for label, gen in (("a", spec.lower_generator), ("b", spec.upper_generator)):
        lo, hi = _bracket(gen(tt, yy), y, label, t)
        root = _bisect(lambda v: gen(t, v), lo, hi, root_tol)
        res = gen(t, root)
        if np.any(np.abs(res) >= root_tol):
            k = int(np.argmax(np.abs(res)))
            raise AssumptionError(f"{label}: bisection residual {res[k]:.3g} at t={t[k]:.6g}")
        step = 1e-6 * (grid.hi - grid.lo)
        if np.any(gen(t, root + step) <= gen(t, root - step)):
            raise AssumptionError(f"{label}: defining function not increasing at the root")
        curves[label] = (root, res)
    a, ra = curves["a"]
    b, rb = curves["b"]
    if np.any(a >= 0) or np.any(b <= 0):
        raise AssumptionError("need a(t) < 0 < b(t) at every time level")
    width = grid.hi - grid.lo
    if a.min() - grid.lo < margin * width or grid.hi - b.max() < margin * width:
        raise AssumptionError(
            f"band [{grid.lo}, {grid.hi}] must contain a(t), b(t) with margin "
            f">= {margin:.0%} of its width; got a in [{a.min():.4g}, {a.max():.4g}], "
            f"b in [{b.min():.4g}, {b.max():.4g}]"
        )
    return CurvePair(t, a, b, ra, rb)


# -- terminal envelope ------------------------------------------------------------------


@dataclass
class TransformedTerminal:
    y: np.ndarray
    g: np.ndarray
    g_tilde: np.ndarray
    G: np.ndarray
    G_tilde: np.ndarray
    A: float
    B: float

    def G_at(self, x):
        return np.interp(x, self.y, self.G)

    def G_tilde_at(self, x):
        return np.interp(x, self.y, self.G_tilde)


def _bisect_switch(pred, lo, hi, max_iter=200):
    """Point where ``pred`` switches from False (at ``lo``) to True (at ``hi``)."""
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def terminal_transform(spec: ProblemSpec, grid: Grid) -> TransformedTerminal:
    """Crossover points ``A < 0 < B`` and the envelope ``G~`` of the terminal cost.

    ``A`` separates ``g <= -f1(T, .)`` (left) from ``g > -f1(T, .)``; ``B``
    separates ``g < f2(T, .)`` from ``g >= f2(T, .)``.  This also covers
    terminals that touch an obstacle on a whole half-line.
    """
    T = spec.T
    y = grid.y
    g_fn, f1, f2 = spec.fn("g"), spec.fn("f1"), spec.fn("f2")
    g = g_fn(T, y)
    low = -f1(T, y)
    up = f2(T, y)

    def q(v):
        return float(g_fn(T, v) + f1(T, v))

    def r(v):
        return float(g_fn(T, v) - f2(T, v))

    above = g - low > 0
    below = g - up < 0
    if above[0] or not above.any():
        raise AssumptionError("lower crossover A not found on the band: need g <= -f1(T,.) at the left edge")
    if below[-1] or not below.any():
        raise AssumptionError("upper crossover B not found on the band: need g >= f2(T,.) at the right edge")
    ia = int(np.argmax(above))
    ib = int(np.flatnonzero(below)[-1])
    A = _bisect_switch(lambda v: q(v) > 0, y[ia - 1], y[ia])
    B = _bisect_switch(lambda v: r(v) >= 0, y[ib], y[ib + 1])
    if not A < 0 < B:
        raise AssumptionError(f"relaxed terminal assumption needs A < 0 < B, got A={A:.6g}, B={B:.6g}")
    inside = (y >= A) & (y <= B)
    if np.any((g[inside] < low[inside]) | (g[inside] > up[inside])):
        j = int(np.flatnonzero(inside & ((g < low) | (g > up)))[0])
        raise AssumptionError(
            f"terminal sandwich -f1(T,y) <= g(y) <= f2(T,y) violated inside [A, B] at y={y[j]:.6g} "
            "(relaxed terminal assumption)"
        )
    g_tilde = np.where(y < A, low, np.where(y > B, up, g))
    scale = np.exp(-spec.c * T)
    G = integrate_from(scale * g, grid.dy, grid.origin)
    G_tilde = integrate_from(scale * g_tilde, grid.dy, grid.origin)
    G_tilde += G[grid.origin] - G_tilde[grid.origin]
    return TransformedTerminal(y, g, g_tilde, G, G_tilde, float(A), float(B))
