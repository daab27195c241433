import math

import numpy as np
import pytest

from scl.errors import AssumptionError
from scl.grid import integrate_from
from scl.model import compute_ab_curves, p0, p0_jump, terminal_transform, validate_problem

P0_A = -0.38350060846656564  # root of L(-f1) + h on P0, the same at every t


def test_p0_passes_every_check():
    spec = p0()
    rep = validate_problem(spec, spec.grid(51, 121))
    assert rep.passed, rep.summary()


def test_negative_cost_fails_sign_check_everywhere():
    spec = p0(f1="-1")
    grid = spec.grid(11, 41)
    chk = validate_problem(spec, grid)["f2>0>-f1"]
    assert not chk.passed and chk.violations == chk.total == grid.nt * grid.ny


def test_decreasing_running_payoff_fails_everywhere():
    spec = p0(h="-y")
    grid = spec.grid(11, 41)
    chk = validate_problem(spec, grid)["h strictly increasing"]
    assert not chk.passed and chk.violations == chk.total == grid.nt * (grid.ny - 1)


def test_non_finite_values_are_named():
    spec = p0(h="y / (y - 0.5)")
    rep = validate_problem(spec, spec.grid(3, 25))
    assert not rep.passed
    assert rep.failures()[0].name == "finite:h"


def test_terminal_outside_obstacles_needs_relaxed_mode():
    spec = p0_jump()
    grid = spec.grid(11, 121)
    assert not validate_problem(spec, grid).passed
    assert validate_problem(spec, grid, general_terminal=True).passed


def test_generators_at_origin_have_closed_forms():
    spec = p0()
    sech2 = 1 / math.cosh(1.0) ** 2
    assert spec.lower_generator(0.3, 0.0) == pytest.approx(math.tanh(1) * sech2, rel=1e-14)
    assert spec.upper_generator(0.3, 0.0) == pytest.approx(-math.tanh(1) * sech2, rel=1e-14)


def test_p0_curves():
    spec = p0()
    grid = spec.grid(21, 241)
    c = compute_ab_curves(spec, grid)
    assert np.all(c.a < 0) and np.all(c.b > 0)
    np.testing.assert_allclose(c.a, -c.b, atol=2e-10)
    np.testing.assert_allclose(c.a, P0_A, atol=1e-9)
    assert np.all(np.abs(c.residual_a) < 1e-10) and np.all(np.abs(c.residual_b) < 1e-10)


def test_generator_signs_around_the_curves():
    spec = p0()
    grid = spec.grid(11, 241)
    c = compute_ab_curves(spec, grid)
    tt, yy = grid.mesh()
    lo = spec.lower_generator(tt, yy)
    up = spec.upper_generator(tt, yy)
    a, b = c.a[:, None], c.b[:, None]
    assert np.all(lo[yy < a] < 0) and np.all(lo[yy > a] > 0)
    assert np.all(up[yy < b] < 0) and np.all(up[yy > b] > 0)


def test_curves_stable_under_refinement():
    spec = p0()
    g = spec.grid(11, 121)
    c1 = compute_ab_curves(spec, g)
    c2 = compute_ab_curves(spec, g.refine(2, time_factor=1))
    assert np.max(np.abs(c1.a - c2.a)) < 2e-10 + g.dy
    assert np.max(np.abs(c1.b - c2.b)) < 2e-10 + g.dy


def test_narrow_band_is_rejected():
    spec = p0(band_lo=-0.45, band_hi=0.45)
    with pytest.raises(AssumptionError, match="margin"):
        compute_ab_curves(spec, spec.grid(5, 19))


def test_envelope_of_a_sandwiched_terminal_is_itself():
    spec = p0()
    grid = spec.grid(3, 241)
    tt = terminal_transform(spec, grid)
    np.testing.assert_array_equal(tt.g_tilde, tt.g)
    np.testing.assert_array_equal(tt.G_tilde, tt.G)


def test_p0_jump_crossovers_and_envelope():
    spec = p0_jump()
    grid = spec.grid(3, 241)
    tt = terminal_transform(spec, grid)
    # 2y = -(2 + tanh(y + 1)) and 2y = 2 - tanh(y - 1) are solved by y = -1 and y = 1
    assert tt.A == pytest.approx(-1.0, abs=1e-12) and tt.B == pytest.approx(1.0, abs=1e-12)
    y = grid.y
    f1 = spec.fn("f1")(1.0, y)
    f2 = spec.fn("f2")(1.0, y)
    np.testing.assert_array_equal(tt.g_tilde[y < -1], -f1[y < -1])
    np.testing.assert_array_equal(tt.g_tilde[y > 1], f2[y > 1])
    inside = (y >= tt.A) & (y <= tt.B)
    np.testing.assert_array_equal(tt.G_tilde[inside], tt.G[inside])
    assert np.all(tt.G_tilde <= tt.G)
    far = (y < tt.A - grid.dy) | (y > tt.B + grid.dy)
    assert np.all(tt.G_tilde[far] < tt.G[far])


def test_envelope_matches_brute_force_minimisation():
    """G~(x) = min over a terminal move x -> z of G(z) plus the cost of the move."""
    spec = p0_jump()
    grid = spec.grid(3, 401)
    tt = terminal_transform(spec, grid)
    y = grid.y
    F1 = integrate_from(spec.fn("f1")(1.0, y), grid.dy, grid.origin)
    F2 = integrate_from(spec.fn("f2")(1.0, y), grid.dy, grid.origin)
    G = tt.G
    up = G[None, :] + F1[None, :] - F1[:, None]      # move x (row) up to z (column)
    down = G[None, :] + F2[:, None] - F2[None, :]    # move x down to z
    z_above = y[None, :] >= y[:, None]
    brute = np.minimum(np.where(z_above, up, np.inf).min(axis=1),
                       np.where(~z_above, down, np.inf).min(axis=1))
    np.testing.assert_allclose(tt.G_tilde, brute, atol=2 * grid.dy**2)


def test_envelope_derivative_is_continuous():
    spec = p0_jump()
    grid = spec.grid(3, 241)
    tt = terminal_transform(spec, grid)
    L = max(np.abs(np.gradient(f, grid.dy)).max()
            for f in (spec.fn("f1")(1.0, grid.y), spec.fn("f2")(1.0, grid.y), tt.g))
    assert np.all(np.abs(np.diff(tt.g_tilde)) <= L * grid.dy + 1e-12)


def test_missing_crossover_is_an_error():
    spec = p0(g="0.1 * y")
    with pytest.raises(AssumptionError, match="crossover"):
        terminal_transform(spec, spec.grid(3, 121))


def test_sandwich_violation_inside_crossovers_is_an_error():
    spec = p0_jump(g="2*y + 100 * y * exp(-50 * y^2)")
    with pytest.raises(AssumptionError):
        terminal_transform(spec, spec.grid(3, 1201))
