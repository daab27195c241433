import numpy as np
import pytest

from scl.errors import AssumptionError, SolverError
from scl.game import (CONTINUATION, LOWER_CONTACT, UPPER_CONTACT, SolverParams,
                      boundary_time_derivative_check, cone_monotonicity_probe,
                      extract_free_boundaries, pde_residual, smooth_fit_check, solve_dynkin_game,
                      solve_unconstrained)
from scl.model import compute_ab_curves, p0, terminal_transform


def test_terminal_level_is_the_terminal_function(p0_bundle):
    b = p0_bundle
    np.testing.assert_array_equal(b.surface.V[-1], b.spec.fn("g")(1.0, b.grid.y))


def test_sandwich_and_labels_are_exact(p0_bundle):
    s = p0_bundle.surface
    assert np.all(s.V >= s.lower) and np.all(s.V <= s.upper)
    assert np.array_equal(s.region == LOWER_CONTACT, s.V == s.lower)
    assert np.array_equal(s.region == UPPER_CONTACT, s.V == s.upper)


def test_lateral_nodes_are_contact(p0_bundle):
    reg = p0_bundle.surface.region
    assert np.all(reg[:, 0] == LOWER_CONTACT) and np.all(reg[:, -1] == UPPER_CONTACT)


def test_value_is_bounded_by_M(p0_bundle):
    assert np.abs(p0_bundle.surface.V).max() <= p0_bundle.spec.M


def test_antisymmetry(p0_bundle):
    V = p0_bundle.surface.V
    assert np.abs(V + V[:, ::-1]).max() < 1e-9
    fb = p0_bundle.fb
    assert np.abs(fb.a_tilde + fb.b_tilde).max() < 2 * p0_bundle.grid.dy


def test_residual_classification(p0_bundle):
    b = p0_bundle
    res = pde_residual(b.surface, b.spec)
    assert res.passed
    assert res.complementarity_gap < 1e-6
    # strict signs well inside the contact sets
    y = b.grid.y[None, :]
    deep_lo = (b.surface.region == LOWER_CONTACT) & (y < b.fb.a_tilde[:, None] - 0.5)
    deep_up = (b.surface.region == UPPER_CONTACT) & (y > b.fb.b_tilde[:, None] + 0.5)
    deep_lo[:, [0, -1]] = deep_up[:, [0, -1]] = False
    deep_lo[-1] = deep_up[-1] = False
    assert np.all(res.residual[deep_lo] < 0) and np.all(res.residual[deep_up] > 0)


def test_free_boundaries_sit_outside_the_curves(p0_bundle):
    b = p0_bundle
    dy = b.grid.dy
    assert np.all(b.fb.a_tilde <= b.curves.a + dy)
    assert np.all(b.fb.b_tilde >= b.curves.b - dy)
    assert b.fb.kink_report == []


def test_jump_terminal_boundaries_hit_crossovers(jump_bundle):
    b = jump_bundle
    assert abs(b.fb.a_tilde[-1] - b.tt.A) <= b.grid.dy
    assert abs(b.fb.b_tilde[-1] - b.tt.B) <= b.grid.dy
    np.testing.assert_array_equal(b.surface.V[-1], b.tt.g_tilde)


def test_unconstrained_oracle():
    """With far-away obstacles the projection never acts: PSOR equals a banded direct solve."""
    spec = p0(f1="100", f2="100", g="y", M=200.0)
    grid = spec.grid(41, 61)
    params = SolverParams(sweep_tol=1e-13)
    surf = solve_dynkin_game(spec, grid, params=params)
    assert np.all(surf.region[:, 1:-1] == CONTINUATION)
    direct = solve_unconstrained(spec, grid, grid.y.copy(), params)
    assert np.abs(surf.V - direct).max() < 1e-10


def test_raising_the_upper_obstacle_never_lowers_v():
    spec = p0()
    grid = spec.grid(51, 101)
    base = solve_dynkin_game(spec, grid).V
    raised = solve_dynkin_game(spec.replace(f2="2.5 - tanh(y - 1)", M=12.0), grid).V
    lowered = solve_dynkin_game(spec.replace(f1="2.5 + tanh(y + 1)", M=12.0), grid).V
    assert np.all(raised >= base - 1e-10)
    assert np.all(lowered <= base + 1e-10)


def test_refinement_differences_shrink():
    # root-mean-square over shared nodes; the max-node difference is set by where the free
    # boundary falls inside a cell and is not monotone
    spec = p0()
    sols = [solve_dynkin_game(spec, spec.grid(n, n)).V for n in (51, 101, 201, 401)]
    diffs = [np.sqrt(np.mean((fine[::2, ::2] - coarse) ** 2)) for coarse, fine in zip(sols, sols[1:])]
    assert diffs[0] > diffs[1] > diffs[2]
    assert max(np.abs(fine[::2, ::2] - coarse).max() for coarse, fine in zip(sols, sols[1:])) < 0.01


def test_theta_one_is_also_consistent():
    spec = p0()
    grid = spec.grid(201, 201)
    cn = solve_dynkin_game(spec, grid).V
    euler = solve_dynkin_game(spec, grid, params=SolverParams(theta=1.0)).V
    assert np.abs(cn - euler).max() < 0.02


def test_crossing_obstacles_are_rejected():
    spec = p0(f1="-3 + 0*y", M=10.0)
    with pytest.raises(AssumptionError, match="obstacles cross"):
        solve_dynkin_game(spec, spec.grid(5, 21))


def test_terminal_outside_obstacles_needs_the_clamped_terminal(jump_bundle):
    spec = jump_bundle.spec
    with pytest.raises(AssumptionError, match="general terminal"):
        solve_dynkin_game(spec, spec.grid(5, 41))


def test_non_convergence_names_the_level():
    spec = p0()
    with pytest.raises(SolverError, match="level"):
        solve_dynkin_game(spec, spec.grid(11, 101), params=SolverParams(max_sweeps=1, sweep_tol=1e-14))


@pytest.mark.parametrize("kw", [dict(theta=0.3), dict(omega=2.0), dict(sweep_tol=0.0)])
def test_solver_params_validated(kw):
    with pytest.raises(ValueError):
        SolverParams(**kw)


def test_smooth_fit_gap_is_first_order(p0_bundle, p0_coarse):
    fine = smooth_fit_check(p0_bundle.surface, p0_bundle.fb, p0_bundle.spec)
    coarse = smooth_fit_check(p0_coarse.surface, p0_coarse.fb, p0_coarse.spec)
    assert 1.5 <= coarse.max_gap / fine.max_gap <= 3.0
    np.testing.assert_allclose(fine.gap_a[:-1], fine.gap_b[:-1], atol=1e-8)


def test_time_derivative_bounds(p0_bundle):
    b = p0_bundle
    rep = boundary_time_derivative_check(b.surface, b.fb, b.spec)
    assert rep.passed and np.isfinite(rep.K_hat)


def test_time_derivative_vanishes_when_stationary():
    spec = p0(T=20.0)
    grid = spec.grid(401, 201)
    surf = solve_dynkin_game(spec, grid)
    fb = extract_free_boundaries(surf, spec)
    rep = boundary_time_derivative_check(surf, fb, spec)
    early = rep.t < 10.0
    assert np.abs(rep.quotient_a[early]).max() < 1e-6
    assert np.abs(rep.quotient_b[early]).max() < 1e-6


def test_cone_of_zero_aperture_changes_nothing(p0_bundle):
    b = p0_bundle
    rep = cone_monotonicity_probe(b.spec, b.grid, b.surface, b.fb, eta=0.0, n_paths=500, dt=1e-2,
                                  points=[("lower", 0.5, float(b.fb.a_tilde[100]) - 0.5),
                                          ("upper", 0.5, float(b.fb.b_tilde[100]) + 0.5)],
                                  curves=b.curves)
    assert all(s.difference == 0.0 and s.se == 0.0 for s in rep.samples)


def test_curves_and_boundaries_on_refined_terminal():
    spec = p0()
    grid = spec.grid(11, 401)
    tt = terminal_transform(spec, grid)
    surf = solve_dynkin_game(spec, grid, "g_tilde", transformed=tt)
    np.testing.assert_array_equal(surf.V[-1], tt.g)   # g~ = g for a sandwiched terminal
    fb = extract_free_boundaries(surf, spec, compute_ab_curves(spec, grid))
    assert fb.curves is not None
