import math

import numpy as np
import pytest
from scipy.integrate import quad

from scl.config import MCConfig
from scl.model import p0
from scl.simulate import (
    INCONCLUSIVE,
    PASS,
    Policy,
    _normals_np,
    GAME_STREAM,
    evaluate_cost,
    mean_se,
    optimal_policy,
    perturbed_policy,
    run_policy,
    saddle_game_estimate,
    scheme_bias,
    simulate_reflected,
    simulate_uncontrolled,
    step_count,
    step_times,
    verify_optimality,
)


def _times(spec, dt, s=0.0):
    return step_times(s, spec.T, step_count(spec.T - s, dt))


# -- uncontrolled paths ---------------------------------------------------------------------


def test_martingale_mean_of_driftless_diffusion():
    n_paths, dt = 100_000, 1e-2
    paths = np.arange(n_paths, dtype=np.uint64)
    total = np.zeros(n_paths)
    for k in range(step_count(1.0, dt)):
        total += _normals_np(7, GAME_STREAM, paths, k)
    moves = math.sqrt(dt) * total
    assert abs(moves.mean()) < 3 * 1.0 / math.sqrt(n_paths)


def test_uncontrolled_path_uses_the_keyed_increments():
    spec = p0()
    dt = 1e-2
    path = simulate_uncontrolled(spec, 0.0, 0.0, dt, seed=7, path_index=3)
    z = np.array([_normals_np(7, GAME_STREAM, np.array([3], dtype=np.uint64), k)[0]
                  for k in range(path.states.size - 1)])
    expect = np.concatenate([[0.0], np.cumsum(math.sqrt(dt) * z)])
    np.testing.assert_allclose(path.states, expect, rtol=0, atol=1e-12)


def test_uncontrolled_replay_is_bitwise():
    spec = p0()
    a = simulate_uncontrolled(spec, 0.0, 0.3, 1e-3, seed=99, path_index=5)
    b = simulate_uncontrolled(spec, 0.0, 0.3, 1e-3, seed=99, path_index=5)
    assert a.states.tobytes() == b.states.tobytes()
    assert (a.payoff, a.dividend, a.stop_time) == (b.payoff, b.dividend, b.stop_time)
    assert a.stop_kind == "MATURITY" or a.stop_kind == "BAND_EXIT"


def test_tiny_noise_follows_the_drift_ode():
    spec = p0(c=0.5, d=0.2, sigma="1e-9")
    dt = 1e-3
    path = simulate_uncontrolled(spec, 0.0, 0.0, dt, seed=1)
    exact = 0.4 * np.exp(0.5 * path.times) - 0.4
    assert np.abs(path.states - exact).max() < 0.1 * dt


def test_stopped_path_respects_boundaries(p0_bundle):
    b = p0_bundle
    path = simulate_uncontrolled(b.spec, 0.0, 0.0, 1e-3, seed=3, boundaries=b.fb, path_index=0)
    assert 0.0 <= path.stop_time <= b.spec.T
    assert path.times[-1] == path.stop_time
    a, bb = b.fb.at(path.times[:-1])
    assert np.all((path.states[:-1] > a) & (path.states[:-1] < bb))


def test_start_outside_band_is_rejected():
    with pytest.raises(ValueError):
        simulate_uncontrolled(p0(), 0.0, 7.0, 1e-2, seed=1)


def test_dt_must_divide_the_horizon():
    with pytest.raises(ValueError):
        simulate_uncontrolled(p0(), 0.0, 0.0, 0.3, seed=1)


# -- game estimator -----------------------------------------------------------------------


def test_deep_contact_stops_at_once(p0_bundle):
    b = p0_bundle
    est = saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, -5.0, 1000, 1e-3, seed=1)
    assert est.se == 0.0
    assert est.mean == pytest.approx(-float(b.spec.fn("f1")(0.0, -5.0)), abs=0, rel=1e-15)
    assert est.stop_counts["SIGMA_HAT"] == 1000


def test_game_estimate_matches_pde(p0_bundle):
    b = p0_bundle
    dt = 4e-3
    est = saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, 0.0, 20_000, dt, seed=5)
    assert abs(est.error) <= 3 * est.se + scheme_bias(dt, b.grid.dy)
    assert abs(est.reference) < 1e-6


def test_immediate_stop_by_maximiser_is_worse_for_them(p0_bundle):
    b = p0_bundle
    dt = 4e-3
    opt = saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, 0.0, 5000, dt, seed=5)
    now = saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, 0.0, 5000, dt, seed=5,
                               p2_rule="immediate")
    assert now.mean <= opt.reference + 3 * now.se + 1e-12
    assert now.mean <= opt.mean + 3 * opt.se


def test_game_sandwich_for_fixed_minimiser_rule(p0_bundle):
    b = p0_bundle
    for p1 in ("optimal", "never"):
        opt = saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, 0.5, 4000, 1e-2, seed=8, p1_rule=p1)
        now = saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, 0.5, 4000, 1e-2, seed=8, p1_rule=p1,
                                   p2_rule="immediate")
        assert opt.mean >= now.mean - 3 * opt.se


def test_game_estimator_rejects_bad_arguments(p0_bundle):
    b = p0_bundle
    with pytest.raises(ValueError):
        saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, 0.0, 0, 1e-2, seed=1)
    with pytest.raises(ValueError):
        saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, 0.0, 10, 1e-2, seed=1, p1_rule="immediate")


def test_game_estimate_is_reproducible(p0_bundle):
    b = p0_bundle
    runs = [saddle_game_estimate(b.spec, b.surface, b.fb, 0.0, 0.2, 3000, 1e-2, seed=11)
            for _ in range(2)]
    assert (runs[0].mean, runs[0].se) == (runs[1].mean, runs[1].se)


# -- reflected paths ---------------------------------------------------------------------


def test_reflection_complementarity_and_minimal_decomposition(p0_bundle):
    b = p0_bundle
    for k in range(20):
        p = simulate_reflected(b.spec, b.fb, 0.0, 0.0, 1e-3, seed=2, path_index=k)
        assert np.sum((p.X - p.a) * p.dA1) == 0.0
        assert np.sum((p.b - p.X) * p.dA2) == 0.0
        assert not np.any((p.dA1 > 0) & (p.dA2 > 0))
        assert np.all(p.X >= p.a) and np.all(p.X <= p.b)
        assert np.all(p.X_pre[1:][p.dA1[1:] > 0] < p.a[1:][p.dA1[1:] > 0])
        assert np.all(p.X_pre[1:][p.dA2[1:] > 0] > p.b[1:][p.dA2[1:] > 0])
        assert np.all(np.diff(p.A1) >= 0) and np.all(np.diff(p.A2) >= 0)


def test_start_below_lower_boundary_jumps_onto_it(p0_bundle):
    b = p0_bundle
    p = simulate_reflected(b.spec, b.fb, 0.0, -3.0, 1e-2, seed=2)
    a0 = float(b.fb.at(0.0)[0])
    assert len(p.jumps) == 1
    assert p.jumps[0].kind == 1
    assert p.jumps[0].size == pytest.approx(a0 + 3.0)
    assert p.X[0] == a0


def test_zero_noise_keeps_the_state_still():
    spec = p0(sigma="1e-300")
    times = _times(spec, 1e-2)
    pol = Policy("flat", np.full(times.size, -1.0), np.full(times.size, 1.0))
    p = simulate_reflected(spec, pol, 0.0, -2.0, 1e-2, seed=4)
    assert np.all(p.X == -1.0)
    assert np.all(p.dA1 == 0.0) and np.all(p.dA2 == 0.0)
    assert p.A1[-1] == pytest.approx(1.0)


def test_terminal_jump_cost_on_jump_problem(jump_bundle):
    b = jump_bundle
    A, B = b.tt.A, b.tt.B
    for k in range(200):
        p = simulate_reflected(b.spec, b.fb, 0.0, 0.0, 1e-2, seed=6, terminal_policy="clamp_AB",
                               path_index=k, crossovers=(A, B))
        if p.terminal_jump is not None and p.terminal_jump.kind == 2:
            break
    else:
        pytest.fail("no path ended above B")
    xT = float(p.X[-1])
    assert p.terminal_jump.x_plus == B
    assert p.terminal_jump.size == pytest.approx(xT - B)
    est = evaluate_cost([p], b.spec, b.grid, b.H, b.tt)
    f2 = b.spec.fn("f2")
    exact = quad(lambda u: float(f2(b.spec.T, u)), B, xT)[0]
    assert est.parts["jumps"] == pytest.approx(exact, rel=1e-6)


# -- costs ------------------------------------------------------------------------------------


def test_evaluate_cost_agrees_with_batched_runner(p0_bundle):
    b = p0_bundle
    dt = 1e-2
    pol = optimal_policy(b.fb, _times(b.spec, dt))
    paths = [simulate_reflected(b.spec, pol, 0.0, 0.0, dt, seed=9, path_index=k) for k in range(30)]
    one = evaluate_cost(paths, b.spec, b.grid, b.H, b.tt)
    batch = run_policy(b.spec, b.grid, b.H, b.tt, pol, 0.0, 0.0, 30, dt, seed=9)
    np.testing.assert_allclose(one.costs, batch.costs, rtol=1e-12, atol=1e-12)


def test_zero_control_path_pays_holding_and_terminal(p0_bundle):
    b = p0_bundle
    dt = 1e-2
    times = _times(b.spec, dt)
    pol = Policy("wide", np.full(times.size, -5.9), np.full(times.size, 5.9))
    p = simulate_reflected(b.spec, pol, 0.0, 0.0, dt, seed=1)
    assert p.A1[-1] == 0.0 and p.A2[-1] == 0.0
    est = evaluate_cost([p], b.spec, b.grid, b.H, b.tt)
    assert est.parts["control_lower"] == est.parts["control_upper"] == est.parts["jumps"] == 0.0
    assert est.mean == pytest.approx(est.parts["holding"] + est.parts["terminal"], abs=1e-14)


def test_pure_jump_path_pays_the_jump_integral(p0_bundle):
    b = p0_bundle
    spec = b.spec.replace(sigma="1e-300")
    dt = 1e-2
    times = _times(spec, dt)
    pol = Policy("flat", np.full(times.size, -1.0), np.full(times.size, 1.0))
    p = simulate_reflected(spec, pol, 0.0, -3.0, dt, seed=1)
    est = evaluate_cost([p], spec, b.grid, b.H, b.tt)
    exact = 4.0 - math.log(math.cosh(2.0))  # int_{-3}^{-1} 2 + tanh(u + 1) du
    assert est.parts["jumps"] == pytest.approx(exact, rel=1e-4)
    assert est.parts["control_lower"] == est.parts["control_upper"] == 0.0


def test_standard_error_shrinks_by_root_two_when_paths_double(p0_bundle):
    b = p0_bundle
    dt = 1e-2
    pol = optimal_policy(b.fb, _times(b.spec, dt))
    small = run_policy(b.spec, b.grid, b.H, b.tt, pol, 0.0, 0.0, 4000, dt, seed=3)
    big = run_policy(b.spec, b.grid, b.H, b.tt, pol, 0.0, 0.0, 8000, dt, seed=3)
    ratio = small.se / big.se
    assert math.sqrt(2) * 0.8 < ratio < math.sqrt(2) * 1.2


def test_zero_shift_is_the_same_policy(p0_bundle):
    b = p0_bundle
    dt = 1e-2
    pol = optimal_policy(b.fb, _times(b.spec, dt))
    same = perturbed_policy(pol, "shift", 0.0)
    x = run_policy(b.spec, b.grid, b.H, b.tt, pol, 0.0, 0.0, 500, dt, seed=3)
    y = run_policy(b.spec, b.grid, b.H, b.tt, same, 0.0, 0.0, 500, dt, seed=3)
    assert y.paired(x) == (0.0, 0.0)


def test_perturbation_that_empties_the_interval_is_rejected(p0_bundle):
    pol = optimal_policy(p0_bundle.fb, _times(p0_bundle.spec, 1e-2))
    with pytest.raises(ValueError):
        perturbed_policy(pol, "narrow", 5.0)
    with pytest.raises(ValueError):
        perturbed_policy(pol, "tilt", 0.1)


def test_mismatched_grid_is_rejected(p0_bundle, p0_coarse):
    b = p0_bundle
    with pytest.raises(ValueError):
        evaluate_cost([], b.spec, p0_coarse.grid, b.H, b.tt)


def test_mean_se_is_order_independent():
    v = np.random.default_rng(0).normal(size=10_001) * 1e8
    assert mean_se(v) == mean_se(v[::-1])


# -- verification -----------------------------------------------------------------------------


def test_verification_passes_on_moderate_run(p0_bundle):
    b = p0_bundle
    mc = MCConfig(n_paths=5000, dt=4e-3, seed=21)
    rep = verify_optimality(b.spec, b.surface, b.ws, b.fb, mc, terminal=b.tt)
    assert rep.passed, [(c.name, c.status, c.items) for c in rep.checks]
    assert {c.status for c in rep.checks} == {PASS}


def test_few_paths_are_inconclusive_not_failed(p0_bundle):
    b = p0_bundle
    mc = MCConfig(n_paths=10, dt=1e-2, seed=21)
    rep = verify_optimality(b.spec, b.surface, b.ws, b.fb, mc, terminal=b.tt)
    main = rep.checks[0]
    assert main.status == INCONCLUSIVE
    assert rep.first_failure is None
