from dataclasses import replace

import numpy as np
import pytest

from ergodic.techniques import evolve, montecarlo
from ergodic.techniques.model import Field, GridSpec
from ergodic.techniques.montecarlo import FeedbackPolicy, GridPolicy, SimConfig, TimedPolicy


def _ou_policy():
    return FeedbackPolicy(lambda x: -x)


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt_sim=0.0)
    with pytest.raises(ValueError):
        SimConfig(n_paths=0)
    config = SimConfig(x0=1.0, T=1.0, dt_sim=0.3)
    assert config.x0 == (1.0,)
    assert config.n_steps == 4
    assert config.dt == pytest.approx(0.25)


def test_same_seed_same_paths(lqg):
    config = SimConfig(x0=0.5, T=2.0, dt_sim=0.01, n_paths=40, seed=123)
    first = montecarlo.terminal_expectation(lqg, _ou_policy(), lambda x: x[:, 0], config)
    second = montecarlo.terminal_expectation(lqg, _ou_policy(), lambda x: x[:, 0], config)
    assert np.array_equal(first.samples, second.samples)
    assert first.to_dict() == second.to_dict()
    other = montecarlo.terminal_expectation(lqg, _ou_policy(), lambda x: x[:, 0],
                                            SimConfig(x0=0.5, T=2.0, dt_sim=0.01, n_paths=40, seed=124))
    assert not np.array_equal(first.samples, other.samples)


def test_paths_do_not_depend_on_blocking(lqg):
    config = SimConfig(x0=0.5, T=3.0, dt_sim=0.01, n_paths=30, seed=9)
    whole = montecarlo.ergodic_cost_estimate(lqg, _ou_policy(), config)
    blocked = montecarlo.ergodic_cost_estimate(lqg, _ou_policy(), replace(config, block=7))
    assert np.array_equal(whole.samples, blocked.samples)


def test_single_path_is_deterministic(lqg):
    config = SimConfig(x0=0.0, T=1.0, dt_sim=0.01, seed=4)
    a = montecarlo.simulate_path(lqg, _ou_policy(), config)
    b = montecarlo.simulate_path(lqg, _ou_policy(), config)
    assert a.states.shape == (101, 1)
    assert a.controls.shape == (100, 1)
    assert np.array_equal(a.states, b.states)
    assert a.times[-1] == pytest.approx(1.0)


def test_zero_noise_recovers_the_ode(lqg):
    config = SimConfig(x0=1.0, T=1.0, dt_sim=1e-4, noise_scale=0.0)
    path = montecarlo.simulate_path(lqg, _ou_policy(), config)
    assert path.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-3)


def test_driftless_increments_are_centred(lqg):
    config = SimConfig(x0=1.0, T=1.0, dt_sim=0.01, n_paths=10000, seed=2024)
    estimate = montecarlo.terminal_expectation(lqg, FeedbackPolicy(lambda x: np.zeros_like(x)),
                                               lambda x: x[:, 0] - 1.0, config)
    assert estimate.std_error == pytest.approx(0.01, rel=0.05)
    assert abs(estimate.mean) <= 4 * estimate.std_error


def test_constant_cost_is_estimated_exactly(constant_cost):
    config = SimConfig(x0=0.0, T=5.0, dt_sim=0.01, n_paths=20, seed=1, burn_in=1.0)
    estimate = montecarlo.ergodic_cost_estimate(constant_cost(2.0), FeedbackPolicy(lambda x: -x), config)
    assert estimate.mean == 2.0
    assert estimate.std_error == 0.0


def test_ornstein_uhlenbeck_ergodic_cost(lqg):
    config = SimConfig(x0=0.0, T=50.0, dt_sim=0.01, n_paths=2000, seed=77, burn_in=5.0)
    estimate = montecarlo.ergodic_cost_estimate(lqg, _ou_policy(), config)
    assert estimate.clipped_paths == 0 and not estimate.flagged
    assert abs(estimate.mean - 1.0) <= 3 * estimate.std_error + 0.02


def test_grid_policy_matches_the_stationary_solve(lqg, coarse_grid, coarse_report):
    config = SimConfig(x0=0.0, T=40.0, dt_sim=0.01, n_paths=1000, seed=5, burn_in=5.0)
    policy = GridPolicy.from_report(lqg, coarse_report)
    estimate = montecarlo.ergodic_cost_estimate(lqg, policy, config)
    # first-order upwind bias of the grid rho is about h * E|x|
    assert abs(estimate.mean - coarse_report.rho) <= 3 * estimate.std_error + coarse_grid.spacing[0]
    assert estimate.clipped_paths < 0.05 * estimate.n_paths


def test_grid_policy_from_feedback(lqg, coarse_grid):
    policy = GridPolicy.from_feedback(lqg, coarse_grid, lambda x: -x)
    assert policy(np.array([[1.0], [-2.0]]))[:, 0] == pytest.approx([-1.0, 2.0])


def test_burn_in_must_be_shorter_than_the_horizon(lqg):
    with pytest.raises(ValueError):
        montecarlo.ergodic_cost_estimate(lqg, _ou_policy(), SimConfig(T=1.0, burn_in=2.0))


def test_clipping_is_counted_and_flagged(lqg):
    grid = GridSpec.box(1.0, 0.25)
    push = GridPolicy(grid, np.full(grid.size, 4.0))
    config = SimConfig(x0=0.0, T=2.0, dt_sim=0.01, n_paths=50, seed=3)
    estimate = montecarlo.terminal_expectation(lqg, push, lambda x: x[:, 0], config)
    # drift 4 reaches the wall at t = 0.25; only a rare noise path avoids it
    assert estimate.clipped_paths >= 45
    assert estimate.flagged
    assert estimate.mean <= 1.0


def test_finite_horizon_edge_cases(lqg, constant_cost, coarse_grid):
    phi0 = Field.from_function(coarse_grid, lambda x: 3.0 + x[:, 0])
    config = SimConfig(n_paths=10, seed=0)
    at_zero = montecarlo.finite_horizon_value(lqg, _ou_policy(), phi0, (0.5,), 0.0, config, rho=1.0)
    assert at_zero.mean == pytest.approx(3.5)
    assert at_zero.std_error == 0.0
    zero = Field.constant(coarse_grid, 0.0)
    flat = montecarlo.finite_horizon_value(constant_cost(1.5), _ou_policy(), zero, (0.0,), 2.0,
                                           SimConfig(n_paths=10, seed=0, dt_sim=0.01), rho=1.5)
    assert flat.mean == pytest.approx(0.0, abs=1e-9)


def _vi_run(lqg, grid, report, T, policy_every=0.1):
    return evolve.run(lqg, grid, Field.constant(grid, 0.0), mode="vi", rho=report.rho, T=T,
                      snapshot_every=0.5, policy_every=policy_every)


def test_timed_policy_runs_backward(lqg, coarse_grid, coarse_report):
    traj = _vi_run(lqg, coarse_grid, coarse_report, T=1.0)
    timed = TimedPolicy.from_trajectory(lqg, traj)
    x = coarse_grid.points
    start = timed(x, 0.0)
    end = timed(x, 1.0)
    assert np.array_equal(start[:, 0], lqg.controls.values[traj.policies[-1], 0])
    assert np.array_equal(end[:, 0], lqg.controls.values[traj.policies[0], 0])


def test_sparse_policy_snapshots_are_rejected(lqg, coarse_grid, coarse_report):
    traj = _vi_run(lqg, coarse_grid, coarse_report, T=1.0, policy_every=0.5)
    timed = TimedPolicy.from_trajectory(lqg, traj)
    with pytest.raises(ValueError, match="apart"):
        montecarlo.finite_horizon_value(lqg, timed, Field.constant(coarse_grid, 0.0), (1.0,), 1.0,
                                        SimConfig(n_paths=5, dt_sim=0.01), rho=coarse_report.rho)


def test_finite_horizon_value_matches_the_grid(lqg, coarse_grid, coarse_report):
    T = 2.0
    traj = _vi_run(lqg, coarse_grid, coarse_report, T=T)
    timed = TimedPolicy.from_trajectory(lqg, traj)
    estimate = montecarlo.finite_horizon_value(lqg, timed, Field.constant(coarse_grid, 0.0), (1.0,), T,
                                               SimConfig(n_paths=2000, dt_sim=0.01, seed=8), rho=coarse_report.rho)
    grid_value = traj.snapshot_at(T).at([1.0])
    # grid rho carries an O(h) bias that the running cost integral accumulates over [0, T]
    slack = coarse_grid.spacing[0] * (1.0 + T)
    assert abs(estimate.mean - grid_value) <= 3 * estimate.std_error + slack


def test_bound_sandwich(lqg, coarse_grid, coarse_report):
    T = 2.0
    traj = _vi_run(lqg, coarse_grid, coarse_report, T=T)
    sandwich = montecarlo.bound_sandwich(lqg, coarse_report, traj, Field.constant(coarse_grid, 0.0), (1.0,), T,
                                         SimConfig(n_paths=1000, dt_sim=0.01, seed=12),
                                         slack=coarse_grid.spacing[0])
    assert sandwich.holds
    summary = sandwich.to_dict()
    assert summary["holds"] and summary["lower"]["n_paths"] == 1000


def test_stationary_expectation_of_the_value(lqg, coarse_grid, coarse_report):
    policy = GridPolicy.from_report(lqg, coarse_report)
    config = SimConfig(x0=2.0, T=8.0, dt_sim=0.01, n_paths=2000, seed=21)
    estimate = montecarlo.terminal_expectation(lqg, policy, coarse_report.V, config)
    assert abs(estimate.mean - coarse_report.mu_V) <= 3 * estimate.std_error + coarse_grid.spacing[0]


@pytest.mark.slow
def test_ergodic_cost_acceptance():
    from ergodic.techniques.model import preset
    from ergodic.techniques.stationary import policy_iteration

    problem = preset("lqg1d", n_controls=81)
    report = policy_iteration(problem, GridSpec.box(4.0, 0.02))
    config = SimConfig(x0=0.0, T=200.0, dt_sim=0.01, n_paths=10000, seed=2, burn_in=20.0)
    estimate = montecarlo.ergodic_cost_estimate(problem, GridPolicy.from_report(problem, report), config)
    assert estimate.std_error <= 0.02
    assert abs(estimate.mean - report.rho) <= 3 * estimate.std_error + 0.02


@pytest.mark.slow
def test_finite_horizon_acceptance():
    from ergodic.techniques.model import preset
    from ergodic.techniques.stationary import policy_iteration

    problem = preset("lqg1d", n_controls=81)
    grid = GridSpec.box(4.0, 0.02)
    report = policy_iteration(problem, grid)
    T = 10.0
    traj = evolve.run(problem, grid, Field.constant(grid, 0.0), mode="vi", rho=report.rho, T=T,
                      snapshot_every=1.0, policy_every=0.1)
    estimate = montecarlo.finite_horizon_value(problem, TimedPolicy.from_trajectory(problem, traj),
                                               Field.constant(grid, 0.0), (1.0,), T,
                                               SimConfig(n_paths=10000, dt_sim=0.01, seed=3), rho=report.rho)
    # the upwind bias of rho accumulates linearly in T
    slack = 0.05 + 2.0 * abs(report.rho - 1.0) * T
    assert abs(estimate.mean - traj.final.at([1.0])) <= 3 * estimate.std_error + slack


def test_bound_sandwich_needs_a_snapshot_at_t(lqg, coarse_grid, coarse_report):
    traj = _vi_run(lqg, coarse_grid, coarse_report, T=1.0)
    with pytest.raises(ValueError, match="no snapshot"):
        montecarlo.bound_sandwich(lqg, coarse_report, traj, Field.constant(coarse_grid, 0.0), (1.0,), 0.3,
                                  SimConfig(n_paths=5, dt_sim=0.01))
