import numpy as np
import pytest

from ergodic.techniques import diagnose, evolve
from ergodic.techniques.model import Field, GridSpec


@pytest.fixture(scope="module")
def vi_from_zero(lqg, coarse_grid, coarse_report):
    return evolve.run(lqg, coarse_grid, Field.constant(coarse_grid, 0.0), mode="vi", rho=coarse_report.rho,
                      T=30.0, snapshot_every=0.5, target=coarse_report)


def test_sup_error_on_compact(coarse_report):
    target = coarse_report.target()
    assert diagnose.sup_error_on_compact(target, coarse_report, 1.0) == 0.0
    assert diagnose.sup_error_on_compact(target + 0.3, coarse_report, 1.0) == pytest.approx(0.3)
    zero = Field.constant(coarse_report.grid, 0.0)
    small = diagnose.sup_error_on_compact(zero, coarse_report, 0.5)
    large = diagnose.sup_error_on_compact(zero, coarse_report, 2.0)
    assert small <= large


def test_sup_error_rejects_bad_probes(coarse_report):
    target = coarse_report.target()
    with pytest.raises(ValueError):
        diagnose.sup_error_on_compact(target, coarse_report, 5.0)
    with pytest.raises(ValueError):
        diagnose.sup_error_on_compact(Field.constant(GridSpec.box(1.0, 0.1), 0.0), coarse_report, 0.5)


def test_oscillation():
    grid = GridSpec.box(2.0, 0.5)
    square = Field.from_function(grid, lambda x: x[:, 0] ** 2)
    assert diagnose.oscillation(Field.constant(grid, 7.0), ((-1.0,), (1.0,))) == 0.0
    assert diagnose.oscillation(square, ((-1.0,), (1.0,))) == 1.0
    assert diagnose.oscillation(square + 5.0, ((-1.0,), (1.0,))) == 1.0
    with pytest.raises(ValueError):
        diagnose.oscillation(square, ((0.1,), (0.2,)))


def test_b0_box_of_the_quadratic_cost(lqg, coarse_grid):
    lower, upper = diagnose.b0_box(lqg, coarse_grid, 1.05)
    assert lower[0] == pytest.approx(-1.1)
    assert upper[0] == pytest.approx(1.1)
    # empty level set falls back to the anchor cell
    lower, upper = diagnose.b0_box(lqg, coarse_grid, -1.0)
    assert (lower[0], upper[0]) == pytest.approx((-0.1, 0.1))


def test_record_and_frame(coarse_report):
    grid = coarse_report.grid
    phi = coarse_report.target()
    row = diagnose.record(1.5, phi, coarse_report, b0=((-1.0,), (1.0,)), radius=1.0, mode="vi")
    assert row.time == 1.5
    assert row.anchor_value == pytest.approx(coarse_report.rho)
    assert row.sup_error_on_compact == 0.0
    assert row.mu_average is not None
    bare = diagnose.record(0.0, Field.constant(grid, 0.0))
    assert bare.oscillation_B0 is None and bare.sup_error_on_compact is None
    frame = diagnose.diagnostics_frame([row, bare])
    assert list(frame.columns) == ["time", "anchor_value", "sup_error_on_compact", "oscillation_B0",
                                   "weighted_norm_vs_Vstar", "mu_average"]
    assert len(frame) == 2


def test_stationary_anchor_has_no_drift(make_trajectory):
    grid = GridSpec.box(1.0, 0.5)
    traj = make_trajectory(grid, np.full(101, 3.0), rho=1.0)
    report = diagnose.anchor_drift_bounds(traj, 1.0, 0.0)
    assert len(report) == 0
    assert report.finite and report.anchor_min == report.anchor_max == 3.0


def test_anchor_spike_breaks_the_bound(make_trajectory):
    grid = GridSpec.box(1.0, 0.5)
    anchor = np.zeros(101)
    anchor[40] = 10.0
    traj = make_trajectory(grid, anchor, rho=0.0)
    report = diagnose.anchor_drift_bounds(traj, 0.0, 0.0)
    assert len(report) == 60
    assert all(early == pytest.approx(4.0) for early, _, _ in report.violations)
    assert report.violations[0][1] == pytest.approx(4.1)
    assert report.violations[0][2] == pytest.approx(10.0 - diagnose.default_eps(0.1))
    # a large enough oscillation allowance absorbs the spike
    assert len(diagnose.anchor_drift_bounds(traj, 0.0, 10.0)) == 0


def test_relative_runs_only_report_the_band(make_trajectory):
    grid = GridSpec.box(1.0, 0.5)
    anchor = np.zeros(101)
    anchor[40] = 10.0
    report = diagnose.anchor_drift_bounds(make_trajectory(grid, anchor, mode="rvi"), 0.0, 0.0)
    assert len(report) == 0
    assert (report.anchor_min, report.anchor_max) == (0.0, 10.0)
    anchor[50] = np.inf
    assert not diagnose.anchor_drift_bounds(make_trajectory(grid, anchor, mode="rvi"), 0.0, 0.0).finite


def test_min_drift_needs_value_iteration(make_trajectory):
    grid = GridSpec.box(1.0, 0.5)
    with pytest.raises(ValueError):
        diagnose.min_drift_bounds(make_trajectory(grid, np.zeros(11), mode="rvi"), 1.0)


def test_value_iteration_from_zero_is_well_behaved(lqg, coarse_grid, coarse_report, vi_from_zero):
    traj = vi_from_zero
    rho = coarse_report.rho
    b0 = diagnose.b0_box(lqg, coarse_grid, rho)
    osc0 = diagnose.oscillation(traj.initial, b0)
    assert osc0 == 0.0
    assert len(diagnose.anchor_drift_bounds(traj, rho, osc0, stride=3)) == 0
    assert len(diagnose.min_drift_bounds(traj, rho)) == 0
    assert diagnose.weighted_norm_violations(traj, coarse_report.V, rho) == []
    _, averages, nonincreasing = diagnose.mu_average_series(traj, coarse_report.mu)
    assert nonincreasing
    assert averages[0] == 0.0 and averages[-1] < 0.0


def test_value_iteration_recovers_value_differences(coarse_report, vi_from_zero):
    times, diffs = diagnose.value_difference(vi_from_zero, [1.0], [0.0])
    expected = coarse_report.V.at([1.0]) - coarse_report.V.at([0.0])
    assert times[-1] == pytest.approx(30.0)
    assert diffs[-1] == pytest.approx(expected, abs=1e-3)
    _, slopes = diagnose.asymptotic_slope(vi_from_zero, 1.0)
    assert slopes[-1] <= 0.05
    assert len(vi_from_zero.diagnostics) == len(vi_from_zero.times)
    assert vi_from_zero.diagnostics[-1].sup_error_on_compact is not None


def test_weighted_norm_bound_uses_the_horizon(make_trajectory):
    grid = GridSpec.box(1.0, 0.5)
    V = np.ones(grid.size)
    snapshots = np.array([np.zeros(grid.size), np.full(grid.size, 5.0), np.full(grid.size, 12.0)])
    traj = make_trajectory(grid, np.zeros(101), dt=0.1, steps=[0, 10, 100], snapshots=snapshots, rho=1.0)
    # 5 > 1 + rho t at t = 1, but the bound is 1 + rho T = 11 at every sampled time
    violations = diagnose.weighted_norm_violations(traj, V, 1.0)
    assert violations == [(10.0, 12.0, 11.0)]
    assert diagnose.weighted_norm_violations(traj, V * 2.0, 1.0) == []


def test_anchor_drift_from_a_non_flat_start(lqg, coarse_grid, coarse_report):
    rho = coarse_report.rho
    phi0 = evolve.initial_condition("quadratic:1", coarse_grid)
    traj = evolve.run(lqg, coarse_grid, phi0, mode="vi", rho=rho, T=10.0, snapshot_every=0.5)
    osc0 = diagnose.oscillation(phi0, diagnose.b0_box(lqg, coarse_grid, rho))
    assert osc0 > 0.0
    assert len(diagnose.anchor_drift_bounds(traj, rho, osc0)) == 0
    assert len(diagnose.min_drift_bounds(traj, rho)) == 0


def test_relative_anchor_band_on_the_default_grid(lqg, coarse_grid, coarse_report):
    rvi = evolve.run(lqg, coarse_grid, Field.constant(coarse_grid, 0.0), mode="rvi", T=30.0)
    band = diagnose.anchor_drift_bounds(rvi, coarse_report.rho, 0.0)
    assert band.finite
    assert band.anchor_max - band.anchor_min <= 5.0
    assert rvi.anchor_series[-1] == pytest.approx(coarse_report.rho, abs=1e-3)
