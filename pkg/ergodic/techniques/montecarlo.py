#############################################
# MONTE CARLO CROSS-CHECKS                  #
#############################################

"""
Euler-Maruyama simulation of the controlled SDE

    X_{k+1} = X_k + b(X_k, u(X_k)) dt + sigma(X_k) sqrt(dt) xi_k

under grid Markov policies. Every path owns its own Philox stream keyed by
(seed, path index), so results do not depend on how paths are blocked.
Policies are callables policy(x (P, d), t) -> controls (P, m).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from ergodic import constants
from ergodic.exceptions import NumericalError
from ergodic.techniques.model import Field

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    x0: tuple = (0.0,)
    T: float = constants.MC_T
    dt_sim: float = constants.MC_DT
    n_paths: int = constants.MC_PATHS
    seed: int = 0
    burn_in: float = 0.0
    # 0 switches the noise off (deterministic limit)
    noise_scale: float = 1.0
    block: int = constants.MC_BLOCK

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive, got %r" % self.dt_sim)
        if int(self.n_paths) < 1:
            raise ValueError("n_paths must be at least 1, got %r" % self.n_paths)
        if self.T < 0 or self.burn_in < 0:
            raise ValueError("T and burn_in must be nonnegative")
        if self.block < 1:
            raise ValueError("block must be at least 1")
        object.__setattr__(self, "n_paths", int(self.n_paths))

    @property
    def n_steps(self):
        return int(np.ceil(self.T / self.dt_sim - 1e-9)) if self.T > 0 else 0

    @property
    def dt(self):
        """Step actually used: T split into n_steps equal steps."""
        return self.T / self.n_steps if self.n_steps else self.dt_sim


@dataclass(frozen=True, eq=False)
class EstimateReport:
    mean: float
    std_error: float
    n_paths: int
    clipped_paths: int = 0
    flagged: bool = False
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.std_error < 0 or not 0 <= self.clipped_paths <= self.n_paths:
            raise ValueError("inconsistent estimate report")

    @property
    def clip_fraction(self):
        return self.clipped_paths / self.n_paths

    def to_dict(self):
        return {
            "mean": self.mean,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "clipped_paths": self.clipped_paths,
            "clip_fraction": self.clip_fraction,
            "flagged": self.flagged,
        }


@dataclass(frozen=True, eq=False)
class SamplePath:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    clipped: bool


class FeedbackPolicy:
    """Continuous feedback law x -> u, used as is (no grid)."""

    grid = None

    def __init__(self, func: Callable, m=1):
        self.func = func
        self.m = m

    def __call__(self, x, t=0.0):
        return np.asarray(self.func(x), dtype=float).reshape(len(x), self.m)


class GridPolicy:
    """Stationary Markov policy: the control of the nearest grid node."""

    def __init__(self, grid, controls):
        controls = np.asarray(controls, dtype=float)
        if controls.ndim == 1:
            controls = controls[:, None]
        if controls.shape[0] != grid.size:
            raise ValueError("policy needs one control per node, got %d for %d nodes"
                             % (controls.shape[0], grid.size))
        self.grid = grid
        self.controls = controls

    @classmethod
    def from_indices(cls, problem, grid, indices):
        return cls(grid, problem.controls.values[np.asarray(indices, dtype=int)])

    @classmethod
    def from_report(cls, problem, report):
        return cls.from_indices(problem, report.grid, report.policy)

    @classmethod
    def from_feedback(cls, problem, grid, func):
        """Feedback law snapped to the nearest admissible control at each node."""
        from ergodic.techniques.stationary import nearest_control_policy
        return cls.from_indices(problem, grid, nearest_control_policy(problem, grid, func))

    def __call__(self, x, t=0.0):
        return self.controls[self.grid.locate(x)]


class TimedPolicy:
    """
    Time-reversed minimiser snapshots of a VI run: at simulation time s the control
    is the minimiser stored at VI time horizon - s (nearest stored time).
    """

    def __init__(self, problem, grid, times, indices, horizon):
        times = np.asarray(times, dtype=float)
        indices = np.asarray(indices, dtype=int)
        if times.ndim != 1 or len(times) == 0 or indices.shape != (len(times), grid.size):
            raise ValueError("need one policy snapshot (one index per node) per time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("policy snapshot times must be strictly increasing")
        if times[0] > 1e-12 or times[-1] < horizon - 1e-9:
            raise ValueError("policy snapshots cover [%g, %g], horizon is %g" % (times[0], times[-1], horizon))
        self.grid = grid
        self.times = times
        self.values = problem.controls.values[indices]
        self.horizon = float(horizon)

    @classmethod
    def from_trajectory(cls, problem, traj, horizon=None):
        if traj.policies is None:
            raise ValueError("trajectory was run without policy snapshots")
        horizon = traj.T if horizon is None else horizon
        return cls(problem, traj.grid, traj.policy_times, traj.policies, horizon)

    def check_resolution(self, dt_sim):
        inside = self.times[self.times <= self.horizon + 1e-9]
        gap = float(np.max(np.diff(inside))) if len(inside) > 1 else 0.0
        if gap > constants.MC_MAX_SNAPSHOT_GAP * dt_sim * (1.0 + 1e-9):
            raise ValueError("policy snapshots are %g apart, more than %d simulation steps of %g"
                             % (gap, constants.MC_MAX_SNAPSHOT_GAP, dt_sim))

    def __call__(self, x, t=0.0):
        k = int(np.argmin(np.abs(self.times - (self.horizon - t))))
        return self.values[k][self.grid.locate(x)]


def _streams(seed, first, last):
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(path,))))
            for path in range(first, last)]


def _simulate(problem, policy, config, terminal=None, record=False):
    """
    Core path loop.
    :param terminal: callable (P, d) -> (P,) evaluated at X_T
    :return: dict of per-path running sums of r (after burn-in), counted steps,
             terminal values, clip flags and (when record) states/controls
    """
    grid = getattr(policy, "grid", None)
    n_steps, dt = config.n_steps, config.dt
    d = problem.dim
    x0 = np.asarray(config.x0, dtype=float)
    if x0.shape != (d,):
        raise ValueError("x0 has %d coordinates, the problem has dimension %d" % (len(x0), d))
    first_counted = int(np.ceil(config.burn_in / dt - 1e-9)) if n_steps else 0
    scale = float(config.noise_scale) * np.sqrt(dt)

    running = np.zeros(config.n_paths)
    final = np.empty(config.n_paths)
    clipped = np.zeros(config.n_paths, dtype=bool)
    states = np.empty((n_steps + 1, config.n_paths, d)) if record else None
    controls = np.empty((n_steps, config.n_paths, problem.controls.m)) if record else None

    for first in range(0, config.n_paths, config.block):
        last = min(first + config.block, config.n_paths)
        streams = _streams(config.seed, first, last)
        x = np.tile(x0, (last - first, 1))
        if grid is not None:
            x, hit = grid.clamp(x)
        else:
            hit = np.zeros(last - first, dtype=bool)
        total = np.zeros(last - first)
        if record:
            states[0, first:last] = x
        normals = None
        for k in range(n_steps):
            j = k % constants.MC_CHUNK
            if j == 0:
                width = min(constants.MC_CHUNK, n_steps - k)
                normals = np.stack([g.standard_normal((width, d)) for g in streams])
            u = policy(x, k * dt)
            if k >= first_counted:
                total += problem.cost(x, u)
            step = np.asarray(problem.drift(x, u), dtype=float) * dt
            if scale:
                step += scale * np.einsum("pij,pj->pi", problem.noise(x), normals[:, j])
            x = x + step
            if not np.all(np.isfinite(x)):
                path = first + int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
                raise NumericalError("non-finite state at step %d on path %d" % (k + 1, path))
            if grid is not None:
                x, moved = grid.clamp(x)
                hit |= moved
            if record:
                states[k + 1, first:last] = x
                controls[k, first:last] = u
        running[first:last] = total
        clipped[first:last] = hit
        if terminal is not None:
            final[first:last] = terminal(x)
        logger.debug("simulated paths %d-%d of %d", first, last - 1, config.n_paths)
    return {
        "running": running,
        "counted": n_steps - first_counted,
        "final": final,
        "clipped": clipped,
        "states": states,
        "controls": controls,
    }


def _report(samples, clipped, what):
    n = len(samples)
    mean = float(np.mean(samples))
    std_error = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    n_clipped = int(np.count_nonzero(clipped))
    flagged = n_clipped > constants.MC_CLIP_FLAG * n
    if flagged:
        logger.warning("%s: %d of %d paths hit the truncation box", what, n_clipped, n)
    logger.info("%s: %.6f +- %.6f over %d paths", what, mean, std_error, n)
    return EstimateReport(mean, std_error, n, n_clipped, flagged, samples)


def _field_function(f):
    if isinstance(f, Field):
        return f.interpolate
    return f


def simulate_path(problem, policy, config):
    """Single path (stream 0) with states and controls at every step."""
    config = replace(config, n_paths=1)
    result = _simulate(problem, policy, config, record=True)
    times = np.arange(config.n_steps + 1) * config.dt
    return SamplePath(times, result["states"][:, 0], result["controls"][:, 0], bool(result["clipped"][0]))


def ergodic_cost_estimate(problem, policy, config):
    """
    Per-path time average of r over (burn_in, T], then mean and standard error over paths.
    """
    if config.T <= config.burn_in:
        raise ValueError("horizon T = %g must exceed the burn-in %g" % (config.T, config.burn_in))
    result = _simulate(problem, policy, config)
    return _report(result["running"] / result["counted"], result["clipped"], "ergodic cost")


def terminal_expectation(problem, policy, f, config):
    """Estimate of E[f(X_T)]; f is a Field (interpolated) or a callable on (P, d) states."""
    result = _simulate(problem, policy, config, terminal=_field_function(f))
    return _report(result["final"], result["clipped"], "terminal expectation")


def finite_horizon_value(problem, policy, phi0, x0, T, config, rho):
    """
    Sample mean of int_0^T r ds + phi0(X_T) - rho T, phi0 interpolated multilinearly.
    """
    config = replace(config, x0=x0, T=T, burn_in=0.0)
    if T == 0:
        value = float(np.asarray(_field_function(phi0)(np.atleast_2d(config.x0)))[0])
        return EstimateReport(value, 0.0, config.n_paths, 0, False)
    if isinstance(policy, TimedPolicy):
        policy.check_resolution(config.dt)
    result = _simulate(problem, policy, config, terminal=_field_function(phi0))
    samples = config.dt * result["running"] - rho * T + result["final"]
    return _report(samples, result["clipped"], "finite horizon value")


@dataclass(frozen=True)
class SandwichReport:
    """lower <= middle <= upper up to the allowed slack."""

    lower: EstimateReport
    middle: float
    upper: EstimateReport
    slack: float

    @property
    def holds(self):
        return (self.lower.mean <= self.middle + 3.0 * self.lower.std_error + self.slack
                and self.middle <= self.upper.mean + 3.0 * self.upper.std_error + self.slack)

    def to_dict(self):
        return {"lower": self.lower.to_dict(), "middle": self.middle, "upper": self.upper.to_dict(),
                "slack": self.slack, "holds": self.holds}


def bound_sandwich(problem, report, traj, phi0, x, t, config, slack=constants.MC_SLACK):
    """
    E^{vhat^t}[phi0 - V*](X_t) <= phibar(t, x) - V*(x) <= E^{v*}[phi0 - V*](X_t).
    :param traj: VI trajectory run with policy snapshots
    """
    if traj.mode != "vi":
        raise ValueError("bound_sandwich needs a VI trajectory")
    at_t = traj.snapshot_at(t)
    gap = phi0 - report.V
    config = replace(config, x0=x, T=t, burn_in=0.0)
    timed = TimedPolicy.from_trajectory(problem, traj, horizon=t)
    timed.check_resolution(config.dt)
    lower = terminal_expectation(problem, timed, gap, config)
    upper = terminal_expectation(problem, GridPolicy.from_report(problem, report), gap, config)
    point = np.atleast_2d(np.asarray(x, dtype=float))
    middle = float(at_t.interpolate(point)[0] - report.V.interpolate(point)[0])
    return SandwichReport(lower, middle, upper, slack)
