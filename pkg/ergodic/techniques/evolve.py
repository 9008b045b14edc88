#############################################
# VALUE ITERATION / RELATIVE VALUE ITERATION #
#############################################

"""
Time marching of the Cauchy problems

    VI :  d/dt phibar = min_u [L^u phibar + r] - rho
    RVI:  d/dt phi    = min_u [L^u phi + r] - phi(t, 0)          (anchor_mode "point")
          d/dt phi    = min_u [L^u phi + r] - min_x phi(t, x)     (anchor_mode "min")

and the transformations that map one onto the other,

    phibar(t, x) = phi(t, x) - rho t + int_0^t phi(s, 0) ds
    phi(t, x)    = phibar(t, x) - int_0^t e^{s-t} phibar(s, 0) ds + rho (1 - e^{-t}).
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_trapezoid
from scipy.sparse import linalg as splinalg

from ergodic import constants
from ergodic.exceptions import ConfigurationError, InstabilityError
from ergodic.techniques import diagnose
from ergodic.techniques.discretize import Hamiltonian, build_policy_generator
from ergodic.techniques.model import Field

logger = logging.getLogger(__name__)

MODES = ("vi", "rvi", "rvi-min")
METHODS = ("explicit", "implicit")
_ANCHOR_MODES = {"point": "rvi", "min": "rvi-min"}


@dataclass(frozen=True, eq=False)
class EvolutionTrajectory:
    """
    Decimated field snapshots plus the dense anchor series phi(t_k, anchor), k = 0..n_steps.
    ``reference_series`` is the value subtracted at each step (rho, the anchor or the minimum).
    """

    grid: object
    mode: str
    dt: float
    method: str
    snapshot_steps: np.ndarray
    snapshots: np.ndarray
    anchor_series: np.ndarray
    reference_series: np.ndarray
    rho: Optional[float] = None
    policy_steps: Optional[np.ndarray] = None
    policies: Optional[np.ndarray] = None
    diagnostics: list = field(default_factory=list)
    status: str = "completed"
    message: str = ""

    @property
    def n_steps(self):
        return len(self.anchor_series) - 1

    @property
    def T(self):
        return self.n_steps * self.dt

    @property
    def times(self):
        return self.snapshot_steps * self.dt

    @property
    def step_times(self):
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def policy_times(self):
        return None if self.policy_steps is None else self.policy_steps * self.dt

    def field(self, i):
        return Field(self.grid, self.snapshots[i])

    @property
    def initial(self):
        return self.field(0)

    @property
    def final(self):
        return self.field(len(self.snapshot_steps) - 1)

    def snapshot_at(self, t, tol=None):
        """
        Snapshot stored at time t.
        :param tol: allowed distance to the stored time (default half a step)
        """
        tol = 0.5 * self.dt * (1.0 + 1e-9) if tol is None else tol
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol:
            raise ValueError("no snapshot at t = %g (nearest is t = %g)" % (t, self.times[i]))
        return self.field(i)

    def to_manifest(self):
        return {
            "mode": self.mode,
            "method": self.method,
            "dt": self.dt,
            "T": self.T,
            "n_steps": self.n_steps,
            "rho": self.rho,
            "times": self.times.tolist(),
            "status": self.status,
            "message": self.message,
            "sup_initial": float(np.max(np.abs(self.snapshots[0]))),
        }


def _offset(values, grid, mode, rho):
    if mode == "vi":
        return rho
    if mode == "rvi":
        return values[grid.anchor_index]
    return values.min()


def _check_update(values, grid):
    bad = ~np.isfinite(values)
    if np.any(bad):
        node = int(np.flatnonzero(bad)[0])
        raise InstabilityError("non-finite update at node %d (x = %s)"
                               % (node, np.asarray(grid.points[node]).tolist()), node=node)


def step_vi(phibar, rho, dt, problem, grid, hamiltonian=None):
    """
    One explicit Euler step of the value iteration.
    :return: (updated Field, argmin control index per node)
    """
    ham = hamiltonian or Hamiltonian(problem, grid)
    value, argmin = ham.minimize(phibar.values)
    updated = phibar.values + dt * (value - rho)
    _check_update(updated, grid)
    return Field(grid, updated), argmin


def step_rvi(phi, dt, problem, grid, anchor_mode="point", hamiltonian=None):
    """One explicit Euler step of the relative value iteration (anchor at x = 0 or the minimum)."""
    if anchor_mode not in _ANCHOR_MODES:
        raise ValueError("anchor_mode must be 'point' or 'min', got %r" % anchor_mode)
    ham = hamiltonian or Hamiltonian(problem, grid)
    value, argmin = ham.minimize(phi.values)
    updated = phi.values + dt * (value - _offset(phi.values, grid, _ANCHOR_MODES[anchor_mode], None))
    _check_update(updated, grid)
    return Field(grid, updated), argmin


def _implicit_step(ham, problem, grid, values, offset, dt):
    """Implicit Euler with the policy frozen at the minimiser of the current field."""
    _, argmin = ham.minimize(values)
    generator = build_policy_generator(problem, grid, argmin)
    system = (sp.identity(grid.size, format="csc") - dt * generator.matrix).tocsc()
    updated = splinalg.spsolve(system, values + dt * (ham.policy_cost(argmin) - offset))
    return updated, argmin


def _cadence(n_steps, dt, every, strict=False):
    """
    Step indices closest to multiples of ``every``, always including 0 and n_steps.
    With ``strict`` consecutive indices are never more than ``every`` apart in time.
    """
    if n_steps == 0:
        return np.zeros(1, dtype=int)
    if strict:
        wanted = np.arange(0, n_steps + 1, max(1, int(np.floor(every / dt + 1e-9))))
    else:
        T = n_steps * dt
        wanted = np.rint(np.arange(0.0, T + 0.5 * every, every) / dt).astype(int)
    return np.unique(np.concatenate([np.clip(wanted, 0, n_steps), [0, n_steps]]))


def run(problem, grid, phi0, mode="rvi", rho=None, T=constants.T_EVOLVE, dt=None,
        snapshot_every=constants.SNAPSHOT_EVERY, method="explicit", target=None,
        policy_every=None, probe_radius=constants.PROBE_RADIUS, hamiltonian=None, snapshot_times=()):
    """
    March VI / RVI / min-anchored RVI to the horizon T.
    :param rho: optimal ergodic cost, required for mode "vi"
    :param dt: time step; None selects 0.9 / max jump intensity
    :param target: SolveReport used for the running distance-to-limit diagnostics
    :param policy_every: cadence of stored minimiser snapshots (None: not stored)
    :param snapshot_times: extra times in [0, T] that always get a snapshot (nearest step)
    :return: EvolutionTrajectory
    """
    if mode not in MODES:
        raise ValueError("mode must be one of %s, got %r" % (MODES, mode))
    if method not in METHODS:
        raise ValueError("method must be one of %s, got %r" % (METHODS, method))
    if mode == "vi" and rho is None:
        raise ValueError("value iteration needs the optimal ergodic cost rho")
    if T < 0 or snapshot_every <= 0:
        raise ValueError("T must be >= 0 and snapshot_every > 0")
    if not grid.matches(phi0.grid):
        raise ValueError("initial field does not live on the requested grid")

    ham = hamiltonian or Hamiltonian(problem, grid)
    limit = 1.0 / ham.max_rate()
    if dt is None:
        dt = constants.STABILITY_FACTOR * limit
    elif method == "explicit" and dt > limit * (1.0 + 1e-12):
        raise ValueError("dt = %g exceeds the explicit stability bound %g" % (dt, limit))
    n_steps = int(np.ceil(T / dt - 1e-9)) if T > 0 else 0
    if n_steps:
        dt = T / n_steps
    snapshot_steps = _cadence(n_steps, dt, snapshot_every)
    extra = np.asarray(snapshot_times, dtype=float)
    if extra.size:
        if np.any(extra < 0) or np.any(extra > T + 1e-9):
            raise ValueError("snapshot times must lie in [0, %g]" % T)
        steps = np.rint(extra / dt).astype(int) if n_steps else np.zeros(extra.size, dtype=int)
        snapshot_steps = np.unique(np.concatenate([snapshot_steps, np.clip(steps, 0, n_steps)]))
    policy_steps = _cadence(n_steps, dt, policy_every, strict=True) if policy_every else None
    snapshot_set = set(snapshot_steps.tolist())
    policy_set = set(policy_steps.tolist()) if policy_steps is not None else set()

    known_rho = rho if rho is not None else (target.rho if target is not None else None)
    b0 = diagnose.b0_box(problem, grid, known_rho) if known_rho is not None else None
    logger.info("%s on %s: %s Euler, dt = %.4g, %d steps, sup|phi0| = %.4g",
                mode, problem.name, method, dt, n_steps, float(np.max(np.abs(phi0.values))))

    values = np.array(phi0.values, dtype=float)
    anchor = np.empty(n_steps + 1)
    reference = np.empty(n_steps + 1)
    snapshots, policies, records = [], [], []

    def partial(k, status, message):
        return EvolutionTrajectory(grid, mode, dt, method, snapshot_steps[:len(snapshots)],
                                   np.array(snapshots).reshape(len(snapshots), grid.size),
                                   anchor[:k + 1].copy(), reference[:k + 1].copy(), rho,
                                   None if policy_steps is None else policy_steps[:len(policies)],
                                   None if policy_steps is None else np.array(policies, dtype=int),
                                   records, status, message)

    for k in range(n_steps + 1):
        offset = _offset(values, grid, mode, rho)
        anchor[k] = values[grid.anchor_index]
        reference[k] = offset
        if k in snapshot_set:
            snapshots.append(values.copy())
            records.append(diagnose.record(k * dt, Field(grid, values), target, b0, probe_radius, mode))
            logger.debug("t = %.4f anchor = %.10f", k * dt, anchor[k])
        if k == n_steps:
            if k in policy_set:
                policies.append(ham.minimize(values)[1])
            break
        if method == "explicit":
            value, argmin = ham.minimize(values)
            updated = values + dt * (value - offset)
        else:
            updated, argmin = _implicit_step(ham, problem, grid, values, offset, dt)
        if k in policy_set:
            policies.append(argmin)
        bad = ~np.isfinite(updated) | (np.abs(updated) > constants.BLOWUP_LEVEL)
        if np.any(bad):
            node = int(np.flatnonzero(bad)[0])
            message = "field exceeded %g at node %d (x = %s) at step %d" % (
                constants.BLOWUP_LEVEL, node, np.asarray(grid.points[node]).tolist(), k + 1)
            logger.error(message)
            raise InstabilityError(message, node=node, trajectory=partial(k, "unstable", message))
        values = updated

    trajectory = partial(n_steps, "completed", "")
    logger.info("%s on %s finished at T = %.4g, anchor = %.10f", mode, problem.name, trajectory.T, anchor[-1])
    return trajectory


def vi_from_rvi(traj, rho):
    """
    phibar = phi - rho t + Q(t), Q the trapezoidal integral of the dense anchor series.
    """
    if traj.mode != "rvi":
        raise ValueError("vi_from_rvi needs a point-anchored RVI trajectory, got mode %r" % traj.mode)
    if traj.anchor_series is None or len(traj.anchor_series) == 0:
        raise ValueError("trajectory has no anchor series")
    t = traj.step_times
    if traj.n_steps:
        integral = cumulative_trapezoid(traj.anchor_series, dx=traj.dt, initial=0.0)
    else:
        integral = np.zeros(1)
    shift = integral - rho * t
    return replace(traj, mode="vi", rho=rho,
                   snapshots=traj.snapshots + shift[traj.snapshot_steps][:, None],
                   anchor_series=traj.anchor_series + shift,
                   reference_series=np.full_like(traj.anchor_series, rho),
                   diagnostics=[])


def _exponential_memory(series, dt):
    """
    I_k = int_0^{t_k} e^{s - t_k} g(s) ds for the piecewise-linear interpolant of g,
    via the exact recurrence I_{k+1} = e^{-dt} I_k + w0 g_k + w1 g_{k+1}.
    """
    memory = np.zeros_like(series)
    if len(series) < 2:
        return memory
    decay = np.exp(-dt)
    w1 = (dt + np.expm1(-dt)) / dt
    w0 = -np.expm1(-dt) - w1
    for k in range(len(series) - 1):
        memory[k + 1] = decay * memory[k] + w0 * series[k] + w1 * series[k + 1]
    return memory


def rvi_from_vi(traj, rho):
    """
    phi = phibar - int_0^t e^{s-t} phibar(s, 0) ds + rho (1 - e^{-t}).
    """
    if traj.mode != "vi":
        raise ValueError("rvi_from_vi needs a VI trajectory, got mode %r" % traj.mode)
    if traj.anchor_series is None or len(traj.anchor_series) == 0:
        raise ValueError("trajectory has no anchor series")
    shift = rho * -np.expm1(-traj.step_times) - _exponential_memory(traj.anchor_series, traj.dt)
    anchor = traj.anchor_series + shift
    return replace(traj, mode="rvi", rho=rho,
                   snapshots=traj.snapshots + shift[traj.snapshot_steps][:, None],
                   anchor_series=anchor, reference_series=anchor.copy(), diagnostics=[])


def coupling_residuals(phi, phibar):
    """
    phi - phibar must be constant in x; returns (max deviation from its mean, the mean).
    """
    if not phi.grid.matches(phibar.grid):
        raise ValueError("fields live on different grids")
    difference = phi.values - phibar.values
    mean = float(np.mean(difference))
    return float(np.max(np.abs(difference - mean))), mean


def coupling_series(rvi_traj, vi_traj):
    """Coupling residuals at every common snapshot of two trajectories."""
    if not np.array_equal(rvi_traj.snapshot_steps, vi_traj.snapshot_steps):
        raise ValueError("trajectories are sampled at different steps")
    rows = [coupling_residuals(rvi_traj.field(i), vi_traj.field(i)) for i in range(len(rvi_traj.snapshot_steps))]
    return rvi_traj.times, np.array(rows).reshape(-1, 2)


_SPEC = re.compile(r"^(zero|vstar|constant:(?P<c>[-+0-9.eE]+)|quadratic:(?P<a>[-+0-9.eE]+))$")


def parse_initial_spec(spec):
    """
    "zero", "constant:c", "quadratic:a" (a |x|^2) or "vstar".
    :return: (kind, parameter)
    """
    match = _SPEC.match(str(spec).strip())
    if match is None:
        raise ConfigurationError("cannot parse initial condition %r" % spec)
    try:
        if match.group("c") is not None:
            return "constant", float(match.group("c"))
        if match.group("a") is not None:
            return "quadratic", float(match.group("a"))
    except ValueError:
        raise ConfigurationError("cannot parse initial condition %r" % spec)
    return match.group(1), None


def initial_condition(spec, grid, report=None):
    kind, parameter = parse_initial_spec(spec)
    if kind == "zero":
        return Field.constant(grid, 0.0)
    if kind == "constant":
        return Field.constant(grid, parameter)
    if kind == "quadratic":
        return Field.from_function(grid, lambda x: parameter * np.sum(x ** 2, axis=1))
    if report is None:
        raise ConfigurationError("initial condition 'vstar' needs a stationary solve")
    return report.V
