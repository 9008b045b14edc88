#############################################
# CONVERGENCE AND BOUNDEDNESS DIAGNOSTICS   #
#############################################

"""
Runtime checks on evolution trajectories:
    - distance to the RVI limit V*(x) - V*(0) + rho on a probe box,
    - oscillation over the box B0 around the sub-rho level set of the cost,
    - drift of the anchor series against rho * tau + osc(phi0) + eps,
    - weighted norms against V*, slopes phibar(t, x) / t and mu_{v*}-averages.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from ergodic import constants
from ergodic.techniques.model import near_monotone_level_set
from ergodic.techniques.stationary import weighted_norm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiagnosticsRecord:
    """One row of the diagnostics series; None where the quantity is unavailable."""

    time: float
    anchor_value: float
    sup_error_on_compact: Optional[float] = None
    oscillation_B0: Optional[float] = None
    weighted_norm_vs_Vstar: Optional[float] = None
    mu_average: Optional[float] = None


def sup_error_on_compact(phi, report, radius):
    """max over |x|_inf <= radius of |phi - (V* - V*(anchor) + rho)|."""
    grid = phi.grid
    if radius < 0 or any(radius > min(-l, u) + 1e-12 for l, u in zip(grid.lower, grid.upper)):
        raise ValueError("probe radius %g does not fit in the grid box" % radius)
    if not grid.matches(report.grid):
        raise ValueError("field and report live on different grids")
    inside = grid.in_box(radius)
    return float(np.max(np.abs(phi.values[inside] - report.target().values[inside])))


def oscillation(phi, region):
    """max - min of phi over the nodes of the box region = (lower, upper)."""
    lower, upper = region
    inside = phi.grid.in_region(lower, upper)
    if not np.any(inside):
        raise ValueError("region %s - %s contains no grid node" % (lower, upper))
    values = phi.values[inside]
    return float(values.max() - values.min())


def b0_box(problem, grid, rho):
    """
    Bounding box of {min_u r <= rho} inflated by one cell and clipped to the grid;
    the anchor cell when the level set is empty.
    """
    level = near_monotone_level_set(problem, rho, grid)
    h = np.asarray(grid.spacing)
    if len(level) == 0:
        lower, upper = -h, h
    else:
        lower, upper = np.asarray(level.lower) - h, np.asarray(level.upper) + h
    return tuple(np.maximum(lower, grid.lower)), tuple(np.minimum(upper, grid.upper))


def record(time, phi, target=None, b0=None, radius=constants.PROBE_RADIUS, mode="rvi"):
    """Diagnostics of one snapshot; target is the SolveReport, b0 the oscillation box."""
    values = {"time": float(time), "anchor_value": phi.anchor_value}
    if b0 is not None:
        values["oscillation_B0"] = oscillation(phi, b0)
    if target is not None:
        try:
            values["sup_error_on_compact"] = sup_error_on_compact(phi, target, radius)
        except ValueError as e:
            logger.debug("sup error skipped: %s", e)
        values["weighted_norm_vs_Vstar"] = weighted_norm(phi, target.V)
        if mode == "vi" and target.mu is not None:
            values["mu_average"] = target.mu.expectation(phi)
    return DiagnosticsRecord(**values)


def diagnostics_frame(records):
    columns = [f.name for f in DiagnosticsRecord.__dataclass_fields__.values()]
    return pd.DataFrame([asdict(r) for r in records], columns=columns)


@dataclass(frozen=True)
class AnchorDriftReport:
    """
    violations: (t_early, t_late, excess) for each late time whose worst earlier
    partner breaks the bound.
    """

    violations: list = field(default_factory=list)
    anchor_min: float = float("nan")
    anchor_max: float = float("nan")
    finite: bool = True

    def __len__(self):
        return len(self.violations)


def default_eps(dt):
    return 10.0 * dt + 2.0 * constants.HJB_TOL


def _drift_violations(series, times, rho, allowance):
    """
    Pairs s < k with series[s] - series[k] > rho (t_k - t_s) + allowance. With
    w = series + rho t the worst partner of k is the running maximum of w before k.
    """
    w = series + rho * times
    violations = []
    if len(w) < 2:
        return violations
    best = np.maximum.accumulate(w)
    where = np.maximum.accumulate(np.where(w >= best, np.arange(len(w)), 0))
    excess = best[:-1] - w[1:] - allowance
    for k in np.flatnonzero(excess > 0) + 1:
        violations.append((float(times[where[k - 1]]), float(times[k]), float(excess[k - 1])))
    return violations


def anchor_drift_bounds(traj, rho, osc0, eps=None, stride=1):
    """
    VI trajectory: phibar(t - tau, 0) - phibar(t, 0) <= rho tau + osc0 + eps over all
    pairs of the dense anchor series (every ``stride``-th step).
    RVI trajectory: range and finiteness of the anchor series only.
    """
    series = np.asarray(traj.anchor_series, dtype=float)[::stride]
    times = traj.step_times[::stride]
    finite = bool(np.all(np.isfinite(series)))
    low = float(np.min(series)) if finite else float("nan")
    high = float(np.max(series)) if finite else float("nan")
    if traj.mode != "vi" or not finite:
        return AnchorDriftReport([], low, high, finite)
    eps = default_eps(traj.dt) if eps is None else eps
    violations = _drift_violations(series, times, rho, osc0 + eps)
    if violations:
        logger.warning("anchor drift bound broken at %d late times (worst excess %.3g)",
                       len(violations), max(v[2] for v in violations))
    return AnchorDriftReport(violations, low, high, finite)


def min_drift_bounds(traj, rho, eps=None):
    """min phibar(t - tau, .) - min phibar(t, .) <= rho tau + eps over snapshot pairs (VI)."""
    if traj.mode != "vi":
        raise ValueError("min_drift_bounds needs a VI trajectory")
    minima = traj.snapshots.min(axis=1)
    eps = default_eps(traj.dt) if eps is None else eps
    return AnchorDriftReport(_drift_violations(minima, traj.times, rho, eps),
                             float(minima.min()), float(minima.max()), True)


def asymptotic_slope(traj, radius=constants.PROBE_RADIUS):
    """(times, max_{|x| <= radius} |phibar(t, x)| / t) for t > 0."""
    inside = traj.grid.in_box(radius)
    keep = traj.times > 0
    slopes = np.max(np.abs(traj.snapshots[keep][:, inside]), axis=1) / traj.times[keep]
    return traj.times[keep], slopes


def weighted_norm_violations(traj, V, rho):
    """Snapshots with ||phibar(t)||_V > (1 + rho T) max(1, ||phi0||_V), T the horizon: list of (t, norm, bound)."""
    start = max(1.0, weighted_norm(traj.snapshots[0], V))
    bound = (1.0 + rho * traj.T) * start
    violations = []
    for t, values in zip(traj.times, traj.snapshots):
        norm = weighted_norm(values, V)
        if norm > bound * (1.0 + 1e-12):
            violations.append((float(t), norm, bound))
    return violations


def mu_average_series(traj, mu, tol=1e-8):
    """
    (times, mu^T phibar(t), nonincreasing) where nonincreasing allows increments up to
    tol * max(1, |value|).
    """
    weights = mu.mu if hasattr(mu, "mu") else np.asarray(mu, dtype=float)
    averages = traj.snapshots @ weights
    steps = np.diff(averages)
    allowance = tol * np.maximum(1.0, np.abs(averages[1:]))
    return traj.times, averages, bool(np.all(steps <= allowance))


def value_difference(traj, x, y):
    """(times, phibar(t, x) - phibar(t, y)); tends to V*(x) - V*(y) for a VI run from 0."""
    grid = traj.grid
    i, j = grid.locate(np.atleast_2d(x))[0], grid.locate(np.atleast_2d(y))[0]
    return traj.times, traj.snapshots[:, i] - traj.snapshots[:, j]
