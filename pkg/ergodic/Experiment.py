#############################################
# EXPERIMENT CONFIGURATION AND ORCHESTRATION #
#############################################

"""
An experiment is solve -> evolve -> simulate -> diagnose on one preset problem.
The configuration is read from JSON or TOML plus dotted ``key=value`` overrides and is
validated completely before anything touches the output directory. Every run ends by
writing manifest.json, whose presence means every file it lists is complete.
"""
from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
import pandas as pd
import toml

from ergodic import __version__, constants
from ergodic.exceptions import ConfigurationError, ErgodicError, InstabilityError, NumericalError
from ergodic.techniques import diagnose, evolve, montecarlo, plotting, storage
from ergodic.techniques.discretize import Hamiltonian
from ergodic.techniques.model import GridSpec, preset
from ergodic.techniques.stationary import check_region_membership, policy_iteration

logger = logging.getLogger(__name__)

MODES = ("vi", "rvi", "rvi-min", "pia", "mc-check", "full")

# dotted configuration key -> ExperimentConfig attribute
KEYS = {
    "preset": "preset",
    "problem.box": "box",
    "problem.h": "h",
    "problem.n_controls": "n_controls",
    "problem.u_max": "u_max",
    "mode": "mode",
    "T": "T",
    "dt": "dt",
    "snapshot_every": "snapshot_every",
    "policy_every": "policy_every",
    "phi0": "phi0",
    "method": "method",
    "tol.hjb": "tol_hjb",
    "tol.max_iter": "max_iter",
    "tol.eps": "eps",
    "probe_radius": "probe_radius",
    "rho": "rho",
    "seed": "seed",
    "out": "out",
    "mc.n_paths": "mc_n_paths",
    "mc.T": "mc_T",
    "mc.burn_in": "mc_burn_in",
    "mc.dt_sim": "mc_dt_sim",
    "mc.x0": "mc_x0",
    "mc.horizon": "mc_horizon",
    "mc.dump_paths": "mc_dump_paths",
    "plot": "plot",
}


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "lqg1d"
    box: float = constants.DEFAULT_BOX
    h: float = constants.DEFAULT_H
    n_controls: Optional[int] = None
    u_max: float = constants.DEFAULT_U_MAX
    mode: str = "full"
    T: float = constants.T_EVOLVE
    dt: Optional[float] = None
    snapshot_every: float = constants.SNAPSHOT_EVERY
    policy_every: Optional[float] = None
    phi0: str = "zero"
    method: str = "explicit"
    tol_hjb: float = constants.HJB_TOL
    max_iter: int = constants.MAX_ITER
    eps: Optional[float] = None
    probe_radius: float = constants.PROBE_RADIUS
    rho: Optional[float] = None
    seed: int = 0
    out: str = "out"
    mc_n_paths: int = constants.MC_PATHS
    mc_T: float = constants.MC_T
    mc_burn_in: float = constants.MC_BURN_IN
    mc_dt_sim: float = constants.MC_DT
    mc_x0: float = 1.0
    mc_horizon: float = constants.MC_HORIZON
    mc_dump_paths: bool = False
    plot: bool = False

    @classmethod
    def load(cls, path=None, overrides=(), **explicit):
        """
        :param path: .json or .toml file (nested tables or dotted keys)
        :param overrides: iterable of "dotted.key=value" strings, values parsed as JSON when possible
        :param explicit: attribute values given directly (CLI options); None entries are ignored
        :return: validated ExperimentConfig
        """
        values = {}
        if path is not None:
            values.update(_flatten(_read(path)))
        for item in overrides:
            if "=" not in item:
                raise ConfigurationError("override %r is not of the form key=value" % item)
            key, raw = item.split("=", 1)
            values[key.strip()] = _literal(raw.strip())
        unknown = sorted(k for k in values if k not in KEYS)
        if unknown:
            raise ConfigurationError("unknown configuration keys: %s" % ", ".join(unknown))
        kwargs = {KEYS[k]: v for k, v in values.items()}
        kwargs.update({k: v for k, v in explicit.items() if v is not None})
        return cls(**kwargs).validate()

    def validate(self):
        if self.preset not in constants.PRESET_NAMES:
            raise ConfigurationError("unknown preset %r (known: %s)" % (self.preset, ", ".join(constants.PRESET_NAMES)))
        if self.mode not in MODES:
            raise ConfigurationError("unknown mode %r (known: %s)" % (self.mode, ", ".join(MODES)))
        if self.method not in evolve.METHODS:
            raise ConfigurationError("unknown time integrator %r" % self.method)
        positive = ["box", "h", "u_max", "snapshot_every", "tol_hjb", "max_iter", "probe_radius",
                    "mc_n_paths", "mc_T", "mc_dt_sim"]
        optional_positive = ["dt", "policy_every", "eps"]
        for name in positive + optional_positive:
            value = getattr(self, name)
            if value is None and name in optional_positive:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ConfigurationError("%s must be a positive number, got %r" % (name, value))
        for name in ("T", "mc_burn_in", "mc_horizon"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
                raise ConfigurationError("%s must be a nonnegative number, got %r" % (name, value))
        if self.n_controls is not None and (not isinstance(self.n_controls, int) or self.n_controls < 2):
            raise ConfigurationError("n_controls must be an integer >= 2, got %r" % (self.n_controls,))
        if self.mc_burn_in >= self.mc_T:
            raise ConfigurationError("mc.burn_in must be smaller than mc.T")
        if self.probe_radius > self.box:
            raise ConfigurationError("probe_radius %g exceeds the box half width %g" % (self.probe_radius, self.box))
        evolve.parse_initial_spec(self.phi0)
        try:
            self.grid()
        except ValueError as e:
            raise ConfigurationError("invalid grid: %s" % e)
        if abs(self.mc_x0) > self.box:
            raise ConfigurationError("mc.x0 = %g lies outside the box" % self.mc_x0)
        self._validate_steps()
        return self

    def _validate_steps(self):
        """Time steps and cadences that would otherwise only fail after the solve phase."""
        if self.dt is not None and self.method == "explicit" and self.mode not in ("pia", "mc-check"):
            limit = 1.0 / Hamiltonian(self.problem(), self.grid()).max_rate()
            if self.dt > limit * (1.0 + 1e-12):
                raise ConfigurationError("dt = %g exceeds the explicit stability bound %g" % (self.dt, limit))
        if self.mode != "full":
            return
        gap = constants.MC_MAX_SNAPSHOT_GAP * self.mc_dt_sim
        if self.policy_every is not None and self.policy_every > gap * (1.0 + 1e-9):
            raise ConfigurationError("policy_every = %g is more than %d steps of mc.dt_sim = %g"
                                     % (self.policy_every, constants.MC_MAX_SNAPSHOT_GAP, self.mc_dt_sim))
        if self.mc_horizon > self.T:
            raise ConfigurationError("mc.horizon = %g exceeds the evolution horizon T = %g" % (self.mc_horizon, self.T))

    def problem(self):
        return preset(self.preset, u_max=self.u_max, n_controls=self.n_controls)

    def grid(self):
        dim = 2 if self.preset == "lqg2d" else 1
        return GridSpec.box(self.box, self.h, dim)

    @property
    def evolve_mode(self):
        return self.mode if self.mode in evolve.MODES else "rvi"

    def to_dict(self):
        inverse = {v: k for k, v in KEYS.items()}
        return {inverse[f.name]: getattr(self, f.name) for f in fields(self)}


def _read(path):
    if path.endswith(".toml"):
        return toml.load(path)
    if path.endswith(".json"):
        with open(path) as f:
            return json.load(f)
    raise ConfigurationError("configuration file must be .json or .toml: %s" % path)


def _flatten(data, prefix=""):
    flat = {}
    for key, value in data.items():
        dotted = prefix + key
        if isinstance(value, dict):
            flat.update(_flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def _literal(raw):
    try:
        return json.loads(raw)
    except ValueError:
        return raw


@dataclass
class RunManifest:
    config: dict
    version: str = __version__
    status: str = "ok"
    timings: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    failure: Optional[dict] = None

    @property
    def ok(self):
        return self.status == "ok"

    def to_dict(self):
        return {"config": self.config, "version": self.version, "status": self.status, "timings": self.timings,
                "files": self.files, "summary": self.summary, "failure": self.failure}


class Experiment:
    """
    Holds the state of one run: problem, grid, reference solve, trajectories and estimates.
    Phases are methods; ``run`` chains the ones the configured mode asks for.
    """

    def __init__(self, config):
        """
        :param config: validated ExperimentConfig
        """
        self.config = config
        self.problem = config.problem()
        self.grid = config.grid()
        self.out = config.out
        self.report = None
        self.trajectory = None
        self.vi_trajectory = None
        self.phi0 = None
        self.estimates = {}
        self.manifest = RunManifest(config.to_dict())

    @contextlib.contextmanager
    def _phase(self, name):
        start = time.perf_counter()
        logger.info("phase %s started", name)
        try:
            yield
        finally:
            self.manifest.timings[name] = time.perf_counter() - start
            logger.info("phase %s finished in %.2fs", name, self.manifest.timings[name])

    def _written(self, paths):
        if isinstance(paths, str):
            paths = [paths]
        self.manifest.files.extend(storage.file_record(p, self.out) for p in paths)

    def _path(self, name):
        return os.path.join(self.out, name)

    def solve(self):
        with self._phase("solve"):
            self.problem.validate(self.grid)
            self.report = policy_iteration(self.problem, self.grid, tol=self.config.tol_hjb,
                                           max_iter=self.config.max_iter)
            self._written(storage.write_json(self.report.to_dict(), self._path("solve_report.json")))
            self._written(storage.write_csv(storage.value_frame(self.report, self.problem), self._path("vstar.csv")))
            self._written(storage.write_csv(storage.policy_frame(self.report, self.problem),
                                            self._path("policy.csv")))
        self.manifest.summary["rho_pia"] = self.report.rho
        self.manifest.summary["pia_converged"] = self.report.converged
        if not self.report.converged:
            raise NumericalError("policy iteration did not converge in %d iterations" % self.config.max_iter)
        return self.report

    def evolve(self):
        config = self.config
        with self._phase("evolve"):
            self.phi0 = evolve.initial_condition(config.phi0, self.grid, self.report)
            mode = config.evolve_mode
            rho = config.rho if config.rho is not None else self.report.rho
            policy_every = config.policy_every
            if policy_every is None and config.mode == "full":
                policy_every = constants.MC_MAX_SNAPSHOT_GAP * config.mc_dt_sim
            self.manifest.summary["sup_phi0"] = float(np.max(np.abs(self.phi0.values)))
            horizon = (config.mc_horizon,) if config.mode == "full" and config.mc_horizon <= config.T else ()
            try:
                self.trajectory = evolve.run(self.problem, self.grid, self.phi0, mode=mode,
                                             rho=rho if mode == "vi" else None, T=config.T, dt=config.dt,
                                             snapshot_every=config.snapshot_every, method=config.method,
                                             target=self.report, policy_every=policy_every,
                                             probe_radius=config.probe_radius, snapshot_times=horizon)
            except InstabilityError as e:
                if e.trajectory is not None and len(e.trajectory.snapshot_steps):
                    self._written(storage.write_trajectory(e.trajectory, self.out))
                raise
            self._written(storage.write_trajectory(self.trajectory, self.out))
            frame = diagnose.diagnostics_frame(self.trajectory.diagnostics)
            self._written(storage.write_csv(frame, self._path("diagnostics.csv")))
            if config.plot:
                self._written(plotting.write_html(frame, self._path("diagnostics.html"), self.report,
                                                  self.trajectory, title=self.problem.name))
        final = self.trajectory.diagnostics[-1]
        self.manifest.summary["final_anchor"] = final.anchor_value
        self.manifest.summary["final_sup_error"] = final.sup_error_on_compact
        return self.trajectory

    def couple(self):
        """phibar from the RVI run and the spatial constancy of phi - phibar."""
        rho = self.report.rho
        with self._phase("couple"):
            self.vi_trajectory = evolve.vi_from_rvi(self.trajectory, rho)
            times, residuals = evolve.coupling_series(self.trajectory, self.vi_trajectory)
            back = evolve.vi_from_rvi(evolve.rvi_from_vi(self.vi_trajectory, rho), rho)
            round_trip = np.max(np.abs(back.snapshots - self.vi_trajectory.snapshots), axis=1)
            frame = pd.DataFrame({"t": times, "ident_residual": residuals[:, 0], "f_value": residuals[:, 1],
                                  "round_trip": round_trip})
            self._written(storage.write_csv(frame, self._path("coupling.csv")))
        self.manifest.summary["max_ident_residual"] = float(residuals[:, 0].max())
        self.manifest.summary["max_round_trip"] = float(round_trip.max())
        return frame

    def simulate(self):
        config = self.config
        mc = montecarlo.SimConfig(x0=(config.mc_x0,) * self.grid.dim, T=config.mc_T, dt_sim=config.mc_dt_sim,
                                  n_paths=config.mc_n_paths, seed=config.seed, burn_in=config.mc_burn_in)
        stationary = montecarlo.GridPolicy.from_report(self.problem, self.report)
        with self._phase("simulate"):
            self.estimates["ergodic_cost"] = montecarlo.ergodic_cost_estimate(self.problem, stationary, mc)
            horizon = replace(mc, T=config.mc_horizon, burn_in=0.0)
            self.estimates["terminal_V"] = montecarlo.terminal_expectation(self.problem, stationary,
                                                                           self.report.V, horizon)
            result = {name: estimate.to_dict() for name, estimate in self.estimates.items()}
            result["rho_pia"] = self.report.rho
            result["mu_V"] = self.report.mu_V
            if self.vi_trajectory is not None and config.mc_horizon <= self.vi_trajectory.T:
                self._finite_horizon(mc, result)
            self._written(storage.write_json(result, self._path("mc_report.json")))
            if config.mc_dump_paths:
                self._written(storage.write_path_dump(self.estimates["ergodic_cost"],
                                                      self._path("mc_paths.csv")))
        self.manifest.summary["rho_mc"] = self.estimates["ergodic_cost"].mean
        return self.estimates

    def _finite_horizon(self, mc, result):
        config = self.config
        x0 = (config.mc_x0,) * self.grid.dim
        timed = montecarlo.TimedPolicy.from_trajectory(self.problem, self.vi_trajectory, horizon=config.mc_horizon)
        estimate = montecarlo.finite_horizon_value(self.problem, timed, self.phi0, x0, config.mc_horizon, mc,
                                                   self.report.rho)
        self.estimates["finite_horizon"] = estimate
        grid_value = float(self.vi_trajectory.snapshot_at(config.mc_horizon).interpolate(np.atleast_2d(x0))[0])
        result["finite_horizon"] = dict(estimate.to_dict(), grid_value=grid_value)
        sandwich = montecarlo.bound_sandwich(self.problem, self.report, self.vi_trajectory, self.phi0, x0,
                                             config.mc_horizon, mc)
        result["sandwich"] = sandwich.to_dict()

    def diagnose(self):
        """Lemma checks on the coupled VI / RVI pair."""
        rho = self.report.rho
        vi, rvi = self.vi_trajectory, self.trajectory
        with self._phase("diagnose"):
            whole_box = (self.grid.lower, self.grid.upper)
            osc0 = diagnose.oscillation(self.phi0, whole_box)
            drift = diagnose.anchor_drift_bounds(vi, rho, osc0, eps=self.config.eps)
            band = diagnose.anchor_drift_bounds(rvi, rho, osc0)
            minima = diagnose.min_drift_bounds(vi, rho, eps=self.config.eps)
            times, slopes = diagnose.asymptotic_slope(vi, self.config.probe_radius)
            _, averages, nonincreasing = diagnose.mu_average_series(vi, self.report.mu)
            region = check_region_membership(self.phi0, self.report.V, 0.0)
            probe = (self.config.probe_radius,) * self.grid.dim
            _, differences = diagnose.value_difference(vi, probe, (0.0,) * self.grid.dim)
            lemmas = {
                "osc_phi0": osc0,
                "anchor_drift_violations": drift.violations,
                "min_drift_violations": minima.violations,
                "rvi_anchor_min": band.anchor_min,
                "rvi_anchor_max": band.anchor_max,
                "rvi_anchor_finite": band.finite,
                "final_slope": float(slopes[-1]) if len(slopes) else None,
                "weighted_norm_violations": diagnose.weighted_norm_violations(vi, self.report.V, rho),
                "in_attraction_region": region.member,
                "mu_average_nonincreasing": nonincreasing,
                "mu_average_final": float(averages[-1]),
                "value_difference_final": float(differences[-1]),
                "value_difference_target": float(self.report.V.at(np.asarray(probe)) - self.report.V.anchor_value),
            }
            self._written(storage.write_json(lemmas, self._path("lemmas.json")))
        self.manifest.summary["anchor_drift_violations"] = len(drift)
        return lemmas

    def _phases(self):
        mode = self.config.mode
        phases = [self.solve]
        if mode in evolve.MODES or mode == "full":
            phases.append(self.evolve)
        if mode == "full":
            phases.append(self.couple)
        if mode in ("mc-check", "full"):
            phases.append(self.simulate)
        if mode == "full":
            phases.append(self.diagnose)
        return phases

    def run(self):
        """
        Execute the phases of the configured mode; write the manifest last, also on failure.
        :return: RunManifest
        """
        os.makedirs(self.out, exist_ok=True)
        phase = None
        try:
            for phase in self._phases():
                phase()
        except (ErgodicError, ValueError) as e:
            logger.error("%s failed: %s", phase.__name__, e)
            self.manifest.status = "failed"
            self.manifest.failure = {"phase": phase.__name__, "type": type(e).__name__, "message": str(e),
                                     "node": getattr(e, "node", None)}
        if self.trajectory is not None:
            self.manifest.summary["rvi_final_anchor"] = float(self.trajectory.anchor_series[-1])
        storage.write_json(self.manifest.to_dict(), self._path("manifest.json"))
        return self.manifest


def run_experiment(config):
    return Experiment(config).run()


def _series_frame(manifest_path):
    manifest = storage.read_json(manifest_path)
    path = os.path.join(os.path.dirname(manifest_path), "diagnostics.csv")
    if not os.path.exists(path):
        raise ConfigurationError("%s has no diagnostics.csv (mode %s runs no evolution)"
                                 % (manifest_path, manifest["config"].get("mode")))
    frame = pd.read_csv(path)
    return manifest["config"], frame


def compare_runs(manifest_a, manifest_b, out=None):
    """
    Per-time difference of the sup error series of two runs (b interpolated on the times
    of a, over the common time range) and a final-error table.
    :return: (series DataFrame, final DataFrame)
    """
    config_a, frame_a = _series_frame(manifest_a)
    config_b, frame_b = _series_frame(manifest_b)
    if config_a["preset"] != config_b["preset"]:
        raise ConfigurationError("runs use different presets: %s vs %s" % (config_a["preset"], config_b["preset"]))
    if config_a["probe_radius"] != config_b["probe_radius"]:
        raise ConfigurationError("runs use different probe boxes: %g vs %g"
                                 % (config_a["probe_radius"], config_b["probe_radius"]))
    column = "sup_error_on_compact"
    times = frame_a["time"].to_numpy()
    times = times[times <= frame_b["time"].max() + 1e-12]
    a = frame_a[column].to_numpy()[:len(times)]
    b = np.interp(times, frame_b["time"].to_numpy(), frame_b[column].to_numpy())
    series = pd.DataFrame({"time": times, "sup_error_a": a, "sup_error_b": b, "difference": a - b})
    final_a, final_b = float(frame_a[column].iloc[-1]), float(frame_b[column].iloc[-1])
    final = pd.DataFrame({
        "run": ["a", "b"],
        "h": [config_a["problem.h"], config_b["problem.h"]],
        "final_sup_error": [final_a, final_b],
        "ratio_a_over_b": [final_a / final_b if final_b else float("nan")] * 2,
    })
    if out is not None:
        os.makedirs(out, exist_ok=True)
        storage.write_csv(series, os.path.join(out, "comparison.csv"))
        storage.write_csv(final, os.path.join(out, "comparison_final.csv"))
    return series, final
