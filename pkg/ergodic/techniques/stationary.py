#############################################
# STATIONARY ERGODIC HJB: POLICY ITERATION  #
#############################################

"""
Reference solution (rho, V*, v*) of the stationary ergodic HJB equation

    min_u [L^u V + r(., u)] = rho

by policy iteration on the monotone grid generator: value determination through a
bordered Poisson system, policy improvement through the tabulated Hamiltonian.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse import linalg as splinalg

from ergodic import constants
from ergodic.exceptions import SolverError
from ergodic.techniques.discretize import Hamiltonian, build_policy_generator
from ergodic.techniques.model import Field

logger = logging.getLogger(__name__)


def _jacobi(matrix):
    diagonal = matrix.diagonal()
    diagonal = np.where(diagonal != 0.0, diagonal, 1.0)
    return sp.diags(1.0 / diagonal)


def _solve(matrix, rhs, maxiter=constants.ITERATIVE_MAX_ITER, direct_limit=constants.DIRECT_SOLVE_LIMIT):
    """Direct factorisation on desk-size systems, preconditioned BiCGSTAB above the limit."""
    if matrix.shape[0] <= direct_limit:
        with warnings.catch_warnings():
            warnings.simplefilter("error", splinalg.MatrixRankWarning)
            try:
                solution = splinalg.spsolve(matrix.tocsc(), rhs)
            except (splinalg.MatrixRankWarning, RuntimeError) as e:
                raise SolverError("singular linear system: %s" % e)
    else:
        preconditioner = _jacobi(matrix)
        try:
            solution, info = splinalg.bicgstab(matrix, rhs, rtol=1e-12, atol=0.0, M=preconditioner, maxiter=maxiter)
        except TypeError:
            solution, info = splinalg.bicgstab(matrix, rhs, tol=1e-12, atol=0.0, M=preconditioner, maxiter=maxiter)
        if info != 0:
            residual = float(np.linalg.norm(matrix @ solution - rhs)) if np.all(np.isfinite(solution)) else np.inf
            raise SolverError("BiCGSTAB did not converge on %d unknowns (info=%d, residual %.3e)"
                              % (matrix.shape[0], info, residual))
    if not np.all(np.isfinite(solution)):
        raise SolverError("linear solve returned non-finite values")
    return solution


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    mu: np.ndarray
    residual: float

    def expectation(self, f):
        values = f.values if isinstance(f, Field) else np.asarray(f, dtype=float)
        return float(self.mu @ values)


def stationary_distribution(G):
    """
    Invariant probability of the chain: mu^T Q = 0, sum(mu) = 1.
    The last balance equation is replaced by the normalisation.
    """
    n = G.size
    if n == 1:
        return StationaryDistribution(np.ones(1), 0.0)
    system = G.matrix.T.tolil()
    system[n - 1, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        mu = _solve(system.tocsr(), rhs)
    except SolverError as e:
        raise SolverError("chain is numerically reducible (%s)" % e)
    if mu.min() < -1e-8 * np.abs(mu).max():
        raise SolverError("chain is numerically reducible: invariant vector changes sign")
    mu = np.clip(mu, 0.0, None)
    mu = mu / mu.sum()
    residual = float(np.max(np.abs(G.matrix.T @ mu)))
    return StationaryDistribution(mu, residual)


@dataclass(frozen=True, eq=False)
class PoissonSolution:
    """Solution of L^v V + r_v = rho_v; ``values`` normalised so that min V = 1."""

    rho: float
    values: np.ndarray
    residual: float
    mu: StationaryDistribution
    rho_bordered: float
    grid: Optional[object] = None

    @property
    def ill_conditioned(self):
        return abs(self.rho - self.rho_bordered) > constants.RHO_CROSSCHECK_TOL * max(1.0, abs(self.rho))

    @property
    def V(self):
        return Field(self.grid, self.values) if self.grid is not None else self.values

    def __iter__(self):
        yield self.rho
        yield self.V


def poisson_solve(G, r_v, anchor=None):
    """
    Value determination for a fixed policy.
    Unknowns (V, rho) of the bordered system
        [ L  -1 ] [ V   ]   [ -r ]
        [ e_a 0 ] [ rho ] = [  0 ]
    i.e. V(anchor) = 0; the reported rho is mu^T r, cross-checked against the bordered rho.
    :return: PoissonSolution (unpacks as rho, V)
    """
    n = G.size
    r = r_v.values if isinstance(r_v, Field) else np.asarray(r_v, dtype=float)
    if r.shape != (n,):
        raise ValueError("cost vector has shape %s, generator has %d rows" % (r.shape, n))
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(G.matrix.data))):
        raise SolverError("Poisson system has non-finite entries")
    if anchor is None:
        anchor = G.grid.anchor_index if G.grid is not None else 0
    border = sp.csr_matrix(-np.ones((n, 1)))
    pin = sp.csr_matrix(([1.0], ([0], [anchor])), shape=(1, n))
    bordered = sp.bmat([[G.matrix, border], [pin, None]], format="csr")
    solution = _solve(bordered, np.concatenate([-r, [0.0]]))
    V, rho_bordered = solution[:n], float(solution[n])
    residual = float(np.max(np.abs(G.matrix @ V + r - rho_bordered)))
    mu = stationary_distribution(G)
    rho = float(mu.mu @ r)
    result = PoissonSolution(rho, V - V.min() + 1.0, residual, mu, rho_bordered, G.grid)
    if result.ill_conditioned:
        logger.warning("Poisson solve ill-conditioned: mu^T r = %.12g, bordered rho = %.12g",
                       rho, rho_bordered)
    return result


@dataclass(frozen=True)
class PolicyIterationStep:
    iteration: int
    rho: float
    policy_changes: int
    poisson_residual: float
    hjb_residual: float


@dataclass(frozen=True, eq=False)
class SolveReport:
    """Reference triple from policy iteration; V normalised with min V = 1."""

    rho: float
    V: Field
    policy: np.ndarray
    history: list = field(default_factory=list)
    converged: bool = False
    hjb_residual: float = float("nan")
    mu: Optional[StationaryDistribution] = None
    rho_bordered: float = float("nan")

    @property
    def grid(self):
        return self.V.grid

    @property
    def mu_V(self):
        """mu_{v*}[V*]: finite on any truncated grid, reported for completeness."""
        return self.mu.expectation(self.V) if self.mu is not None else float("nan")

    def target(self):
        """V*(x) - V*(anchor) + rho, the limit of the relative value iteration."""
        return self.V - self.V.anchor_value + self.rho

    def policy_controls(self, problem):
        return problem.controls.values[self.policy]

    def to_dict(self):
        return {
            "rho": self.rho,
            "rho_bordered": self.rho_bordered,
            "converged": self.converged,
            "hjb_residual": self.hjb_residual,
            "iterations": len(self.history),
            "min_V": float(self.V.values.min()),
            "V_at_anchor": self.V.anchor_value,
            "mu_V": self.mu_V,
            "history": [step.__dict__ for step in self.history],
        }


def nearest_control_policy(problem, grid, feedback=None):
    """
    Control index closest to feedback(x) at every node; feedback defaults to u = 0.
    :param feedback: callable (N, d) points -> (N, m) controls
    """
    if feedback is None:
        wanted = np.zeros((grid.size, problem.controls.m))
    else:
        wanted = np.asarray(feedback(grid.points), dtype=float).reshape(grid.size, problem.controls.m)
    return problem.controls.nearest(wanted)


def policy_iteration(problem, grid, v0=None, tol=constants.HJB_TOL, max_iter=constants.MAX_ITER,
                     hamiltonian=None):
    """
    Policy iteration: Poisson value determination then greedy improvement, until the
    policy is unchanged or the HJB residual drops to tol.
    :param v0: initial control index per node (default: control nearest to 0)
    :return: SolveReport (converged=False when max_iter runs out)
    """
    ham = hamiltonian or Hamiltonian(problem, grid)
    policy = nearest_control_policy(problem, grid) if v0 is None else np.array(v0, dtype=int)
    if policy.shape != (grid.size,) or policy.min() < 0 or policy.max() >= len(problem.controls):
        raise ValueError("initial policy must hold a valid control index for each of %d nodes" % grid.size)
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1, got %d" % max_iter)

    history = []
    converged = False
    solution, hjb = None, float("nan")
    for iteration in range(max_iter):
        solution = poisson_solve(build_policy_generator(problem, grid, policy), ham.policy_cost(policy))
        value, greedy = ham.minimize(solution.values)
        hjb = float(np.max(np.abs(value - solution.rho)))
        current = ham.evaluate_policy(solution.values, policy)
        slack = 1e-10 * max(1.0, float(np.max(np.abs(value))))
        improved = np.where(current <= value + slack, policy, greedy)
        changes = int(np.count_nonzero(improved != policy))
        history.append(PolicyIterationStep(iteration, solution.rho, changes, solution.residual, hjb))
        logger.info("PIA %s iter %d: rho = %.10f, changed nodes = %d, HJB residual = %.3e",
                    problem.name, iteration, solution.rho, changes, hjb)
        if iteration > 0 and history[-1].rho > history[-2].rho + tol:
            logger.warning("PIA rho increased from %.12g to %.12g", history[-2].rho, history[-1].rho)
        if changes == 0 or hjb <= tol:
            converged = True
            break
        if iteration + 1 < max_iter:
            policy = improved
    if not converged:
        logger.warning("PIA on %s did not converge in %d iterations (HJB residual %.3e)",
                       problem.name, max_iter, hjb)
    return SolveReport(solution.rho, solution.V, policy, history, converged, hjb, solution.mu,
                       solution.rho_bordered)


def weighted_norm(f, V):
    """sup_x |f(x)| / V(x) for a normalised V >= 1."""
    v = V.values if isinstance(V, Field) else np.asarray(V, dtype=float)
    values = f.values if isinstance(f, Field) else np.asarray(f, dtype=float)
    if v.min() < 1.0 - 1e-12:
        raise ValueError("weight must satisfy V >= 1 (min V = %g)" % v.min())
    return float(np.max(np.abs(values) / v))


@dataclass(frozen=True)
class RegionCheck:
    member: bool
    margin: float
    weighted_norm: float

    def __bool__(self):
        return self.member


def check_region_membership(phi0, V, c):
    """phi0 belongs to the region {h : h - V >= c} iff min(phi0 - V) >= c."""
    gap = float(np.min(phi0.values - V.values))
    return RegionCheck(gap >= c, gap - c, weighted_norm(phi0, V))
