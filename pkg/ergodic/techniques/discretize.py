#############################################
# MONOTONE GENERATOR DISCRETISATION         #
#############################################

"""
Markov chain approximation of the controlled generator
    L^u f = a^{ij} d_ij f + b^i(x, u) d_i f
on a uniform grid:
    - central second differences for a^{ii} d_ii,
    - the 7-point positive stencil for a^{12} (2-D only),
    - first-order upwind differences for the drift (forward weighted by b+, backward by b-),
    - reflecting closure: jumps that would leave the box are dropped, the diagonal is the
      negated sum of the remaining off-diagonal rates, so every row sums to zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ergodic import constants
from ergodic.exceptions import MonotonicityError
from ergodic.techniques.model import Field, GridSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Sparse CTMC generator: nonnegative off-diagonals, zero row sums."""

    matrix: sp.csr_matrix
    grid: Optional[GridSpec] = None
    control: Optional[np.ndarray] = None
    # per node and axis: +1 forward difference used, -1 backward, 0 no drift
    upwind: Optional[np.ndarray] = None

    @classmethod
    def from_rates(cls, rows):
        """Generator from a dense nested list (small hand-built chains)."""
        return cls(sp.csr_matrix(np.asarray(rows, dtype=float)))

    @property
    def size(self):
        return self.matrix.shape[0]

    @property
    def diagonal(self):
        return self.matrix.diagonal()

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def offdiagonal_min(self):
        off = (self.matrix - sp.diags(self.diagonal)).tocoo()
        return float(off.data.min()) if off.nnz else 0.0


def _neighbours(grid, offset):
    """(source nodes, target nodes) for the jump x -> x + offset that stays in the box."""
    multi = np.indices(grid.shape).reshape(grid.dim, -1)
    target = multi + np.asarray(offset)[:, None]
    valid = np.all((target >= 0) & (target < np.asarray(grid.shape)[:, None]), axis=0)
    sources = np.flatnonzero(valid)
    targets = np.ravel_multi_index(tuple(target[:, valid]), grid.shape)
    return sources, targets


def _assemble(grid, a, b):
    """
    Assemble the generator for per-node diffusion a (N, d, d) and drift b (N, d).
    :return: (csr matrix, upwind directions (N, d))
    """
    n_nodes, dim = grid.size, grid.dim
    h = grid.spacing
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).reshape(n_nodes, dim)
    if not np.all(np.isfinite(b)):
        node = int(np.flatnonzero(~np.all(np.isfinite(b), axis=1))[0])
        raise MonotonicityError("drift is not finite at node %d" % node, node=node, term="drift")
    jumps = []
    axis_weight = [a[:, i, i] / h[i] ** 2 for i in range(dim)]
    if dim == 2:
        cross = a[:, 0, 1]
        correction = np.abs(cross) / (h[0] * h[1])
        axis_weight = [w - correction for w in axis_weight]
        for offset in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
            sign = offset[0] * offset[1]
            jumps.append((offset, np.where(np.sign(cross) == sign, correction, 0.0),
                          "cross term a12 (diagonal neighbour %+d,%+d)" % offset))
    for i in range(dim):
        forward = np.zeros(dim, dtype=int)
        forward[i] = 1
        jumps.append((tuple(forward), axis_weight[i] + np.maximum(b[:, i], 0.0) / h[i],
                      "axis %d forward (diffusion + upwind drift)" % i))
        jumps.append((tuple(-forward), axis_weight[i] + np.maximum(-b[:, i], 0.0) / h[i],
                      "axis %d backward (diffusion + upwind drift)" % i))

    rows, cols, data = [], [], []
    for offset, weight, term in jumps:
        sources, targets = _neighbours(grid, offset)
        w = weight[sources]
        if np.any(w < 0.0):
            node = int(sources[np.argmax(w < 0.0)])
            raise MonotonicityError("negative weight %.6g at node %d, term: %s"
                                    % (weight[node], node, term), node=node, term=term)
        rows.append(sources)
        cols.append(targets)
        data.append(w)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    diagonal = -np.bincount(rows, weights=data, minlength=n_nodes)
    everything = np.arange(n_nodes)
    matrix = sp.csr_matrix((np.concatenate([data, diagonal]),
                            (np.concatenate([rows, everything]), np.concatenate([cols, everything]))),
                           shape=(n_nodes, n_nodes))
    return matrix, np.sign(b).astype(int)


def _check_nondegenerate(a):
    eigenvalues = np.linalg.eigvalsh(a)
    if np.any(eigenvalues <= 0.0):
        node = int(np.flatnonzero(np.any(eigenvalues <= 0.0, axis=1))[0])
        raise ValueError("diffusion matrix is not positive definite at node %d" % node)


def build_generator(problem, grid, u):
    """
    L^u for a single control value u applied at every node.
    :return: GeneratorMatrix
    """
    a = np.asarray(problem.diffusion(grid.points), dtype=float)
    _check_nondegenerate(a)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    matrix, upwind = _assemble(grid, a, problem.drift(grid.points, u))
    return GeneratorMatrix(matrix, grid, u, upwind)


def build_policy_generator(problem, grid, policy):
    """L^v for a stationary Markov policy given as one control index per node."""
    policy = np.asarray(policy, dtype=int)
    if policy.shape != (grid.size,):
        raise ValueError("policy must hold one control index per node")
    a = np.asarray(problem.diffusion(grid.points), dtype=float)
    _check_nondegenerate(a)
    matrix, upwind = _assemble(grid, a, problem.drift(grid.points, problem.controls.values[policy]))
    return GeneratorMatrix(matrix, grid, None, upwind)


def apply_generator(G, f):
    """Matrix-vector product L f; returns a Field when both operands carry a grid."""
    values = f.values if isinstance(f, Field) else np.asarray(f, dtype=float)
    if values.shape != (G.size,):
        raise ValueError("generator has %d rows but the field has shape %s" % (G.size, values.shape))
    if isinstance(f, Field) and G.grid is not None:
        if not G.grid.matches(f.grid):
            raise ValueError("generator and field live on different grids")
        return Field(G.grid, G.matrix @ values)
    return G.matrix @ values


def discrete_gradient(grid, values):
    """Central differences inside, one-sided at the boundary; (N, d). Reporting only."""
    field = np.asarray(values, dtype=float).reshape(grid.shape)
    gradient = np.gradient(field, *grid.axes, edge_order=1)
    if grid.dim == 1:
        gradient = [gradient]
    return np.stack([g.ravel() for g in gradient], axis=1)


@dataclass(frozen=True, eq=False)
class HamiltonianResult:
    value: Field
    argmin: np.ndarray

    def controls(self, problem):
        return problem.controls.values[self.argmin]


class Hamiltonian:
    """
    min_u [L^u phi + r(., u)] with drift and cost tabulated once per control, so that
    repeated evaluations (time marching, policy improvement) only do differences.
    """

    def __init__(self, problem, grid):
        self.problem = problem
        self.grid = grid
        points = grid.points
        a = np.asarray(problem.diffusion(points), dtype=float)
        _check_nondegenerate(a)
        self.diffusion, _ = _assemble(grid, a, np.zeros((grid.size, grid.dim)))
        drift = np.stack([np.asarray(problem.drift(points, u), dtype=float).reshape(grid.size, grid.dim)
                          for u in problem.controls.values])
        self.cost = problem.cost_table(points)
        if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(self.cost))):
            raise ValueError("%s: drift or cost not finite on the grid" % problem.name)
        h = np.asarray(grid.spacing)
        self.forward_rate = np.maximum(drift, 0.0) / h
        self.backward_rate = np.maximum(-drift, 0.0) / h
        self._nodes = np.arange(grid.size)
        logger.debug("tabulated %d controls on %d nodes for %s", len(problem.controls), grid.size, problem.name)

    def differences(self, values):
        """Jumps phi(x + h e_i) - phi(x) and phi(x - h e_i) - phi(x); zero where the jump leaves the box."""
        grid = self.grid
        field = values.reshape(grid.shape)
        forward = np.zeros((grid.dim,) + grid.shape)
        backward = np.zeros((grid.dim,) + grid.shape)
        for axis in range(grid.dim):
            step = np.diff(field, axis=axis)
            lead = [slice(None)] * grid.dim
            trail = [slice(None)] * grid.dim
            lead[axis] = slice(0, -1)
            trail[axis] = slice(1, None)
            forward[axis][tuple(lead)] = step
            backward[axis][tuple(trail)] = -step
        return forward.reshape(grid.dim, -1).T, backward.reshape(grid.dim, -1).T

    def candidates(self, values):
        """(K, N) table of L^u phi + r(., u)."""
        values = np.asarray(values, dtype=float)
        forward, backward = self.differences(values)
        second = self.diffusion @ values
        return (second[None, :]
                + np.einsum("knd,nd->kn", self.forward_rate, forward)
                + np.einsum("knd,nd->kn", self.backward_rate, backward)
                + self.cost)

    def minimize(self, values):
        table = self.candidates(values)
        argmin = np.argmin(table, axis=0)
        return table[argmin, self._nodes], argmin

    def evaluate_policy(self, values, policy):
        """L^v phi + r_v for per-node control indices."""
        values = np.asarray(values, dtype=float)
        forward, backward = self.differences(values)
        return (self.diffusion @ values
                + np.sum(self.forward_rate[policy, self._nodes] * forward, axis=1)
                + np.sum(self.backward_rate[policy, self._nodes] * backward, axis=1)
                + self.cost[policy, self._nodes])

    def policy_cost(self, policy):
        return self.cost[np.asarray(policy, dtype=int), self._nodes]

    def max_rate(self):
        """Largest jump intensity |diagonal| over nodes and controls (interior bound)."""
        drift_rate = (self.forward_rate + self.backward_rate).sum(axis=2)
        return float(np.max(-self.diffusion.diagonal()[None, :] + drift_rate))

    def stable_dt(self):
        return constants.STABILITY_FACTOR / self.max_rate()


def min_hamiltonian(problem, grid, phi):
    """
    Pointwise minimisation of L^u phi + r over the control set; ties go to the
    smallest control index.
    :return: HamiltonianResult
    """
    if not grid.matches(phi.grid):
        raise ValueError("field does not live on the requested grid")
    value, argmin = Hamiltonian(problem, grid).minimize(phi.values)
    return HamiltonianResult(Field(grid, value), argmin)
