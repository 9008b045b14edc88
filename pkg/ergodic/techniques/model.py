#############################################
# CONTROL PROBLEMS, GRIDS AND FIELDS        #
#############################################

"""
A control problem is given through vectorised callables:
    drift(x, u)     x: (N, d), u: (m,) or (N, m)  ->  (N, d)
    diffusion(x)    x: (N, d)                     ->  (N, d, d), a = sigma sigma^T / 2
    cost(x, u)      x: (N, d), u: (m,) or (N, m)  ->  (N,)
    sigma(x)        optional, x: (N, d)           ->  (N, d, d)
The state space R^d is truncated to a rectangular box carrying a uniform grid whose
anchor node sits exactly at the origin.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from ergodic import constants
from ergodic.exceptions import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite ordered discretisation of the compact control space."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] == 0:
            raise ValueError("control set must be a nonempty list of control points")
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        if len(np.unique(values, axis=0)) != len(values):
            raise ValueError("control set contains duplicate values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, index):
        return self.values[index]

    @property
    def m(self):
        return self.values.shape[1]

    @classmethod
    def uniform(cls, lower, upper, n):
        points = np.linspace(lower, upper, n)
        # keep an exact zero control when the interval is symmetric
        points[np.abs(points) < 1e-12 * max(abs(lower), abs(upper), 1.0)] = 0.0
        return cls(points)

    @classmethod
    def product(cls, *axes):
        mesh = np.meshgrid(*[np.asarray(axis, dtype=float) for axis in axes], indexing="ij")
        return cls(np.stack([m.ravel() for m in mesh], axis=1))

    def nearest(self, u):
        """
        Index of the control closest (euclidean) to each requested value.
        :param u: (N, m) or (m,) requested control values
        :return: (N,) integer indices
        """
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[1] != self.m:
            u = u.reshape(-1, self.m)
        distance = ((u[:, None, :] - self.values[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(distance, axis=1)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on the truncation box [lower, upper] (per axis)."""

    lower: tuple
    upper: tuple
    n: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not (len(lower) == len(upper) == len(n)):
            raise ValueError("lower, upper and n must have one entry per axis")
        if len(n) not in (1, 2):
            raise ValueError("only 1- and 2-dimensional grids are supported, got %d" % len(n))
        for axis in range(len(n)):
            if n[axis] < 3:
                raise ValueError("axis %d needs at least 3 nodes, got %d" % (axis, n[axis]))
            if not lower[axis] < 0.0 < upper[axis]:
                raise ValueError("axis %d box [%g, %g] must contain the origin strictly"
                                 % (axis, lower[axis], upper[axis]))
            h = (upper[axis] - lower[axis]) / (n[axis] - 1)
            k = int(round(-lower[axis] / h))
            if abs(lower[axis] + k * h) > 1e-9 * h:
                raise ValueError("the origin is not a node of axis %d (h = %g)" % (axis, h))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "n", n)

    @classmethod
    def from_spacing(cls, lower, upper, h):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        h = np.broadcast_to(np.asarray(h, dtype=float), lower.shape)
        n = np.rint((upper - lower) / h).astype(int) + 1
        if np.any(np.abs((n - 1) * h - (upper - lower)) > 1e-9 * (upper - lower)):
            raise ValueError("box length is not a multiple of the spacing")
        return cls(tuple(lower), tuple(upper), tuple(n))

    @classmethod
    def box(cls, half_width, h, dim=1):
        return cls.from_spacing([-half_width] * dim, [half_width] * dim, h)

    @property
    def dim(self):
        return len(self.n)

    @property
    def shape(self):
        return self.n

    @property
    def size(self):
        return int(np.prod(self.n))

    @cached_property
    def spacing(self):
        return tuple((u - l) / (k - 1) for l, u, k in zip(self.lower, self.upper, self.n))

    @cached_property
    def anchor_multi_index(self):
        return tuple(int(round(-l / h)) for l, h in zip(self.lower, self.spacing))

    @cached_property
    def anchor_index(self):
        return int(np.ravel_multi_index(self.anchor_multi_index, self.shape))

    @cached_property
    def axes(self):
        axes = []
        for l, u, k, i0 in zip(self.lower, self.upper, self.n, self.anchor_multi_index):
            axis = np.linspace(l, u, k)
            axis[i0] = 0.0
            axis.setflags(write=False)
            axes.append(axis)
        return tuple(axes)

    @cached_property
    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        points.setflags(write=False)
        return points

    @cached_property
    def boundary_mask(self):
        index = np.indices(self.shape).reshape(self.dim, -1)
        mask = np.zeros(self.size, dtype=bool)
        for axis in range(self.dim):
            mask |= (index[axis] == 0) | (index[axis] == self.n[axis] - 1)
        return mask

    def locate(self, x):
        """Flat index of the node nearest to each point (points outside are clamped)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        multi = []
        for axis in range(self.dim):
            k = np.rint((x[:, axis] - self.lower[axis]) / self.spacing[axis]).astype(int)
            multi.append(np.clip(k, 0, self.n[axis] - 1))
        return np.ravel_multi_index(tuple(multi), self.shape)

    def clamp(self, x):
        """Project points onto the box; also report which rows were moved."""
        x = np.asarray(x, dtype=float)
        clamped = np.clip(x, self.lower, self.upper)
        return clamped, np.any(clamped != x, axis=-1)

    def in_box(self, radius):
        """Mask of nodes with |x|_inf <= radius."""
        return np.max(np.abs(self.points), axis=1) <= radius + 1e-12

    def in_region(self, lower, upper):
        lower = np.atleast_1d(lower)
        upper = np.atleast_1d(upper)
        tol = 1e-12 * max(max(map(abs, self.lower)), max(map(abs, self.upper)))
        return np.all((self.points >= lower - tol) & (self.points <= upper + tol), axis=1)

    def matches(self, other):
        return other is not None and self == other


@dataclass(frozen=True, eq=False)
class Field:
    """A real function sampled at every grid node (C-order flattening)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.shape[0] != self.grid.size:
            raise ValueError("field has %d values but the grid has %d nodes"
                             % (values.shape[0], self.grid.size))
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError("field value at node %d is not finite" % bad)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full(grid.size, float(c)))

    @classmethod
    def from_function(cls, grid, func):
        return cls(grid, func(grid.points))

    def __add__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self.values + other.values)
        return Field(self.grid, self.values + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self.values - other.values)
        return Field(self.grid, self.values - other)

    def __mul__(self, other):
        return Field(self.grid, self.values * float(other))

    __rmul__ = __mul__

    def _check(self, other):
        if not self.grid.matches(other.grid):
            raise ValueError("fields live on different grids")

    @property
    def anchor_value(self):
        return float(self.values[self.grid.anchor_index])

    def at(self, x):
        """Value at the node nearest to x."""
        return float(self.values[self.grid.locate(x)[0]])

    def interpolate(self, x):
        """Multilinear interpolation at points x (clamped to the box)."""
        x, _ = self.grid.clamp(np.atleast_2d(np.asarray(x, dtype=float)))
        interpolator = RegularGridInterpolator(self.grid.axes, self.values.reshape(self.grid.shape))
        return interpolator(x)

    def to_frame(self, name="value"):
        columns = ["x"] if self.grid.dim == 1 else ["x%d" % (i + 1) for i in range(self.grid.dim)]
        frame = pd.DataFrame(np.asarray(self.grid.points), columns=columns)
        frame[name] = self.values
        return frame


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Controlled diffusion dX = b(X, U) dt + sigma(X) dW with running cost r(X, U)."""

    dim: int
    drift: Callable
    diffusion: Callable
    cost: Callable
    controls: ControlSet
    name: str = "custom"
    sigma: Optional[Callable] = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2, got %r" % self.dim)

    def drift_at(self, x, u):
        return np.asarray(self.drift(np.atleast_2d(np.asarray(x, dtype=float)),
                                     np.atleast_1d(np.asarray(u, dtype=float))))[0]

    def cost_at(self, x, u):
        return float(self.cost(np.atleast_2d(np.asarray(x, dtype=float)),
                               np.atleast_1d(np.asarray(u, dtype=float)))[0])

    def noise(self, x):
        """sigma(x); recovered as the symmetric square root of 2 a(x) when not given."""
        x = np.atleast_2d(x)
        if self.sigma is not None:
            return np.asarray(self.sigma(x), dtype=float)
        eigenvalues, eigenvectors = np.linalg.eigh(2.0 * np.asarray(self.diffusion(x), dtype=float))
        root = np.sqrt(np.clip(eigenvalues, 0.0, None))
        return np.einsum("nij,nj,nkj->nik", eigenvectors, root, eigenvectors)

    def cost_table(self, points):
        """(K, N) running cost for every control at every point."""
        return np.stack([np.asarray(self.cost(points, u), dtype=float) for u in self.controls.values])

    def min_cost(self, points):
        return self.cost_table(points).min(axis=0)

    def validate(self, grid):
        """Check nondegeneracy, nonnegative cost and finiteness at every node/control pair."""
        points = grid.points
        a = np.asarray(self.diffusion(points), dtype=float)
        if not np.all(np.isfinite(a)):
            raise ValueError("%s: diffusion is not finite on the grid" % self.name)
        if not np.allclose(a, np.swapaxes(a, 1, 2)):
            raise ValueError("%s: diffusion matrix is not symmetric" % self.name)
        eigenvalues = np.linalg.eigvalsh(a)
        if np.any(eigenvalues <= 0.0):
            node = int(np.flatnonzero(np.any(eigenvalues <= 0.0, axis=1))[0])
            raise ValueError("%s: diffusion is degenerate at node %d" % (self.name, node))
        for k, u in enumerate(self.controls.values):
            b = np.asarray(self.drift(points, u), dtype=float)
            r = np.asarray(self.cost(points, u), dtype=float)
            if not (np.all(np.isfinite(b)) and np.all(np.isfinite(r))):
                raise ValueError("%s: drift or cost not finite for control %d" % (self.name, k))
            if np.any(r < 0.0):
                raise ValueError("%s: negative running cost for control %d" % (self.name, k))
        return True


##########################
# PRESET COEFFICIENTS    #
##########################

def _control_drift(x, u):
    x = np.atleast_2d(x)
    return np.broadcast_to(np.asarray(u, dtype=float), x.shape).copy()


def _half_identity(x):
    x = np.atleast_2d(x)
    d = x.shape[1]
    return np.broadcast_to(0.5 * np.eye(d), (x.shape[0], d, d)).copy()


def _unit_noise(x):
    x = np.atleast_2d(x)
    d = x.shape[1]
    return np.broadcast_to(np.eye(d), (x.shape[0], d, d)).copy()


def _control_energy(u, n):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        return np.full(n, float(u @ u))
    return np.sum(u ** 2, axis=1)


def _quadratic_cost(x, u):
    x = np.atleast_2d(x)
    return np.sum(x ** 2, axis=1) + _control_energy(u, x.shape[0])


def _state_cost(x, u):
    x = np.atleast_2d(x)
    return np.sum(x ** 2, axis=1)


def _doublewell_cost(x, u):
    x = np.atleast_2d(x)
    return (x[:, 0] ** 2 - 1.0) ** 2 + _control_energy(u, x.shape[0])


def preset(name, u_max=constants.DEFAULT_U_MAX, n_controls=None):
    """
    Built-in problems.
    :param name: one of constants.PRESET_NAMES
    :param u_max: half width of the control interval (per axis) for unconstrained presets
    :param n_controls: points per control axis
    :return: ControlProblem
    """
    if name not in constants.PRESET_NAMES:
        raise ConfigurationError("unknown preset %r (known: %s)" % (name, ", ".join(constants.PRESET_NAMES)))
    if name == "lqg2d":
        k = n_controls or constants.DEFAULT_CONTROLS_2D
        axis = ControlSet.uniform(-u_max, u_max, k).values[:, 0]
        return ControlProblem(2, _control_drift, _half_identity, _quadratic_cost,
                              ControlSet.product(axis, axis), name, _unit_noise)
    k = n_controls or constants.DEFAULT_CONTROLS_1D
    if name == "lqg1d":
        return ControlProblem(1, _control_drift, _half_identity, _quadratic_cost,
                              ControlSet.uniform(-u_max, u_max, k), name, _unit_noise)
    if name == "bounded-drift-1d":
        return ControlProblem(1, _control_drift, _half_identity, _state_cost,
                              ControlSet.uniform(-1.0, 1.0, k), name, _unit_noise)
    return ControlProblem(1, _control_drift, _half_identity, _doublewell_cost,
                          ControlSet.uniform(-u_max, u_max, k), name, _unit_noise)


@dataclass(frozen=True)
class LevelSet:
    """Nodes where min_u r(x, u) <= rho, with the grid-level compactness report."""

    indices: np.ndarray
    interior: bool
    margin: float
    lower: Optional[tuple] = None
    upper: Optional[tuple] = None

    def __len__(self):
        return len(self.indices)


def near_monotone_level_set(problem, rho, grid):
    """
    Sub-rho level set of the minimised running cost.
    interior: the set avoids the boundary layer of the truncation box
    margin: min over the complement of (min_u r - rho), +inf when the complement is empty
    lower/upper: smallest grid box containing the set (None when empty)
    """
    reduced = problem.min_cost(grid.points)
    inside = reduced <= rho
    indices = np.flatnonzero(inside)
    outside = reduced[~inside]
    margin = float(outside.min() - rho) if outside.size else float("inf")
    if indices.size == 0:
        return LevelSet(indices, True, margin)
    pts = grid.points[indices]
    interior = not bool(np.any(grid.boundary_mask[indices]))
    if not interior:
        logger.warning("level set {min r <= %g} touches the truncation box of %s", rho, problem.name)
    return LevelSet(indices, interior, margin, tuple(pts.min(axis=0)), tuple(pts.max(axis=0)))
