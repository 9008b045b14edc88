import numpy as np
import pytest

from ergodic.techniques.evolve import EvolutionTrajectory
from ergodic.techniques.model import ControlProblem, ControlSet, GridSpec, preset
from ergodic.techniques.stationary import policy_iteration


@pytest.fixture(scope="session")
def lqg():
    return preset("lqg1d")


@pytest.fixture(scope="session")
def coarse_grid():
    """[-3, 3] with h = 0.1: cheap enough for every default test."""
    return GridSpec.box(3.0, 0.1)


@pytest.fixture(scope="session")
def coarse_report(lqg, coarse_grid):
    return policy_iteration(lqg, coarse_grid)


@pytest.fixture
def constant_cost():
    """Factory: drift u, diffusion 1/2, running cost identically c."""

    def make(c, controls=(-1.0, 0.0, 1.0)):
        return ControlProblem(
            1,
            lambda x, u: np.broadcast_to(np.asarray(u, dtype=float), np.atleast_2d(x).shape).copy(),
            lambda x: np.full((len(x), 1, 1), 0.5),
            lambda x, u: np.full(len(x), float(c)),
            ControlSet(np.asarray(controls)),
            "constant-%g" % c,
        )

    return make


@pytest.fixture
def make_trajectory():
    """Factory for hand-built trajectories: anchor series plus first/last snapshots."""

    def make(grid, anchor, mode="vi", dt=0.1, snapshots=None, steps=None, rho=None):
        anchor = np.asarray(anchor, dtype=float)
        n = len(anchor) - 1
        steps = np.array([0, n]) if steps is None else np.asarray(steps)
        if snapshots is None:
            snapshots = np.zeros((len(steps), grid.size)) + anchor[steps][:, None]
        return EvolutionTrajectory(grid, mode, dt, "explicit", steps, np.asarray(snapshots, dtype=float),
                                   anchor, anchor.copy() if rho is None else np.full_like(anchor, rho), rho)

    return make
