import numpy as np
import pytest

from slipflow.basis import build_eigenbasis
from slipflow.geometry import DomainSpec, build_grid
from slipflow.lifting import BoundaryControl, LiftingCache, project_compatible


@pytest.fixture(scope="session")
def spec_small():
    return DomainSpec(length_x=2 * np.pi, modes_x=4, nodes_y=24,
                      friction_alpha=1.0, viscosity=0.5)


@pytest.fixture(scope="session")
def grid_small(spec_small):
    return build_grid(spec_small)


@pytest.fixture(scope="session")
def basis_small(spec_small, grid_small):
    return build_eigenbasis(spec_small, 12, grid_small)


@pytest.fixture(scope="session")
def cache_small(spec_small, grid_small):
    return LiftingCache(grid_small, spec_small.friction_alpha, 2)


@pytest.fixture(scope="session")
def spec_free():
    return DomainSpec(length_x=2 * np.pi, modes_x=4, nodes_y=24,
                      friction_alpha=0.0, viscosity=1.0)


@pytest.fixture(scope="session")
def grid_free(spec_free):
    return build_grid(spec_free)


@pytest.fixture(scope="session")
def basis_free(spec_free, grid_free):
    return build_eigenbasis(spec_free, 12, grid_free)


def random_compatible_control(length_x, n_modes, t_grid, scale, seed, p=4.0):
    rng = np.random.default_rng(np.random.SeedSequence([0xC0, seed]))
    ctrl = BoundaryControl.zeros(length_x, n_modes, t_grid, p)
    ctrl.gamma[:] = scale * rng.standard_normal(ctrl.gamma.shape)
    return project_compatible(ctrl)


@pytest.fixture(scope="session")
def make_control():
    return random_compatible_control
