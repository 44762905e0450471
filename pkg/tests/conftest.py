import dataclasses

import numpy as np
import pytest

import spatial_lc as sl


@pytest.fixture(scope="session")
def small_sim():
    """A small static-variant simulated dataset shared across tests."""
    return sl.simulate(sl.SimulationConfig(n_ages=6, n_years=8, n_areas=5,
                                           seed=3))


@pytest.fixture(scope="session")
def small_model(small_sim):
    return sl.Model(small_sim.dataset, small_sim.graph, small_sim.spec)


@pytest.fixture(scope="session")
def small_fit(small_model):
    return sl.fit(small_model, sl.FitConfig(max_hyper_evals=500, seed=0))


@pytest.fixture(scope="session")
def tiny_sim():
    """The 3 ages x 3 years x 2 areas verification instance."""
    return sl.simulate(sl.SimulationConfig(n_ages=3, n_years=3, n_areas=2,
                                           graph=sl.SpatialGraph.from_neighbor_lists([(1,), (0,)]),
                                           seed=7, exposure=500.0))


@pytest.fixture(scope="session")
def tiny_model(tiny_sim):
    return sl.Model(tiny_sim.dataset, tiny_sim.graph, tiny_sim.spec)


def make_spec(sim, **overrides):
    return dataclasses.replace(sim.spec, **overrides)


def constrained_pinv(structure_matrix):
    """Generalized inverse restricted to the orthogonal complement of the
    null space (the covariance of the constrained intrinsic field)."""
    mat = np.asarray(structure_matrix)
    return np.linalg.pinv(mat, hermitian=True)
