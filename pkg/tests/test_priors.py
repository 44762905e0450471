import numpy as np
import pytest

from spatial_lc.graphs import mixing_reference_eigenvalues, ring_graph, scaled_besag
from spatial_lc.priors import (PcPriorMixing, PriorError, WideGaussianPrior,
                               pc_prior_mixing, pc_prior_stddev,
                               rw2_scaled, rw2_structure)


class TestRw2:
    def test_stencil(self):
        r = rw2_structure(5).matrix
        d = np.zeros((3, 5))
        for i in range(3):
            d[i, i:i + 3] = (1, -2, 1)
        np.testing.assert_array_equal(r, d.T @ d)

    def test_null_space_constant_and_linear(self):
        r = rw2_structure(8).matrix
        t = np.arange(8.0)
        np.testing.assert_allclose(r @ np.ones(8), 0.0, atol=1e-12)
        np.testing.assert_allclose(r @ t, 0.0, atol=1e-12)

    def test_rank(self):
        assert rw2_structure(7).rank == 5

    def test_too_short(self):
        with pytest.raises(PriorError):
            rw2_structure(2)

    @pytest.mark.parametrize("T", [3, 5, 10, 30])
    def test_scaled_geometric_mean_one(self, T):
        """Scaling factor against the dense generalized-inverse oracle."""
        scaled = rw2_scaled(T)
        margs = np.diag(np.linalg.pinv(scaled.matrix, hermitian=True))
        assert abs(np.exp(np.mean(np.log(margs))) - 1.0) < 1e-8

    def test_scaling_factor_value(self):
        raw = rw2_structure(6)
        scaled = rw2_scaled(6)
        oracle = np.exp(np.mean(np.log(
            np.diag(np.linalg.pinv(raw.matrix, hermitian=True)))))
        assert abs(scaled.scaling_factor - oracle) < 1e-12
        np.testing.assert_allclose(scaled.matrix, raw.matrix * oracle,
                                   atol=1e-12)


class TestWideGaussian:
    def test_log_density_matches_normal(self):
        prior = WideGaussianPrior(variance=100.0)
        x = np.array([1.0, -2.0])
        expected = (-0.5 * 2 * np.log(2 * np.pi * 100.0)
                    - 0.5 * (1.0 + 4.0) / 100.0)
        assert abs(prior.log_density(x) - expected) < 1e-12

    def test_invalid_variance(self):
        with pytest.raises(PriorError):
            WideGaussianPrior(variance=0.0)


class TestPcStddev:
    def test_rate_frozen_values(self):
        # -ln(0.01)/1 and -ln(0.25)/1
        assert abs(pc_prior_stddev(1.0, 0.01).rate - 4.605170185988091) < 1e-14
        assert abs(pc_prior_stddev(1.0, 0.25).rate - 1.3862943611198906) < 1e-14

    def test_tail_probability(self):
        prior = pc_prior_stddev(2.0, 0.05)
        # P(sigma > U) = exp(-rate U) = alpha by construction
        assert abs(np.exp(-prior.rate * 2.0) - 0.05) < 1e-14

    def test_density_integrates_to_one(self):
        prior = pc_prior_stddev(1.0, 0.01)
        grid = np.linspace(1e-9, 20.0, 400_001)
        dens = np.exp([prior.log_density(s) for s in grid])
        assert abs(np.trapz(dens, grid) - 1.0) < 1e-6

    def test_nonpositive_sigma(self):
        assert pc_prior_stddev(1.0, 0.5).log_density(0.0) == -np.inf

    def test_invalid_params(self):
        with pytest.raises(PriorError):
            pc_prior_stddev(-1.0, 0.5)
        with pytest.raises(PriorError):
            pc_prior_stddev(1.0, 1.5)


@pytest.fixture(scope="module")
def ring_eigs():
    graph = ring_graph(10)
    structure, _ = scaled_besag(graph)
    return mixing_reference_eigenvalues(structure, graph)


class TestPcMixing:
    def test_density_integrates_to_one(self, ring_eigs):
        prior = pc_prior_mixing(0.5, 2.0 / 3.0, ring_eigs, grid_size=4000)
        dens = np.exp(prior.log_dens)
        assert abs(dens.mean() - 1.0) < 1e-3  # midpoint rule on (0, 1)

    def test_tail_probability_calibrated(self, ring_eigs):
        U, alpha = 0.5, 2.0 / 3.0
        prior = pc_prior_mixing(U, alpha, ring_eigs, grid_size=8000)
        dens = np.exp(prior.log_dens)
        below = prior.grid < U
        mass_below = dens[below].sum() / prior.grid.size
        assert abs(mass_below - alpha) < 1e-3

    def test_other_calibration_point(self, ring_eigs):
        prior = pc_prior_mixing(0.3, 0.9, ring_eigs, grid_size=8000)
        dens = np.exp(prior.log_dens)
        mass_below = dens[prior.grid < 0.3].sum() / prior.grid.size
        assert abs(mass_below - 0.9) < 1e-3

    def test_outside_unit_interval(self, ring_eigs):
        prior = pc_prior_mixing(0.5, 2.0 / 3.0, ring_eigs)
        assert prior.log_density(0.0) == -np.inf
        assert prior.log_density(1.0) == -np.inf

    def test_invalid_params(self, ring_eigs):
        with pytest.raises(PriorError):
            pc_prior_mixing(1.5, 0.5, ring_eigs)
        with pytest.raises(PriorError):
            pc_prior_mixing(0.5, 0.5, np.array([]))

    def test_iid_structure_rejected(self):
        with pytest.raises(PriorError, match="indistinguishable"):
            pc_prior_mixing(0.5, 0.5, np.ones(4))

    def test_interpolation_matches_grid(self, ring_eigs):
        prior = pc_prior_mixing(0.5, 2.0 / 3.0, ring_eigs)
        i = 137
        assert abs(prior.log_density(prior.grid[i]) - prior.log_dens[i]) < 1e-12
