"""Tests for the Metropolis-within-Gibbs verification sampler."""

import numpy as np
import pytest

import spatial_lc as sl
from spatial_lc.mcmc import McmcConfig, mcmc_fit
from spatial_lc.priors import rw2_scaled


def constrained_pinv(structure_matrix):
    """Covariance of the constrained intrinsic field: generalized inverse
    restricted to the orthogonal complement of the null space."""
    return np.linalg.pinv(np.asarray(structure_matrix), hermitian=True)


def time_only_model(n_ages=3, n_years=8):
    """A model with only the bilinear blocks (no spatial, no overdispersion)
    on a single area, suitable for prior-only checks."""
    graph = sl.SpatialGraph.from_neighbor_lists([()])
    rng = np.random.default_rng(0)
    exposures = np.full((n_ages, n_years, 1), 1000.0)
    deaths = rng.poisson(exposures * 0.02).astype(float)
    ds = sl.MortalityDataset(ages=tuple(range(n_ages)),
                             years=tuple(range(2000, 2000 + n_years)),
                             areas=("a",), deaths=deaths, exposures=exposures)
    spec = sl.ModelSpec(variant="static",
                        age_grouping=sl.default_age_grouping(ds.ages),
                        period_mapping=sl.period_mapping(ds.years),
                        include_spatial=False, include_overdispersion=False)
    return sl.Model(ds, graph, spec)


class TestDeterminism:
    def test_same_seed_identical_draws(self, tiny_model):
        cfg = McmcConfig(iterations=600, burn_in=200, seed=42)
        a = mcmc_fit(tiny_model, cfg)
        b = mcmc_fit(tiny_model, cfg)
        np.testing.assert_array_equal(a.xs_draws, b.xs_draws)
        np.testing.assert_array_equal(a.z_draws, b.z_draws)
        np.testing.assert_array_equal(a.hyper_draws, b.hyper_draws)

    def test_different_seed_differs(self, tiny_model):
        a = mcmc_fit(tiny_model, McmcConfig(iterations=600, burn_in=200,
                                            seed=1))
        b = mcmc_fit(tiny_model, McmcConfig(iterations=600, burn_in=200,
                                            seed=2))
        assert np.any(a.xs_draws != b.xs_draws)

    def test_thinning(self, tiny_model):
        chain = mcmc_fit(tiny_model, McmcConfig(iterations=1000, burn_in=200,
                                                thin=4, seed=0))
        assert chain.n_draws == 200


class TestAcceptance:
    def test_rates_in_reasonable_range(self, tiny_model):
        chain = mcmc_fit(tiny_model, McmcConfig(iterations=4000, burn_in=1500,
                                                seed=3))
        for name, rate in chain.acceptance.items():
            assert 0.05 < rate < 0.95, (name, rate)


@pytest.fixture(scope="module")
def prior_chain():
    model = time_only_model(n_ages=3, n_years=8)
    hyper = sl.Hyperparameters(sigma_kappa=0.3)
    cfg = McmcConfig(iterations=60000, burn_in=10000, thin=5, seed=9,
                     prior_only=True, fix_hyper=hyper)
    return model, mcmc_fit(model, cfg)


class TestPriorOnly:
    """With the likelihood switched off the chain samples the constrained
    latent prior, for which moments are available in closed form."""

    def test_kappa_covariance_matches_oracle(self, prior_chain):
        model, chain = prior_chain
        draws = chain.block_draws("kappa")
        # the prior-only sampler pins both null directions of the RW2
        # (level and trend), so the covariance is sigma^2 times the
        # generalized inverse of the scaled structure
        oracle = 0.3 ** 2 * constrained_pinv(np.asarray(
            rw2_scaled(8).matrix))
        emp = np.cov(draws.T)
        var_se = chain.mc_standard_error(draws ** 2)
        tol = np.maximum(6.0 * np.sqrt(np.outer(var_se, var_se)), 0.004)
        assert np.all(np.abs(emp - oracle) < tol)

    def test_kappa_constraints_hold_per_draw(self, prior_chain):
        model, chain = prior_chain
        draws = chain.block_draws("kappa")
        np.testing.assert_allclose(draws.sum(axis=1), 0.0, atol=1e-8)
        t = np.arange(8, dtype=float)
        np.testing.assert_allclose(draws @ (t - t.mean()), 0.0, atol=1e-8)

    def test_beta_constraint_holds_per_draw(self, prior_chain):
        model, chain = prior_chain
        draws = chain.block_draws("beta")
        np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-8)


class TestPosteriorSanity:
    def test_matches_gaussian_approximation(self, tiny_model):
        """Posterior means from the sampler at fixed hyperparameters agree
        with the Gaussian approximation within Monte-Carlo error."""
        from spatial_lc import inference as inf
        hyper = sl.default_hyperparameters(tiny_model.spec)
        approx = inf.inner_fit(tiny_model, hyper)
        chain = mcmc_fit(tiny_model,
                         McmcConfig(iterations=20000, burn_in=5000, seed=5,
                                    fix_hyper=hyper))
        mean = chain.xs_draws.mean(axis=0)
        mcse = chain.mc_standard_error(chain.xs_draws)
        tol = np.maximum(0.05, 5.0 * mcse)
        assert np.all(np.abs(mean - approx.xs_mode) < tol)

    def test_latent_mean_shapes(self, tiny_model):
        chain = mcmc_fit(tiny_model, McmcConfig(iterations=800, burn_in=300,
                                                seed=0))
        latent = chain.latent_mean()
        assert latent.alpha.shape == (tiny_model.layout.n_ages,)
        assert latent.z.shape == (tiny_model.layout.n_ages,
                                  tiny_model.layout.n_years,
                                  tiny_model.layout.n_areas)
