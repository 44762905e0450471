"""Tests for the SVD-based classical Lee-Carter fit."""

import numpy as np
import pytest

import spatial_lc as sl
from spatial_lc.classic import (ClassicFitError, aggregate_over_areas,
                                classic_lc_fit)


def rank1_surface(n_ages, n_years, seed=0):
    """An exact alpha + beta*kappa log-rate surface with the identification
    conventions already applied."""
    rng = np.random.default_rng(seed)
    alpha = -4.0 + 0.5 * rng.standard_normal(n_ages)
    beta = rng.uniform(0.5, 1.5, n_ages)
    beta /= beta.sum()
    kappa = np.linspace(3.0, -3.0, n_years) + 0.2 * rng.standard_normal(n_years)
    kappa -= kappa.mean()
    return alpha, beta, kappa


class TestExactRecovery:
    @pytest.mark.parametrize("shape", [(5, 8), (12, 10), (30, 4)])
    def test_recovers_rank1_truth(self, shape):
        n_ages, n_years = shape
        alpha, beta, kappa = rank1_surface(n_ages, n_years, seed=shape[0])
        logm = alpha[:, None] + beta[:, None] * kappa[None, :]
        exposures = np.full(shape, 1e6)
        deaths = exposures * np.exp(logm)
        fit = classic_lc_fit(deaths, exposures)
        assert not fit.degenerate_beta
        np.testing.assert_allclose(fit.alpha, alpha, atol=1e-10)
        np.testing.assert_allclose(fit.beta, beta, atol=1e-10)
        np.testing.assert_allclose(fit.kappa, kappa, atol=1e-10)

    def test_reconstruction_is_exact(self):
        alpha, beta, kappa = rank1_surface(7, 9, seed=2)
        logm = alpha[:, None] + beta[:, None] * kappa[None, :]
        exposures = np.full(logm.shape, 5e5)
        fit = classic_lc_fit(exposures * np.exp(logm), exposures)
        recon = fit.alpha[:, None] + fit.beta[:, None] * fit.kappa[None, :]
        np.testing.assert_allclose(recon, logm, atol=1e-10)

    def test_identification_conventions(self):
        rng = np.random.default_rng(5)
        exposures = np.full((6, 8), 1e4)
        deaths = rng.poisson(exposures * 0.01) + 1.0
        fit = classic_lc_fit(deaths, exposures)
        assert abs(fit.beta.sum() - 1.0) < 1e-12
        assert abs(fit.kappa.sum()) < 1e-9 * max(1.0, np.abs(fit.kappa).max())

    def test_sign_convention_invariant(self):
        # the fit must not depend on the arbitrary SVD sign
        alpha, beta, kappa = rank1_surface(5, 6, seed=9)
        logm = alpha[:, None] + beta[:, None] * kappa[None, :]
        exposures = np.full(logm.shape, 1e6)
        fit1 = classic_lc_fit(exposures * np.exp(logm), exposures)
        fit2 = classic_lc_fit(exposures * np.exp(logm[:, ::-1]), exposures)
        np.testing.assert_allclose(fit1.kappa, fit2.kappa[::-1], atol=1e-9)


class TestDegenerateAndErrors:
    def test_constant_in_time_is_degenerate(self):
        logm = np.tile(np.array([-4.0, -3.0, -2.0])[:, None], (1, 5))
        exposures = np.full(logm.shape, 1e5)
        fit = classic_lc_fit(exposures * np.exp(logm), exposures)
        assert fit.degenerate_beta
        np.testing.assert_allclose(fit.beta, 1.0 / 3.0)
        np.testing.assert_allclose(fit.kappa, 0.0)
        np.testing.assert_allclose(fit.alpha, logm[:, 0], atol=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ClassicFitError):
            classic_lc_fit(np.ones((3, 4)), np.ones((4, 3)))

    def test_non_matrix_raises(self):
        with pytest.raises(ClassicFitError):
            classic_lc_fit(np.ones(5), np.ones(5))

    def test_zero_exposure_raises(self):
        exposures = np.ones((3, 3))
        exposures[1, 1] = 0.0
        with pytest.raises(ClassicFitError):
            classic_lc_fit(np.ones((3, 3)), exposures)

    def test_zero_deaths_raises(self):
        deaths = np.ones((3, 3))
        deaths[0, 2] = 0.0
        with pytest.raises(ClassicFitError, match="aggregate"):
            classic_lc_fit(deaths, np.ones((3, 3)))


class TestAggregate:
    def test_sums_over_areas(self, small_sim):
        deaths, exposures = aggregate_over_areas(small_sim.dataset)
        assert deaths.shape == (len(small_sim.dataset.ages),
                                len(small_sim.dataset.years))
        np.testing.assert_allclose(deaths,
                                   small_sim.dataset.deaths.sum(axis=2))
        np.testing.assert_allclose(exposures,
                                   small_sim.dataset.exposures.sum(axis=2))

    def test_aggregated_fit_runs(self, small_sim):
        deaths, exposures = aggregate_over_areas(small_sim.dataset)
        if np.any(deaths == 0):
            deaths = deaths + 0.5
        fit = classic_lc_fit(deaths, exposures)
        assert fit.alpha.shape == (len(small_sim.dataset.ages),)
        assert np.all(np.isfinite(fit.kappa))
