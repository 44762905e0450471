"""Scikit-learn style estimator wrapping the full fitting pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import default_age_grouping, period_mapping
from .inference import FitConfig, fit as _fit
from .model import Model, ModelSpec


class SpatialLeeCarter(BaseEstimator):
    """Spatially extended Lee-Carter mortality model.

    Parameters follow scikit-learn conventions: everything passed to
    ``__init__`` is stored verbatim and all work happens in :meth:`fit`.

    Parameters
    ----------
    variant : "static" or "period"
        Whether the spatial effects are constant over time or split at
        ``cut_year`` into two period-specific surfaces.
    cut_year : int, optional
        First year of the second period (required for ``variant="period"``).
    share_spatial_hyper : bool
        Use a single (sigma_omega, phi) pair across age groups.
    pc_sigma_z, pc_sigma_kappa, pc_sigma_omega : (U, alpha) tuples
        PC prior parameters P(sigma > U) = alpha for each scale.
    pc_mixing : (U, alpha) tuple
        PC prior parameters P(phi < U) = alpha for the BYM2 mixing weight.
    seed : int
        Seed for the posterior draws used in compound summaries.
    max_hyper_evals : int
        Budget for the hyperparameter optimizer.
    """

    def __init__(self, variant="static", cut_year=None,
                 share_spatial_hyper=False,
                 pc_sigma_z=(1.0, 0.01), pc_sigma_kappa=(1.0, 0.01),
                 pc_sigma_omega=(1.0, 0.01), pc_mixing=(0.5, 2.0 / 3.0),
                 seed=0, max_hyper_evals=2000, n_draws=1000,
                 compute_z_sd=False, standard_errors=True, xatol=1e-4):
        self.variant = variant
        self.cut_year = cut_year
        self.share_spatial_hyper = share_spatial_hyper
        self.pc_sigma_z = pc_sigma_z
        self.pc_sigma_kappa = pc_sigma_kappa
        self.pc_sigma_omega = pc_sigma_omega
        self.pc_mixing = pc_mixing
        self.seed = seed
        self.max_hyper_evals = max_hyper_evals
        self.n_draws = n_draws
        self.compute_z_sd = compute_z_sd
        self.standard_errors = standard_errors
        self.xatol = xatol

    def _build_spec(self, dataset):
        grouping = default_age_grouping(dataset.ages)
        if self.variant == "period":
            if self.cut_year is None:
                raise ValueError("variant='period' requires cut_year")
            mapping = period_mapping(dataset.years, self.cut_year)
        else:
            mapping = period_mapping(dataset.years)
        return ModelSpec(
            variant=self.variant,
            age_grouping=grouping,
            period_mapping=mapping,
            share_spatial_hyper=self.share_spatial_hyper,
            pc_sigma_z=tuple(self.pc_sigma_z),
            pc_sigma_kappa=tuple(self.pc_sigma_kappa),
            pc_sigma_omega=tuple(self.pc_sigma_omega),
            pc_mixing=tuple(self.pc_mixing),
        )

    def fit(self, dataset, graph):
        """Fit the model to a :class:`MortalityDataset` and spatial graph."""
        spec = self._build_spec(dataset)
        self.model_ = Model(dataset, graph, spec)
        config = FitConfig(seed=self.seed,
                           max_hyper_evals=self.max_hyper_evals,
                           n_draws=self.n_draws,
                           compute_z_sd=self.compute_z_sd,
                           standard_errors=self.standard_errors,
                           xatol=self.xatol)
        self.result_ = _fit(self.model_, config)
        return self

    def predict(self, cells=None):
        """Posterior-mean log mortality rate.

        With ``cells=None`` returns the full (ages, years, areas) grid;
        otherwise ``cells`` is an iterable of (age, year, area) tuples and a
        vector is returned.
        """
        self._check_fitted()
        if cells is None:
            return self.result_.eta_grid()
        latent = self.result_.latent_mean
        return np.array([self.model_.predictor(latent, cell)
                         for cell in cells])

    def score(self, dataset=None):
        """Negative Poisson deviance (higher is better) on ``dataset``."""
        from .outputs import deviance

        self._check_fitted()
        return -deviance(self.result_, dataset).deviance_total

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise RuntimeError("estimator is not fitted; call fit() first")
