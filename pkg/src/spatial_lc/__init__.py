"""Spatially extended Lee-Carter mortality model.

Poisson log-bilinear mortality model with a second-order random-walk time
index, BYM2 spatial effects per age group (optionally per period) and PC
priors, fitted by a nested Laplace approximation with an MCMC sampler for
verification.
"""

from .classic import ClassicFit, classic_lc_fit
from .data import (AgeGrouping, DataError, MortalityDataset, PeriodMapping,
                   default_age_grouping, load_adjacency, load_dataset,
                   period_mapping, write_dataset)
from .estimator import SpatialLeeCarter
from .graphs import SpatialGraph, grid_graph, ring_graph, scaled_besag
from .inference import (FitConfig, FitResult, GaussianApprox, InferenceError,
                        fit, inner_fit, optimize_hyper)
from .mcmc import McmcChain, McmcConfig, mcmc_fit
from .model import (Hyperparameters, LatentField, Model, ModelSpec,
                    build_constraints, default_hyperparameters)
from .outputs import deviance, export_geojoin, summarize, write_bundle
from .simulate import SimulationConfig, SimulationResult, simulate

__version__ = "0.1.0"

__all__ = [
    "AgeGrouping", "ClassicFit", "DataError", "FitConfig", "FitResult",
    "GaussianApprox", "Hyperparameters", "InferenceError", "LatentField",
    "McmcChain", "McmcConfig", "Model", "ModelSpec", "MortalityDataset",
    "PeriodMapping", "SimulationConfig", "SimulationResult", "SpatialGraph",
    "SpatialLeeCarter", "build_constraints", "classic_lc_fit",
    "default_age_grouping", "default_hyperparameters", "deviance",
    "export_geojoin", "fit", "grid_graph", "inner_fit", "load_adjacency",
    "load_dataset", "mcmc_fit", "optimize_hyper", "period_mapping",
    "ring_graph", "scaled_besag", "simulate", "summarize", "write_bundle",
    "write_dataset",
]
