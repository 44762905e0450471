"""Synthetic data generator for recovery tests, coverage experiments and
documentation examples.  Draws the latent effects from their (constrained)
priors or takes user-supplied truth, then draws Poisson counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import MortalityDataset, default_age_grouping, period_mapping
from .graphs import SpatialGraph, grid_graph, ring_graph, scaled_besag
from .model import LatentField, Model, ModelSpec, zero_latent
from .priors import rw2_scaled


class SimulationError(ValueError):
    pass


@dataclass
class SimulationConfig:
    n_ages: int = 12
    n_years: int = 10
    n_areas: int = 6
    graph: object = "ring"            # "ring", "grid", or a SpatialGraph
    variant: str = "static"
    cut_year: int = None              # required for the period variant
    base_age: int = 0
    base_year: int = 2002
    exposure: float = 1000.0          # scalar or per-age profile
    seed: int = 0
    # true hyperparameters
    sigma_z: float = 0.05
    sigma_kappa: float = 0.05
    sigma_omega: float = 0.2
    phi: float = 0.6
    # latent generation (sampled-from-prior mode)
    alpha_center: float = -4.0
    alpha_sd: float = 0.5
    beta_spread: float = 0.5          # sd of raw loadings, relative to 1/n_ages
    kappa_drift: float = 10.0         # total linear span of kappa over the years
    latent: LatentField = None        # user-supplied truth overrides sampling
    poisson_noise: bool = True
    gender_label: str = "sim"

    def __post_init__(self):
        if self.n_ages < 1 or self.n_years < 1 or self.n_areas < 1:
            raise SimulationError("dimensions must be at least 1")
        if np.any(np.asarray(self.exposure) <= 0):
            raise SimulationError("exposures must be positive")


@dataclass
class SimulationResult:
    dataset: MortalityDataset
    truth: LatentField
    graph: SpatialGraph
    spec: ModelSpec


def _make_graph(config):
    if isinstance(config.graph, SpatialGraph):
        return config.graph
    if config.graph == "ring":
        return ring_graph(config.n_areas)
    if config.graph == "grid":
        cols = int(np.ceil(np.sqrt(config.n_areas)))
        rows = int(np.ceil(config.n_areas / cols))
        g = grid_graph(rows, cols)
        if g.n_areas != config.n_areas:
            raise SimulationError(
                f"grid graph needs a rows*cols area count; nearest is "
                f"{rows}x{cols}={g.n_areas}")
        return g
    raise SimulationError(f"unknown graph source '{config.graph}'")


def _sample_intrinsic(structure_block, rng):
    """Draw from the intrinsic Gaussian with the given structure, conditioned
    on its null-space directions being zero (pseudo-inverse covariance)."""
    vals, vecs = np.linalg.eigh(np.asarray(structure_block))
    tol = max(vals.max(), 1.0) * len(vals) * np.finfo(float).eps
    keep = vals > tol
    xi = rng.standard_normal(int(keep.sum()))
    return vecs[:, keep] @ (xi / np.sqrt(vals[keep]))


def _sample_truth(config, spec, graph, structure, rng):
    A, T, S = config.n_ages, config.n_years, config.n_areas
    G, P = spec.n_groups, spec.n_periods
    truth = zero_latent(A, T, S, G, P)

    truth.alpha[:] = config.alpha_center + config.alpha_sd * rng.standard_normal(A)

    raw = 1.0 / A + (config.beta_spread / A) * rng.standard_normal(A)
    total = raw.sum()
    if abs(total) < 1e-8:
        raise SimulationError("degenerate age-loading draw; change the seed")
    truth.beta[:] = raw / total

    if T >= 3:
        rw2 = rw2_scaled(T)
        truth.kappa[:] = config.sigma_kappa * _sample_intrinsic(rw2.matrix, rng)
    trend = np.linspace(0.5, -0.5, T)
    truth.kappa[:] += config.kappa_drift * trend
    truth.kappa[:] -= truth.kappa.mean()

    dense = structure.dense()
    for g in range(G):
        for p in range(P):
            u = np.zeros(S)
            for comp in graph.components:
                idx = np.array(comp)
                if len(comp) == 1:
                    u[idx] = rng.standard_normal()
                else:
                    u[idx] = _sample_intrinsic(dense[np.ix_(idx, idx)], rng)
            v = rng.standard_normal(S)
            w = config.sigma_omega * (np.sqrt(1 - config.phi) * v
                                      + np.sqrt(config.phi) * u)
            for comp in graph.nonsingleton_components:
                idx = np.array(comp)
                w[idx] -= w[idx].mean()
            truth.u[:, g, p] = u
            truth.omega[:, g, p] = w

    truth.z[:] = config.sigma_z * rng.standard_normal((A, T, S))
    return truth


def simulate(config):
    """Generate a dataset plus ground truth; deterministic given the seed."""
    rng = np.random.default_rng(config.seed)
    graph = _make_graph(config)
    ages = tuple(range(config.base_age, config.base_age + config.n_ages))
    years = tuple(range(config.base_year, config.base_year + config.n_years))
    areas = tuple(f"A{i:03d}" for i in range(config.n_areas))
    spec = ModelSpec(
        variant=config.variant,
        age_grouping=default_age_grouping(ages),
        period_mapping=period_mapping(years, config.cut_year),
    )

    structure, _plan = scaled_besag(graph)
    truth = config.latent if config.latent is not None else _sample_truth(
        config, spec, graph, structure, rng)

    exposures = np.broadcast_to(
        np.atleast_1d(np.asarray(config.exposure, dtype=float))[:, None, None],
        (config.n_ages, config.n_years, config.n_areas),
    ).copy()

    # predictor on the full grid, via a throwaway model on a zero dataset
    shell = MortalityDataset(ages=ages, years=years, areas=areas,
                             deaths=np.zeros_like(exposures),
                             exposures=exposures,
                             gender_label=config.gender_label)
    mean = exposures * np.exp(Model(shell, graph, spec).predictor_grid(truth))
    if np.any(mean > 1e9):
        raise SimulationError(
            "expected counts exceed 1e9; reduce exposures or rates")
    if config.poisson_noise:
        deaths = rng.poisson(mean).astype(float)
    else:
        deaths = np.round(mean)
    dataset = MortalityDataset(ages=ages, years=years, areas=areas,
                               deaths=deaths, exposures=exposures,
                               gender_label=config.gender_label)
    return SimulationResult(dataset=dataset, truth=truth, graph=graph,
                            spec=spec)


def write_truth(truth, path):
    """Sidecar CSV of the true latent field: block,index1,index2,index3,value."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "index1", "index2", "index3", "value"])
        for name in ("alpha", "beta", "kappa"):
            for i, v in enumerate(getattr(truth, name)):
                w.writerow([name, i, "", "", "%.17g" % v])
        for name in ("omega", "u"):
            arr = getattr(truth, name)
            for (s, g, p), v in np.ndenumerate(arr):
                w.writerow([name, s, g, p, "%.17g" % v])
        for (i, j, k), v in np.ndenumerate(truth.z):
            w.writerow(["z", i, j, k, "%.17g" % v])


def read_truth(path):
    """Load a truth sidecar written by :func:`write_truth`."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["block"], []).append(rec)

    def vec(name):
        rs = rows.get(name, [])
        out = np.zeros(len(rs))
        for r in rs:
            out[int(r["index1"])] = float(r["value"])
        return out

    def tensor(name):
        rs = rows.get(name, [])
        if not rs:
            return np.zeros((0, 0, 0))
        shape = tuple(
            max(int(r[f"index{k}"]) for r in rs) + 1 for k in (1, 2, 3))
        out = np.zeros(shape)
        for r in rs:
            out[int(r["index1"]), int(r["index2"]), int(r["index3"])] = \
                float(r["value"])
        return out

    return LatentField(alpha=vec("alpha"), beta=vec("beta"),
                       kappa=vec("kappa"), omega=tensor("omega"),
                       u=tensor("u"), z=tensor("z"))
