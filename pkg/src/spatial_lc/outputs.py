"""Posterior summary tables, Poisson deviance diagnostics and file outputs.

The CSV bundle is the single source of truth for all numbers; the GeoJSON
enrichment is a join against ``omega.csv`` values, never a recomputation.
All floats are written with 17 significant digits so files round-trip
exactly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

log = logging.getLogger("spatial_lc")

FLOAT_FORMAT = "%.17g"
DEFAULT_SELECTED_AGES = (0, 20, 40, 60, 80, 95)


class OutputError(ValueError):
    pass


def _gaussian_cols(mean, sd):
    return {
        "mean": mean,
        "sd": sd,
        "q025": mean - 1.96 * sd,
        "q50": mean,
        "q975": mean + 1.96 * sd,
    }


def summarize(fit, selected_ages=None):
    """All summary tables as data frames keyed by quantity name."""
    model = fit.model
    ds = model.dataset
    lay = model.layout
    tables = {}

    if model.spec.include_alpha:
        tables["alpha"] = pd.DataFrame(
            {"age": ds.ages, **_gaussian_cols(fit.latent_mean.alpha,
                                              fit.sd["alpha"])})
    if model.spec.include_time:
        tables["beta"] = pd.DataFrame(
            {"age": ds.ages, **_gaussian_cols(fit.latent_mean.beta,
                                              fit.sd["beta"])})
        tables["kappa"] = pd.DataFrame(
            {"year": ds.years, **_gaussian_cols(fit.latent_mean.kappa,
                                                fit.sd["kappa"])})
        ages = _selected_ages(ds.ages, selected_ages)
        rows = []
        for age in ages:
            i = ds.age_index(age)
            for j, year in enumerate(ds.years):
                rows.append({
                    "age": age, "year": year,
                    "mean": fit.compound["mean"][i, j],
                    "sd": fit.compound["sd"][i, j],
                    "q025": fit.compound["q025"][i, j],
                    "q50": fit.compound["q50"][i, j],
                    "q975": fit.compound["q975"][i, j],
                })
        tables["beta_kappa"] = pd.DataFrame(rows)
    if model.spec.include_spatial:
        rows = []
        for g in range(lay.n_groups):
            for p in range(lay.n_periods):
                for s, area in enumerate(ds.areas):
                    mean = fit.latent_mean.omega[s, g, p]
                    sd = fit.sd["omega"][s, g, p]
                    rows.append({"area": area, "group": g, "period": p,
                                 **{k: v for k, v in
                                    _gaussian_cols(mean, sd).items()}})
        tables["omega"] = pd.DataFrame(rows)

    estimates = np.array([
        1.0 / (1.0 + np.exp(-v)) if name.startswith("phi") else np.exp(v)
        for name, v in zip(fit.hyper_names, fit.hyper_internal)])
    tables["hyper"] = pd.DataFrame({
        "name": list(fit.hyper_names),
        "estimate": estimates,
        "estimate_internal": np.asarray(fit.hyper_internal, dtype=float),
        "internal_se": np.asarray(fit.hyper_se, dtype=float),
    })
    return tables


def _selected_ages(ages, selected):
    if selected is None:
        selected = DEFAULT_SELECTED_AGES
    picked = [a for a in selected if a in ages]
    return picked or list(ages)


@dataclass
class Diagnostics:
    """Poisson deviance and Pearson-residual diagnostics."""

    deviance_total: float
    deviance_cells: np.ndarray
    pearson_large_fraction: float
    n_cells: int
    convergence: dict


def deviance(fit, dataset=None):
    """Poisson deviance D = 2 sum[y ln(y/mu) - (y - mu)] at the posterior
    mean, with y ln(y/mu) = 0 for y = 0."""
    model = fit.model
    ds = dataset if dataset is not None else model.dataset
    eta = fit.eta_grid()[model.cell_mask]
    y = ds.deaths[model.cell_mask]
    mu = ds.exposures[model.cell_mask] * np.exp(eta)
    with np.errstate(divide="ignore", invalid="ignore"):
        ylog = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
    cells = 2.0 * (ylog - (y - mu))
    pearson = (y - mu) / np.sqrt(mu)
    return Diagnostics(
        deviance_total=float(cells.sum()),
        deviance_cells=cells,
        pearson_large_fraction=float(np.mean(np.abs(pearson) > 2.0))
        if cells.size else 0.0,
        n_cells=int(cells.size),
        convergence=dict(fit.convergence),
    )


def export_geojoin(omega_table, geojson_path, out_path):
    """Join spatial-effect summaries onto GeoJSON features by ``area_id``.

    Adds ``omega_mean_g{k}`` / ``omega_sd_g{k}`` properties (suffixed
    ``_p{j}`` for the period-split variant).  Returns the list of unmatched
    feature ids / areas; unmatched features are a warning, not an error.
    """
    df = omega_table if isinstance(omega_table, pd.DataFrame) \
        else pd.read_csv(omega_table)
    with open(geojson_path, encoding="utf-8") as fh:
        geo = json.load(fh)
    features = geo.get("features", [])
    n_periods = int(df["period"].max()) + 1 if len(df) else 1

    by_area = {}
    for rec in df.itertuples():
        suffix = f"_g{rec.group}" + (f"_p{rec.period}" if n_periods > 1 else "")
        by_area.setdefault(str(rec.area), {})[suffix] = (rec.mean, rec.sd)

    matched = set()
    unmatched_features = []
    for feat in features:
        props = feat.setdefault("properties", {})
        if "area_id" not in props:
            raise OutputError("GeoJSON feature without an 'area_id' property")
        area = str(props["area_id"])
        if area not in by_area:
            unmatched_features.append(area)
            continue
        matched.add(area)
        for suffix, (mean, sd) in sorted(by_area[area].items()):
            props[f"omega_mean{suffix}"] = mean
            props[f"omega_sd{suffix}"] = sd
    unmatched_areas = sorted(set(by_area) - matched)
    for area in unmatched_features:
        log.warning("geojoin: feature '%s' has no fitted spatial effect", area)
    for area in unmatched_areas:
        log.warning("geojoin: fitted area '%s' missing from the GeoJSON", area)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(geo, fh, sort_keys=True)
    return {"unmatched_features": unmatched_features,
            "unmatched_areas": unmatched_areas}


def write_bundle(fit, outdir, selected_ages=None, dataset=None):
    """Write the output bundle: one CSV per quantity plus diagnostics and
    convergence JSON.  Only ``convergence.json`` carries a timestamp."""
    import os

    os.makedirs(outdir, exist_ok=True)
    tables = summarize(fit, selected_ages=selected_ages)
    for name, df in tables.items():
        df.to_csv(os.path.join(outdir, f"{name}.csv"), index=False,
                  float_format=FLOAT_FORMAT)
    diag = deviance(fit, dataset)
    with open(os.path.join(outdir, "diagnostics.json"), "w",
              encoding="utf-8") as fh:
        json.dump({
            "deviance_total": diag.deviance_total,
            "pearson_large_fraction": diag.pearson_large_fraction,
            "n_cells": diag.n_cells,
            "gender_label": fit.model.dataset.gender_label,
        }, fh, indent=2, sort_keys=True)
    conv = dict(fit.convergence)
    conv["wallclock"] = {"finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                         "seconds": conv.pop("seconds", None)}
    with open(os.path.join(outdir, "convergence.json"), "w",
              encoding="utf-8") as fh:
        json.dump(conv, fh, indent=2, sort_keys=True)
    return tables
