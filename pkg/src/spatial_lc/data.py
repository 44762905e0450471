"""Mortality count data: loading, validation and index mappings.

Deaths and exposures are kept as dense (age, year, area) tensors.  Ages and
years must be contiguous integer ranges; areas are opaque string identifiers
kept in sorted order so that file row order never matters.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised for malformed or inconsistent input files."""


@dataclass(frozen=True)
class MortalityDataset:
    """Death and exposure counts indexed by (age, year, area)."""

    ages: tuple
    years: tuple
    areas: tuple
    deaths: np.ndarray
    exposures: np.ndarray
    gender_label: str = ""

    def __post_init__(self):
        deaths = np.asarray(self.deaths, dtype=float)
        exposures = np.asarray(self.exposures, dtype=float)
        shape = (len(self.ages), len(self.years), len(self.areas))
        if deaths.shape != shape or exposures.shape != shape:
            raise DataError(
                f"dimension mismatch: deaths {deaths.shape}, exposures "
                f"{exposures.shape}, expected {shape}"
            )
        if np.any(deaths < 0):
            raise DataError("negative death counts")
        if np.any(exposures < 0):
            raise DataError("negative exposures")
        if np.any((exposures == 0) & (deaths > 0)):
            raise DataError("deaths > 0 in a cell with zero exposure")
        _check_contiguous(self.ages, "ages")
        _check_contiguous(self.years, "years")
        object.__setattr__(self, "deaths", deaths)
        object.__setattr__(self, "exposures", exposures)

    @property
    def n_ages(self):
        return len(self.ages)

    @property
    def n_years(self):
        return len(self.years)

    @property
    def n_areas(self):
        return len(self.areas)

    def age_index(self, age):
        return self.ages.index(age)

    def year_index(self, year):
        return self.years.index(year)

    def area_index(self, area):
        return self.areas.index(area)


def _check_contiguous(values, name):
    vals = list(values)
    if not vals:
        raise DataError(f"empty {name}")
    if any(int(v) != v for v in vals):
        raise DataError(f"{name} must be integers")
    if list(vals) != list(range(int(vals[0]), int(vals[-1]) + 1)):
        raise DataError(f"{name} must be contiguous integers")


@dataclass(frozen=True)
class AgeGrouping:
    """Assignment of single ages to coarse age groups (contiguous, monotone)."""

    group_of_age: dict
    group_count: int

    def __post_init__(self):
        groups = [self.group_of_age[a] for a in sorted(self.group_of_age)]
        if sorted(set(groups)) != list(range(self.group_count)):
            raise DataError("group indices must be contiguous from 0")
        if any(b < a for a, b in zip(groups, groups[1:])):
            raise DataError("age grouping must be monotone in age")

    def indices(self, ages):
        """Group index per age, as an int array aligned with ``ages``."""
        return np.array([self.group_of_age[a] for a in ages], dtype=int)


@dataclass(frozen=True)
class PeriodMapping:
    """Assignment of calendar years to periods (1 period, or 2 for the split model)."""

    period_of_year: dict
    period_count: int

    def __post_init__(self):
        periods = [self.period_of_year[y] for y in sorted(self.period_of_year)]
        if sorted(set(periods)) != list(range(self.period_count)):
            raise DataError("period indices must be contiguous from 0")
        if any(b < a for a, b in zip(periods, periods[1:])):
            raise DataError("period mapping must be monotone in year")

    def indices(self, years):
        return np.array([self.period_of_year[y] for y in years], dtype=int)


def default_age_grouping(ages):
    """Ten-year age groups 0-10, 11-20, 21-30, ... with a short trailing group.

    The first bin spans eleven single ages (0 through 10); later bins span
    ten.  A final shorter bin absorbs any remainder.
    """
    ages = sorted(int(a) for a in ages)
    if not ages:
        raise DataError("empty age list")

    def bin_of(age):
        return 0 if age <= 10 else (age - 11) // 10 + 1

    bins = sorted({bin_of(a) for a in ages})
    remap = {b: i for i, b in enumerate(bins)}
    return AgeGrouping({a: remap[bin_of(a)] for a in ages}, len(bins))


def period_mapping(years, cut_year=None):
    """Single period, or the two-period split at ``cut_year`` (inclusive left)."""
    years = sorted(int(y) for y in years)
    if not years:
        raise DataError("empty year list")
    if cut_year is None:
        return PeriodMapping({y: 0 for y in years}, 1)
    cut_year = int(cut_year)
    if not (years[0] <= cut_year < years[-1]):
        raise DataError(
            f"cut_year {cut_year} outside year range [{years[0]}, {years[-1]})"
        )
    return PeriodMapping({y: (0 if y <= cut_year else 1) for y in years}, 2)


def _read_cells(path, value_name):
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    df = pd.read_csv(path, dtype={"area": str}, float_precision="round_trip")
    expected = {"age", "year", "area", "value"}
    if set(df.columns) != expected:
        raise DataError(
            f"{path}: expected header age,year,area,value, got {list(df.columns)}"
        )
    dup = df.duplicated(subset=["age", "year", "area"])
    if dup.any():
        row = df[dup].iloc[0]
        raise DataError(
            f"{path}: duplicate key (age={row['age']}, year={row['year']}, "
            f"area={row['area']})"
        )
    if (df["value"] < 0).any():
        raise DataError(f"{path}: negative {value_name}")
    return df


def load_dataset(deaths_path, exposures_path, gender_label=""):
    """Load deaths and exposures CSVs into a validated :class:`MortalityDataset`.

    Both files use the header ``age,year,area,value`` with one row per cell.
    The cell set must be the complete (age, year, area) grid and identical
    between the two files; missing cells are an error, not silent zeros.
    """
    d = _read_cells(deaths_path, "deaths")
    e = _read_cells(exposures_path, "exposures")

    if not np.allclose(d["value"], np.round(d["value"])):
        raise DataError(f"{deaths_path}: death counts must be integers")

    ages = tuple(sorted(set(d["age"]) | set(e["age"])))
    years = tuple(sorted(set(d["year"]) | set(e["year"])))
    areas = tuple(sorted(set(d["area"]) | set(e["area"])))
    shape = (len(ages), len(years), len(areas))
    n_cells = shape[0] * shape[1] * shape[2]
    if len(d) != n_cells or len(e) != n_cells:
        raise DataError(
            f"incomplete grid: expected {n_cells} cells, deaths file has "
            f"{len(d)}, exposures file has {len(e)}"
        )

    def to_tensor(df):
        out = np.empty(shape)
        ai = {a: i for i, a in enumerate(ages)}
        yi = {y: i for i, y in enumerate(years)}
        si = {s: i for i, s in enumerate(areas)}
        out[
            df["age"].map(ai).to_numpy(),
            df["year"].map(yi).to_numpy(),
            df["area"].map(si).to_numpy(),
        ] = df["value"].to_numpy()
        return out

    return MortalityDataset(
        ages=ages,
        years=years,
        areas=areas,
        deaths=to_tensor(d),
        exposures=to_tensor(e),
        gender_label=gender_label,
    )


def write_dataset(dataset, deaths_path, exposures_path):
    """Write a dataset back to the two-file CSV schema (round-trips exactly)."""
    rows = []
    for i, a in enumerate(dataset.ages):
        for j, y in enumerate(dataset.years):
            for k, s in enumerate(dataset.areas):
                rows.append((a, y, s, i, j, k))
    idx = pd.DataFrame(rows, columns=["age", "year", "area", "i", "j", "k"])
    for path, tensor, fmt in (
        (deaths_path, dataset.deaths, lambda v: "%d" % round(v)),
        (exposures_path, dataset.exposures, lambda v: "%.17g" % v),
    ):
        df = idx[["age", "year", "area"]].copy()
        df["value"] = [
            fmt(tensor[i, j, k]) for i, j, k in zip(idx["i"], idx["j"], idx["k"])
        ]
        df.to_csv(path, index=False)


def write_adjacency(graph, areas, path):
    """Write a graph in the ``area: neighbors`` text format."""
    areas = list(areas)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# adjacency: area_id: neighbor_id neighbor_id ...\n")
        for i, area in enumerate(areas):
            nbrs = " ".join(areas[j] for j in graph.neighbors[i])
            fh.write(f"{area}: {nbrs}".rstrip() + "\n")


def load_adjacency(path, areas):
    """Parse the adjacency file into a :class:`spatial_lc.graphs.SpatialGraph`.

    Format: one line per area, ``area_id: neighbor_id neighbor_id ...``; a
    line ending right after the colon declares an isolated area; ``#`` starts
    a comment line.  The neighbor relation must be symmetric and self-loops
    are rejected.
    """
    from .graphs import SpatialGraph

    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    areas = list(areas)
    index = {a: i for i, a in enumerate(areas)}
    neighbor_sets = {a: None for a in areas}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise DataError(f"{path}:{lineno}: expected 'area: neighbors'")
            area, _, rest = line.partition(":")
            area = area.strip()
            if area not in index:
                raise DataError(f"{path}:{lineno}: unknown area id '{area}'")
            if neighbor_sets[area] is not None:
                raise DataError(f"{path}:{lineno}: duplicate entry for '{area}'")
            nbrs = rest.split()
            for n in nbrs:
                if n == area:
                    raise DataError(f"{path}:{lineno}: self-neighbor '{area}'")
                if n not in index:
                    raise DataError(f"{path}:{lineno}: unknown area id '{n}'")
            neighbor_sets[area] = set(nbrs)
    missing = [a for a, v in neighbor_sets.items() if v is None]
    if missing:
        raise DataError(f"{path}: areas missing from adjacency file: {missing}")
    for a, nbrs in neighbor_sets.items():
        for b in nbrs:
            if a not in neighbor_sets[b]:
                raise DataError(f"{path}: asymmetric entry: {a} lists {b} "
                                f"but {b} does not list {a}")
    neighbors = [sorted(index[b] for b in neighbor_sets[a]) for a in areas]
    return SpatialGraph.from_neighbor_lists(neighbors)
