"""Figure renderers for output bundles.

Each function returns the matplotlib figure (and optionally writes it),
reading only the bundle CSVs and GeoJSON. The spatial-effect color scale is
always symmetric about zero so red/blue encode the sign of the effect, and
the value-to-color mapping is monotone.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402
from matplotlib.colors import Normalize  # noqa: E402

BAND_COLUMNS = ("mean", "q025", "q975")
OMEGA_CMAP = "RdBu_r"
SERIES_COLORS = ("tab:blue", "tab:red", "tab:green", "tab:orange")


class VizError(ValueError):
    pass


def _read_table(bundle, name, index_col):
    path = os.path.join(bundle, f"{name}.csv")
    if not os.path.exists(path):
        raise VizError(f"no {name}.csv in bundle {bundle}")
    df = pd.read_csv(path)
    missing = [c for c in (index_col, *BAND_COLUMNS) if c not in df.columns]
    if missing:
        raise VizError(f"{path}: missing columns {', '.join(missing)}")
    if df.empty:
        raise VizError(f"{path}: empty table")
    return df


def _bundle_label(bundle):
    path = os.path.join(bundle, "diagnostics.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            label = json.load(fh).get("gender_label", "")
        if label:
            return label
    return os.path.basename(os.path.normpath(bundle))


def _band_series(ax, df, x_col, color, label):
    df = df.sort_values(x_col)
    ax.fill_between(df[x_col], df["q025"], df["q975"], alpha=0.25,
                    color=color, linewidth=0)
    ax.plot(df[x_col], df["mean"], color=color, label=label)


def _save(fig, out):
    if out is not None:
        fig.savefig(out, bbox_inches="tight", dpi=150)
    return fig


def plot_trend(bundles, labels=None, reference_lines=False, out=None):
    """Time-trend figure: posterior mean of kappa with a shaded 95% band
    per bundle (typically one bundle per gender); optionally overlays the
    least-squares straight line fitted to each series."""
    if not bundles:
        raise VizError("at least one bundle is required")
    if labels is None:
        labels = [_bundle_label(b) for b in bundles]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for i, (bundle, label) in enumerate(zip(bundles, labels)):
        df = _read_table(bundle, "kappa", "year")
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        _band_series(ax, df, "year", color, label)
        if reference_lines:
            coef = np.polyfit(df["year"], df["mean"], 1)
            ax.plot(df["year"], np.polyval(coef, df["year"]), color=color,
                    linestyle="--", linewidth=1)
    ax.set_xlabel("year")
    ax.set_ylabel(r"$\kappa_t$")
    ax.legend()
    return _save(fig, out)


def plot_age(bundles, labels=None, out=None):
    """Age-loading profile: posterior mean of beta by age with 95% bands,
    one series per bundle."""
    if not bundles:
        raise VizError("at least one bundle is required")
    if labels is None:
        labels = [_bundle_label(b) for b in bundles]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for i, (bundle, label) in enumerate(zip(bundles, labels)):
        df = _read_table(bundle, "beta", "age")
        _band_series(ax, df, "age", SERIES_COLORS[i % len(SERIES_COLORS)],
                     label)
    ax.set_xlabel("age")
    ax.set_ylabel(r"$\beta_x$")
    ax.legend()
    return _save(fig, out)


def plot_compound(bundles, labels=None, out=None):
    """Compound effect beta*kappa over time, one panel per selected age,
    one series with a 95% band per bundle."""
    if not bundles:
        raise VizError("at least one bundle is required")
    if labels is None:
        labels = [_bundle_label(b) for b in bundles]
    frames = [_read_table(b, "beta_kappa", "year") for b in bundles]
    for path, df in zip(bundles, frames):
        if "age" not in df.columns:
            raise VizError(f"{path}: beta_kappa.csv has no age column")
    ages = sorted(set().union(*[set(df["age"]) for df in frames]))
    n_cols = min(len(ages), 3)
    n_rows = int(np.ceil(len(ages) / n_cols))
    fig, axes = plt.subplots(n_rows, n_cols, squeeze=False,
                             figsize=(3.2 * n_cols, 2.6 * n_rows),
                             sharex=True)
    flat = axes.ravel()
    for k, age in enumerate(ages):
        ax = flat[k]
        for i, (df, label) in enumerate(zip(frames, labels)):
            sub = df[df["age"] == age]
            if sub.empty:
                continue
            _band_series(ax, sub, "year",
                         SERIES_COLORS[i % len(SERIES_COLORS)], label)
        ax.set_title(f"age {age}", fontsize=9)
    for ax in flat[len(ages):]:
        ax.set_visible(False)
    flat[0].legend(fontsize=8)
    fig.supxlabel("year")
    fig.supylabel(r"$\beta_x \kappa_t$")
    return _save(fig, out)


def _feature_rings(feature):
    geom = feature.get("geometry") or {}
    kind = geom.get("type")
    if kind == "Polygon":
        return [np.asarray(geom["coordinates"][0], dtype=float)]
    if kind == "MultiPolygon":
        return [np.asarray(poly[0], dtype=float)
                for poly in geom["coordinates"]]
    raise VizError(f"unsupported geometry type: {kind!r}")


def _load_areas(geojson_path):
    with open(geojson_path, encoding="utf-8") as fh:
        geo = json.load(fh)
    areas = {}
    for feature in geo.get("features", []):
        props = feature.get("properties") or {}
        if "area_id" not in props:
            raise VizError("GeoJSON feature without an 'area_id' property")
        areas[str(props["area_id"])] = _feature_rings(feature)
    if not areas:
        raise VizError(f"no features in {geojson_path}")
    return areas


def plot_maps(omega, geojson, groups=None, periods=None, vmax=None,
              out=None):
    """Choropleth grid of the spatial effect: one panel per (group, period),
    periods as rows and age groups as columns, shared diverging color scale
    centered at zero.  ``omega`` is an omega.csv path or the equivalent
    data frame; fitted areas missing from the GeoJSON are listed on the
    panel margin, and features without an estimate are drawn in grey."""
    df = omega if isinstance(omega, pd.DataFrame) else pd.read_csv(omega)
    missing = [c for c in ("area", "group", "period", "mean")
               if c not in df.columns]
    if missing:
        raise VizError(f"omega table missing columns: {', '.join(missing)}")
    if df.empty:
        raise VizError("empty omega table")
    areas = _load_areas(geojson)

    if groups is None:
        groups = sorted(df["group"].unique())
    if periods is None:
        periods = sorted(df["period"].unique())
    sel = df[df["group"].isin(groups) & df["period"].isin(periods)]
    if vmax is None:
        vmax = float(np.abs(sel["mean"]).max())
    if vmax <= 0.0:
        vmax = 1.0          # all-zero effects render uniformly neutral
    norm = Normalize(vmin=-vmax, vmax=vmax)
    cmap = plt.get_cmap(OMEGA_CMAP)

    n_rows, n_cols = len(periods), len(groups)
    fig, axes = plt.subplots(n_rows, n_cols, squeeze=False,
                             figsize=(2.4 * n_cols, 2.4 * n_rows))
    for r, period in enumerate(periods):
        for c, group in enumerate(groups):
            ax = axes[r, c]
            sub = sel[(sel["group"] == group) & (sel["period"] == period)]
            values = dict(zip(sub["area"].astype(str), sub["mean"]))
            polys, colors = [], []
            for area, rings in areas.items():
                for ring in rings:
                    polys.append(ring)
                    colors.append(cmap(norm(values[area]))
                                  if area in values else (0.8, 0.8, 0.8, 1.0))
            ax.add_collection(PolyCollection(polys, facecolors=colors,
                                             edgecolors="black",
                                             linewidths=0.3))
            ax.autoscale_view()
            ax.set_aspect("equal")
            ax.set_axis_off()
            title = f"group {group}"
            if n_rows > 1:
                title += f", period {period}"
            ax.set_title(title, fontsize=8)
            unmatched = sorted(set(values) - set(areas))
            if unmatched:
                ax.text(0.5, -0.05, "no geometry: " + ", ".join(unmatched),
                        transform=ax.transAxes, ha="center", va="top",
                        fontsize=6, color="dimgray")
    mappable = plt.cm.ScalarMappable(norm=norm, cmap=cmap)
    fig.colorbar(mappable, ax=axes, shrink=0.8, label=r"$\omega_{sg}$")
    return _save(fig, out)
