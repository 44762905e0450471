"""Command-line entry points: plot-trend, plot-age, plot-compound,
plot-maps.  Each reads bundle files, writes one image, and exits 0 on
success or 1 on any input error."""

from __future__ import annotations

import argparse
import sys

from .figures import VizError, plot_age, plot_compound, plot_maps, plot_trend


def _band_parser(description):
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--bundle", action="append", required=True,
                        help="output bundle directory (repeat per gender)")
    parser.add_argument("--label", action="append",
                        help="series label (repeat, same order as --bundle)")
    parser.add_argument("--out", required=True, help="output image path")
    return parser


def _run(fn, **kwargs):
    try:
        fn(**kwargs)
    except (VizError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main_trend(argv=None):
    parser = _band_parser("Time-trend figure with 95% bands")
    parser.add_argument("--reference-lines", action="store_true",
                        help="overlay least-squares straight lines")
    args = parser.parse_args(argv)
    return _run(plot_trend, bundles=args.bundle, labels=args.label,
                reference_lines=args.reference_lines, out=args.out)


def main_age(argv=None):
    args = _band_parser("Age-loading profile with 95% bands").parse_args(argv)
    return _run(plot_age, bundles=args.bundle, labels=args.label,
                out=args.out)


def main_compound(argv=None):
    args = _band_parser("Compound beta*kappa panels by selected age"
                        ).parse_args(argv)
    return _run(plot_compound, bundles=args.bundle, labels=args.label,
                out=args.out)


def main_maps(argv=None):
    parser = argparse.ArgumentParser(
        description="Choropleth panels of the spatial effect")
    parser.add_argument("--omega", required=True,
                        help="omega.csv from an output bundle")
    parser.add_argument("--geojson", required=True,
                        help="GeoJSON with area_id properties")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--group", action="append", type=int, dest="groups",
                        help="age group to render (repeat; default all)")
    parser.add_argument("--period", action="append", type=int,
                        dest="periods",
                        help="period to render (repeat; default all)")
    parser.add_argument("--vmax", type=float,
                        help="color scale half-range (default data max)")
    args = parser.parse_args(argv)
    return _run(plot_maps, omega=args.omega, geojson=args.geojson,
                groups=args.groups, periods=args.periods, vmax=args.vmax,
                out=args.out)
