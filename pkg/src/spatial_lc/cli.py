"""Command-line interface.

Subcommands: ``fit``, ``simulate``, ``mcmc``, ``classic``, ``summarize``,
``geojoin``.  Every option can also be set in a flat ``key = value`` config
file (``--config``); command-line flags override file values.  Exit codes:
0 success, 1 input/configuration error, 2 numerical failure or
non-convergence (outputs are still written where possible, flagged in
``convergence.json``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from .classic import ClassicFitError, aggregate_over_areas, classic_lc_fit
from .data import (DataError, load_adjacency, load_dataset, write_adjacency,
                   write_dataset)
from .estimator import SpatialLeeCarter
from .inference import InferenceError
from .mcmc import McmcConfig, mcmc_fit
from .model import Model
from .outputs import FLOAT_FORMAT, export_geojoin, write_bundle
from .simulate import SimulationConfig, SimulationError, simulate, write_truth

log = logging.getLogger("spatial_lc")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2


class ConfigError(ValueError):
    pass


def _parse_pair(text):
    """Parse 'U,alpha' into a (float, float) tuple."""
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected 'U,alpha', got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_bool(text):
    if isinstance(text, bool):
        return text
    val = str(text).strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def read_config_file(path):
    """Flat ``key = value`` file with optional ``[section]`` headers.

    Sections are cosmetic grouping only: keys are global and must be unique.
    ``#`` and ``;`` start comments.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].split(";", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            values[key] = val.strip()
    return values


def _merge_config(args, parser_keys):
    """Fill in unset (None) argparse values from the config file."""
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    unknown = sorted(set(values) - set(parser_keys))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, val in values.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)
    return args


def _resolve_threads(args):
    threads = getattr(args, "threads", None)
    if threads is None:
        threads = os.environ.get("SPATIAL_LC_THREADS", "1")
    threads = int(threads)
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    return threads


def _default(args, key, value):
    if getattr(args, key, None) is None:
        setattr(args, key, value)
    return getattr(args, key)


def _require(args, *keys):
    for key in keys:
        if getattr(args, key, None) is None:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


# --------------------------------------------------------------- subcommands

def _load_inputs(args):
    dataset = load_dataset(args.deaths, args.exposures,
                           gender_label=_default(args, "gender_label", ""))
    graph = load_adjacency(args.adjacency, dataset.areas)
    return dataset, graph


def cmd_fit(args):
    _require(args, "deaths", "exposures", "adjacency", "out")
    dataset, graph = _load_inputs(args)
    est = SpatialLeeCarter(
        variant=_default(args, "variant", "static"),
        cut_year=None if args.cut_year is None else int(args.cut_year),
        share_spatial_hyper=_parse_bool(
            _default(args, "share_spatial_hyper", False)),
        pc_sigma_z=_parse_pair(_default(args, "pc_sigma_z", "1.0,0.01")),
        pc_sigma_kappa=_parse_pair(_default(args, "pc_sigma_kappa", "1.0,0.01")),
        pc_sigma_omega=_parse_pair(_default(args, "pc_sigma_omega", "1.0,0.01")),
        pc_mixing=_parse_pair(_default(args, "pc_mixing",
                                       f"0.5,{2.0 / 3.0!r}")),
        seed=int(_default(args, "seed", 0)),
        max_hyper_evals=int(_default(args, "max_hyper_evals", 2000)),
        n_draws=int(_default(args, "draws", 1000)),
        compute_z_sd=_parse_bool(_default(args, "z_sd", False)),
        standard_errors=not _parse_bool(_default(args, "no_se", False)),
        xatol=float(_default(args, "xatol", 1e-4)),
    )
    if args.dump_structure:
        _dump_structure(est, dataset, graph, args.dump_structure)
    est.fit(dataset, graph)
    write_bundle(est.result_, args.out)
    conv = est.result_.convergence
    if not conv.get("hyper_converged", True) \
            or not conv.get("inner_converged", True):
        log.warning("fit did not fully converge; bundle written to %s",
                    args.out)
        return EXIT_NUMERICAL
    return EXIT_OK


def _dump_structure(est, dataset, graph, path):
    from .graphs import dump_structure

    spec = est._build_spec(dataset)
    model = Model(dataset, graph, spec)
    dump_structure(model.structure, path)


def cmd_simulate(args):
    _require(args, "out")
    config = SimulationConfig(
        n_ages=int(_default(args, "ages", 12)),
        n_years=int(_default(args, "years", 10)),
        n_areas=int(_default(args, "areas", 6)),
        graph=_default(args, "graph", "ring"),
        variant=_default(args, "variant", "static"),
        cut_year=None if args.cut_year is None else int(args.cut_year),
        exposure=float(_default(args, "exposure", 1000.0)),
        seed=int(_default(args, "seed", 0)),
    )
    result = simulate(config)
    os.makedirs(args.out, exist_ok=True)
    write_dataset(result.dataset,
                  os.path.join(args.out, "deaths.csv"),
                  os.path.join(args.out, "exposures.csv"))
    write_adjacency(result.graph, result.dataset.areas,
                    os.path.join(args.out, "adjacency.txt"))
    write_truth(result.truth, os.path.join(args.out, "truth.csv"))
    return EXIT_OK


def cmd_mcmc(args):
    _require(args, "deaths", "exposures", "adjacency", "out")
    dataset, graph = _load_inputs(args)
    est = SpatialLeeCarter(
        variant=_default(args, "variant", "static"),
        cut_year=None if args.cut_year is None else int(args.cut_year),
        share_spatial_hyper=_parse_bool(
            _default(args, "share_spatial_hyper", False)))
    model = Model(dataset, graph, est._build_spec(dataset))
    config = McmcConfig(iterations=int(_default(args, "iters", 10000)),
                        burn_in=int(_default(args, "burn", 2000)),
                        thin=int(_default(args, "thin", 1)),
                        seed=int(_default(args, "seed", 0)))
    chain = mcmc_fit(model, config)
    os.makedirs(args.out, exist_ok=True)
    hyper = pd.DataFrame(chain.hyper_draws, columns=chain.hyper_names)
    hyper.insert(0, "draw", np.arange(len(hyper)))
    hyper.to_csv(os.path.join(args.out, "chain.csv"), index=False,
                 float_format=FLOAT_FORMAT)
    mean = chain.latent_mean()
    write_truth(mean, os.path.join(args.out, "latent_mean.csv"))
    with open(os.path.join(args.out, "acceptance.json"), "w",
              encoding="utf-8") as fh:
        json.dump(chain.acceptance, fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_classic(args):
    _require(args, "deaths", "exposures", "out")
    dataset = load_dataset(args.deaths, args.exposures)
    deaths, exposures = aggregate_over_areas(dataset)
    result = classic_lc_fit(deaths, exposures)
    os.makedirs(args.out, exist_ok=True)
    pd.DataFrame({"age": dataset.ages, "alpha": result.alpha,
                  "beta": result.beta}).to_csv(
        os.path.join(args.out, "classic_age.csv"), index=False,
        float_format=FLOAT_FORMAT)
    pd.DataFrame({"year": dataset.years, "kappa": result.kappa}).to_csv(
        os.path.join(args.out, "classic_kappa.csv"), index=False,
        float_format=FLOAT_FORMAT)
    return EXIT_OK


def cmd_summarize(args):
    _require(args, "bundle")
    report = []
    hyper_path = os.path.join(args.bundle, "hyper.csv")
    if not os.path.exists(hyper_path):
        raise DataError(f"not an output bundle (no hyper.csv): {args.bundle}")
    hyper = pd.read_csv(hyper_path)
    report.append("hyperparameter estimates:")
    for rec in hyper.itertuples():
        report.append(f"  {rec.name:>16s} = {rec.estimate:.6g} "
                      f"(internal se {rec.internal_se:.3g})")
    diag_path = os.path.join(args.bundle, "diagnostics.json")
    if os.path.exists(diag_path):
        with open(diag_path, encoding="utf-8") as fh:
            diag = json.load(fh)
        report.append(f"deviance: {diag['deviance_total']:.6g} over "
                      f"{diag['n_cells']} cells; "
                      f"|Pearson|>2 fraction {diag['pearson_large_fraction']:.4f}")
    conv_path = os.path.join(args.bundle, "convergence.json")
    if os.path.exists(conv_path):
        with open(conv_path, encoding="utf-8") as fh:
            conv = json.load(fh)
        report.append("convergence: " + ", ".join(
            f"{k}={v}" for k, v in sorted(conv.items()) if k != "wallclock"))
    print("\n".join(report))
    return EXIT_OK


def cmd_geojoin(args):
    _require(args, "omega", "geojson", "out")
    export_geojoin(args.omega, args.geojson, args.out)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _add_common(sub):
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--threads", help="internal thread cap "
                     "(default $SPATIAL_LC_THREADS or 1)")
    sub.add_argument("--seed", help="random seed")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--verbose", action="store_true", default=None)


def _add_model_opts(sub):
    sub.add_argument("--deaths", help="deaths CSV (age,year,area,value)")
    sub.add_argument("--exposures", help="exposures CSV (age,year,area,value)")
    sub.add_argument("--adjacency", help="adjacency text file")
    sub.add_argument("--variant", choices=["static", "period"])
    sub.add_argument("--cut-year", dest="cut_year",
                     help="last year of the first period (period variant)")
    sub.add_argument("--share-spatial-hyper", dest="share_spatial_hyper",
                     help="true/false: one (sigma, phi) pair for all groups")
    sub.add_argument("--gender-label", dest="gender_label")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spatial-lc",
        description="Spatially extended Lee-Carter mortality model")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("fit", help="fit the model and write an output bundle")
    _add_common(p)
    _add_model_opts(p)
    p.add_argument("--pc-sigma-z", dest="pc_sigma_z", help="'U,alpha'")
    p.add_argument("--pc-sigma-kappa", dest="pc_sigma_kappa", help="'U,alpha'")
    p.add_argument("--pc-sigma-omega", dest="pc_sigma_omega", help="'U,alpha'")
    p.add_argument("--pc-mixing", dest="pc_mixing", help="'U,alpha'")
    p.add_argument("--max-hyper-evals", dest="max_hyper_evals")
    p.add_argument("--draws", help="posterior draws for compound summaries")
    p.add_argument("--z-sd", dest="z_sd", help="true/false: per-cell z sds")
    p.add_argument("--no-se", dest="no_se", help="true/false: skip hyper SEs")
    p.add_argument("--xatol", help="optimizer tolerance")
    p.add_argument("--dump-structure", dest="dump_structure",
                   help="write structure matrices as 'i j value' text")
    p.set_defaults(func=cmd_fit)

    p = subs.add_parser("simulate", help="simulate a synthetic dataset")
    _add_common(p)
    p.add_argument("--ages")
    p.add_argument("--years")
    p.add_argument("--areas")
    p.add_argument("--graph", help="ring or grid")
    p.add_argument("--variant", choices=["static", "period"])
    p.add_argument("--cut-year", dest="cut_year")
    p.add_argument("--exposure")
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("mcmc", help="run the MCMC verification sampler")
    _add_common(p)
    _add_model_opts(p)
    p.add_argument("--iters")
    p.add_argument("--burn")
    p.add_argument("--thin")
    p.set_defaults(func=cmd_mcmc)

    p = subs.add_parser("classic", help="SVD Lee-Carter baseline on "
                        "area-aggregated data")
    _add_common(p)
    p.add_argument("--deaths")
    p.add_argument("--exposures")
    p.set_defaults(func=cmd_classic)

    p = subs.add_parser("summarize", help="print a report for a bundle")
    _add_common(p)
    p.add_argument("--bundle", help="output bundle directory")
    p.set_defaults(func=cmd_summarize)

    p = subs.add_parser("geojoin", help="join omega summaries onto GeoJSON")
    _add_common(p)
    p.add_argument("--omega", help="omega.csv from an output bundle")
    p.add_argument("--geojson", help="input GeoJSON with area_id properties")
    p.set_defaults(func=cmd_geojoin)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", None) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        keys = [k for k in vars(args) if k not in ("func", "subcommand")]
        args = _merge_config(args, keys)
        _resolve_threads(args)  # validated; inference itself is single-threaded
        return args.func(args)
    except (ConfigError, DataError, ClassicFitError, SimulationError,
            FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (InferenceError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
