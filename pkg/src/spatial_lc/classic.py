"""SVD-based classical Lee-Carter fit on area-aggregated data.

Used as a baseline and as a cross-method test oracle for the Bayesian fit;
identification follows the usual convention rescaled so the age loadings sum
to one and the time index sums to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ClassicFitError(ValueError):
    pass


@dataclass(frozen=True)
class ClassicFit:
    alpha: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    degenerate_beta: bool = False


def classic_lc_fit(deaths, exposures):
    """Fit log(deaths/exposures) = alpha_x + beta_x * kappa_t by rank-1 SVD.

    ``deaths`` and ``exposures`` are (age x year) matrices, typically
    aggregated over areas.  Cells with zero deaths make the log rate
    undefined; callers should aggregate further or smooth small counts first.
    """
    deaths = np.asarray(deaths, dtype=float)
    exposures = np.asarray(exposures, dtype=float)
    if deaths.shape != exposures.shape or deaths.ndim != 2:
        raise ClassicFitError("deaths and exposures must be matching matrices")
    if np.any(exposures <= 0):
        raise ClassicFitError("non-positive exposures; aggregate further")
    rates = deaths / exposures
    if np.any(rates <= 0):
        raise ClassicFitError(
            "zero death counts after aggregation; aggregate over more cells "
            "or apply small-count smoothing before the classical fit")
    logm = np.log(rates)
    alpha = logm.mean(axis=1)
    resid = logm - alpha[:, None]
    u_mat, s_vals, vt = np.linalg.svd(resid, full_matrices=False)
    scale = s_vals[0]
    if scale <= 1e-12 * max(1.0, np.abs(logm).max()):
        return ClassicFit(alpha=alpha, beta=np.full(logm.shape[0],
                                                    1.0 / logm.shape[0]),
                          kappa=np.zeros(logm.shape[1]),
                          degenerate_beta=True)
    beta_raw = u_mat[:, 0]
    bsum = beta_raw.sum()
    if abs(bsum) < 1e-12:
        return ClassicFit(alpha=alpha, beta=np.full(logm.shape[0],
                                                    1.0 / logm.shape[0]),
                          kappa=np.zeros(logm.shape[1]),
                          degenerate_beta=True)
    beta = beta_raw / bsum
    kappa = scale * vt[0] * bsum
    shift = kappa.mean()
    alpha = alpha + beta * shift
    kappa = kappa - shift
    return ClassicFit(alpha=alpha, beta=beta, kappa=kappa)


def aggregate_over_areas(dataset):
    """(deaths, exposures) age x year matrices summed over areas."""
    return dataset.deaths.sum(axis=2), dataset.exposures.sum(axis=2)
