"""Temporal and hyperparameter priors: RW2 structure, penalized-complexity
priors for standard deviations and the BYM2 mixing parameter, and the wide
Gaussian prior used for the age profile and age loading."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq


class PriorError(ValueError):
    """Raised for invalid prior settings."""


@dataclass(frozen=True)
class Rw2Structure:
    """Second-difference structure matrix D'D of a second-order random walk."""

    length: int
    matrix: np.ndarray
    scaling_factor: float = 1.0

    @property
    def rank(self):
        return self.length - 2


def rw2_structure(length):
    """Raw (unscaled) RW2 structure for ``length`` time points.

    The matrix is D'D with D the (T-2) x T second-difference operator with
    stencil (1, -2, 1); its null space is spanned by constant and linear
    sequences, matching a flat prior on the first two states.
    """
    if length < 3:
        raise PriorError(f"RW2 needs at least 3 time points, got {length}")
    d = np.zeros((length - 2, length))
    for i in range(length - 2):
        d[i, i : i + 3] = (1.0, -2.0, 1.0)
    return Rw2Structure(length=length, matrix=d.T @ d)


def rw2_scaled(length):
    """RW2 structure rescaled so the geometric mean of the marginal variances
    of the intrinsic model (generalized inverse, both null directions removed)
    is one."""
    raw = rw2_structure(length)
    margs = np.diag(np.linalg.pinv(raw.matrix, hermitian=True))
    factor = float(np.exp(np.mean(np.log(margs))))
    return Rw2Structure(length=length, matrix=raw.matrix * factor,
                        scaling_factor=factor)


@dataclass(frozen=True)
class WideGaussianPrior:
    """Mean-zero Gaussian with a large fixed (not estimated) variance."""

    variance: float = 100.0

    def __post_init__(self):
        if self.variance <= 0:
            raise PriorError("variance must be positive")

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return float(
            -0.5 * x.size * np.log(2 * np.pi * self.variance)
            - 0.5 * np.sum(x * x) / self.variance
        )


@dataclass(frozen=True)
class PcPriorStddev:
    """PC prior for a standard deviation: exponential with P(sigma > U) = alpha."""

    U: float
    alpha: float
    rate: float = field(init=False)

    def __post_init__(self):
        if self.U <= 0:
            raise PriorError(f"U must be positive, got {self.U}")
        if not (0 < self.alpha < 1):
            raise PriorError(f"alpha must be in (0, 1), got {self.alpha}")
        object.__setattr__(self, "rate", -np.log(self.alpha) / self.U)

    def log_density(self, sigma):
        if sigma <= 0:
            return -np.inf
        return float(np.log(self.rate) - self.rate * sigma)


def pc_prior_stddev(U, alpha):
    return PcPriorStddev(U=U, alpha=alpha)


@dataclass(frozen=True)
class PcPriorMixing:
    """PC prior for the BYM2 mixing parameter phi in [0, 1].

    Built from the Kullback-Leibler distance of the structured model from the
    iid base model, with the exponential rate solved so that
    P(phi < U) = alpha.  The density is precomputed on a grid and
    interpolated log-linearly.
    """

    U: float
    alpha: float
    grid: np.ndarray
    log_dens: np.ndarray

    def log_density(self, phi):
        if not (0.0 < phi < 1.0):
            return -np.inf
        return float(np.interp(phi, self.grid, self.log_dens))

    def density(self, phi):
        return np.exp(self.log_density(phi))


def pc_prior_mixing(U, alpha, reference_eigenvalues, grid_size=1000):
    """Construct the mixing-parameter PC prior for a given spatial structure.

    ``reference_eigenvalues`` are the eigenvalues of the scaled
    generalized-inverse covariance of the structured effect on its
    constrained subspace (see
    :func:`spatial_lc.graphs.mixing_reference_eigenvalues`).
    """
    if not (0 < U < 1):
        raise PriorError(f"U must be in (0, 1), got {U}")
    if not (0 < alpha < 1):
        raise PriorError(f"alpha must be in (0, 1), got {alpha}")
    gam = np.asarray(reference_eigenvalues, dtype=float)
    if gam.size == 0 or np.any(gam <= 0):
        raise PriorError("reference eigenvalues must be positive")

    gm1 = gam - 1.0

    def kld(phi):
        # KLD of N(0, (1-phi) I + phi Sigma*) from N(0, I), per eigen-direction
        a = phi * gm1
        return 0.5 * np.sum(a - np.log1p(a))

    def dist(phi):
        return np.sqrt(2.0 * kld(phi))

    def dist_deriv(phi):
        dk = 0.5 * np.sum(gm1 * (phi * gm1) / (1.0 + phi * gm1))
        d = dist(phi)
        if d == 0.0:
            # limit as phi -> 0: d(phi) ~ phi * sqrt(sum(gm1^2)/2)
            return np.sqrt(0.5 * np.sum(gm1**2))
        return dk / d  # d' = (dKLD/dphi) / d

    d_max = dist(1.0)
    d_u = dist(U)
    if d_max == 0.0:
        raise PriorError("structure indistinguishable from iid; mixing prior "
                         "undefined")

    def cdf_ratio(lam):
        # P(phi < U) for truncated exponential with rate lam on [0, d_max]
        if abs(lam) < 1e-12:
            return d_u / d_max
        return np.expm1(-lam * d_u) / np.expm1(-lam * d_max)

    lo, hi = -500.0 / d_max, 500.0 / d_max
    if not (min(cdf_ratio(lo), cdf_ratio(hi)) <= alpha <= max(cdf_ratio(lo), cdf_ratio(hi))):
        raise PriorError("cannot satisfy P(phi < U) = alpha for this structure")
    lam = brentq(lambda L: cdf_ratio(L) - alpha, lo, hi, xtol=1e-14)

    grid = (np.arange(grid_size) + 0.5) / grid_size
    if abs(lam) < 1e-12:
        log_norm = np.log(d_max)
        log_dens = np.array([np.log(dist_deriv(p)) - log_norm for p in grid])
    else:
        # log of lam * exp(-lam d) / (1 - exp(-lam d_max)), stable for lam < 0
        log_scale = np.log(abs(lam)) - np.log(abs(np.expm1(-lam * d_max)))
        log_dens = np.array(
            [log_scale - lam * dist(p) + np.log(dist_deriv(p)) for p in grid]
        )
    return PcPriorMixing(U=U, alpha=alpha, grid=grid, log_dens=log_dens)
