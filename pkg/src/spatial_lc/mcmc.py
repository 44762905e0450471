"""Metropolis-within-Gibbs reference sampler.

A verification oracle for the Gaussian-approximation fit on small instances:
single-site Gaussian random-walk updates for the age profile and the
overdispersion (their full conditionals factorize, so sites are updated in
parallel), preconditioned random-walk block updates for the time index, the
age loadings and the joint spatial field, and adaptive log/logit-scale
random walks for the hyperparameters.  Proposal preconditioners come from
the constrained Gaussian approximation (or from the constrained prior in
prior-only runs), so block proposals live in the constraint subspace by
construction.  Step scales adapt during burn-in only, preserving detailed
balance afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import inference as _inference
from .model import default_hyperparameters

log = logging.getLogger("spatial_lc")

_TARGET_SITE = 0.44
_TARGET_BLOCK = 0.25
_ADAPT_BATCH = 50


@dataclass
class McmcConfig:
    iterations: int = 10000
    burn_in: int = 2000
    thin: int = 1
    seed: int = 0
    prior_only: bool = False
    fix_hyper: object = None      # Hyperparameters, sampled when None
    init_hyper: object = None


@dataclass
class McmcChain:
    """Post burn-in draws (thinned) plus acceptance diagnostics."""

    model: object
    config: McmcConfig
    xs_draws: np.ndarray          # (n_draws, structured dim)
    z_draws: np.ndarray           # (n_draws, observed cells)
    hyper_draws: np.ndarray       # (n_draws, n hyper) on the internal scale
    hyper_names: list
    acceptance: dict

    @property
    def n_draws(self):
        return self.xs_draws.shape[0]

    def block_draws(self, name):
        sl = self.model.layout.blocks[name]
        return self.xs_draws[:, sl]

    def latent_mean(self):
        return self.model.unpack(self.xs_draws.mean(axis=0),
                                 self.z_draws.mean(axis=0))

    def mc_standard_error(self, draws):
        """Batch-means Monte-Carlo standard error, columnwise."""
        draws = np.atleast_2d(np.asarray(draws))
        n = draws.shape[0]
        n_batch = max(int(np.floor(np.sqrt(n))), 2)
        size = n // n_batch
        means = np.array([draws[i * size:(i + 1) * size].mean(axis=0)
                          for i in range(n_batch)])
        return means.std(axis=0, ddof=1) / np.sqrt(n_batch)


def _block_roots(model, hyper, prior_only):
    """Eigen square roots of per-block proposal covariances, restricted to
    the constraint subspace."""
    lay = model.layout
    if prior_only:
        q = _inference.build_prior_precision(model, hyper)
        a = model.constraints_full.matrix.toarray()
        if model.spec.include_time:
            # prior-only runs also pin the affine null direction of the RW2
            row = np.zeros(lay.size)
            t = np.arange(lay.n_years, dtype=float)
            row[lay.blocks["kappa"]] = t - t.mean()
            a = np.vstack([a, row]) if a.size else row[None, :]
        if a.size:
            q = q + _inference.EPS_LIFT * (a.T @ a)
        sigma = np.linalg.inv(q)
        if a.size:
            w = sigma @ a.T
            sigma = sigma - w @ np.linalg.solve(a @ w, w.T)
    else:
        approx = _inference.inner_fit(model, hyper)
        sigma = approx.structured_covariance()

    def root(idx):
        cov = sigma[np.ix_(idx, idx)]
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        # drop constraint (null) directions entirely so random-walk
        # proposals cannot drift out of the constraint subspace
        vals[vals < max(vals.max(), 0.0) * len(vals) * 1e-12] = 0.0
        return vecs * np.sqrt(vals)

    roots = {}
    if model.spec.include_time:
        roots["beta"] = root(np.arange(lay.blocks["beta"].start,
                                       lay.blocks["beta"].stop))
        roots["kappa"] = root(np.arange(lay.blocks["kappa"].start,
                                        lay.blocks["kappa"].stop))
    if model.spec.include_spatial:
        idx = np.r_[np.arange(lay.blocks["omega"].start, lay.blocks["omega"].stop),
                    np.arange(lay.blocks["u"].start, lay.blocks["u"].stop)]
        roots["omega_u"] = root(idx)
    return roots


def mcmc_fit(model, config=None):
    """Run the sampler; reproducible bit-for-bit given the seed."""
    if config is None:
        config = McmcConfig()
    lay, spec = model.layout, model.spec
    n_latent = lay.size + model.n_obs
    if n_latent > 1e5:
        log.warning("mcmc_fit: %d latent dimensions; the sampler is meant "
                    "for small verification instances", n_latent)

    rng = np.random.default_rng(config.seed)
    hyper = config.fix_hyper or config.init_hyper \
        or default_hyperparameters(spec)
    theta = model.hyper_to_internal(hyper)
    sample_hyper = config.fix_hyper is None and theta.size > 0

    xs, z = _inference.default_start(model)
    if config.prior_only and spec.include_alpha:
        xs[lay.blocks["alpha"]] = 0.0
    a_full = model.constraints_full.matrix.toarray()
    if a_full.size:
        xs = xs - a_full.T @ np.linalg.solve(
            a_full @ a_full.T, a_full @ xs - model.constraints_full.rhs)

    roots = _block_roots(model, hyper, config.prior_only)
    block_names = list(roots)
    use_lik = not config.prior_only

    eta = model.linear_predictor(xs, z) if use_lik else np.zeros(model.n_obs)

    def loglik(eta_):
        return float(np.sum(model.y * eta_ - model.E * np.exp(eta_))) \
            if use_lik else 0.0

    def latent_prior(xs_, z_, hyper_):
        return model.log_prior_latent(model.unpack(xs_, z_), hyper_)

    def hyper_target(theta_):
        h = model.internal_to_hyper(theta_)
        return (model.log_prior_hyper(h) + model.internal_log_jacobian(theta_),
                h)

    cur_lik = loglik(eta)
    cur_prior = latent_prior(xs, z, hyper)
    cur_hyper_lp, _ = hyper_target(theta)

    # adaptive scales
    s_alpha = np.full(lay.n_ages, 0.1) if spec.include_alpha else None
    s_z = 0.5
    s_block = {name: 1.0 for name in block_names}
    s_theta = np.full(theta.size, 0.3)
    acc = {name: [0, 0] for name in
           (["alpha", "z"] if spec.include_overdispersion else ["alpha"])
           + block_names + ["hyper"]}
    batch = {k: [0, 0] for k in list(acc) }

    n_keep = (config.iterations - config.burn_in) // config.thin
    xs_draws = np.empty((max(n_keep, 0), lay.size))
    z_draws = np.empty((max(n_keep, 0), model.n_obs))
    hyper_draws = np.empty((max(n_keep, 0), theta.size))
    kept = 0

    for it in range(config.iterations):
        adapting = it < config.burn_in

        # --- age profile, sitewise (conditionals independent across ages)
        if spec.include_alpha:
            sl = lay.blocks["alpha"]
            prop = s_alpha * rng.standard_normal(lay.n_ages)
            if use_lik:
                de = prop[model.x_idx]
                dlik = (model.y * de
                        - model.E * np.exp(eta) * np.expm1(de))
                dlik_age = np.bincount(model.x_idx, weights=dlik,
                                       minlength=lay.n_ages)
            else:
                dlik_age = np.zeros(lay.n_ages)
            a_cur = xs[sl]
            dprior = -((a_cur + prop) ** 2 - a_cur**2) / (2 * model.wide.variance)
            accept = np.log(rng.random(lay.n_ages)) < dlik_age + dprior
            if np.any(accept):
                xs[sl.start:sl.stop][accept] += prop[accept]
                if use_lik:
                    eta = eta + np.where(accept[model.x_idx],
                                         prop[model.x_idx], 0.0)
            acc["alpha"][0] += int(accept.sum()); acc["alpha"][1] += lay.n_ages
            batch["alpha"][0] += int(accept.sum()); batch["alpha"][1] += lay.n_ages

        # --- overdispersion, sitewise
        if spec.include_overdispersion and model.n_obs:
            tau_z = 1.0 / hyper.sigma_z**2
            prop = s_z * rng.standard_normal(model.n_obs)
            dlik = (model.y * prop - model.E * np.exp(eta) * np.expm1(prop)) \
                if use_lik else 0.0
            dprior = -((z + prop) ** 2 - z**2) * tau_z / 2.0
            accept = np.log(rng.random(model.n_obs)) < dlik + dprior
            z = z + np.where(accept, prop, 0.0)
            if use_lik:
                eta = eta + np.where(accept, prop, 0.0)
            acc["z"][0] += int(accept.sum()); acc["z"][1] += model.n_obs
            batch["z"][0] += int(accept.sum()); batch["z"][1] += model.n_obs

        # refresh cached scalars after sitewise moves
        cur_lik = loglik(eta)
        cur_prior = latent_prior(xs, z, hyper)

        # --- preconditioned block moves
        for name in block_names:
            root = roots[name]
            step = s_block[name] * (root @ rng.standard_normal(root.shape[1]))
            xs_new = xs.copy()
            if name == "omega_u":
                n_sp = lay.blocks["omega"].stop - lay.blocks["omega"].start
                xs_new[lay.blocks["omega"]] += step[:n_sp]
                xs_new[lay.blocks["u"]] += step[n_sp:]
            else:
                xs_new[lay.blocks[name]] += step
            eta_new = model.linear_predictor(xs_new, z) if use_lik else eta
            new_lik = loglik(eta_new)
            new_prior = latent_prior(xs_new, z, hyper)
            if np.log(rng.random()) < (new_lik + new_prior
                                       - cur_lik - cur_prior):
                xs, eta = xs_new, eta_new
                cur_lik, cur_prior = new_lik, new_prior
                acc[name][0] += 1; batch[name][0] += 1
            acc[name][1] += 1; batch[name][1] += 1

        # --- hyperparameters, componentwise on the internal scale
        if sample_hyper:
            for i in range(theta.size):
                theta_new = theta.copy()
                theta_new[i] += s_theta[i] * rng.standard_normal()
                new_hyper_lp, h_new = hyper_target(theta_new)
                new_prior = latent_prior(xs, z, h_new)
                if np.log(rng.random()) < (new_hyper_lp + new_prior
                                           - cur_hyper_lp - cur_prior):
                    theta, hyper = theta_new, h_new
                    cur_hyper_lp, cur_prior = new_hyper_lp, new_prior
                    acc["hyper"][0] += 1; batch["hyper"][0] += 1
                acc["hyper"][1] += 1; batch["hyper"][1] += 1

        # --- burn-in adaptation, frozen afterwards
        if adapting and (it + 1) % _ADAPT_BATCH == 0:
            def rate(key):
                n = batch[key][1]
                return batch[key][0] / n if n else None
            r = rate("alpha")
            if r is not None and s_alpha is not None:
                s_alpha *= np.exp(np.clip(r - _TARGET_SITE, -0.5, 0.5))
            if "z" in batch:
                r = rate("z")
                if r is not None:
                    s_z *= np.exp(np.clip(r - _TARGET_SITE, -0.5, 0.5))
            for name in block_names:
                r = rate(name)
                if r is not None:
                    s_block[name] *= np.exp(np.clip(r - _TARGET_BLOCK, -0.5, 0.5))
            r = rate("hyper")
            if sample_hyper and r is not None:
                s_theta *= np.exp(np.clip(r - _TARGET_SITE, -0.5, 0.5))
            batch = {k: [0, 0] for k in batch}

        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0 \
                and kept < n_keep:
            xs_draws[kept] = xs
            z_draws[kept] = z
            hyper_draws[kept] = theta
            kept += 1

    rates = {k: (v[0] / v[1] if v[1] else float("nan"))
             for k, v in acc.items()}
    for k, v in rates.items():
        log.info("mcmc block '%s': acceptance %.3f", k, v)
    return McmcChain(model=model, config=config,
                     xs_draws=xs_draws[:kept], z_draws=z_draws[:kept],
                     hyper_draws=hyper_draws[:kept],
                     hyper_names=model.hyper_names(), acceptance=rates)
