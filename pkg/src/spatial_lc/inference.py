"""Model fitting.

Inner step: constrained Gaussian approximation at fixed hyperparameters,
obtained by iterating (a) linearization of the bilinear age-loading x
time-index term around the current mode and (b) Newton / Fisher scoring of
the resulting latent-Gaussian Poisson model to its constrained mode.  The
per-cell overdispersion is eliminated analytically via a Schur complement,
so all matrix algebra runs on the small structured block.

Outer step: the hyperparameters maximize the Laplace-approximated log
marginal posterior (empirical-Bayes plug-in) with a Nelder-Mead simplex on
the unconstrained scale (log sigmas, logit phis).

Constraints are handled by conditioning by kriging.  Rank deficiencies of
the intrinsic priors along constrained directions are lifted by adding
eps * A'A to the working precision; this leaves every quantity defined on
the constrained subspace (modes, constrained covariances, constrained
log determinants) exactly unchanged for any eps > 0.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import gammaln

from .model import Hyperparameters, default_hyperparameters

log = logging.getLogger("spatial_lc")

EPS_LIFT = 1.0  # rank-lifting weight on A'A; any positive value is exact


class InferenceError(RuntimeError):
    """Numerical failure; ``best`` carries the best-so-far hyperparameter
    optimum when one exists (budget exhaustion)."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class PoissonLikelihood:
    """Per-cell Poisson log likelihood with log-rate predictor."""

    def __init__(self, y, exposure):
        self.y = np.asarray(y, dtype=float)
        self.E = np.asarray(exposure, dtype=float)
        self._const = (np.where(self.y > 0, self.y * np.log(
            np.where(self.E > 0, self.E, 1.0)), 0.0)
            - gammaln(self.y + 1.0))

    def value(self, eta):
        return float(np.sum(self.y * eta - self.E * np.exp(eta) + self._const))

    def grad(self, eta):
        return self.y - self.E * np.exp(eta)

    def curvature(self, eta):
        return self.E * np.exp(eta)


class GaussianLikelihood:
    """y ~ N(eta, sd^2); makes the Laplace approximation exact (test hook)."""

    def __init__(self, y, sd):
        self.y = np.asarray(y, dtype=float)
        self.sd = float(sd)

    def value(self, eta):
        r = (self.y - eta) / self.sd
        return float(-0.5 * np.sum(r * r)
                     - self.y.size * 0.5 * np.log(2 * np.pi * self.sd**2))

    def grad(self, eta):
        return (self.y - eta) / self.sd**2

    def curvature(self, eta):
        return np.full_like(np.asarray(eta, dtype=float), 1.0 / self.sd**2)


@dataclass
class GaussianApprox:
    """Constrained Gaussian approximation at the (linearized) posterior mode."""

    xs_mode: np.ndarray
    z_mode: np.ndarray
    s_chol: tuple                 # Cholesky of the eps-lifted structured precision
    d_diag: np.ndarray            # per-cell overdispersion precision tau_z + c
    curv: np.ndarray              # likelihood curvature c at the mode
    design: sp.csr_matrix         # linearized cell-to-structured-block design
    a_mat: np.ndarray             # all constraint rows (model + structured field)
    w_mat: np.ndarray             # S^-1 A'
    m_mat: np.ndarray             # A S^-1 A'
    lin_point: tuple
    iterations: int
    converged: bool
    max_change: float
    log_norm_const: float = field(init=False, default=None)

    @property
    def n_constraints(self):
        return self.a_mat.shape[0]

    def structured_covariance(self):
        """Constrained covariance of the structured block (dense)."""
        sigma = cho_solve(self.s_chol, np.eye(len(self.xs_mode)))
        if self.n_constraints:
            sigma = sigma - self.w_mat @ np.linalg.solve(self.m_mat,
                                                         self.w_mat.T)
        return 0.5 * (sigma + sigma.T)

    def log_density_at_mode(self):
        """Log density of the mode under its own constrained approximation."""
        return self.log_norm_const


def build_prior_precision(model, hyper):
    """Dense prior precision of the structured block at given hypers."""
    lay, spec = model.layout, model.spec
    q = np.zeros((lay.size, lay.size))
    if spec.include_alpha:
        sl = lay.blocks["alpha"]
        q[sl, sl] += np.eye(lay.n_ages) / model.wide.variance
    if spec.include_time:
        sl = lay.blocks["beta"]
        q[sl, sl] += np.eye(lay.n_ages) / model.wide.variance
        sl = lay.blocks["kappa"]
        q[sl, sl] += model.rw2.matrix / hyper.sigma_kappa**2
    if spec.include_spatial:
        sig, phi = hyper.per_group(spec.n_groups)
        r_adj = model.structure.dense()
        n = lay.n_areas
        eye = np.eye(n)
        for g in range(spec.n_groups):
            tau_w = 1.0 / (sig[g] ** 2 * (1.0 - phi[g]))
            c = sig[g] * np.sqrt(phi[g])
            for p in range(spec.n_periods):
                wsl = lay.spatial_block_slice("omega", g, p)
                usl = lay.spatial_block_slice("u", g, p)
                q[wsl, wsl] += tau_w * eye
                q[wsl, usl] += -tau_w * c * eye
                q[usl, wsl] += -tau_w * c * eye
                q[usl, usl] += r_adj + tau_w * c**2 * eye
    return q


def default_start(model):
    """Cheap feasible starting latent: age profile from aggregated observed
    rates, uniform age loading, everything else zero."""
    lay = model.layout
    xs = np.zeros(lay.size)
    if model.spec.include_alpha:
        y_age = np.bincount(model.x_idx, weights=model.y, minlength=lay.n_ages)
        e_age = np.bincount(model.x_idx, weights=model.E, minlength=lay.n_ages)
        e_age = np.where(e_age > 0, e_age, 1.0)
        xs[lay.blocks["alpha"]] = np.log((y_age + 0.5) / e_age)
    if model.spec.include_time:
        xs[lay.blocks["beta"]] = 1.0 / lay.n_ages
    z = np.zeros(model.n_obs)
    return xs, z


def _build_design(model, xs):
    """Sparse cell-to-structured design of the linearized predictor, plus the
    constant offset -beta0*kappa0 per cell."""
    lay, spec = model.layout, model.spec
    rows, cols, vals = [], [], []
    idx = np.arange(model.n_obs)
    offset = np.zeros(model.n_obs)
    if spec.include_alpha:
        rows.append(idx); cols.append(model.col_alpha)
        vals.append(np.ones(model.n_obs))
    if spec.include_time:
        beta0 = xs[lay.blocks["beta"]]
        kappa0 = xs[lay.blocks["kappa"]]
        rows.append(idx); cols.append(model.col_beta)
        vals.append(kappa0[model.t_idx])
        rows.append(idx); cols.append(model.col_kappa)
        vals.append(beta0[model.x_idx])
        offset = -beta0[model.x_idx] * kappa0[model.t_idx]
    if spec.include_spatial:
        rows.append(idx); cols.append(model.col_omega)
        vals.append(np.ones(model.n_obs))
    if not rows:
        return sp.csr_matrix((model.n_obs, lay.size)), offset
    b = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(model.n_obs, lay.size),
    )
    return b, offset


def inner_fit(model, hyper, start=None, likelihood=None,
              tol=1e-6, max_outer=50, max_inner=50):
    """Constrained Gaussian approximation at fixed hyperparameters.

    Returns a :class:`GaussianApprox`; ``converged`` is False (never raises)
    when the iteration limit is hit, with the last iterate returned.
    """
    spec, lay = model.spec, model.layout
    if likelihood is None:
        likelihood = PoissonLikelihood(model.y, model.E)
    q_prior = build_prior_precision(model, hyper)
    a_mat = model.constraints_full.matrix.toarray()
    e_rhs = model.constraints_full.rhs
    n_con = a_mat.shape[0]
    ata = a_mat.T @ a_mat if n_con else 0.0
    tau_z = (1.0 / hyper.sigma_z**2) if spec.include_overdispersion else None

    xs, z = default_start(model) if start is None else (
        start[0].copy(), start[1].copy())
    if n_con:
        # orthogonal projection onto the constraint manifold
        resid = a_mat @ xs - e_rhs
        xs = xs - a_mat.T @ np.linalg.solve(a_mat @ a_mat.T, resid)

    def prior_quad(xs_, z_):
        out = -0.5 * xs_ @ (q_prior @ xs_)
        if tau_z is not None:
            out -= 0.5 * tau_z * np.sum(z_ * z_)
        return out

    def exact_objective(xs_, z_):
        eta = model.linear_predictor(xs_, z_)
        return likelihood.value(eta) + prior_quad(xs_, z_)

    converged = False
    iterations = 0
    max_change = np.inf
    for outer in range(max_outer):
        iterations = outer + 1
        xs_prev, z_prev = xs.copy(), z.copy()
        b_mat, offset = _build_design(model, xs)

        # Newton on the linearized latent-Gaussian model
        def lin_objective(xs_, z_):
            eta = b_mat @ xs_ + z_ + offset
            return likelihood.value(eta) + prior_quad(xs_, z_)

        cur = lin_objective(xs, z)
        for _inner in range(max_inner):
            eta = b_mat @ xs + z + offset
            g_eta = likelihood.grad(eta)
            c = likelihood.curvature(eta)
            g_s = b_mat.T @ g_eta - q_prior @ xs
            if tau_z is not None:
                g_z = g_eta - tau_z * z
                d_diag = tau_z + c
                c_tilde = c * tau_z / d_diag
                rhs = g_s - b_mat.T @ (c / d_diag * g_z)
            else:
                g_z = None
                d_diag = None
                c_tilde = c
                rhs = g_s
            s_mat = q_prior + (b_mat.T @ sp.diags(c_tilde) @ b_mat).toarray()
            if n_con:
                s_mat = s_mat + EPS_LIFT * ata
            try:
                chol = cho_factor(s_mat, lower=True)
            except np.linalg.LinAlgError as exc:
                raise InferenceError(
                    "Cholesky failure: working precision not SPD") from exc
            step = cho_solve(chol, rhs)
            w_mat = cho_solve(chol, a_mat.T) if n_con else None
            m_mat = a_mat @ w_mat if n_con else None
            if n_con:
                step = step - w_mat @ np.linalg.solve(m_mat, a_mat @ step)
            step_z = (g_z - c * (b_mat @ step)) / d_diag \
                if tau_z is not None else np.zeros_like(z)
            t = 1.0
            for _ in range(20):
                new_val = lin_objective(xs + t * step, z + t * step_z)
                if new_val >= cur - 1e-12 * max(1.0, abs(cur)):
                    break
                t *= 0.5
            xs = xs + t * step
            z = z + t * step_z
            cur = lin_objective(xs, z)
            inner_change = t * max(np.max(np.abs(step)) if step.size else 0.0,
                                   np.max(np.abs(step_z)) if step_z.size else 0.0)
            if inner_change < 1e-9:
                break

        # damp the outer (relinearization) step on the exact joint density
        prev_exact = exact_objective(xs_prev, z_prev)
        t = 1.0
        for _ in range(20):
            if exact_objective(xs_prev + t * (xs - xs_prev),
                               z_prev + t * (z - z_prev)) >= prev_exact \
                    - 1e-12 * max(1.0, abs(prev_exact)):
                break
            t *= 0.5
        xs = xs_prev + t * (xs - xs_prev)
        z = z_prev + t * (z - z_prev)

        max_change = max(
            np.max(np.abs(xs - xs_prev)) if xs.size else 0.0,
            np.max(np.abs(z - z_prev)) if z.size else 0.0,
        )
        log.debug("inner_fit outer %d: max change %.3e", outer + 1, max_change)
        if max_change < tol:
            converged = True
            break

    if not converged:
        log.warning("inner_fit: no convergence after %d outer iterations "
                    "(last change %.3e); returning last iterate",
                    iterations, max_change)

    # refresh factorization at the final mode on the final linearization
    b_mat, offset = _build_design(model, xs)
    eta = b_mat @ xs + z + offset
    c = likelihood.curvature(eta)
    if tau_z is not None:
        d_diag = tau_z + c
        c_tilde = c * tau_z / d_diag
    else:
        d_diag = np.zeros(0)
        c_tilde = c
    s_mat = q_prior + (b_mat.T @ sp.diags(c_tilde) @ b_mat).toarray()
    if n_con:
        s_mat = s_mat + EPS_LIFT * ata
    chol = cho_factor(s_mat, lower=True)
    w_mat = cho_solve(chol, a_mat.T) if n_con else np.zeros((lay.size, 0))
    m_mat = a_mat @ w_mat if n_con else np.zeros((0, 0))

    approx = GaussianApprox(
        xs_mode=xs, z_mode=z, s_chol=chol,
        d_diag=d_diag if tau_z is not None else np.zeros(0),
        curv=c, design=b_mat,
        a_mat=a_mat, w_mat=w_mat, m_mat=m_mat,
        lin_point=(xs[lay.blocks["beta"]].copy(),
                   xs[lay.blocks["kappa"]].copy()) if spec.include_time
        else (None, None),
        iterations=iterations, converged=converged, max_change=float(max_change),
    )
    approx.log_norm_const = _log_density_at_mode(model, approx, tau_z)
    return approx


def _log_density_at_mode(model, approx, tau_z):
    """Log of the constrained Gaussian approximation evaluated at its mode."""
    n_s = len(approx.xs_mode)
    n_total = n_s + (len(approx.z_mode) if tau_z is not None else 0)
    k = approx.n_constraints
    logdet = 2.0 * np.sum(np.log(np.diag(approx.s_chol[0])))
    if tau_z is not None and approx.d_diag.size:
        logdet += float(np.sum(np.log(approx.d_diag)))
    if k:
        sign, ld_m = np.linalg.slogdet(approx.m_mat)
        if sign <= 0:
            raise InferenceError("constraint Gram matrix not positive definite")
        _, ld_aat = np.linalg.slogdet(approx.a_mat @ approx.a_mat.T)
        logdet += ld_m - ld_aat
    return float(-0.5 * (n_total - k) * np.log(2 * np.pi) + 0.5 * logdet)


def marginal_log_posterior(model, hyper, start=None, likelihood=None,
                           internal=None):
    """Laplace-approximated log marginal posterior of the hyperparameters.

    Value is the joint log density (likelihood, latent priors and hyper
    priors) at the constrained mode, minus the log density of the mode under
    its constrained Gaussian approximation, plus the log Jacobian of the
    internal (log / logit) transform when ``internal`` is given.
    """
    approx = inner_fit(model, hyper, start=start, likelihood=likelihood)
    latent = model.unpack(approx.xs_mode, approx.z_mode)
    if likelihood is None:
        eta = model.linear_predictor(approx.xs_mode, approx.z_mode)
        lik_val = model.log_likelihood(eta)
    else:
        eta = model.linear_predictor(approx.xs_mode, approx.z_mode)
        lik_val = likelihood.value(eta)
    value = (lik_val
             + model.log_prior_latent(latent, hyper)
             + model.log_prior_hyper(hyper)
             - approx.log_density_at_mode())
    if internal is not None:
        value += model.internal_log_jacobian(internal)
    return float(value), approx


@dataclass
class HyperOptResult:
    hyper: Hyperparameters
    internal: np.ndarray
    value: float
    n_evals: int
    converged: bool
    hessian: np.ndarray = None
    log_scale_se: np.ndarray = None


def optimize_hyper(model, init=None, max_evals=2000, xatol=1e-4,
                   fatol=1e-6, standard_errors=True, likelihood=None):
    """Maximize the Laplace marginal posterior over the internal scale with a
    derivative-free Nelder-Mead simplex; warm-starts the inner fits."""
    if init is None:
        init = default_hyperparameters(model.spec)
    x0 = model.hyper_to_internal(init)
    warm = {"start": None}
    evals = {"n": 0}

    def objective(vec):
        hyper = model.internal_to_hyper(vec)
        try:
            value, approx = marginal_log_posterior(
                model, hyper, start=warm["start"], likelihood=likelihood,
                internal=vec)
        except InferenceError:
            return 1e12
        warm["start"] = (approx.xs_mode, approx.z_mode)
        evals["n"] += 1
        log.debug("hyper eval %d: log marginal %.6f at %s",
                 evals["n"], value, np.array2string(vec, precision=4))
        return -value

    if x0.size == 0:
        return HyperOptResult(hyper=init, internal=x0, value=-objective(x0),
                              n_evals=1, converged=True)

    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"xatol": xatol, "fatol": fatol,
                            "maxfev": max_evals, "maxiter": max_evals})
    if not np.isfinite(res.fun) or res.fun >= 1e12:
        raise InferenceError(
            "hyperparameter optimization failed: no successful "
            "evaluation of the marginal posterior")
    out = HyperOptResult(
        hyper=model.internal_to_hyper(res.x), internal=res.x,
        value=-res.fun, n_evals=evals["n"], converged=bool(res.success),
    )
    if not res.success:
        raise InferenceError(
            f"hyperparameter optimization did not converge after "
            f"{evals['n']} evaluations; best value {-res.fun:.6f}",
            best=out)
    if standard_errors:
        out.hessian = _fd_hessian(objective, res.x, step=1e-3)
        try:
            cov = np.linalg.inv(out.hessian)
            diag = np.diag(cov)
            out.log_scale_se = np.sqrt(np.where(diag > 0, diag, np.nan))
        except np.linalg.LinAlgError:
            out.log_scale_se = np.full(res.x.size, np.nan)
    return out


@dataclass
class FitConfig:
    seed: int = 0
    max_hyper_evals: int = 2000
    n_draws: int = 1000
    init_hyper: Hyperparameters = None
    compute_z_sd: bool = False
    standard_errors: bool = True
    xatol: float = 1e-4
    fatol: float = 1e-6
    threads: int = 1   # caps internal parallelism; results are thread-invariant


@dataclass
class FitResult:
    """Posterior summaries at the hyperparameter mode."""

    model: object
    latent_mean: object                 # LatentField
    sd: dict                            # block name -> array of posterior sds
    hyper: Hyperparameters
    hyper_names: list
    hyper_internal: np.ndarray
    hyper_se: np.ndarray
    compound: dict                      # beta*kappa summaries, (ages x years)
    convergence: dict
    approx: GaussianApprox

    def interval(self, block):
        """(lower, upper) 95% bounds, Gaussian mean +/- 1.96 sd."""
        mean = getattr(self.latent_mean, block)
        return mean - 1.96 * self.sd[block], mean + 1.96 * self.sd[block]

    def eta_grid(self):
        return self.model.predictor_grid(self.latent_mean)


def _block_matrix_to_field(model, mat_diag):
    """Split a per-coordinate array over the structured vector into blocks
    shaped like the latent field."""
    lay = model.layout
    out = {}
    G, P, S = lay.n_groups, lay.n_periods, lay.n_areas
    if model.spec.include_alpha:
        out["alpha"] = mat_diag[lay.blocks["alpha"]]
    if model.spec.include_time:
        out["beta"] = mat_diag[lay.blocks["beta"]]
        out["kappa"] = mat_diag[lay.blocks["kappa"]]
    if model.spec.include_spatial:
        out["omega"] = mat_diag[lay.blocks["omega"]].reshape(G, P, S).transpose(2, 0, 1)
        out["u"] = mat_diag[lay.blocks["u"]].reshape(G, P, S).transpose(2, 0, 1)
    return out


def _compound_summaries(model, approx, sigma_c, rng, n_draws):
    """Joint-sampling summaries of the products beta_x * kappa_t."""
    lay = model.layout
    idx = np.r_[np.arange(lay.blocks["beta"].start, lay.blocks["beta"].stop),
                np.arange(lay.blocks["kappa"].start, lay.blocks["kappa"].stop)]
    mean = approx.xs_mode[idx]
    cov = sigma_c[np.ix_(idx, idx)]
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.clip(vals, 0.0, None)
    root = vecs * np.sqrt(vals)
    draws = mean + rng.standard_normal((n_draws, idx.size)) @ root.T
    A, T = lay.n_ages, lay.n_years
    prods = draws[:, :A, None] * draws[:, None, A:]
    return {
        "mean": prods.mean(axis=0),
        "sd": prods.std(axis=0, ddof=1),
        "q025": np.quantile(prods, 0.025, axis=0),
        "q50": np.quantile(prods, 0.5, axis=0),
        "q975": np.quantile(prods, 0.975, axis=0),
    }


def _z_sd(model, approx, sigma_c):
    """Posterior sd of the packed overdispersion values (constraint-aware)."""
    d = approx.d_diag
    base = 1.0 / d
    b = approx.design
    out = np.array(base)
    scale = approx.curv / d
    chunk = 8192
    for lo in range(0, model.n_obs, chunk):
        hi = min(lo + chunk, model.n_obs)
        bi = b[lo:hi]
        x = bi @ sigma_c
        quad = np.asarray(bi.multiply(x).sum(axis=1)).ravel()
        out[lo:hi] += scale[lo:hi] ** 2 * quad
    return np.sqrt(out)


def fit(model, config=None, likelihood=None):
    """Empirical-Bayes fit: optimize hyperparameters, then summarize the
    constrained Gaussian approximation at the optimum."""
    if config is None:
        config = FitConfig()
    t0 = time.perf_counter()
    try:
        opt = optimize_hyper(model, init=config.init_hyper,
                             max_evals=config.max_hyper_evals,
                             xatol=config.xatol, fatol=config.fatol,
                             standard_errors=config.standard_errors,
                             likelihood=likelihood)
    except InferenceError as exc:
        if exc.best is None:
            raise
        log.warning("%s; continuing with the best-so-far optimum", exc)
        opt = exc.best
    approx = inner_fit(model, opt.hyper, likelihood=likelihood)
    latent = model.unpack(approx.xs_mode, approx.z_mode)
    sigma_c = approx.structured_covariance()
    sd_vec = np.sqrt(np.clip(np.diag(sigma_c), 0.0, None))
    sd = _block_matrix_to_field(model, sd_vec)
    if model.spec.include_overdispersion:
        lay = model.layout
        zsd = np.zeros((lay.n_ages, lay.n_years, lay.n_areas))
        if config.compute_z_sd:
            zsd[model.cell_mask] = _z_sd(model, approx, sigma_c)
        sd["z"] = zsd

    rng = np.random.default_rng(config.seed)
    compound = (_compound_summaries(model, approx, sigma_c, rng,
                                    config.n_draws)
                if model.spec.include_time else {})

    convergence = {
        "hyper_evals": opt.n_evals,
        "hyper_converged": opt.converged,
        "inner_iterations": approx.iterations,
        "inner_converged": approx.converged,
        "inner_max_change": approx.max_change,
        "log_marginal_posterior": opt.value,
        "seconds": time.perf_counter() - t0,
    }
    return FitResult(
        model=model, latent_mean=latent, sd=sd,
        hyper=opt.hyper, hyper_names=model.hyper_names(),
        hyper_internal=opt.internal,
        hyper_se=opt.log_scale_se if opt.log_scale_se is not None
        else np.full(opt.internal.size, np.nan),
        compound=compound, convergence=convergence, approx=approx,
    )


def _fd_hessian(f, x, step=1e-3):
    """Central finite-difference Hessian of a scalar function."""
    n = x.size
    h = np.full(n, step)
    hess = np.zeros((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n); ei[i] = h[i]
        fpp = f(x + ei); fmm = f(x - ei)
        hess[i, i] = (fpp - 2 * f0 + fmm) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n); ej[j] = h[j]
            fij = f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            hess[i, j] = hess[j, i] = fij / (4 * h[i] * h[j])
    return hess
