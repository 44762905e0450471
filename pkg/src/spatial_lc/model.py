"""Model core: latent-field layout, the bilinear log-rate predictor, the
joint log density of data and latent effects, and the identifiability
constraint system.

The log rate of cell (x, t, s) is

    eta = alpha_x + beta_x * kappa_t + omega_{s, g(x), p(t)} + z_{xts}

with a wide Gaussian prior on alpha and beta, a scaled RW2 prior on kappa,
an age-group-specific BYM2 spatial prior on omega (carried in augmented form
with its structured component u), and iid Gaussian overdispersion z.  Cells
with zero exposure are excluded from the likelihood and their z is fixed at
zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve
from scipy.special import gammaln

from . import graphs as _graphs
from . import priors as _priors
from .data import AgeGrouping, PeriodMapping

VARIANT_STATIC = "static"
VARIANT_PERIOD = "period"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Model variant, groupings and prior settings."""

    variant: str
    age_grouping: AgeGrouping
    period_mapping: PeriodMapping
    share_spatial_hyper: bool = False
    wide_prior_variance: float = 100.0
    pc_sigma_z: tuple = (1.0, 0.01)
    pc_sigma_kappa: tuple = (1.0, 0.01)
    pc_sigma_omega: tuple = (1.0, 0.01)
    pc_mixing: tuple = (0.5, 2.0 / 3.0)
    include_alpha: bool = True
    include_time: bool = True       # beta * kappa term
    include_spatial: bool = True    # omega (and u) term
    include_overdispersion: bool = True

    def __post_init__(self):
        if self.variant not in (VARIANT_STATIC, VARIANT_PERIOD):
            raise ModelError(f"unknown variant '{self.variant}'")
        want = 2 if self.variant == VARIANT_PERIOD else 1
        if self.period_mapping.period_count != want:
            raise ModelError(
                f"variant '{self.variant}' requires {want} period(s), got "
                f"{self.period_mapping.period_count}"
            )

    @property
    def n_groups(self):
        return self.age_grouping.group_count

    @property
    def n_periods(self):
        return self.period_mapping.period_count

    @property
    def n_spatial_hyper(self):
        return 1 if self.share_spatial_hyper else self.n_groups


@dataclass(frozen=True)
class Hyperparameters:
    """Standard deviations and mixing parameters, natural scale.

    ``sigma_omega`` and ``phi`` are arrays with one entry per age group
    (length 1 when shared across groups).  Fields for disabled blocks hold
    None.
    """

    sigma_z: float = None
    sigma_kappa: float = None
    sigma_omega: np.ndarray = None
    phi: np.ndarray = None

    def per_group(self, n_groups):
        """sigma_omega and phi expanded to one value per group."""
        sig = np.broadcast_to(np.atleast_1d(self.sigma_omega), (n_groups,))
        phi = np.broadcast_to(np.atleast_1d(self.phi), (n_groups,))
        return np.asarray(sig, dtype=float), np.asarray(phi, dtype=float)


def default_hyperparameters(spec):
    """Optimizer starting point: all sigmas 0.1, phi 0.5."""
    k = spec.n_spatial_hyper
    return Hyperparameters(
        sigma_z=0.1 if spec.include_overdispersion else None,
        sigma_kappa=0.1 if spec.include_time else None,
        sigma_omega=np.full(k, 0.1) if spec.include_spatial else None,
        phi=np.full(k, 0.5) if spec.include_spatial else None,
    )


@dataclass(frozen=True)
class LatentField:
    """All latent effects on their natural shapes.

    omega and u have shape (areas, groups, periods); z has the full
    (age, year, area) shape with zeros wherever exposure is zero.
    """

    alpha: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    z: np.ndarray


def zero_latent(n_ages, n_years, n_areas, n_groups, n_periods):
    return LatentField(
        alpha=np.zeros(n_ages),
        beta=np.zeros(n_ages),
        kappa=np.zeros(n_years),
        omega=np.zeros((n_areas, n_groups, n_periods)),
        u=np.zeros((n_areas, n_groups, n_periods)),
        z=np.zeros((n_ages, n_years, n_areas)),
    )


@dataclass(frozen=True)
class LatentLayout:
    """Offsets of the structured blocks within the concatenated vector.

    The per-cell overdispersion z is kept out of the structured vector and
    packed separately over observed (exposure > 0) cells.
    """

    n_ages: int
    n_years: int
    n_areas: int
    n_groups: int
    n_periods: int
    include_alpha: bool
    include_time: bool
    include_spatial: bool
    blocks: dict = field(init=False)
    size: int = field(init=False)

    def __post_init__(self):
        blocks, off = {}, 0
        def add(name, size):
            nonlocal off
            blocks[name] = slice(off, off + size)
            off += size
        if self.include_alpha:
            add("alpha", self.n_ages)
        if self.include_time:
            add("beta", self.n_ages)
            add("kappa", self.n_years)
        if self.include_spatial:
            sgp = self.n_areas * self.n_groups * self.n_periods
            add("omega", sgp)
            add("u", sgp)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "size", off)

    def spatial_pos(self, s, g, p):
        """Position of (area, group, period) within the omega (or u) block."""
        return (g * self.n_periods + p) * self.n_areas + s

    def spatial_block_slice(self, name, g, p):
        base = self.blocks[name].start
        start = base + (g * self.n_periods + p) * self.n_areas
        return slice(start, start + self.n_areas)


@dataclass(frozen=True)
class ConstraintSystem:
    """Linear constraints A x = e on the structured latent vector."""

    matrix: sp.csr_matrix
    rhs: np.ndarray

    @property
    def n_rows(self):
        return self.matrix.shape[0]


def apply_constraints(x, precision, constraints, rhs=None):
    """Condition a Gaussian vector on linear constraints (kriging correction).

    Returns x - Q^-1 A' (A Q^-1 A')^-1 (A x - e).  ``precision`` may be a
    dense array, a sparse matrix, or a precomputed Cholesky factor pair from
    :func:`scipy.linalg.cho_factor`.
    """
    if isinstance(constraints, ConstraintSystem):
        a = constraints.matrix.toarray()
        e = constraints.rhs if rhs is None else rhs
    else:
        a = np.atleast_2d(np.asarray(constraints, dtype=float))
        e = np.zeros(a.shape[0]) if rhs is None else np.atleast_1d(rhs)
    x = np.asarray(x, dtype=float)
    if isinstance(precision, tuple):
        w = cho_solve(precision, a.T)
    elif sp.issparse(precision):
        w = sp.linalg.spsolve(precision.tocsc(), sp.csc_matrix(a.T)).toarray() \
            if a.shape[0] > 1 else sp.linalg.spsolve(precision.tocsc(), a.ravel())[:, None]
    else:
        q = np.asarray(precision, dtype=float)
        w = np.linalg.solve(q, a.T)
    m = a @ w
    resid = a @ x - e
    try:
        corr = w @ np.linalg.solve(m, resid)
    except np.linalg.LinAlgError as exc:
        raise ModelError("singular constraint system A Q^-1 A'") from exc
    return x - corr


class Model:
    """Assembled model: data, graph, spec, prior structures and constraints."""

    def __init__(self, dataset, graph, spec):
        self.dataset = dataset
        self.graph = graph
        self.spec = spec
        ages, years = dataset.ages, dataset.years
        for a in ages:
            if a not in spec.age_grouping.group_of_age:
                raise ModelError(f"age {a} missing from age grouping")
        for y in years:
            if y not in spec.period_mapping.period_of_year:
                raise ModelError(f"year {y} missing from period mapping")

        self.layout = LatentLayout(
            n_ages=len(ages),
            n_years=len(years),
            n_areas=graph.n_areas,
            n_groups=spec.n_groups,
            n_periods=spec.n_periods,
            include_alpha=spec.include_alpha,
            include_time=spec.include_time,
            include_spatial=spec.include_spatial,
        )

        # observed cells (exposure > 0), flattened in (age, year, area) order
        mask = dataset.exposures > 0
        xi, ti, si = np.nonzero(mask)
        self.cell_mask = mask
        self.x_idx, self.t_idx, self.s_idx = xi, ti, si
        self.y = dataset.deaths[mask]
        self.E = dataset.exposures[mask]
        self.n_obs = self.y.size
        self.lik_const = (np.where(self.y > 0, self.y * np.log(
            np.where(self.E > 0, self.E, 1.0)), 0.0)
            - gammaln(self.y + 1.0))
        g_of_age = spec.age_grouping.indices(ages)
        p_of_year = spec.period_mapping.indices(years)
        self.g_idx = g_of_age[xi]
        self.p_idx = p_of_year[ti]
        self.g_of_age = g_of_age
        self.p_of_year = p_of_year

        lay = self.layout
        if spec.include_alpha:
            self.col_alpha = lay.blocks["alpha"].start + xi
        if spec.include_time:
            self.col_beta = lay.blocks["beta"].start + xi
            self.col_kappa = lay.blocks["kappa"].start + ti
        if spec.include_spatial:
            self.col_omega = lay.blocks["omega"].start + np.array(
                [lay.spatial_pos(s, g, p)
                 for s, g, p in zip(si, self.g_idx, self.p_idx)]
            ) if self.n_obs else np.zeros(0, dtype=int)

        # prior structures
        if spec.include_time:
            self.rw2 = _priors.rw2_scaled(len(years))
            pos = np.linalg.eigvalsh(self.rw2.matrix)
            pos = pos[pos > pos[-1] * len(years) * np.finfo(float).eps]
            self.rw2_logdet_star = float(np.sum(np.log(pos)))
        if spec.include_spatial:
            self.structure, self.constraint_plan = _graphs.scaled_besag(graph)
            dense = self.structure.dense()
            vals = np.linalg.eigvalsh(dense)
            tol = max(vals.max(), 1.0) * graph.n_areas * np.finfo(float).eps
            pos = vals[vals > tol]
            self.besag_logdet_star = float(np.sum(np.log(pos)))
            self.rank_u = int(pos.size)
            self.mixing_eigs = _graphs.mixing_reference_eigenvalues(
                self.structure, graph)
            self.pc_mixing = _priors.pc_prior_mixing(
                spec.pc_mixing[0], spec.pc_mixing[1], self.mixing_eigs)
        self.wide = _priors.WideGaussianPrior(spec.wide_prior_variance)
        self.pc_sigma_z = _priors.pc_prior_stddev(*spec.pc_sigma_z)
        self.pc_sigma_kappa = _priors.pc_prior_stddev(*spec.pc_sigma_kappa)
        self.pc_sigma_omega = _priors.pc_prior_stddev(*spec.pc_sigma_omega)

        self.constraints = build_constraints(spec, graph, layout=lay)
        self.constraints_full = build_constraints(
            spec, graph, layout=lay, include_structured=True)

    # ---------------------------------------------------------------- layout

    def pack(self, latent):
        """(structured vector, packed z over observed cells)."""
        lay, parts = self.layout, []
        if self.spec.include_alpha:
            parts.append(latent.alpha)
        if self.spec.include_time:
            parts.append(latent.beta)
            parts.append(latent.kappa)
        if self.spec.include_spatial:
            parts.append(latent.omega.transpose(1, 2, 0).ravel())
            parts.append(latent.u.transpose(1, 2, 0).ravel())
        xs = np.concatenate(parts) if parts else np.zeros(0)
        z = latent.z[self.cell_mask] if self.spec.include_overdispersion \
            else np.zeros(self.n_obs)
        return xs, z

    def unpack(self, xs, z):
        lay = self.layout
        A, T = lay.n_ages, lay.n_years
        S, G, P = lay.n_areas, lay.n_groups, lay.n_periods
        out = zero_latent(A, T, S, G, P)
        if self.spec.include_alpha:
            out.alpha[:] = xs[lay.blocks["alpha"]]
        if self.spec.include_time:
            out.beta[:] = xs[lay.blocks["beta"]]
            out.kappa[:] = xs[lay.blocks["kappa"]]
        if self.spec.include_spatial:
            out.omega[:] = xs[lay.blocks["omega"]].reshape(G, P, S).transpose(2, 0, 1)
            out.u[:] = xs[lay.blocks["u"]].reshape(G, P, S).transpose(2, 0, 1)
        if self.spec.include_overdispersion:
            out.z[self.cell_mask] = z
        return out

    # ------------------------------------------------------------- predictor

    def linear_predictor(self, xs, z):
        """Log rate per observed cell, exact (non-linearized) bilinear term."""
        lay = self.layout
        eta = np.zeros(self.n_obs)
        if self.spec.include_alpha:
            eta += xs[self.col_alpha]
        if self.spec.include_time:
            eta += xs[self.col_beta] * xs[self.col_kappa]
        if self.spec.include_spatial:
            eta += xs[self.col_omega]
        if self.spec.include_overdispersion:
            eta += z
        return eta

    def predictor(self, latent, cell):
        """Log rate for one (age, year, area) cell."""
        age, year, area = cell
        i = self.dataset.age_index(age)
        j = self.dataset.year_index(year)
        k = self.dataset.area_index(area)
        eta = 0.0
        if self.spec.include_alpha:
            eta += latent.alpha[i]
        if self.spec.include_time:
            eta += latent.beta[i] * latent.kappa[j]
        if self.spec.include_spatial:
            eta += latent.omega[k, self.g_of_age[i], self.p_of_year[j]]
        if self.spec.include_overdispersion:
            eta += latent.z[i, j, k]
        return float(eta)

    def predictor_grid(self, latent):
        """Log rate on the full (age, year, area) grid."""
        A, T, S = self.layout.n_ages, self.layout.n_years, self.layout.n_areas
        eta = np.zeros((A, T, S))
        if self.spec.include_alpha:
            eta += latent.alpha[:, None, None]
        if self.spec.include_time:
            eta += (latent.beta[:, None] * latent.kappa[None, :])[:, :, None]
        if self.spec.include_spatial:
            w = latent.omega[:, self.g_of_age, :]          # (S, A, P)
            eta += w[:, :, self.p_of_year].transpose(1, 2, 0)
        if self.spec.include_overdispersion:
            eta += latent.z
        return eta

    # ------------------------------------------------------------- densities

    def log_likelihood(self, eta):
        return float(np.sum(self.y * eta - self.E * np.exp(eta)
                            + self.lik_const))

    def log_prior_latent(self, latent, hyper):
        spec, out = self.spec, 0.0
        ln2pi = np.log(2 * np.pi)
        if spec.include_alpha:
            out += self.wide.log_density(latent.alpha)
        if spec.include_time:
            out += self.wide.log_density(latent.beta)
            tau = 1.0 / hyper.sigma_kappa**2
            quad = latent.kappa @ self.rw2.matrix @ latent.kappa
            r = self.rw2.rank
            out += 0.5 * (r * (np.log(tau) - ln2pi) + self.rw2_logdet_star
                          - tau * quad)
        if spec.include_spatial:
            sig, phi = hyper.per_group(spec.n_groups)
            r_adj = self.structure.matrix
            S = self.layout.n_areas
            for g in range(spec.n_groups):
                tau_w = 1.0 / (sig[g] ** 2 * (1.0 - phi[g]))
                for p in range(spec.n_periods):
                    w = latent.omega[:, g, p]
                    u = latent.u[:, g, p]
                    out += 0.5 * (self.rank_u * (-ln2pi) + self.besag_logdet_star
                                  - u @ (r_adj @ u))
                    resid = w - sig[g] * np.sqrt(phi[g]) * u
                    out += 0.5 * (S * (np.log(tau_w) - ln2pi)
                                  - tau_w * np.sum(resid**2))
        if spec.include_overdispersion:
            z = latent.z[self.cell_mask]
            tau = 1.0 / hyper.sigma_z**2
            out += 0.5 * (z.size * (np.log(tau) - ln2pi) - tau * np.sum(z**2))
        return float(out)

    def log_prior_hyper(self, hyper):
        spec, out = self.spec, 0.0
        if spec.include_overdispersion:
            out += self.pc_sigma_z.log_density(hyper.sigma_z)
        if spec.include_time:
            out += self.pc_sigma_kappa.log_density(hyper.sigma_kappa)
        if spec.include_spatial:
            for s in np.atleast_1d(hyper.sigma_omega):
                out += self.pc_sigma_omega.log_density(s)
            for p in np.atleast_1d(hyper.phi):
                out += self.pc_mixing.log_density(p)
        return float(out)

    def joint_log_density(self, latent, hyper):
        """Poisson log likelihood plus all latent and hyperparameter priors."""
        xs, z = self.pack(latent)
        eta = self.linear_predictor(xs, z)
        return (self.log_likelihood(eta)
                + self.log_prior_latent(latent, hyper)
                + self.log_prior_hyper(hyper))

    def joint_gradient_latent(self, latent, hyper):
        """Gradient of the joint log density w.r.t. (structured vector, z)."""
        spec, lay = self.spec, self.layout
        xs, z = self.pack(latent)
        eta = self.linear_predictor(xs, z)
        r = self.y - self.E * np.exp(eta)
        gs = np.zeros(lay.size)
        if spec.include_alpha:
            np.add.at(gs, self.col_alpha, r)
            gs[lay.blocks["alpha"]] -= latent.alpha / self.wide.variance
        if spec.include_time:
            np.add.at(gs, self.col_beta, r * xs[self.col_kappa])
            np.add.at(gs, self.col_kappa, r * xs[self.col_beta])
            gs[lay.blocks["beta"]] -= latent.beta / self.wide.variance
            tau = 1.0 / hyper.sigma_kappa**2
            gs[lay.blocks["kappa"]] -= tau * (self.rw2.matrix @ latent.kappa)
        if spec.include_spatial:
            np.add.at(gs, self.col_omega, r)
            sig, phi = hyper.per_group(spec.n_groups)
            for g in range(spec.n_groups):
                tau_w = 1.0 / (sig[g] ** 2 * (1.0 - phi[g]))
                c = sig[g] * np.sqrt(phi[g])
                for p in range(spec.n_periods):
                    w = latent.omega[:, g, p]
                    u = latent.u[:, g, p]
                    resid = w - c * u
                    gs[lay.spatial_block_slice("omega", g, p)] -= tau_w * resid
                    gs[lay.spatial_block_slice("u", g, p)] += (
                        -self.structure.matrix @ u + tau_w * c * resid)
        gz = np.zeros(self.n_obs)
        if spec.include_overdispersion:
            gz = r - z / hyper.sigma_z**2
        return gs, gz

    # ------------------------------------------------------- hyper transforms

    def hyper_names(self):
        spec, names = self.spec, []
        if spec.include_overdispersion:
            names.append("sigma_z")
        if spec.include_time:
            names.append("sigma_kappa")
        if spec.include_spatial:
            k = spec.n_spatial_hyper
            names += [f"sigma_omega_{g}" for g in range(k)] if k > 1 \
                else ["sigma_omega"]
            names += [f"phi_{g}" for g in range(k)] if k > 1 else ["phi"]
        return names

    def hyper_to_internal(self, hyper):
        spec, v = self.spec, []
        if spec.include_overdispersion:
            v.append(np.log(hyper.sigma_z))
        if spec.include_time:
            v.append(np.log(hyper.sigma_kappa))
        if spec.include_spatial:
            v.extend(np.log(np.atleast_1d(hyper.sigma_omega)))
            p = np.atleast_1d(hyper.phi)
            v.extend(np.log(p) - np.log1p(-p))
        return np.array(v)

    def internal_to_hyper(self, vec):
        spec, i = self.spec, 0
        kw = {}
        if spec.include_overdispersion:
            kw["sigma_z"] = float(np.exp(vec[i])); i += 1
        if spec.include_time:
            kw["sigma_kappa"] = float(np.exp(vec[i])); i += 1
        if spec.include_spatial:
            k = spec.n_spatial_hyper
            kw["sigma_omega"] = np.exp(vec[i:i + k]); i += k
            kw["phi"] = 1.0 / (1.0 + np.exp(-vec[i:i + k])); i += k
        return Hyperparameters(**kw)

    def internal_log_jacobian(self, vec):
        """log |d(natural)/d(internal)| for the log/logit transforms."""
        spec, i, out = self.spec, 0, 0.0
        if spec.include_overdispersion:
            out += vec[i]; i += 1
        if spec.include_time:
            out += vec[i]; i += 1
        if spec.include_spatial:
            k = spec.n_spatial_hyper
            out += float(np.sum(vec[i:i + k])); i += k
            t = vec[i:i + k]
            out += float(np.sum(-t - 2.0 * np.log1p(np.exp(-t))))
            i += k
        return out


def build_constraints(spec, graph, layout=None, include_structured=False):
    """Identifiability constraints: sum(beta) = 1, sum(kappa) = 0, and
    sum(omega) = 0 over each non-singleton graph component for every
    (group, period).

    With ``include_structured`` the same per-component sum-to-zero rows are
    added for the structured spatial field u; these belong to the intrinsic
    prior rather than the model and are used internally by inference.
    """
    if layout is None:
        ages = sorted(spec.age_grouping.group_of_age)
        years = sorted(spec.period_mapping.period_of_year)
        layout = LatentLayout(
            n_ages=len(ages), n_years=len(years), n_areas=graph.n_areas,
            n_groups=spec.n_groups, n_periods=spec.n_periods,
            include_alpha=spec.include_alpha, include_time=spec.include_time,
            include_spatial=spec.include_spatial,
        )
    rows, rhs = [], []
    def unit_row(sl, value=1.0):
        row = np.zeros(layout.size)
        row[sl] = value
        return row
    if spec.include_time:
        rows.append(unit_row(layout.blocks["beta"]))
        rhs.append(1.0)
        rows.append(unit_row(layout.blocks["kappa"]))
        rhs.append(0.0)
    if spec.include_spatial:
        plan = tuple(c for c in graph.components if len(c) > 1)
        names = ("omega", "u") if include_structured else ("omega",)
        for name in names:
            for comp in plan:
                for g in range(spec.n_groups):
                    for p in range(spec.n_periods):
                        row = np.zeros(layout.size)
                        base = layout.blocks[name].start
                        for s in comp:
                            row[base + layout.spatial_pos(s, g, p)] = 1.0
                        rows.append(row)
                        rhs.append(0.0)
    mat = sp.csr_matrix(np.array(rows)) if rows \
        else sp.csr_matrix((0, layout.size))
    return ConstraintSystem(matrix=mat, rhs=np.array(rhs))
