import dataclasses

import numpy as np
import pytest
import scipy.optimize

import spatial_lc as sl
from spatial_lc import inference as inf


def slsqp_mode_oracle(model, hyper):
    """Independent constrained optimizer of the exact joint log density:
    SLSQP over the concatenated (structured, z) vector with the model
    constraints as explicit linear equalities."""
    n_s = model.layout.size
    a = model.constraints_full.matrix.toarray()
    e = model.constraints_full.rhs

    def split(v):
        return v[:n_s], v[n_s:]

    def neg(v):
        xs, z = split(v)
        return -model.joint_log_density(model.unpack(xs, z), hyper)

    def neg_grad(v):
        xs, z = split(v)
        gs, gz = model.joint_gradient_latent(model.unpack(xs, z), hyper)
        return -np.concatenate([gs, gz])

    x0 = np.concatenate(inf.default_start(model))
    cons = {"type": "eq",
            "fun": lambda v: a @ v[:n_s] - e,
            "jac": lambda v: np.hstack([a, np.zeros((a.shape[0],
                                                     v.size - n_s))])}
    res = scipy.optimize.minimize(neg, x0, jac=neg_grad, method="SLSQP",
                                  constraints=[cons],
                                  options={"maxiter": 2000, "ftol": 1e-14})
    assert res.success, res.message
    return split(res.x)


class TestInnerFit:
    def test_mode_matches_slsqp_oracle(self, tiny_model):
        hyper = sl.default_hyperparameters(tiny_model.spec)
        approx = inf.inner_fit(tiny_model, hyper, tol=1e-10)
        assert approx.converged
        xs_o, z_o = slsqp_mode_oracle(tiny_model, hyper)
        np.testing.assert_allclose(approx.xs_mode, xs_o, atol=1e-5)
        np.testing.assert_allclose(approx.z_mode, z_o, atol=1e-5)

    def test_projected_gradient_vanishes_at_mode(self, tiny_model):
        hyper = sl.default_hyperparameters(tiny_model.spec)
        approx = inf.inner_fit(tiny_model, hyper, tol=1e-10)
        lat = tiny_model.unpack(approx.xs_mode, approx.z_mode)
        gs, gz = tiny_model.joint_gradient_latent(lat, hyper)
        a = tiny_model.constraints_full.matrix.toarray()
        # project the structured gradient onto the constraint null space
        proj = gs - a.T @ np.linalg.solve(a @ a.T, a @ gs)
        assert np.linalg.norm(np.concatenate([proj, gz]), np.inf) < 1e-5

    def test_constraints_hold_at_mode(self, small_model):
        hyper = sl.default_hyperparameters(small_model.spec)
        approx = inf.inner_fit(small_model, hyper)
        cs = small_model.constraints_full
        np.testing.assert_allclose(cs.matrix @ approx.xs_mode, cs.rhs,
                                   atol=1e-8)

    def test_start_independence(self, tiny_model):
        hyper = sl.default_hyperparameters(tiny_model.spec)
        a = inf.inner_fit(tiny_model, hyper, tol=1e-10)
        rng = np.random.default_rng(9)
        xs0 = rng.normal(0, 0.5, tiny_model.layout.size)
        z0 = rng.normal(0, 0.5, tiny_model.n_obs)
        b = inf.inner_fit(tiny_model, hyper, start=(xs0, z0), tol=1e-10)
        np.testing.assert_allclose(a.xs_mode, b.xs_mode, atol=1e-6)

    def test_eps_lift_invariance(self, tiny_model, monkeypatch):
        """The rank lift eps*A'A must not affect mode, constrained
        covariance, or the normalizing constant."""
        hyper = sl.default_hyperparameters(tiny_model.spec)
        results = []
        for eps in (1.0, 25.0):
            monkeypatch.setattr(inf, "EPS_LIFT", eps)
            approx = inf.inner_fit(tiny_model, hyper, tol=1e-10)
            results.append((approx.xs_mode, approx.structured_covariance(),
                            approx.log_norm_const))
        np.testing.assert_allclose(results[0][0], results[1][0], atol=1e-7)
        np.testing.assert_allclose(results[0][1], results[1][1], atol=1e-7)
        assert abs(results[0][2] - results[1][2]) < 1e-6

    def test_covariance_annihilated_by_constraints(self, tiny_model):
        hyper = sl.default_hyperparameters(tiny_model.spec)
        approx = inf.inner_fit(tiny_model, hyper)
        a = tiny_model.constraints_full.matrix.toarray()
        sigma = approx.structured_covariance()
        np.testing.assert_allclose(a @ sigma, 0.0, atol=1e-8)


class TestMarginalExactness:
    def test_gaussian_likelihood_marginal_is_exact(self, small_sim):
        """With a Gaussian likelihood and no bilinear term the model is a
        linear-Gaussian model, so the Laplace marginal must equal the exact
        constrained Gaussian integral computed by dense null-space algebra."""
        spec = dataclasses.replace(small_sim.spec, include_time=False)
        m = sl.Model(small_sim.dataset, small_sim.graph, spec)
        h = sl.default_hyperparameters(spec)
        rng = np.random.default_rng(0)
        y = rng.normal(-4.0, 1.0, m.n_obs)
        lik = inf.GaussianLikelihood(y, sd=0.7)
        got, _ = inf.marginal_log_posterior(m, h, likelihood=lik)

        q_prior = inf.build_prior_precision(m, h)
        a = m.constraints_full.matrix.toarray()
        e = m.constraints_full.rhs
        n_s, n_z = q_prior.shape[0], m.n_obs
        tau_z = 1.0 / h.sigma_z**2
        b, _ = inf._build_design(m, np.zeros(n_s))
        B = b.toarray()
        C = np.eye(n_z) / 0.7**2
        H = np.block([[q_prior + B.T @ C @ B, B.T @ C],
                      [C @ B, tau_z * np.eye(n_z) + C]])
        lin = np.concatenate([B.T @ (y / 0.7**2), y / 0.7**2])
        A_full = np.hstack([a, np.zeros((a.shape[0], n_z))])
        v0, *_ = np.linalg.lstsq(A_full, e, rcond=None)
        _, _, Vt = np.linalg.svd(A_full)
        N = Vt[a.shape[0]:].T
        Ht = N.T @ H @ N
        lt = N.T @ (lin - H @ v0)
        _, ld = np.linalg.slogdet(Ht)
        lat0 = m.unpack(v0[:n_s], v0[n_s:])
        f0 = (lik.value(B @ v0[:n_s] + v0[n_s:])
              + m.log_prior_latent(lat0, h) + m.log_prior_hyper(h))
        want = f0 + 0.5 * lt @ np.linalg.solve(Ht, lt) \
            + 0.5 * (Ht.shape[0] * np.log(2 * np.pi) - ld)
        assert abs(got - want) < 1e-8 * max(1.0, abs(want))

    def test_poisson_marginal_against_quadrature(self):
        """One Poisson count with a single latent effect: Laplace marginal
        against 1-D quadrature of the exact integral."""
        graph = sl.SpatialGraph.from_neighbor_lists([()])
        ds = sl.MortalityDataset(ages=(0,), years=(2000, 2001, 2002),
                                 areas=("a",),
                                 deaths=np.array([[[700.0], [900.0], [1100.0]]]),
                                 exposures=np.full((1, 3, 1), 10000.0))
        grouping = sl.default_age_grouping(ds.ages)
        mapping = sl.period_mapping(ds.years)
        spec = sl.ModelSpec(variant="static", age_grouping=grouping,
                            period_mapping=mapping, include_time=False,
                            include_spatial=False,
                            include_overdispersion=False)
        m = sl.Model(ds, graph, spec)
        h = sl.Hyperparameters()
        got, _ = inf.marginal_log_posterior(m, h)
        # exact: log integral over alpha of prod Poisson(y | E e^alpha)
        # times N(alpha; 0, 100)
        from scipy.integrate import quad
        from scipy.special import gammaln

        y = np.array([700.0, 900.0, 1100.0])

        def log_density(alpha):
            mu = 10000.0 * np.exp(alpha)
            ll = np.sum(y * np.log(mu) - mu - gammaln(y + 1))
            lp = -0.5 * np.log(2 * np.pi * 100.0) - alpha**2 / 200.0
            return ll + lp

        peak = np.log(np.sum(y) / (3 * 10000.0))
        offset = log_density(peak)
        val = quad(lambda a: np.exp(log_density(a) - offset),
                   peak - 0.5, peak + 0.5, limit=200)[0]
        want = offset + np.log(val)
        # residual difference is the genuine Laplace approximation error,
        # which is O(1 / total count) for Poisson data
        assert abs(got - want) < 1e-4


class TestOptimizeHyper:
    def test_converges_on_tiny_instance(self, tiny_model):
        out = inf.optimize_hyper(tiny_model, max_evals=800,
                                 standard_errors=False)
        assert out.converged
        assert out.hyper.sigma_z > 0

    def test_exhausted_budget_raises_with_best(self, tiny_model):
        with pytest.raises(inf.InferenceError, match="did not converge") \
                as err:
            inf.optimize_hyper(tiny_model, max_evals=3,
                               standard_errors=False)
        best = err.value.best
        assert best is not None and not best.converged
        assert np.isfinite(best.value)

    def test_fit_continues_from_best_so_far(self, tiny_model):
        fit = inf.fit(tiny_model, inf.FitConfig(max_hyper_evals=3,
                                                n_draws=20,
                                                standard_errors=False))
        assert fit.convergence["hyper_converged"] is False


class TestFdHessian:
    def test_exact_on_quadratic(self):
        rng = np.random.default_rng(0)
        mat = rng.standard_normal((3, 3))
        H = mat @ mat.T + 3 * np.eye(3)

        def f(x):
            return 0.5 * x @ H @ x

        got = inf._fd_hessian(f, np.array([0.3, -0.2, 1.0]), step=1e-3)
        np.testing.assert_allclose(got, H, atol=1e-6)


class TestFit:
    def test_summaries_well_formed(self, small_fit, small_model):
        lay = small_model.layout
        assert small_fit.latent_mean.alpha.shape == (lay.n_ages,)
        for name in ("alpha", "beta", "kappa", "omega"):
            assert np.all(small_fit.sd[name] >= 0)
        lo, hi = small_fit.interval("beta")
        assert np.all(lo <= small_fit.latent_mean.beta)
        assert np.all(hi >= small_fit.latent_mean.beta)
        assert small_fit.compound["mean"].shape == (lay.n_ages, lay.n_years)
        assert np.all(small_fit.compound["q975"] >= small_fit.compound["q025"])

    def test_compound_mean_near_product(self, small_fit):
        prod = np.outer(small_fit.latent_mean.beta, small_fit.latent_mean.kappa)
        # MC mean of the product differs from the product of means only by
        # posterior covariance terms, which are small here
        err = np.abs(small_fit.compound["mean"] - prod)
        assert np.max(err) < 0.3

    def test_deterministic_given_seed(self, small_model):
        cfg = sl.FitConfig(max_hyper_evals=500, seed=1,
                           standard_errors=False)
        a = sl.fit(small_model, cfg)
        b = sl.fit(small_model, cfg)
        np.testing.assert_array_equal(a.hyper_internal, b.hyper_internal)
        np.testing.assert_array_equal(a.latent_mean.kappa, b.latent_mean.kappa)
        np.testing.assert_array_equal(a.compound["mean"], b.compound["mean"])

    def test_z_sd_optional(self, small_model):
        cfg = sl.FitConfig(max_hyper_evals=500, compute_z_sd=True,
                           standard_errors=False)
        fr = sl.fit(small_model, cfg)
        zsd = fr.sd["z"][small_model.cell_mask]
        assert np.all(zsd > 0)
        # z sd is bounded by the prior sd
        assert np.all(zsd <= fr.hyper.sigma_z + 1e-6)
