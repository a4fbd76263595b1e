"""Exponential families and penalized Newton estimation at fixed smoothing parameters."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference
from scopfit.assembly import AssembledModel, build
from scopfit.data import DataTable
from scopfit.family import deviance, get_family
from scopfit.fit import evaluate, newton_fit, predict, scale_estimate
from scopfit.formula import parse
from scopfit.smoothsel import select
from scopfit.splines import null_space_dim


def monotone_data(seed, n=200, sigma=0.3):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    return DataTable({"y": x**3 + rng.normal(0, sigma, n), "x": x})


class TestFamily:
    def test_gaussian_zero(self):
        assert deviance(get_family("gaussian"), [1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_binomial_half(self):
        assert deviance(get_family("binomial"), [1.0], [0.5]) == pytest.approx(2 * np.log(2))

    def test_poisson_zero_count(self):
        assert deviance(get_family("poisson"), [0.0], [2.0]) == pytest.approx(4.0)

    def test_binomial_boundary_clamped(self):
        D, clamped = deviance(get_family("binomial"), [1.0, 0.0], [1.0, 1.0], return_clamped=True)
        assert clamped and np.isfinite(D)

    @pytest.mark.parametrize("name,link", [("gaussian", "identity"), ("gaussian", "log"),
                                           ("binomial", "logit"), ("poisson", "log"),
                                           ("poisson", "identity")])
    def test_newton_weights_match_loglik_derivatives(self, name, link, rng):
        fam = get_family(name, link)
        eta = rng.uniform(0.2, 1.5, 6)
        mu = fam.link.inverse(eta)
        y = {"gaussian": mu + rng.normal(size=6), "binomial": rng.integers(0, 2, 6).astype(float),
             "poisson": rng.poisson(mu).astype(float)}[name]

        def ll(e):
            # per-observation log-likelihood up to constants, via unit deviance
            return -0.5 * fam.unit_deviance(y, fam.link.inverse(e))

        h = 1e-5
        _, a, b = fam.newton_weights(y, eta)
        np.testing.assert_allclose(a, (ll(eta + h) - ll(eta - h)) / (2 * h), rtol=1e-6, atol=1e-8)
        d2 = (ll(eta + h) - 2 * ll(eta) + ll(eta - h)) / h**2
        np.testing.assert_allclose(b, -d2, rtol=1e-4, atol=1e-5)

    @pytest.mark.parametrize("name", ["gaussian", "binomial", "poisson"])
    def test_db_deta(self, name, rng):
        fam = get_family(name)
        eta = rng.uniform(-1, 1, 5)
        y = np.ones(5)
        fd = (fam.newton_weights(y, eta + 1e-6)[2] - fam.newton_weights(y, eta - 1e-6)[2]) / 2e-6
        np.testing.assert_allclose(fam.db_deta(y, eta), fd, rtol=1e-6, atol=1e-9)

    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_unit_deviance_nonnegative(self, y, mu):
        fam = get_family("binomial")
        assert fam.unit_deviance(np.array([y]), np.array([mu]))[0] >= -1e-15
        assert abs(fam.unit_deviance(np.array([y]), np.array([y]))[0]) < 1e-12


class TestOracles:
    def test_ols(self, rng):
        X = np.c_[np.ones(30), rng.normal(size=(30, 3))]
        y = rng.normal(size=30)
        fit = newton_fit(AssembledModel.from_matrices(X, y=y))
        np.testing.assert_allclose(fit.beta, np.linalg.solve(X.T @ X, X.T @ y), atol=1e-8)
        assert fit.iterations <= 2

    @given(st.integers(0, 10**6))
    def test_penalized_least_squares(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 11))
        n = int(rng.integers(p + 1, 41))
        X = rng.normal(size=(n, p))
        y = rng.normal(size=n)
        A = rng.normal(size=(p, p))
        S = [A.T @ A, np.diag(rng.uniform(0, 1, p))]
        lam = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), 2))
        fit = newton_fit(AssembledModel.from_matrices(X, S, y=y), lam=lam)
        ref = np.linalg.solve(X.T @ X + lam[0] * S[0] + lam[1] * S[1], X.T @ y)
        np.testing.assert_allclose(fit.beta, ref, atol=1e-8 * max(1.0, np.abs(ref).max()))


class TestNewton:
    @pytest.fixture(params=["gaussian", "binomial", "poisson"])
    def scop_model(self, request, rng):
        n = 150
        x = rng.uniform(0, 1, n)
        z = rng.normal(size=n)
        u = rng.uniform(-1, 1, n)
        eta = 0.5 * np.tanh(4 * (x - 0.5)) + 0.3 * z + 0.4 * u**2
        fam = get_family(request.param)
        y = {"gaussian": eta + 0.3 * rng.normal(size=n),
             "binomial": (rng.uniform(size=n) < 1 / (1 + np.exp(-eta))).astype(float),
             "poisson": rng.poisson(np.exp(eta)).astype(float)}[request.param]
        data = DataTable({"y": y, "x": x, "z": z, "u": u})
        # a shape-constrained pair on one covariate would share an unpenalized linear direction
        am = build(parse("y ~ z + s(x, k=8, bs=mpi) + s(u, k=6, bs=cv)", request.param), data)
        return am, fam

    def test_gradient_matches_finite_differences(self, scop_model, rng):
        am, fam = scop_model
        lam = np.array([2.0, 0.5])
        for _ in range(5):
            beta = rng.normal(0, 0.5, am.p)
            ev = evaluate(am, am.y, fam, lam, beta)
            fd = central_difference(lambda b: evaluate(am, am.y, fam, lam, b).objective, beta)
            np.testing.assert_allclose(ev.grad, fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())

    def test_hessian_matches_finite_differences(self, scop_model, rng):
        am, fam = scop_model
        lam = np.array([2.0, 0.5])
        beta = rng.normal(0, 0.5, am.p)
        ev = evaluate(am, am.y, fam, lam, beta)
        H = ev.hessian_unpenalized(am.exp_mask) + am.S_lambda(lam)
        fd = central_difference(lambda b: evaluate(am, am.y, fam, lam, b).grad, beta)
        np.testing.assert_allclose(H, fd, rtol=1e-5, atol=1e-5 * np.abs(H).max())

    def test_converges_descending_and_feasible(self, scop_model):
        am, fam = scop_model
        fit = newton_fit(am, family=fam, lam=[1.0, 1.0])
        assert fit.converged and fit.constraints_ok
        assert np.all(np.diff(fit.trace) <= 1e-12 * np.abs(fit.trace[:-1]))
        assert fit.grad_norm < 1e-6 * max(1.0, abs(fit.objective))

    def test_monotone_beats_unconstrained(self):
        data = monotone_data(seed=11)
        grid = np.linspace(-1, 1, 200)
        rmse = {}
        for bs in ("mpi", "ps"):
            am = build(parse(f"y ~ s(x, k=12, bs={bs})"), data)
            sel = select(am)
            f = predict(am, sel.fit, DataTable({"x": grid}), extrapolate=True)
            if bs == "mpi":
                assert np.all(np.diff(f) >= -1e-10)
            rmse[bs] = np.sqrt(np.mean((f - grid**3) ** 2))
        assert rmse["mpi"] < rmse["ps"]

    @pytest.mark.parametrize("lam", [1e9, 1e12, 1e15])
    def test_huge_lambda_converges(self, lam):
        # the remaining gradient is round-off in lambda * S @ beta
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, 300)
        data = DataTable({"y": 4 * (x - 0.4) ** 2 + 0.2 * rng.normal(size=300), "x": x})
        am = build(parse("y ~ s(x, k=10, bs=cx)"), data)
        fit = newton_fit(am, lam=[lam])
        assert fit.converged and fit.iterations < 50
        assert fit.edf == pytest.approx(3.0, abs=1e-3)

    def test_lambda_validation(self, scop_model):
        am, fam = scop_model
        with pytest.raises(ValueError, match="expected 2"):
            newton_fit(am, family=fam, lam=[1.0])
        with pytest.raises(ValueError, match="nonnegative"):
            newton_fit(am, family=fam, lam=[1.0, -1.0])


class TestEffectiveDf:
    def test_unpenalized_full_rank(self, rng):
        X = rng.normal(size=(25, 6))
        fit = newton_fit(AssembledModel.from_matrices(X, [np.eye(6)], y=rng.normal(size=25)),
                         lam=[0.0])
        assert fit.edf == pytest.approx(6.0, abs=1e-10)

    def test_large_lambda_limit(self):
        am = build(parse("y ~ s(x, k=10)"), monotone_data(3))
        fit = newton_fit(am, lam=[1e10])
        term = fit.edf_terms[1]
        assert abs(term - null_space_dim(am.penalties[0].matrix)) < 0.01

    def test_decreasing_in_lambda(self):
        am = build(parse("y ~ s(x, k=10)"), monotone_data(3))
        edfs = [newton_fit(am, lam=[lam]).edf for lam in np.logspace(-3, 4, 10)]
        assert np.all(np.diff(edfs) < 0)

    def test_matches_influence_trace(self, rng):
        X = rng.normal(size=(30, 5))
        S = np.diag([0, 1, 2, 3, 4.0])
        fit = newton_fit(AssembledModel.from_matrices(X, [S], y=rng.normal(size=30)), lam=[0.7])
        A = X @ np.linalg.solve(X.T @ X + 0.7 * S, X.T)
        assert fit.edf == pytest.approx(np.trace(A), rel=1e-10)


class TestScale:
    def test_perfect_fit(self):
        fam = get_family("gaussian")
        assert scale_estimate(fam, np.arange(5.0), np.arange(5.0), 2.0) == 0.0

    def test_binomial_known(self):
        assert scale_estimate(get_family("binomial"), [0.0, 1.0], [0.5, 0.5], 1.0) == 1.0

    def test_simulated_variance(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, 2000)
        data = DataTable({"y": np.sin(6 * x) + rng.normal(0, 2, 2000), "x": x})
        am = build(parse("y ~ s(x, k=10)"), data)
        fit = newton_fit(am, lam=[1.0])
        assert 3.6 <= fit.scale <= 4.4

    def test_n_not_above_edf(self):
        with pytest.raises(ValueError, match="does not exceed"):
            scale_estimate(get_family("gaussian"), [1.0, 2.0], [1.0, 2.0], 2.0)


class TestPredict:
    @pytest.fixture
    def fitted(self):
        data = monotone_data(seed=2)
        am = build(parse("y ~ s(x, k=10, bs=mpi)"), data)
        return am, newton_fit(am, lam=[1.0]), data

    def test_training_data(self, fitted):
        am, fit, data = fitted
        np.testing.assert_allclose(predict(am, fit, data, "response"), fit.mu, atol=1e-12)

    def test_terms_sum(self, fitted):
        am, fit, data = fitted
        terms = predict(am, fit, data, "terms")
        np.testing.assert_allclose(terms.sum(axis=1), predict(am, fit, data, "link"), atol=1e-12)

    def test_se_grows_toward_boundary(self, fitted):
        am, fit, _ = fitted
        lo, hi = am.terms[1].design.knots[0].domain
        grid = DataTable({"x": np.linspace(lo, hi, 101)})
        _, se = predict(am, fit, grid, "link", se=True)
        assert np.all(se > 0)
        assert min(se[0], se[-1]) / se[50] > 1.0

    def test_out_of_range(self, fitted):
        am, fit, _ = fitted
        with pytest.raises(ValueError, match="outside the training range"):
            predict(am, fit, DataTable({"x": np.array([5.0])}))
        assert np.isfinite(predict(am, fit, DataTable({"x": np.array([5.0])}), extrapolate=True))

    def test_unknown_type(self, fitted):
        am, fit, data = fitted
        with pytest.raises(ValueError, match="unknown prediction type"):
            predict(am, fit, data, "mean")
