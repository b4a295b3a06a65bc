import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from stsad import kernels
from stsad.ssm import (
    FD_STEP,
    VARIANCE_FLOOR,
    FilterDivergenceError,
    FitError,
    StateSpaceModel,
    ar_stationary_cov,
    ar_to_pacf,
    constrain_pacf,
    constrain_variance,
    fit_mle,
    forecast_one,
    kalman_filter,
    loglike,
    pacf_to_ar,
    unconstrain_pacf,
    unconstrain_variance,
)
from stsad.structural import build_model


def local_level(q, h, a1=0.0, p1=0.0, diffuse=False):
    return StateSpaceModel(Z=[1.0], T=[[1.0]], R=[[1.0]], Q=[[q]], H=h, a1=[a1], P1=[[p1]],
                           diffuse=[diffuse])


def family_for(spec, y, granularity=3600):
    y = np.asarray(y, dtype=float)
    return build_model(spec, granularity, float(np.var(y)) or 1.0, float(y[0]))


class TestFilterOracle:
    @given(st.integers(0, 2**32 - 1))
    def test_loglik_matches_joint_density(self, seed):
        rng = np.random.default_rng(seed)
        model = oracles.random_model(rng)
        n = int(rng.integers(1, 13))
        y = oracles.simulate(model, n, rng)
        assert kalman_filter(model, y).loglik == pytest.approx(
            oracles.joint_loglik(model, y), abs=1e-6)

    @given(st.integers(0, 2**32 - 1))
    def test_masked_point_is_marginalised(self, seed):
        rng = np.random.default_rng(seed)
        model = oracles.random_model(rng)
        n = int(rng.integers(2, 11))
        y = oracles.simulate(model, n, rng)
        mask = rng.random(n) < 0.3
        got = kalman_filter(model, y, mask).loglik
        assert got == pytest.approx(oracles.joint_loglik(model, y, ~mask), abs=1e-6)

    def test_masked_value_is_never_read(self):
        model = local_level(1.0, 1.0, p1=1.0)
        y = np.array([1.0, 2.0, 3.0])
        mask = np.array([False, True, False])
        a = kalman_filter(model, y, mask).loglik
        y[1] = 1e300
        assert kalman_filter(model, y, mask).loglik == a

    def test_static_known_state(self):
        out = kalman_filter(local_level(0.0, 1.0, a1=3.0), np.random.default_rng(0).normal(size=20))
        np.testing.assert_allclose(out.pred_mean, 3.0)
        np.testing.assert_allclose(out.pred_var, 1.0)

    def test_riccati_limit(self):
        model = local_level(1.0, 1.0, p1=1e7, diffuse=True)
        out = kalman_filter(model, np.zeros(200))
        assert out.pred_var[-1] == pytest.approx(oracles.riccati_limit(1.0), abs=1e-4)
        assert oracles.riccati_limit(1.0) == pytest.approx(2.618034, abs=1e-6)

    def test_diffuse_steps_excluded(self):
        model = local_level(1.0, 1.0, p1=1e7, diffuse=True)
        out = kalman_filter(model, np.arange(5.0))
        assert out.nobs == 4

    def test_divergence_names_step(self):
        model = local_level(0.0, 0.0, a1=1.0)
        with pytest.raises(FilterDivergenceError) as err:
            kalman_filter(model, [1.0, 2.0])
        assert err.value.step == 0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            kalman_filter(local_level(1.0, 1.0), [1.0, np.inf])

    @given(st.integers(0, 2**32 - 1))
    def test_covariances_stay_psd(self, seed):
        rng = np.random.default_rng(seed)
        model = oracles.random_model(rng)
        out = kalman_filter(model, oracles.simulate(model, 30, rng))
        for P in out.filtered_cov:
            np.testing.assert_allclose(P, P.T, atol=1e-12)
            assert np.linalg.eigvalsh(P).min() >= -1e-8 * max(1.0, np.abs(P).max())


class TestForecast:
    def test_local_level(self):
        assert forecast_one(local_level(0.0, 2.0), [5.0], [[0.0]]) == (5.0, 2.0)

    def test_local_linear_extrapolates(self):
        model = StateSpaceModel(Z=[1, 0], T=[[1, 1], [0, 1]], R=np.eye(2), Q=np.zeros((2, 2)),
                                H=1.0, a1=[0, 0], P1=np.zeros((2, 2)), diffuse=[False, False])
        mean, var = forecast_one(model, [10.0, 1.0], np.zeros((2, 2)))
        assert mean == 11.0 and var == 1.0

    @given(st.integers(0, 2**32 - 1))
    def test_matches_filter_prediction(self, seed):
        rng = np.random.default_rng(seed)
        model = oracles.random_model(rng)
        y = oracles.simulate(model, 10, rng)
        out = kalman_filter(model, y)
        t = int(rng.integers(0, 9))
        mean, var = forecast_one(model, out.filtered_state[t], out.filtered_cov[t])
        assert mean == pytest.approx(out.pred_mean[t + 1], rel=1e-10, abs=1e-10)
        assert var == pytest.approx(out.pred_var[t + 1], rel=1e-10)


@pytest.mark.skipif(kernels.compiled_filter_loop is None, reason="extension not built")
class TestBackendParity:
    @given(st.integers(0, 2**32 - 1))
    def test_random_models(self, seed):
        rng = np.random.default_rng(seed)
        model = oracles.random_model(rng)
        y = oracles.simulate(model, 40, rng)
        mask = rng.random(40) < 0.2
        a = kalman_filter(model, y, mask, backend=kernels.compiled_filter_loop)
        b = kalman_filter(model, y, mask, backend=kernels.python_filter_loop)
        assert a.loglik == pytest.approx(b.loglik, rel=1e-12, abs=1e-10)
        np.testing.assert_allclose(a.pred_var, b.pred_var, rtol=1e-12)
        np.testing.assert_allclose(a.filtered_cov, b.filtered_cov, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(a.next_state, b.next_state, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("spec", ["local_linear:daily:ar2", "linear_model:none:ar1",
                                      "local_level:daily:gaussian"])
    def test_structural_models(self, spec):
        rng = np.random.default_rng(1)
        y = np.cumsum(rng.normal(size=300)) + 3 * np.sin(np.arange(300) * 2 * np.pi / 24)
        fam = family_for(spec, y)
        model = fam.model(fam.start_params(y, np.ones(y.size, bool))[0])
        a = kalman_filter(model, y, backend=kernels.compiled_filter_loop)
        b = kalman_filter(model, y, backend=kernels.python_filter_loop)
        # the 1e7-scale diffuse prior amplifies summation-order differences
        assert a.loglik == pytest.approx(b.loglik, rel=1e-7)
        P1 = model.P1.copy()
        P1[model.diffuse, model.diffuse] = 10.0
        proper = dataclasses.replace(model, P1=P1)
        a = kalman_filter(proper, y, backend=kernels.compiled_filter_loop)
        b = kalman_filter(proper, y, backend=kernels.python_filter_loop)
        assert a.loglik == pytest.approx(b.loglik, rel=1e-12)

    def test_backend_name(self):
        assert kernels.BACKEND in ("cython", "python")


class TestTransforms:
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=2))
    def test_pacf_round_trip(self, x):
        r = constrain_pacf(np.array(x))
        assert np.all(np.abs(r) < 1)
        np.testing.assert_allclose(unconstrain_pacf(r), x, atol=1e-10 * max(1, np.max(np.abs(x)) ** 3))

    @given(st.lists(st.floats(-0.999, 0.999), min_size=1, max_size=3))
    def test_pacf_ar_round_trip(self, r):
        phi = pacf_to_ar(r)
        np.testing.assert_allclose(ar_to_pacf(phi), r, atol=1e-10)
        # stationary: all companion eigenvalues inside the unit circle
        p = len(phi)
        T = np.zeros((p, p))
        T[0] = phi
        T[1:, :-1] = np.eye(p - 1)
        assert np.max(np.abs(np.linalg.eigvals(T))) < 1

    @given(st.floats(-25, 10), st.floats(1e-3, 1e3))
    def test_variance_round_trip(self, x, scale):
        v = constrain_variance(x, scale)
        assert v >= VARIANCE_FLOOR * scale
        assert unconstrain_variance(v, scale) == pytest.approx(x, abs=1e-10)

    @pytest.mark.parametrize("phi", [[0.5], [-0.9], [0.5, 0.3], [1.2, -0.5], [-0.3, 0.2]])
    def test_ar_stationary_variance(self, phi):
        P = ar_stationary_cov(phi, 2.0)
        assert P[0, 0] == pytest.approx(oracles.yule_walker_var(phi, 2.0), rel=1e-8)


class TestFit:
    def test_iid_noise_total_variance(self):
        y = np.random.default_rng(7).normal(0, 2.0, 2000)
        fam = family_for("local_level:none:gaussian", y)
        fit = fit_mle(fam, y)
        p = fam.constrain(fit.x)
        assert p["q_level"] + p["H"] == pytest.approx(4.0, rel=0.15)

    def test_random_walk_recovery(self):
        rng = np.random.default_rng(8)
        y = np.cumsum(rng.normal(0, 1.0, 2000)) + rng.normal(0, 0.5, 2000)
        fam = family_for("local_level:none:gaussian", y)
        p = fam.constrain(fit_mle(fam, y).x)
        assert p["q_level"] == pytest.approx(1.0, rel=0.25)
        assert p["H"] == pytest.approx(0.25, rel=0.25)

    def test_constant_series_hits_floor(self):
        y = np.full(200, 3.0)
        fam = family_for("local_level:none:gaussian", y)
        fit = fit_mle(fam, y)
        assert np.isfinite(fit.loglik)
        assert fit.model.H == pytest.approx(VARIANCE_FLOOR * fam.scale, rel=1e-3)

    def test_never_worse_than_starts(self):
        rng = np.random.default_rng(9)
        y = np.cumsum(rng.normal(size=300)) + rng.normal(size=300)
        fam = family_for("local_linear:none:ar1", y)
        fit = fit_mle(fam, y)
        assert fit.loglik >= max(fit.start_logliks) - 1e-9

    def test_gradient_small_at_optimum(self):
        rng = np.random.default_rng(10)
        y = np.cumsum(rng.normal(size=1000)) + rng.normal(0, 0.5, 1000)
        fam = family_for("local_level:none:ar1", y)
        fit = fit_mle(fam, y)
        lo, hi = np.array(fam.bounds()).T
        n = kalman_filter(fit.model, y).nobs
        for i in range(fit.x.size):
            if fit.x[i] - lo[i] < 1e-3 or hi[i] - fit.x[i] < 1e-3:
                continue
            xp, xm = fit.x.copy(), fit.x.copy()
            xp[i] += FD_STEP
            xm[i] -= FD_STEP
            g = (loglike(fam.model_from_x(xp), y) - loglike(fam.model_from_x(xm), y)) / (2 * FD_STEP)
            assert abs(g) / n <= 1e-3

    def test_simulated_refit_not_worse_than_truth(self):
        rng = np.random.default_rng(11)
        y = np.cumsum(rng.normal(0, 0.7, 500)) + rng.normal(0, 1.0, 500)
        fam = family_for("local_level:none:gaussian", y)
        truth = fam.model({"q_level": 0.49, "H": 1.0})
        fit = fit_mle(fam, y)
        assert fit.loglik >= loglike(truth, y) - 2.0

    def test_too_few_points(self):
        y = np.arange(5.0)
        with pytest.raises(FitError):
            fit_mle(family_for("local_linear:none:ar2", y), y)

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        y = np.cumsum(rng.normal(size=300))
        fam = family_for("local_level:none:ar1", y)
        a, b = fit_mle(fam, y), fit_mle(fam, y)
        assert np.array_equal(a.x, b.x) and a.loglik == b.loglik
