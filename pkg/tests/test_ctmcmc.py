import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from pdmc.ctmcmc import (BPS, ConfigError, Exact, GaussianExactBound, HybridCV,
                         PureReflection, SubsampleCV, SubsampleNonUniform, SubsampleSimple,
                         UndefinedFlipError, ZigZag, bps_flip, canonical_rate,
                         check_bound_compatibility, estimate_gradient, estimator_variance,
                         expected_rate, make_bound, random_rate, run_ctmcmc, sampler_kind,
                         zigzag_coordinate_rates, zigzag_flip)
from pdmc.diagnostics import sample_every
from pdmc.rng import RngStream
from pdmc.targets import (GaussianFactorTarget, GaussianTarget, MixtureTarget, build_cv_cache,
                          factor_bound_table, global_rate_bound_sum, quadrature_posterior,
                          simulate_mixture_data)

vec3 = arrays(np.float64, 3, elements=st.floats(-5, 5))


@pytest.fixture(scope="module")
def mixture():
    return MixtureTarget(simulate_mixture_data(150, rng=19))


@pytest.fixture(scope="module")
def posterior(mixture):
    return quadrature_posterior(mixture)


@pytest.fixture(scope="module")
def table(mixture):
    return factor_bound_table(mixture)


@pytest.fixture(scope="module")
def cache(mixture, posterior):
    return build_cv_cache(mixture, [posterior.mode])


class TestRates:
    def test_canonical_examples(self):
        assert canonical_rate([0.0], [1.0]) == 0.0
        assert canonical_rate([-2.0], [1.0]) == 2.0
        assert canonical_rate([-2.0], [-1.0]) == 0.0

    def test_random_rate_with_exact_estimate(self):
        g = np.array([0.3, -1.2])
        v = np.array([0.6, 0.8])
        assert random_rate(-g, v) == canonical_rate(g, v)

    @given(vec3, vec3)
    def test_rate_identity_negation(self, g, v):
        diff = canonical_rate(g, v) - canonical_rate(g, -v)
        assert diff == pytest.approx(-v @ g, abs=1e-12)

    @given(vec3, vec3)
    def test_rate_identity_bps(self, g, v):
        if g @ g < 1e-6:
            return
        diff = canonical_rate(g, v) - canonical_rate(g, bps_flip(g, v))
        assert diff == pytest.approx(-v @ g, abs=1e-12 * max(1.0, abs(v @ g)))


class TestFlips:
    def test_bps_examples(self):
        np.testing.assert_allclose(bps_flip([-1.0, 0.0], [1.0, 0.0]), [-1.0, 0.0])
        np.testing.assert_allclose(bps_flip([1.0, 0.0], [0.0, 1.0]), [0.0, 1.0])

    def test_bps_zero_gradient(self):
        with pytest.raises(UndefinedFlipError):
            bps_flip([0.0, 0.0], [1.0, 0.0])

    @given(vec3, vec3)
    def test_bps_involution_and_isometry(self, g, v):
        if g @ g < 1e-6:
            return
        w = bps_flip(g, v)
        np.testing.assert_allclose(bps_flip(g, w), v, atol=1e-12 * max(1.0, np.abs(v).max()) * 10)
        assert np.linalg.norm(w) == pytest.approx(np.linalg.norm(v), abs=1e-12 * max(1.0, np.linalg.norm(v)) * 10)

    def test_zigzag_examples(self):
        np.testing.assert_array_equal(zigzag_coordinate_rates([-2.0, 3.0], [1.0, 1.0]), [2.0, 0.0])
        assert zigzag_coordinate_rates([-1.5], [1.0])[0] == canonical_rate([-1.5], [1.0])

    def test_zigzag_rejects_non_sign_velocity(self):
        with pytest.raises(ValueError):
            zigzag_coordinate_rates([1.0], [0.5])

    @given(vec3, st.lists(st.sampled_from([-1.0, 1.0]), min_size=3, max_size=3), st.integers(0, 2))
    def test_zigzag_identity_and_involution(self, g, theta, i):
        theta = np.array(theta)
        flipped = zigzag_flip(theta, i)
        diff = zigzag_coordinate_rates(g, theta)[i] - zigzag_coordinate_rates(g, flipped)[i]
        assert diff == pytest.approx(-theta[i] * g[i], abs=1e-12)
        np.testing.assert_array_equal(zigzag_flip(flipped, i), theta)
        assert set(np.abs(flipped)) == {1.0}


class TestEstimators:
    def test_two_factor_simple_estimator(self):
        # factor gradients {1, 3} at x = 0: data chosen so (y_i - x) = g_i
        t = GaussianFactorTarget([1.0, 3.0], noise_var=1.0)
        u, p = SubsampleSimple().support(t, np.array([0.0]))
        np.testing.assert_allclose(np.sort(u[:, 0]), [-6.0, -2.0])
        assert p @ u[:, 0] == pytest.approx(-4.0)

    @pytest.mark.parametrize("name", ["simple", "nonuniform", "cv", "hybrid"])
    def test_unbiased_by_enumeration(self, name, mixture, table, cache):
        est = {"simple": SubsampleSimple(),
               "nonuniform": SubsampleNonUniform(table.per_factor_max_abs_grad),
               "cv": SubsampleCV(cache),
               "hybrid": HybridCV(cache, 5 / math.sqrt(mixture.n))}[name]
        for x in (-3.0, 1.0, float(cache.x_hat[0]) + 0.05, 4.5, 9.0):
            xx = np.array([x])
            u, p = est.support(mixture, xx)
            assert p.sum() == pytest.approx(1.0, abs=1e-12)
            exact = -mixture.grad_log_pi(xx[None])[0, 0]
            assert p @ u[:, 0] == pytest.approx(exact, rel=1e-10, abs=1e-10)

    def test_cv_is_exact_at_anchor(self, mixture, cache):
        u, _ = SubsampleCV(cache).support(mixture, cache.x_hat)
        np.testing.assert_allclose(u[:, 0], -cache.grad_at_hat[0], atol=1e-12)
        assert estimator_variance(SubsampleCV(cache), mixture, cache.x_hat)[0] == pytest.approx(0.0, abs=1e-20)

    def test_cv_variance_lower_near_mode_worse_far(self, mixture, cache, posterior):
        simple, cv = SubsampleSimple(), SubsampleCV(cache)
        for off in (-0.5, -0.25, 0.25, 0.5):
            x = np.array([posterior.mode + off * posterior.sd])
            assert estimator_variance(cv, mixture, x)[0] < estimator_variance(simple, mixture, x)[0]
        far = np.array([posterior.mode + 2 * posterior.sd])
        assert estimator_variance(cv, mixture, far)[0] > estimator_variance(simple, mixture, far)[0]

    def test_cv_variance_gain_within_one_sd_for_larger_n(self):
        t = MixtureTarget(simulate_mixture_data(1500, rng=19))
        post = quadrature_posterior(t)
        cv = SubsampleCV(build_cv_cache(t, [post.mode]))
        for off in (-1.0, 1.0):
            x = np.array([post.mode + off * post.sd])
            assert estimator_variance(cv, t, x)[0] < estimator_variance(SubsampleSimple(), t, x)[0]

    def test_sampled_estimate_is_in_support(self, mixture, cache):
        x = np.array([2.0])
        e = estimate_gradient(SubsampleCV(cache), mixture, x, 3)
        u, _ = SubsampleCV(cache).support(mixture, x)
        assert e.u[0] == pytest.approx(u[e.factor_index, 0])
        assert estimate_gradient(Exact(), mixture, x, 0).u[0] == pytest.approx(-mixture.grad_log_pi(x[None])[0, 0])

    def test_rate_difference_identity(self, mixture, cache, table):
        for est in (SubsampleSimple(), SubsampleCV(cache), SubsampleNonUniform(table.per_factor_max_abs_grad)):
            for x in (-2.0, 3.0, 6.0):
                xx = np.array([x])
                diff = expected_rate(est, mixture, xx, [1.0]) - expected_rate(est, mixture, xx, [-1.0])
                ref = -mixture.grad_log_pi(xx[None])[0, 0]
                assert diff == pytest.approx(ref, rel=1e-10, abs=1e-10)

    def test_random_rate_dominates_canonical(self, mixture):
        simple = SubsampleSimple()
        for x in np.linspace(-5, 12, 35):
            xx = np.array([x])
            g = mixture.grad_log_pi(xx[None])[0]
            for v in (1.0, -1.0):
                er = expected_rate(simple, mixture, xx, [v])
                assert er >= canonical_rate(g, [v]) - 1e-9
                u, _ = simple.support(mixture, xx)
                if u.min() < 0 < u.max():
                    assert er > canonical_rate(g, [v])

    def test_nonuniform_rejects_zero_weight(self):
        with pytest.raises(ConfigError):
            SubsampleNonUniform([1.0, 0.0])


class TestConfiguration:
    def test_bps_needs_positive_refresh(self):
        with pytest.raises(ConfigError):
            BPS(0.0)
        assert sampler_kind("bps").refresh_rate == 1.0

    def test_reducible_reflection_rejected(self):
        t = GaussianTarget(np.zeros(2), 1.0, 2)
        with pytest.raises(ConfigError, match="reducible"):
            run_ctmcmc(PureReflection(0.0), Exact(), t, GaussianExactBound(t), [0, 0], [1.0, 0.0], 10.0, 0)

    def test_zigzag_velocity_must_be_signs(self):
        t = GaussianTarget(np.zeros(2), 1.0, 2)
        with pytest.raises(ConfigError):
            run_ctmcmc(ZigZag(), Exact(), t, GaussianExactBound(t), [0, 0], [0.6, 0.8], 10.0, 0)

    def test_incompatible_bounds(self, mixture, table, cache):
        with pytest.raises(ConfigError):
            check_bound_compatibility(SubsampleSimple(), make_bound("sum", mixture, table))
        with pytest.raises(ConfigError):
            check_bound_compatibility(SubsampleCV(cache), make_bound("simple", mixture, table))
        with pytest.raises(ConfigError):
            make_bound("max", mixture, table, estimator=SubsampleSimple(), max_grad=1.0)

    def test_epsilon_rejected_for_bps(self):
        t = GaussianTarget(0.0, 1.0, 1)
        with pytest.raises(ConfigError):
            run_ctmcmc(BPS(1.0), Exact(), t, GaussianExactBound(t), [0.0], [1.0], 10.0, 0, epsilon=0.1)


def _normal_check(xs):
    return abs(xs.mean()), abs(xs.var() - 1.0), stats.kstest(xs, "norm").statistic


class TestStationarity:
    @pytest.mark.parametrize("kind", [ZigZag(), PureReflection(0.0), BPS(1.0)], ids=lambda k: k.name)
    def test_standard_normal(self, kind):
        t = GaussianTarget(0.0, 1.0, 1)
        res = run_ctmcmc(kind, Exact(), t, GaussianExactBound(t), [0.0], [1.0], 1e4, RngStream(1))
        xs = sample_every(res.skeleton, 1.0, 100.0)[:, 0]
        m, v, ks = _normal_check(xs)
        assert m < 0.05 and v < 0.05 and ks < 0.02

    def test_zigzag_event_rate(self):
        t = GaussianTarget(0.0, 1.0, 1)
        res = run_ctmcmc(ZigZag(), Exact(), t, GaussianExactBound(t), [0.0], [1.0], 1e4, RngStream(2))
        assert res.counters.events / 1e4 == pytest.approx(1 / math.sqrt(2 * math.pi), rel=0.05)

    @pytest.mark.parametrize("kind,v0", [(ZigZag(), [1.0, 1.0]), (BPS(1.0), [1.0, 0.0]),
                                         (PureReflection(1.0), [1.0, 0.0])], ids=["zigzag", "bps", "reflect"])
    def test_correlated_gaussian(self, kind, v0):
        cov = np.array([[1.0, 0.6], [0.6, 2.0]])
        t = GaussianTarget([1.0, -1.0], cov)
        res = run_ctmcmc(kind, Exact(), t, GaussianExactBound(t), [1.0, -1.0], v0, 2e4, RngStream(3))
        xs = sample_every(res.skeleton, 1.0, 1000.0)
        np.testing.assert_allclose(xs.mean(0), [1.0, -1.0], atol=0.15)
        np.testing.assert_allclose(np.cov(xs.T), cov, atol=0.25)


class TestCosts:
    def test_proposals_match_bound(self, mixture, table, posterior):
        bound = make_bound("sum", mixture, table)
        T = 2000.0
        res = run_ctmcmc(ZigZag(), Exact(), mixture, bound, [posterior.mode], [1.0], T, RngStream(4))
        assert res.counters.proposals / T == pytest.approx(global_rate_bound_sum(table), rel=0.02)
        assert res.counters.factor_evals == res.counters.proposals * mixture.n

    def test_subsampled_switches_more_often(self, mixture, table, posterior, cache):
        T = 300.0
        rates = {}
        for name, est, b in [("exact", Exact(), "sum"), ("simple", SubsampleSimple(), "simple"),
                             ("cv", SubsampleCV(cache), "cv")]:
            bound = make_bound(b, mixture, table, cache, est)
            res = run_ctmcmc(ZigZag(), est, mixture, bound, [posterior.mode], [1.0], T, RngStream(5))
            rates[name] = res.counters.events / T
            if name != "exact":
                assert res.counters.factor_evals == res.counters.proposals
        assert rates["simple"] > rates["exact"]
        assert rates["cv"] > rates["exact"]

    def test_runs_are_reproducible(self, mixture, table, posterior, cache):
        bound = make_bound("cv", mixture, table, cache)
        a = run_ctmcmc(ZigZag(), SubsampleCV(cache), mixture, bound, [posterior.mode], [1.0], 50.0, RngStream(9, 2))
        b = run_ctmcmc(ZigZag(), SubsampleCV(cache), mixture, bound, [posterior.mode], [1.0], 50.0, RngStream(9, 2))
        np.testing.assert_array_equal(a.skeleton.t, b.skeleton.t)
        np.testing.assert_array_equal(a.skeleton.x, b.skeleton.x)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["simple", "cv"])
def test_subsampled_zigzag_matches_posterior(name, mixture, table, posterior, cache):
    est = SubsampleSimple() if name == "simple" else SubsampleCV(cache)
    bound = make_bound("simple" if name == "simple" else "cv", mixture, table, cache, est)
    res = run_ctmcmc(ZigZag(), est, mixture, bound, [posterior.mode], [1.0], 1e4, RngStream(6))
    xs = sample_every(res.skeleton, 1.0, 1000.0)[:, 0]
    assert stats.kstest(xs, posterior.cdf).statistic < 0.05
