import numpy as np
import pytest
from scipy import stats

from pdmc.targets import (FactorBoundTable, GaussianFactorTarget, GaussianTarget, MixtureTarget,
                          NonFiniteFactorError, build_cv_cache, cached_factor_bound_table,
                          cv_rate_bound, cv_rate_envelope, factor_bound_table,
                          global_rate_bound_simple, global_rate_bound_sum, golden_section_max,
                          max_abs_grad_bound, quadrature_posterior, simulate_mixture_data)


@pytest.fixture(scope="module")
def mixture():
    return MixtureTarget(simulate_mixture_data(150, rng=19))


@pytest.fixture(scope="module")
def table(mixture):
    return factor_bound_table(mixture)


def _fd(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


class TestMixtureDerivatives:
    def test_factor_grad_matches_finite_difference(self, mixture):
        idx = np.arange(mixture.n)
        for x in (-6.0, 0.3, 4.1, 12.0):
            num = _fd(lambda z: mixture.log_factor(idx, np.array([[z]]).repeat(mixture.n, 0)), x)
            ana = mixture.factor_grad(idx, np.full((mixture.n, 1), x))[:, 0]
            np.testing.assert_allclose(ana, num, rtol=1e-6, atol=1e-8)

    def test_factor_hess_matches_finite_difference(self, mixture):
        idx = np.arange(mixture.n)
        for x in (-2.0, 3.7):
            num = _fd(lambda z: mixture.factor_grad(idx, np.full((mixture.n, 1), z))[:, 0], x)
            ana = mixture.factor_hess_diag(idx, np.full((mixture.n, 1), x))[:, 0]
            np.testing.assert_allclose(ana, num, rtol=1e-5, atol=1e-7)

    def test_grad_is_sum_of_factors(self, mixture):
        x = np.array([[2.5]])
        assert mixture.grad_log_pi(x)[0, 0] == pytest.approx(mixture.all_factor_grads(x).sum(), rel=1e-12)

    def test_log_pi_derivative(self, mixture):
        for x in (-3.0, 1.0, 4.0):
            num = _fd(lambda z: float(mixture.log_pi(np.array([[z]]))[0]), x, 1e-4)
            assert mixture.grad_log_pi(np.array([[x]]))[0, 0] == pytest.approx(num, rel=1e-6, abs=1e-6)

    def test_non_finite_factor_reported(self):
        t = MixtureTarget(np.array([0.0, np.nan, 1.0]))
        with pytest.raises(NonFiniteFactorError) as err:
            t.grad_log_pi(np.array([[0.5]]))
        assert err.value.index == 1


class TestGaussianTargets:
    def test_ray_coefficients(self):
        t = GaussianTarget([1.0, -1.0], np.diag([2.0, 0.5]))
        x, v = np.array([0.3, 0.2]), np.array([0.6, 0.8])
        a, b = t.ray_coefficients(x, v)
        for s in (0.0, 0.7, 2.0):
            g = t.grad_log_pi((x + s * v)[None])[0]
            assert a + b * s == pytest.approx(-v @ g, rel=1e-12)

    def test_factor_target_posterior(self):
        data = np.array([1.0, 2.0, 4.0])
        t = GaussianFactorTarget(data, noise_var=1.0, prior_var=4.0)
        assert t.posterior_precision == pytest.approx(3.25)
        assert t.posterior_mean[0] == pytest.approx(7.0 / 3.25)
        assert t.grad_log_pi(t.posterior_mean[None])[0, 0] == pytest.approx(0.0, abs=1e-12)


class TestQuadrature:
    def test_gaussian_oracle(self):
        t = GaussianFactorTarget(np.array([1.0, 2.0, 4.0]), noise_var=1.0, prior_var=4.0)
        post = quadrature_posterior(t)
        assert post.mean == pytest.approx(7.0 / 3.25, rel=1e-6)
        assert post.sd == pytest.approx(1 / np.sqrt(3.25), rel=1e-5)
        assert post.cdf(post.mean) == pytest.approx(0.5, abs=1e-5)

    def test_mixture_normalised(self, mixture):
        post = quadrature_posterior(mixture)
        assert post.expectation(np.ones_like) == pytest.approx(1.0, abs=1e-8)
        assert abs(post.mode - 4.0) < 1.0

    def test_quantile_inverts_cdf(self, mixture):
        post = quadrature_posterior(mixture)
        q = np.array([0.01, 0.3, 0.9])
        np.testing.assert_allclose(post.cdf(post.quantile(q)), q, atol=1e-6)


class TestBounds:
    def test_golden_section(self):
        x, f = golden_section_max(lambda z: -(z - 0.3) ** 2, [-1.0], [2.0])
        assert x[0] == pytest.approx(0.3, abs=1e-6)

    def test_table_dominates_factor_gradients(self, mixture, table):
        grid = np.linspace(*table.interval, 3001)
        g = np.abs(mixture.all_factor_grads(grid[:, None]))[..., 0]
        assert np.all(g <= table.per_factor_max_abs_grad[None, :])
        h = np.abs(mixture.all_factor_hess_diag(grid[:, None]))[..., 0]
        assert np.all(h <= table.C)

    def test_global_bounds_ordering(self, table):
        assert global_rate_bound_sum(table) <= global_rate_bound_simple(table)

    def test_sum_bound_magnitude(self, table):
        # about one bound unit per observation for this model
        assert 30 < global_rate_bound_sum(table) < 100

    def test_max_grad_bound_dominates(self, mixture, table):
        m = max_abs_grad_bound(mixture, *table.interval)
        grid = np.linspace(*table.interval, 5001)
        assert np.abs(mixture.grad_log_pi(grid[:, None])).max() <= m
        assert m < global_rate_bound_sum(table)

    def test_table_json_cache(self, mixture, table, tmp_path):
        t1 = cached_factor_bound_table(mixture, tmp_path)
        t2 = cached_factor_bound_table(mixture, tmp_path)
        np.testing.assert_array_equal(t1.per_factor_max_abs_grad, t2.per_factor_max_abs_grad)
        back = FactorBoundTable.from_json(table.to_json())
        assert back.C == table.C


class TestControlVariates:
    def test_cache_contents(self, mixture):
        c = build_cv_cache(mixture, [3.0])
        assert c.grad_at_hat[0] == pytest.approx(c.per_factor_grad_at_hat.sum())
        assert c.rho_hat == pytest.approx(-0.5 * (c.second_deriv_at_hat[0] + c.grad_at_hat[0] ** 2))

    def test_cv_bound_dominates_estimator(self, mixture, table):
        c = build_cv_cache(mixture, [3.5])
        for x in np.linspace(-5, 12, 41):
            u = -c.grad_at_hat + mixture.n * (c.per_factor_grad_at_hat - mixture.all_factor_grads(np.array([x])))
            assert np.abs(u).max() <= cv_rate_bound(c, table, x) * (1 + 1e-12)

    def test_envelope_is_v_shaped(self, mixture, table):
        c = build_cv_cache(mixture, [3.5])
        env = cv_rate_envelope(c, table, [2.0], [1.0])
        s = np.array([0.0, 1.5, 3.0])
        np.testing.assert_allclose(env(s), cv_rate_bound(c, table, 2.0 + s), rtol=1e-12)
        assert float(env(1.5)) < float(env(0.0))


def test_simulated_data_proportions():
    y = simulate_mixture_data(20000, rng=1)
    frac = np.mean(np.abs(y - 4.0) < 1.0)
    expected = 0.05 * (stats.norm.cdf(1) - stats.norm.cdf(-1)) + 0.95 * (
        stats.norm.cdf(0.5) - stats.norm.cdf(0.3))
    assert frac == pytest.approx(expected, abs=0.01)
    assert stats.kurtosis(y) > 0
