import math
import threading

import numpy as np
import pytest
import scipy.special as sc
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from paramsens.density import (
    EULER_GAMMA,
    Beta1D,
    CountingDensity,
    Gaussian1D,
    Gaussian2D,
    Proxy2D,
    digamma,
    gaussian1d,
    gaussian1d_jacobian_oracle,
    gaussian2d_diag_jacobian_oracle,
    gaussian2d_jacobian_oracle,
    get_density,
    truncated_gaussian1d_jacobian_oracle,
)
from paramsens.errors import DomainViolation, InvalidParameter, UnknownDensity

P2 = [0.7, -1.1, 2.6, 1.3, 0.678]


def conditional_cdfs(x, p):
    """Both 1-D conditional CDFs of the bivariate normal, from scipy's ndtr."""
    mu1, mu2, s1, s2, r = p
    z1, z2 = (x[0] - mu1) / s1, (x[1] - mu2) / s2
    q = math.sqrt(1 - r * r)
    return np.array([sc.ndtr((z1 - r * z2) / q), sc.ndtr((z2 - r * z1) / q)])


def implicit_jacobian(x, p, h=1e-6):
    """-(dF/dx)^-1 dF/dtheta by central differences of the conditional CDFs."""
    x, p = np.asarray(x, float), np.asarray(p, float)
    Hx = np.column_stack([(conditional_cdfs(x + h * e, p) - conditional_cdfs(x - h * e, p)) / (2 * h) for e in np.eye(2)])
    Gp = np.column_stack([(conditional_cdfs(x, p + h * e) - conditional_cdfs(x, p - h * e)) / (2 * h) for e in np.eye(5)])
    return -np.linalg.solve(Hx, Gp), -Gp / np.diag(Hx)[:, None]


class TestGaussians:
    def test_mode_values(self):
        g = gaussian1d([2.175, 1.371])
        assert g(2.175, [2.175, 1.371]) == pytest.approx(1 / (1.371 * math.sqrt(2 * math.pi)))
        assert g(2.175 + 1.371, [2.175, 1.371]) == pytest.approx(math.exp(-0.5) / (1.371 * math.sqrt(2 * math.pi)))
        d = Gaussian2D()
        mode = 1 / (2 * math.pi * 2.6 * 1.3 * math.sqrt(1 - 0.678 ** 2))
        assert d([0.7, -1.1], P2) == pytest.approx(mode)

    def test_independent_product(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 2))
        p = [0.3, -0.2, 1.4, 0.7, 0.0]
        prod = Gaussian1D()(x[:, :1], [0.3, 1.4]) * Gaussian1D()(x[:, 1:], [-0.2, 0.7])
        assert_allclose(Gaussian2D()(x, p), prod, rtol=1e-14)

    def test_invalid(self):
        with pytest.raises(InvalidParameter):
            gaussian1d([0.0, -1.0])
        with pytest.raises(InvalidParameter):
            Gaussian2D()([0, 0], [0, 0, 1, 1, 1.0])

    def test_1d_oracle(self):
        assert_allclose(gaussian1d_jacobian_oracle(2.0, [2.0, 1.5]), [1, 0])
        assert_allclose(gaussian1d_jacobian_oracle(2.0 + 3.0, [2.0, 1.5]), [1, 2])

    def test_2d_oracles_at_mean(self):
        assert_allclose(gaussian2d_jacobian_oracle([0.7, -1.1], P2), [[1, 0, 0, 0, 0], [0, 1, 0, 0, 0]], atol=1e-15)
        d = gaussian2d_diag_jacobian_oracle([0.7, -1.1], P2)
        assert_allclose(d, [[1, -1.356, 0, 0, 0], [-0.339, 1, 0, 0, 0]], atol=1e-12)

    def test_oracles_coincide_without_correlation(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(20, 2))
        p = [0.1, 0.2, 1.3, 0.4, 0.0]
        assert_allclose(gaussian2d_jacobian_oracle(x, p), gaussian2d_diag_jacobian_oracle(x, p), atol=1e-14)

    @pytest.mark.parametrize("seed", range(8))
    def test_2d_oracles_match_implicit_differentiation(self, seed):
        rng = np.random.default_rng(seed)
        p = [rng.normal(), rng.normal(), rng.uniform(0.5, 3), rng.uniform(0.5, 3), rng.uniform(-0.9, 0.9)]
        x = np.array(p[:2]) + rng.normal(size=2) * np.array(p[2:4])
        full, diag = implicit_jacobian(x, p)
        assert_allclose(gaussian2d_jacobian_oracle(x, p), full, atol=2e-5, rtol=1e-5)
        assert_allclose(gaussian2d_diag_jacobian_oracle(x, p), diag, atol=2e-5, rtol=1e-5)


class TestBeta:
    def test_uniform_case(self):
        assert_allclose(Beta1D()(np.array([[0.1], [0.5], [0.9]]), [1, 1]), 1.0, rtol=1e-14)

    def test_matches_scipy(self):
        x = np.linspace(0.01, 0.99, 30)[:, None]
        import scipy.stats as ss

        assert_allclose(Beta1D()(x, [2.31, 1.627]), ss.beta.pdf(x[:, 0], 2.31, 1.627), rtol=1e-12)

    def test_domain(self):
        with pytest.raises(DomainViolation):
            Beta1D()(np.array([[0.0]]), [2, 2])
        with pytest.raises(InvalidParameter):
            Beta1D()(np.array([[0.5]]), [0, 2])

    def test_param_gradient_vs_fd(self):
        rng = np.random.default_rng(7)
        d = Beta1D()
        for _ in range(100):
            x = rng.uniform(0.02, 0.98, (1, 1))
            p = rng.uniform(0.5, 5, 2)
            h = 1e-6
            fd = [(d(x, p + h * e) - d(x, p - h * e))[0] / (2 * h) for e in np.eye(2)]
            assert_allclose(d.param_gradient(x, p)[0], fd, rtol=1e-6, atol=1e-9)


class TestProxy:
    def test_separable_when_no_coupling(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.01, 0.99, (40, 2))
        p = [0.5, 3.0, 0.3, 4.0, 0.0]
        want = x[:, 0] ** 0.5 * (1 - x[:, 0]) ** 3 * x[:, 1] ** 0.3 * (1 - x[:, 1]) ** 4
        assert_allclose(Proxy2D()(x, p), want, rtol=1e-12)

    def test_box(self):
        with pytest.raises(InvalidParameter):
            Proxy2D()([0.5, 0.5], [0.5, 3.0, 0.3, 4.0, 2.0])
        Proxy2D()([0.5, 0.5], [1.0 + 1e-5, 3.0, 0.3, 4.0, 0.75])

    def test_gradient_vs_fd(self):
        rng = np.random.default_rng(2)
        d = Proxy2D()
        x = rng.uniform(0.05, 0.95, (30, 2))
        p = np.array([0.25, 3.375, 0.65, 3.75, 0.1])
        h = 1e-6
        fd = np.stack([(d(x, p + h * e) - d(x, p - h * e)) / (2 * h) for e in np.eye(5)], -1)
        assert_allclose(d.param_gradient(x, p), fd, rtol=1e-6, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(0.001, 0.999), st.floats(0.001, 0.999),
        st.floats(-0.5, 1.0), st.floats(2.75, 4.0), st.floats(0, 1.3), st.floats(3, 4.5), st.floats(0, 1.5),
    )
    def test_nonnegative(self, x1, x2, t1, t2, t3, t4, t5):
        assert Proxy2D()([x1, x2], [t1, t2, t3, t4, t5]) >= 0


class TestDigamma:
    def test_identities(self):
        assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-12)
        assert digamma(2.0) == pytest.approx(1 - EULER_GAMMA, abs=1e-12)
        t = np.random.default_rng(0).uniform(0.01, 50, 100)
        assert_allclose(digamma(t + 1) - digamma(t), 1 / t, rtol=1e-10, atol=1e-10)

    def test_against_scipy_wide_range(self):
        t = np.geomspace(1e-3, 1e6, 2000)
        assert np.max(np.abs(digamma(t) - sc.digamma(t))) <= 1e-10

    def test_domain(self):
        with pytest.raises(DomainViolation):
            digamma(0.0)


class TestCounting:
    def test_counts_points(self):
        c = CountingDensity(Gaussian2D())
        c(np.zeros((3, 4, 2)), P2)
        c(np.zeros(2), P2)
        assert c.count == 13
        c.reset()
        assert c.count == 0

    def test_thread_safe(self):
        c = CountingDensity(Gaussian1D())

        def work():
            for _ in range(200):
                c(np.zeros((5, 1)), [0, 1])

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert c.count == 8 * 200 * 5


class TestRegistry:
    def test_names(self):
        for name, cls in [("gaussian1d", Gaussian1D), ("gaussian2d", Gaussian2D), ("beta1d", Beta1D), ("proxy2d", Proxy2D)]:
            assert isinstance(get_density(name), cls)
        with pytest.raises(UnknownDensity):
            get_density("cauchy")


class TestTruncatedOracle:
    def test_matches_truncnorm_quantile_fd(self):
        from scipy.stats import truncnorm

        mu, sigma, lo, hi = 2.175, 1.371, -3.0, 6.5
        x = np.linspace(-2.5, 6.0, 9)

        def quantile(th, u):
            return truncnorm.ppf(u, (lo - th[0]) / th[1], (hi - th[0]) / th[1], loc=th[0], scale=th[1])

        u = truncnorm.cdf(x, (lo - mu) / sigma, (hi - mu) / sigma, loc=mu, scale=sigma)
        h = 1e-6
        fd = np.stack([(quantile(np.add([mu, sigma], h * e), u) - quantile(np.add([mu, sigma], -h * e), u)) / (2 * h)
                       for e in np.eye(2)], axis=-1)
        assert_allclose(truncated_gaussian1d_jacobian_oracle(x, [mu, sigma], lo, hi), fd, atol=1e-6)

    def test_wide_interval_is_untruncated(self):
        x = np.linspace(-1, 3, 7)
        assert_allclose(truncated_gaussian1d_jacobian_oracle(x, [1.0, 0.5], -40, 40),
                        gaussian1d_jacobian_oracle(x, [1.0, 0.5]), atol=1e-12)
