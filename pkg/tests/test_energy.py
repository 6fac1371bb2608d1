import numpy as np
import pytest
from numpy.testing import assert_allclose

from paramsens.density import Beta1D, Proxy2D
from paramsens.energy import (
    SampleSet,
    composite_gauss_legendre,
    continuous_energy_param_gradient,
    continuous_energy_score,
    distance_sums,
    energy_score,
    energy_score_param_gradient,
    energy_score_sample_gradient,
    energy_score_sample_gradients,
    energy_score_terms,
    gauss_legendre,
    naive_fd_param_gradient,
)
from paramsens.errors import DuplicatePoint, InvalidParameter, ShapeMismatch, TooFewSamples
from paramsens.grid import GridLine


def brute_score(X, O):
    X, O = np.atleast_2d(X.T).T, np.atleast_2d(O.T).T
    dxo = np.linalg.norm(X[:, None] - O[None], axis=-1)
    dxx = np.linalg.norm(X[:, None] - X[None], axis=-1)
    Mx, Mo = len(X), len(O)
    return dxo.sum() / (Mx * Mo) - 0.5 * dxx.sum() / (Mx * (Mx - 1))


def proxy_rule(cells=10, n=4):
    line = GridLine.logspaced(1e-8, 1.0, cells + 1)
    return composite_gauss_legendre([line, line], n)


class TestEmpiricalScore:
    def test_hand_example(self):
        t1, t2 = energy_score_terms([0.0, 1.0], [0.0, 1.0])
        assert (t1, t2) == (0.5, 1.0)
        assert energy_score([0.0, 1.0], [0.0, 1.0]) == 0.0

    @pytest.mark.parametrize("a", [-3.2, 0.0, 7.5])
    def test_all_equal(self, a):
        assert energy_score([a, a], [a]) == 0.0

    @pytest.mark.parametrize("N", [1, 2, 3])
    def test_matches_double_loop(self, N):
        rng = np.random.default_rng(N)
        X, O = rng.normal(size=(57, N)), rng.normal(1.0, size=(41, N))
        assert_allclose(energy_score(X, O), brute_score(X, O), rtol=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        X, O = rng.normal(size=(30, 2)), rng.normal(size=(20, 2))
        s = np.array([3.0, -1.5])
        assert_allclose(energy_score(X + s, O + s), energy_score(X, O), rtol=1e-12)

    def test_same_law_concentrates(self):
        # for X, O from one law E[L] = E|X - X'| / 2, i.e. 1/sqrt(pi) for N(0, 1)
        rng = np.random.default_rng(1)
        med = []
        for M in (10, 100, 1000):
            vals = [abs(energy_score(rng.normal(size=M), rng.normal(size=M)) - 1 / np.sqrt(np.pi)) for _ in range(30)]
            med.append(np.median(vals))
        assert med[0] > med[1] > med[2]

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            energy_score([1.0], [0.0, 1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatch):
            energy_score(np.zeros((3, 2)), np.zeros((3, 1)))

    def test_distance_sums_one_dimensional_fast_path(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(-2, 2, 200), rng.uniform(-1, 3, 150)
        b[:10] = a[:10]
        ref = np.abs(a[:, None] - b[None]).sum(axis=1)
        assert_allclose(distance_sums(a, b), ref, rtol=1e-12, atol=1e-12)


class TestSampleGradient:
    def test_hand_example(self):
        g = energy_score_sample_gradient(np.array([0.0, 2.0]), np.array([1.0]), 0)
        assert_allclose(g, [0.0], atol=0)

    def test_symmetric_pair(self):
        a = 1.7
        G = energy_score_sample_gradients(np.array([-a, a]), np.array([0.0]))
        assert_allclose(G[0], -G[1])

    @pytest.mark.parametrize("N", [1, 2])
    def test_against_finite_differences(self, N):
        rng = np.random.default_rng(10 + N)
        h = 1e-6
        for _ in range(25):
            X = rng.normal(size=(int(rng.integers(2, 12)), N))
            O = rng.normal(0.5, 1.2, size=(int(rng.integers(1, 12)), N))
            k = int(rng.integers(len(X)))
            g = energy_score_sample_gradient(X, O, k)
            fd = np.empty(N)
            for i in range(N):
                Xp, Xm = X.copy(), X.copy()
                Xp[k, i] += h
                Xm[k, i] -= h
                fd[i] = (brute_score(Xp, O) - brute_score(Xm, O)) / (2 * h)
            assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    def test_all_rows_match_single(self):
        rng = np.random.default_rng(2)
        X, O = rng.normal(size=(9, 2)), rng.normal(size=(7, 2))
        G = energy_score_sample_gradients(X, O)
        for k in range(9):
            assert_allclose(G[k], energy_score_sample_gradient(X, O, k), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("N", [1, 2])
    def test_duplicates(self, N):
        X = np.arange(4.0 * N).reshape(4, N)
        with pytest.raises(DuplicatePoint):
            energy_score_sample_gradients(X, X[:1] * 1.0)
        X2 = X.copy()
        X2[3] = X2[1]
        with pytest.raises(DuplicatePoint):
            energy_score_sample_gradients(X2, X + 0.5)


class TestParamGradient:
    def test_zero_jacobian(self):
        X, O = np.random.default_rng(0).normal(size=(2, 6, 2))
        assert_allclose(energy_score_param_gradient(X, O, np.zeros((6, 2, 3))), np.zeros(3))

    def test_location_family(self):
        rng = np.random.default_rng(1)
        X, O = rng.normal(size=(40, 1)), rng.normal(0.3, size=(30, 1))
        J = np.ones((40, 1, 1))
        g = energy_score_param_gradient(X, O, J)
        assert_allclose(g[0], energy_score_sample_gradients(X, O).sum(), rtol=1e-12)
        # translating every sample by dmu changes L at that rate
        h = 1e-6
        fd = (energy_score(X + h, O) - energy_score(X - h, O)) / (2 * h)
        assert_allclose(g[0], fd, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            energy_score_param_gradient(np.zeros((3, 1)) + [[0], [1], [2]], [[0.5]], np.zeros((2, 1, 2)))


class TestQuadrature:
    def test_weights_sum_to_volume(self):
        q = gauss_legendre([(0, 2), (-1, 3)], 9)
        assert abs(q.weights.sum() - 8.0) <= 1e-10
        line = GridLine.logspaced(1e-8, 1.0, 51)
        q = composite_gauss_legendre([line, line], 9)
        assert len(q) == 450**2
        assert abs(q.weights.sum() - (1 - 1e-8) ** 2) <= 1e-10

    def test_polynomial_exactness(self):
        q = gauss_legendre([(0, 1)], 16)
        assert_allclose(q.integrate(q.nodes[:, 0] ** 31), 1 / 32, rtol=1e-13)


class TestContinuousScore:
    def test_uniform_example(self):
        # |x - x'| has a kink on the diagonal, so the node double sum is O(h^2)
        f = lambda x, p: np.ones(x.shape[:-1])
        errs = []
        for cells in (4, 16, 64):
            q = composite_gauss_legendre([np.linspace(0, 1, cells + 1)], 4)
            errs.append(abs(continuous_energy_score(f, [1.0], [[0.5]], q, normalize=False) - 1 / 12))
        assert errs[-1] <= 2e-6
        assert 10 <= errs[0] / errs[1] <= 22 and 10 <= errs[1] / errs[2] <= 22

    def test_normalization(self):
        f = lambda x, p: 5.0 * np.ones(x.shape[:-1])
        q = composite_gauss_legendre([np.linspace(0, 1, 65)], 4)
        g = lambda x, p: np.ones(x.shape[:-1])
        assert_allclose(
            continuous_energy_score(f, [1.0], [[0.5]], q, normalize=True),
            continuous_energy_score(g, [1.0], [[0.5]], q, normalize=False),
            rtol=1e-12,
        )

    def test_agrees_with_empirical_score(self):
        rng = np.random.default_rng(7)
        th = [2.31, 1.627]
        O = rng.beta(*th, size=300)
        q = composite_gauss_legendre([np.linspace(0, 1, 257)], 4)
        cont = continuous_energy_score(Beta1D(), th, O, q)
        emp = [energy_score(rng.beta(*th, size=3000), O) for _ in range(20)]
        se = np.std(emp, ddof=1) / np.sqrt(len(emp))
        assert abs(np.mean(emp) - cont) <= 3 * se

    def test_theta_independent(self):
        f = lambda x, p: p[0] * np.exp(-x[..., 0])
        q = gauss_legendre([(0, 3)], 16)
        g = continuous_energy_param_gradient(f, None, [2.0], [[0.4], [1.2]], q, normalize=True)
        assert abs(g[0]) <= 1e-12

    def test_beta_gradient_against_fd(self):
        O = np.random.default_rng(0).beta(2.31, 1.627, size=500)
        q = gauss_legendre([(0, 1)], 16)
        th = np.array([3.0, 1.4])
        for normalize in (False, True):
            g = continuous_energy_param_gradient(Beta1D(), Beta1D().param_gradient, th, O, q, normalize)
            h = 1e-5
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                fd = (
                    continuous_energy_score(Beta1D(), th + e, O, q, normalize)
                    - continuous_energy_score(Beta1D(), th - e, O, q, normalize)
                ) / (2 * h)
                assert abs(g[j] - fd) <= 1e-5 * abs(fd)

    def test_proxy_gradient_against_fd(self):
        O = np.random.default_rng(1).uniform(0.05, 0.7, size=(200, 2))
        q = proxy_rule()
        th = np.array([0.25, 3.375, 0.65, 3.75, 0.1])
        g = continuous_energy_param_gradient(Proxy2D(), None, th, O, q)
        h = 1e-5
        for j in range(5):
            e = np.zeros(5)
            e[j] = h
            fd = (continuous_energy_score(Proxy2D(), th + e, O, q) - continuous_energy_score(Proxy2D(), th - e, O, q)) / (2 * h)
            assert abs(g[j] - fd) <= 1e-5 * abs(fd)

    def test_unnormalized_proxy_needs_the_correction(self):
        O = np.random.default_rng(1).uniform(0.05, 0.7, size=(200, 2))
        q = proxy_rule()
        th = np.array([0.25, 3.375, 0.65, 3.75, 0.1])
        right = continuous_energy_param_gradient(Proxy2D(), None, th, O, q, normalize=True)
        c = q.integrate(Proxy2D()(q.nodes, th))
        naive = continuous_energy_param_gradient(
            lambda x, p: Proxy2D()(x, p) / c, lambda x, p: Proxy2D().param_gradient(x, p) / c, th, O, q, normalize=False
        )
        assert np.max(np.abs(naive - right)) > 1e-2 * np.max(np.abs(right))


class TestNaiveFiniteDifference:
    def test_degenerate_sampler(self):
        fixed = np.linspace(0.1, 0.9, 50)[:, None]
        g = naive_fd_param_gradient(Beta1D(), [3.0, 1.4], [[0.5]], lambda p, n, s: fixed, 50, 1e-3)
        assert_allclose(g, [0.0, 0.0], atol=0)

    def test_seeded(self):
        def sampler(p, n, seed):
            return np.random.default_rng(seed).beta(p[0], p[1], size=n)

        O = np.random.default_rng(0).beta(2.31, 1.627, 200)
        a = naive_fd_param_gradient(Beta1D(), [3.0, 1.4], O, sampler, 200, 1e-3, seed=5)
        b = naive_fd_param_gradient(Beta1D(), [3.0, 1.4], O, sampler, 200, 1e-3, seed=5)
        c = naive_fd_param_gradient(Beta1D(), [3.0, 1.4], O, sampler, 200, 1e-3, seed=6)
        assert_allclose(a, b, rtol=0)
        assert not np.allclose(a, c)

    def test_bad_step(self):
        with pytest.raises(InvalidParameter):
            naive_fd_param_gradient(Beta1D(), [3.0, 1.4], [[0.5]], None, 10, 0.0)


class TestSampleSet:
    def test_csv_round_trip(self, tmp_path):
        s = SampleSet(np.random.default_rng(0).normal(size=(12, 2)), {"density": "gaussian2d", "seed": 3})
        s.to_csv(tmp_path / "x.csv")
        t = SampleSet.from_csv(tmp_path / "x.csv")
        np.testing.assert_array_equal(t.points, s.points)
        assert t.meta == {"density": "gaussian2d", "seed": "3"}

    def test_invalid(self):
        with pytest.raises(ShapeMismatch):
            SampleSet(np.array([[np.nan, 1.0]]))


class TestCombined:
    @pytest.mark.parametrize("N", [1, 2])
    def test_matches_separate_calls(self, N):
        from paramsens.energy import energy_score_and_gradients

        rng = np.random.default_rng(N)
        X, O = rng.normal(size=(300, N)), rng.normal(size=(500, N))
        L, G = energy_score_and_gradients(X, O)
        assert_allclose(L, energy_score(X, O), rtol=1e-13)
        assert_allclose(G, energy_score_sample_gradients(X, O), rtol=1e-12, atol=1e-18)
        assert_allclose(L, brute_score(X, O), rtol=1e-12)
