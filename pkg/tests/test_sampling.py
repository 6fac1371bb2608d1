import numpy as np
import pytest
from numpy.testing import assert_array_equal
from scipy import stats

from paramsens.cdf import cdf_1d
from paramsens.density import Beta1D, CountingDensity, Gaussian1D, Gaussian2D, Proxy2D
from paramsens.errors import EnvelopeViolation, InvalidParameter, ZeroMass
from paramsens.grid import GridLine, RectilinearGrid, interp_1d
from paramsens.sampling import RngSeed, build_proposal, make_sampler, sample

MU, SIG = 2.175, 1.371


def gauss_grid(k=1025):
    return RectilinearGrid.from_bounds([(MU - 5 * SIG, MU + 5 * SIG)], [k])


class Flat:
    ndim, nparams, name = 1, 1, "flat"

    def __call__(self, x, params):
        return np.ones(np.asarray(x).shape[:-1])


class Ramp:
    ndim, nparams, name = 1, 1, "ramp"

    def __call__(self, x, params):
        return np.asarray(x)[..., 0]


class Spike:
    """Equal to 1 at the vertices of a 0..1 grid with spacing 0.25, up to 51 in between."""

    ndim, nparams, name = 1, 1, "spike"

    def __call__(self, x, params):
        return 1.0 + np.sin(4 * np.pi * np.asarray(x)[..., 0]) ** 2 * 50


class TestProposal:
    def test_flat(self):
        g = RectilinearGrid.from_bounds([(0, 2)], [9])
        prop = build_proposal(Flat(), g, [1.0], safety=1.0)
        assert np.all(prop.cell_heights == 1.0)
        assert prop.total_mass == pytest.approx(2.0)
        s = sample(Flat(), prop, [1.0], 1000, seed=1)
        assert s.meta["acceptance"] == 1.0

    def test_corner_max_two_dimensional(self):
        g = RectilinearGrid.from_bounds([(-3, 3), (-2, 2)], [7, 5])
        f = Gaussian2D()
        p = [0, 0, 1, 1, 0.3]
        prop = build_proposal(f, g, p, safety=1.05)
        vals = f(g.vertex_points(), p)
        ref = np.maximum.reduce([vals[:-1, :-1], vals[1:, :-1], vals[:-1, 1:], vals[1:, 1:]])
        np.testing.assert_allclose(prop.cell_heights, 1.05 * ref, rtol=1e-15)
        assert prop.cell_masses.sum() == pytest.approx(prop.total_mass)

    def test_monotone_acceptance(self):
        g = RectilinearGrid.from_bounds([(0.5, 1.5)], [401])
        s = sample(Ramp(), build_proposal(Ramp(), g, [1.0], 1.05), [1.0], 50000, seed=2)
        # each cell loses at most h/2 relative to its upper corner
        assert s.meta["acceptance"] >= 1 / 1.05 - 1.0 / 400 - 0.01

    def test_gaussian_acceptance(self):
        s = sample(Gaussian1D(), build_proposal(Gaussian1D(), gauss_grid(), [MU, SIG]), [MU, SIG], 50000, seed=3)
        assert s.meta["acceptance"] >= 0.9

    def test_counts(self):
        f = CountingDensity(Gaussian2D())
        build_proposal(f, RectilinearGrid.from_bounds([(-3, 3), (-3, 3)], [11, 13]), [0, 0, 1, 1, 0])
        assert f.count == 143

    def test_zero_mass(self):
        g = RectilinearGrid.from_bounds([(50, 60)], [5])
        with pytest.raises(ZeroMass):
            build_proposal(Gaussian1D(), g, [0, 1])

    def test_bad_safety(self):
        with pytest.raises(InvalidParameter):
            build_proposal(Flat(), RectilinearGrid.from_bounds([(0, 1)], [3]), [1], safety=0.9)


class TestSample:
    def test_deterministic(self):
        prop = build_proposal(Gaussian1D(), gauss_grid(), [MU, SIG])
        a = sample(Gaussian1D(), prop, [MU, SIG], 3000, RngSeed(7, 2))
        b = sample(Gaussian1D(), prop, [MU, SIG], 3000, RngSeed(7, 2))
        c = sample(Gaussian1D(), prop, [MU, SIG], 3000, RngSeed(7, 3))
        assert_array_equal(a.points, b.points)
        assert not np.array_equal(a.points, c.points)

    def test_thread_independent(self, monkeypatch):
        import paramsens.sampling as sm

        monkeypatch.setattr(sm, "BLOCK", 1000)
        prop = build_proposal(Gaussian1D(), gauss_grid(), [MU, SIG])
        a = sample(Gaussian1D(), prop, [MU, SIG], 5500, 11, threads=1)
        b = sample(Gaussian1D(), prop, [MU, SIG], 5500, 11, threads=3)
        assert_array_equal(a.points, b.points)
        assert len(a) == 5500

    def test_gaussian_mean(self):
        n = 20000
        s = sample(Gaussian1D(), build_proposal(Gaussian1D(), gauss_grid(), [MU, SIG]), [MU, SIG], n, 5)
        assert abs(s.points.mean() - MU) <= 4 * SIG / np.sqrt(n)

    def test_beta_ks(self):
        th = [2.31, 1.627]
        line = GridLine.uniform(1e-6, 1 - 1e-6, 4097)
        g = RectilinearGrid((line,))
        n = 100000
        s = sample(Beta1D(), build_proposal(Beta1D(), g, th), th, n, 12)
        ref = cdf_1d(Beta1D(), line, th).phi
        d = stats.kstest(s.points[:, 0], lambda x: interp_1d(x, line.vertices, ref)).statistic
        assert d <= stats.kstwo.ppf(0.99, n)

    def test_gaussian_ks(self):
        n = 100000
        s = sample(Gaussian1D(), build_proposal(Gaussian1D(), gauss_grid(4097), [MU, SIG]), [MU, SIG], n, 13)
        d = stats.kstest(s.points[:, 0], stats.norm(MU, SIG).cdf).statistic
        assert d <= stats.kstwo.ppf(0.99, n)

    def test_proxy_inside_support(self):
        line = GridLine.logspaced(1e-6, 1 - 1e-6, 129)
        g = RectilinearGrid((line, line))
        th = [0.5, 3.0, 0.3, 4.0, 0.75]
        s = sample(Proxy2D(), build_proposal(Proxy2D(), g, th, 1.5), th, 2000, 1)
        assert s.points.shape == (2000, 2)
        assert np.all((s.points > 0) & (s.points < 1))

    def test_envelope_violation(self):
        g = RectilinearGrid.from_bounds([(0, 1)], [5])
        prop = build_proposal(Spike(), g, [1.0], safety=1.0)
        with pytest.raises(EnvelopeViolation) as info:
            sample(Spike(), prop, [1.0], 100, 0)
        assert "cell" in str(info.value)

    def test_make_sampler(self):
        smp = make_sampler(Gaussian1D(), gauss_grid())
        a = smp([MU, SIG], 50, 4)
        assert a.shape == (50, 1)
        assert_array_equal(a, smp([MU, SIG], 50, 4))

    def test_bad_seed(self):
        with pytest.raises(InvalidParameter):
            RngSeed(-1)
