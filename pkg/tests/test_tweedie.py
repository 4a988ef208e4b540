import math

import numpy as np
import pytest
import statsmodels.api as sm
from scipy import stats

from spdshrink.distributions import nc_chi2_cdf, nc_f_cdf
from spdshrink.errors import BadDofError, DegenerateSupportError, SingularPooledError
from spdshrink.geometry import sym_exp
from spdshrink.tweedie import (
    FStatistics,
    GroupData,
    LogDensityPoly,
    TweedieConfig,
    _irls_poisson,
    default_bins,
    hotelling_t2,
    lindsey_fit,
    mom_noncentrality,
    quantile_transform,
    select_top,
    smooth_map,
    to_f_stats,
    tweedie_chi2,
    tweedie_iterate,
)


class MixtureLogDensity:
    """Exact log-marginal of chi2(dof, lam) under a discrete prior on lam,
    differentiated by central differences."""

    def __init__(self, dof, atoms, weights, h=1e-4):
        self.dof, self.atoms, self.weights, self.h = dof, atoms, weights, h

    def pdf_parts(self, y):
        y = np.asarray(y, dtype=float)
        return [
            w * (stats.chi2.pdf(y, self.dof) if a == 0 else stats.ncx2.pdf(y, self.dof, a))
            for a, w in zip(self.atoms, self.weights)
        ]

    def logpdf(self, y):
        return np.log(sum(self.pdf_parts(y)))

    def d1(self, y):
        return (self.logpdf(y + self.h) - self.logpdf(y - self.h)) / (2 * self.h)

    def d2(self, y):
        return (self.logpdf(y + self.h) - 2 * self.logpdf(y) + self.logpdf(y - self.h)) / self.h**2

    def posterior_mean(self, y):
        parts = self.pdf_parts(y)
        return sum(a * f for a, f in zip(self.atoms, parts)) / sum(parts)


def two_groups(rng, p, nx, ny, n_dim=2, shift=None, sigma=0.3):
    q = n_dim * (n_dim + 1) // 2
    base = rng.standard_normal((p, 1, q)) * 0.2

    def draw(n, offset):
        v = base + offset + sigma * rng.standard_normal((p, n, q))
        iu = np.triu_indices(n_dim, 1)
        m = np.zeros((p, n, n_dim, n_dim))
        m[..., np.arange(n_dim), np.arange(n_dim)] = v[..., :n_dim]
        m[..., iu[0], iu[1]] = v[..., n_dim:] / math.sqrt(2)
        m[..., iu[1], iu[0]] = v[..., n_dim:] / math.sqrt(2)
        return sym_exp(m)

    off = np.zeros(q) if shift is None else shift
    return GroupData(draw(nx, 0.0), draw(ny, off))


class TestHotelling:
    def test_identical_groups(self):
        g = two_groups(np.random.default_rng(0), 5, 6, 6)
        t2, _ = hotelling_t2(GroupData(g.group1, g.group1))
        np.testing.assert_allclose(t2, 0.0, atol=1e-20)

    def test_scalar_reduces_to_t_test(self):
        rng = np.random.default_rng(1)
        a = np.exp(rng.standard_normal((8, 7)))
        b = np.exp(rng.standard_normal((8, 9)) + 0.5)
        t2, _ = hotelling_t2(GroupData(a[..., None, None], b[..., None, None]))
        t = stats.ttest_ind(np.log(a), np.log(b), axis=1).statistic
        np.testing.assert_allclose(t2, t**2, rtol=1e-11)

    def test_symmetric_in_groups(self):
        g = two_groups(np.random.default_rng(2), 10, 5, 7)
        np.testing.assert_allclose(
            hotelling_t2(g)[0], hotelling_t2(GroupData(g.group2, g.group1))[0], rtol=1e-12
        )

    def test_translation_invariance(self):
        g = two_groups(np.random.default_rng(3), 10, 6, 6)
        c = sym_exp(np.array([[0.4, 0.2], [0.2, -0.3]]))
        # C (.) X = exp(log C + log X) acts as a common shift of the log-vectors
        from spdshrink.geometry import translate

        moved = GroupData(translate(c, g.group1), translate(c, g.group2))
        np.testing.assert_allclose(hotelling_t2(moved)[0], hotelling_t2(g)[0], rtol=1e-8)

    def test_null_distribution(self):
        nx = ny = 8
        g = two_groups(np.random.default_rng(4), 4000, nx, ny)
        t2, _ = hotelling_t2(g)
        f = to_f_stats(t2, nx, ny, g.q, exact=True)
        assert f.dof2 == nx + ny - 2 - g.q + 1
        d = stats.kstest(f.z, stats.f(f.dof1, f.dof2).cdf).statistic
        assert d <= 1.63 / math.sqrt(f.z.size)

    def test_default_scaling_is_not_exact(self):
        # dof2 = nu - q - 1 understates the denominator dof by two
        nx = ny = 8
        g = two_groups(np.random.default_rng(4), 4000, nx, ny)
        f = to_f_stats(hotelling_t2(g)[0], nx, ny, g.q)
        d = stats.kstest(f.z, stats.f(f.dof1, f.dof2).cdf).statistic
        assert d > 1.63 / math.sqrt(f.z.size)

    def test_singular_pooled(self):
        x = np.broadcast_to(np.eye(2), (3, 4, 2, 2))
        with pytest.raises(SingularPooledError):
            hotelling_t2(GroupData(x, x))


class TestFStatistics:
    def test_scaling(self):
        f = to_f_stats([0.0, 1.0, 2.0], 30, 30, 3)
        assert (f.dof1, f.dof2) == (3.0, 54.0)
        np.testing.assert_allclose(f.z, [0.0, 54 / 174, 108 / 174])

    def test_order_preserved(self):
        t2 = np.random.default_rng(0).exponential(size=50)
        np.testing.assert_array_equal(np.argsort(to_f_stats(t2, 10, 12, 6).z), np.argsort(t2))

    def test_bad_dof(self):
        with pytest.raises(BadDofError):
            to_f_stats([1.0], 3, 3, 3)

    def test_mom_example(self):
        f = FStatistics(z=np.array([2.0, 0.5]), dof1=3.0, dof2=54.0)
        np.testing.assert_allclose(mom_noncentrality(f), [3 * 52 / 54 * 2 - 3, 0.0])

    def test_mom_needs_dof(self):
        with pytest.raises(BadDofError):
            mom_noncentrality(FStatistics(z=np.ones(2), dof1=3.0, dof2=2.0))

    def test_mom_unbiased(self):
        d1, d2, lam, m = 3, 24, 6.0, 200000
        gen = np.random.default_rng(5)
        z = (gen.noncentral_chisquare(d1, lam, m) / d1) / (gen.chisquare(d2, m) / d2)
        est = mom_noncentrality(FStatistics(z, d1, d2), truncate=False)
        assert abs(est.mean() - lam) <= 4 * est.std(ddof=1) / math.sqrt(m)


class TestLindsey:
    def test_exponential_rate(self):
        y = np.random.default_rng(6).exponential(scale=0.5, size=5000)
        fit = lindsey_fit(y, degree=1)
        assert fit.coeffs[1] == pytest.approx(-2.0, rel=0.1)

    def test_normalized(self):
        y = np.random.default_rng(7).gamma(2.0, size=3000)
        fit = lindsey_fit(y)
        assert fit.integral(nodes=400) == pytest.approx(1.0, abs=1e-6)
        assert fit.degree == 5

    def test_raw_coefficients(self):
        y = np.random.default_rng(8).normal(size=2000)
        fit = lindsey_fit(y, degree=3)
        pts = np.linspace(*fit.support, 7)
        np.testing.assert_allclose(np.polyval(fit.coeffs[::-1], pts), fit.logpdf(pts), atol=1e-9)

    def test_derivatives(self):
        fit = lindsey_fit(np.random.default_rng(9).gamma(3.0, size=2000))
        y, h = np.linspace(1, 6, 9), 1e-5
        np.testing.assert_allclose(fit.d1(y), (fit.logpdf(y + h) - fit.logpdf(y - h)) / (2 * h), rtol=1e-6)
        np.testing.assert_allclose(fit.d2(y), (fit.d1(y + h) - fit.d1(y - h)) / (2 * h), rtol=1e-5, atol=1e-8)

    def test_irls_matches_glm(self):
        rng = np.random.default_rng(10)
        x = np.vander(np.linspace(-1, 1, 60), 4, increasing=True)
        counts = rng.poisson(np.exp(x @ np.array([2.0, -1.0, 0.5, 0.3]))).astype(float)
        ref = sm.GLM(counts, x, family=sm.families.Poisson()).fit(tol=1e-12).params
        np.testing.assert_allclose(_irls_poisson(x, counts), ref, rtol=1e-6, atol=1e-8)

    def test_default_bins(self):
        assert default_bins(100) == 60
        assert default_bins(10000) == 100

    def test_degenerate(self):
        with pytest.raises(DegenerateSupportError):
            lindsey_fit(np.full(100, 2.5))


class TestTweedieFormula:
    def test_flat_density(self):
        flat = LogDensityPoly(coeffs_u=np.zeros(6), center=0.0, scale=1.0, support=(-1.0, 1.0))
        y = np.array([0.5, 3.0, 10.0])
        est, flagged = tweedie_chi2(y, 3.0, flat)
        np.testing.assert_allclose(est, np.maximum(y - 3 + 4, 0.0))
        assert not flagged.any()

    def test_point_mass_prior(self):
        dens = MixtureLogDensity(3.0, [6.0], [1.0])
        y = np.linspace(2.0, 25.0, 40)
        est, flagged = tweedie_chi2(y, 3.0, dens)
        assert not flagged.any()
        np.testing.assert_allclose(est, 6.0, rtol=1e-4)

    def test_two_point_prior(self):
        dens = MixtureLogDensity(3.0, [0.0, 8.0], [0.5, 0.5])
        y = np.linspace(0.5, 30.0, 60)
        est, flagged = tweedie_chi2(y, 3.0, dens)
        assert not flagged.any()
        np.testing.assert_allclose(est, dens.posterior_mean(y), rtol=1e-4)

    def test_denominator_flag(self):
        # l'(y) = -1 makes 1 + 2 l' negative
        steep = LogDensityPoly(coeffs_u=np.array([0.0, -1.0]), center=0.0, scale=1.0, support=(0.0, 5.0))
        est, flagged = tweedie_chi2(np.array([1.0, 2.0]), 3.0, steep)
        assert flagged.all()
        assert np.isnan(est).all()


class TestQuantileTransform:
    def test_probability_preserved(self):
        z = np.linspace(0.05, 8, 30)
        lam = np.linspace(0, 12, 30)
        y = quantile_transform(z, 3, 20, lam)
        np.testing.assert_allclose(nc_chi2_cdf(y, 3, lam), nc_f_cdf(z, 3, 20, lam), atol=1e-9)

    def test_large_dof2_limit(self):
        z = np.linspace(0.1, 6, 25)
        y = quantile_transform(z, 3, 1e6, np.full(25, 4.0))
        np.testing.assert_allclose(y, 3 * z, rtol=1e-2)

    def test_zero_maps_to_zero(self):
        assert quantile_transform(np.array([0.0]), 3, 20, np.array([1.0]))[0] == 0.0


class TestSelection:
    def test_cardinality(self):
        v = np.random.default_rng(0).normal(size=101)
        for frac in (0.01, 0.1, 0.25, 1.0):
            assert select_top(v, frac).sum() == math.ceil(frac * 101)

    def test_picks_largest(self):
        mask = select_top([1.0, 5.0, 3.0, 4.0], 0.5)
        np.testing.assert_array_equal(mask, [False, True, False, True])

    def test_rank_invariance(self):
        v = np.random.default_rng(1).exponential(size=200)
        np.testing.assert_array_equal(select_top(v, 0.1), select_top(np.log1p(v) ** 3, 0.1))


class TestIterate:
    def test_large_dof2_one_step(self):
        rng = np.random.default_rng(2)
        lam = np.where(rng.random(2000) < 0.3, 10.0, 0.0)
        z = rng.noncentral_chisquare(3, np.maximum(lam, 1e-12)) / 3
        f = FStatistics(z=z, dof1=3.0, dof2=1e6)
        out = tweedie_iterate(f, TweedieConfig(max_iters=1))
        y = 3 * z
        ref, flagged = tweedie_chi2(y, 3.0, lindsey_fit(y))
        ok = ~flagged & ~out.flagged
        np.testing.assert_allclose(out.lambda_tweedie[ok], ref[ok], rtol=1e-2, atol=1e-2)

    def test_outputs(self):
        rng = np.random.default_rng(3)
        z = rng.f(3, 30, size=300) * rng.uniform(1, 3, 300)
        out = tweedie_iterate(FStatistics(z, 3.0, 30.0), TweedieConfig(top_fraction=0.1))
        assert np.all(out.lambda_tweedie >= 0) and np.all(out.lambda_mom >= 0)
        assert out.selection.sum() == 30
        np.testing.assert_array_equal(out.selection, select_top(out.lambda_tweedie, 0.1))
        assert 1 <= out.iterations <= 50

    def test_no_spread_falls_back(self):
        out = tweedie_iterate(FStatistics(np.zeros(100), 3.0, 30.0), TweedieConfig(top_fraction=0.05))
        np.testing.assert_array_equal(out.lambda_tweedie, 0.0)
        assert out.flagged.all() and out.converged
        assert out.selection.sum() == 5

    def test_null_shrinks_toward_zero(self):
        z = np.random.default_rng(4).f(3, 54, size=2000)
        out = tweedie_iterate(FStatistics(z, 3.0, 54.0))
        assert out.lambda_tweedie.mean() <= out.lambda_mom.mean()


class TestSmoothMap:
    def test_identity_window(self):
        v = np.random.default_rng(0).normal(size=(5, 6))
        np.testing.assert_array_equal(smooth_map(v, 1), v)

    def test_constant(self):
        np.testing.assert_allclose(smooth_map(np.full((4, 5, 3), 2.5), 3), 2.5)

    def test_impulse(self):
        v = np.zeros((7, 7))
        v[3, 3] = 1.0
        out = smooth_map(v, 3)
        expected = np.zeros((7, 7))
        expected[2:5, 2:5] = 1 / 9
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_edge_truncation(self):
        v = np.zeros((4, 4))
        v[0, 0] = 1.0
        assert smooth_map(v, 3)[0, 0] == pytest.approx(1 / 4)

    def test_bad_window(self):
        with pytest.raises(ValueError):
            smooth_map(np.zeros((3, 3)), 0)
