import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from heterobayes import distributions as D
from heterobayes.distributions import DomainError

PO_MU0 = (0.1, 0.8, 0.1)
PO_TAU = 11.54


def compositions(n, k):
    """All count vectors of length k summing to n."""
    for cut in itertools.combinations(range(n + k - 1), k - 1):
        bounds = (-1,) + cut + (n + k - 1,)
        yield np.array([bounds[i + 1] - bounds[i] - 1 for i in range(k)])


def central_diff(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


class TestSpecialFunctions:
    def test_lgamma_matches_factorials(self):
        for n in range(1, 20):
            assert D.lgamma(n + 1) == pytest.approx(math.log(math.factorial(n)), rel=1e-14)

    def test_digamma_against_mpmath(self):
        # mpmath, 40 digits
        assert D.digamma(0.37) == pytest.approx(-2.795301410890563961627, abs=1e-13)
        assert D.digamma(123.5) == pytest.approx(4.812187109433143072571, abs=1e-13)

    def test_digamma_is_lgamma_derivative(self):
        for x in (0.05, 0.9, 3.3, 41.0, 1e4):
            fd = central_diff(D.lgamma, x, h=1e-6 * x)
            assert D.digamma(x) == pytest.approx(fd, rel=1e-6)

    @pytest.mark.parametrize("x", [0.0, -1.0, float("nan")])
    def test_domain(self, x):
        with pytest.raises(DomainError):
            D.lgamma(x)
        with pytest.raises(DomainError):
            D.digamma(x)

    def test_lgamma_digamma_diff_large_arguments(self):
        import mpmath as mp

        mp.mp.dps = 50
        for x, n in [(1e-6, 3.0), (0.7, 500.0), (11.54, 36000.0), (1e9, 17.0), (1e19, 1200.0)]:
            lg, dg = D._nb_lgamma_digamma_diff(x, n)
            ref_lg = mp.loggamma(mp.mpf(x) + n) - mp.loggamma(mp.mpf(x))
            ref_dg = mp.digamma(mp.mpf(x) + n) - mp.digamma(mp.mpf(x))
            assert lg == pytest.approx(float(ref_lg), rel=1e-12)
            assert dg == pytest.approx(float(ref_dg), rel=1e-12)

    def test_log_sum_exp(self):
        assert D.log_sum_exp(0, 0) == pytest.approx(math.log(2), abs=1e-15)
        assert D.log_sum_exp(-np.inf, 1.7) == 1.7
        assert D.log_sum_exp(1000, 1000) == pytest.approx(1000 + math.log(2))
        assert D.log_sum_exp(-np.inf, -np.inf) == -np.inf

    @given(st.floats(-700, 700), st.floats(-700, 700))
    def test_log_sum_exp_matches_numpy(self, a, b):
        assert D.log_sum_exp(a, b) == pytest.approx(np.logaddexp(a, b), rel=1e-13, abs=1e-13)


class TestNormal:
    def test_against_scipy(self, rng):
        x = rng.normal(size=20)
        np.testing.assert_allclose(
            D.normal_logpdf(x, 0.3, 1.7), stats.norm.logpdf(x, 0.3, 1.7), rtol=1e-13
        )

    def test_gradients(self, rng):
        for _ in range(100):
            x, mu, s = rng.normal(), rng.normal(), rng.uniform(0.2, 3)
            d_mu, d_s = D.normal_logpdf_grad(x, mu, s)
            assert d_mu == pytest.approx(central_diff(lambda m: D.normal_logpdf(x, m, s), mu), rel=1e-5)
            assert d_s == pytest.approx(central_diff(lambda v: D.normal_logpdf(x, mu, v), s), rel=1e-5, abs=1e-8)

    def test_bad_sigma(self):
        with pytest.raises(DomainError):
            D.normal_logpdf(0.0, 0.0, 0.0)


class TestHalfCauchy:
    def test_integrates_to_one(self):
        for gamma in (0.1, 1.0, 5.0):
            total, _ = integrate.quad(lambda x: math.exp(D.half_cauchy_logpdf(x, gamma)), 0, np.inf)
            assert total == pytest.approx(1.0, abs=1e-8)

    def test_against_scipy(self):
        x = np.linspace(0, 20, 41)
        np.testing.assert_allclose(
            D.half_cauchy_logpdf(x, 2.5), stats.halfcauchy.logpdf(x, scale=2.5), rtol=1e-13
        )

    def test_gradient(self, rng):
        for _ in range(100):
            x, g = rng.uniform(0.01, 10), rng.uniform(0.1, 10)
            fd = central_diff(lambda v: D.half_cauchy_logpdf(v, g), x)
            assert D.half_cauchy_logpdf_grad(x, g) == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_negative_support(self):
        with pytest.raises(DomainError):
            D.half_cauchy_logpdf(-0.1, 1.0)


class TestStudentT:
    def test_cauchy_at_zero(self):
        assert D.student_t_logpdf(0.0, 1.0) == pytest.approx(-1.1447298858494002, abs=1e-12)

    def test_normal_limit(self):
        assert D.student_t_logpdf(1.0, 1e6) == pytest.approx(D.normal_logpdf(1.0, 0.0, 1.0), abs=1e-5)

    @pytest.mark.parametrize("nu", [1, 5, 10])
    def test_integrates_to_one(self, nu):
        total, _ = integrate.quad(lambda t: math.exp(D.student_t_logpdf(t, nu)), -np.inf, np.inf,
                                  epsabs=1e-12, epsrel=1e-12)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_nu_domain(self):
        with pytest.raises(DomainError):
            D.student_t_logpdf(0.0, 0.0)


class TestDirichlet:
    def test_flat(self):
        for k in (2, 3, 5):
            x = np.full(k, 1.0 / k)
            assert D.dirichlet_logpdf(x, x, k) == pytest.approx(math.lgamma(k), abs=1e-13)

    def test_beta_case(self):
        # mpmath reference for Beta(1, 3) at 0.3
        value = D.dirichlet_logpdf([0.3, 0.7], [0.25, 0.75], 4.0)
        assert value == pytest.approx(0.3852624007906448, abs=1e-12)
        assert value == pytest.approx(stats.beta.logpdf(0.3, 1.0, 3.0), abs=1e-12)

    def test_monte_carlo_normalization(self):
        # importance sampling from a wider Dirichlet with the same mean
        alpha_q = 6.0 * np.array(PO_MU0)
        x = np.random.default_rng(3).dirichlet(alpha_q, 200_000)
        p = np.exp([D.dirichlet_logpdf(v, PO_MU0, PO_TAU) for v in x])
        w = p / stats.dirichlet.pdf(x.T, alpha_q)
        assert w.mean() == pytest.approx(1.0, abs=1e-2)

    def test_boundary_and_mismatch(self):
        assert D.dirichlet_logpdf([0.0, 1.0], [0.5, 0.5], 2.0) == -np.inf
        with pytest.raises(DomainError):
            D.dirichlet_logpdf([0.5, 0.5], PO_MU0, 2.0)


class TestMultinomial:
    def test_single_cell(self):
        eps = 1e-3
        assert D.multinomial_logpmf([7, 0, 0], [1 - 2 * eps, eps, eps], 7) == pytest.approx(
            7 * math.log(1 - 2 * eps), abs=1e-13
        )

    def test_two_cells(self):
        assert D.multinomial_logpmf([1, 1], [0.5, 0.5], 2) == pytest.approx(math.log(0.5))

    def test_sums_to_one(self):
        x = (0.2, 0.5, 0.3)
        total = sum(math.exp(D.multinomial_logpmf(y, x, 4)) for y in compositions(4, 3))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_sum_mismatch(self):
        with pytest.raises(DomainError):
            D.multinomial_logpmf([1, 2, 0], (0.2, 0.5, 0.3), 4)


class TestDirichletMultinomial:
    def test_beta_binomial_case(self):
        for y in ([1, 0], [0, 1]):
            assert math.exp(D.dirichlet_multinomial_logpmf(y, [0.5, 0.5], 2.0)) == pytest.approx(0.5)

    @pytest.mark.parametrize("n", [1, 3, 5, 6])
    def test_sums_to_one(self, n):
        total = sum(
            math.exp(D.dirichlet_multinomial_logpmf(y, PO_MU0, PO_TAU)) for y in compositions(n, 3)
        )
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_unnormalized_reference_values(self):
        # mpmath, 40 digits: lgamma(prec) - lgamma(n + prec) + sum(lgamma(y + a) - lgamma(a))
        y = [2, 2, 1]
        un = D.dirichlet_multinomial_logpmf(y, PO_MU0, PO_TAU, normalized=False)
        assert un == pytest.approx(-7.398721191865434, abs=1e-12)
        norm = D.dirichlet_multinomial_logpmf(y, PO_MU0, PO_TAU)
        assert norm - un == pytest.approx(math.log(30.0), abs=1e-12)

    def test_large_precision_is_stable(self):
        value = D.dirichlet_multinomial_logpmf([30, 500, 70], PO_MU0, 1e7, normalized=False)
        assert value == pytest.approx(-341.8298112321775, rel=1e-12)

    def test_against_scipy(self):
        y = np.array([3, 12, 5])
        alpha = PO_TAU * np.array(PO_MU0)
        ref = stats.dirichlet_multinomial.logpmf(y, alpha, y.sum())
        assert D.dirichlet_multinomial_logpmf(y, PO_MU0, PO_TAU) == pytest.approx(ref, abs=1e-10)

    def test_gradients(self, rng):
        for _ in range(100):
            k = 3
            mu = rng.dirichlet(np.ones(k))
            prec = rng.uniform(0.5, 200)
            y = rng.multinomial(rng.integers(1, 400), mu)
            d_mu, d_prec = D.dirichlet_multinomial_logpmf_grad(y, mu, prec)

            def f_prec(p):
                return D._nb_dm_lpmf(y.astype(float), mu, p)

            assert d_prec == pytest.approx(central_diff(f_prec, prec, 1e-6 * prec), rel=1e-5, abs=1e-7)
            for j in range(k):
                def f_mu(v, j=j):
                    m = mu.copy()
                    m[j] = v
                    return D._nb_dm_lpmf(y.astype(float), m, prec)

                h = 1e-6 * mu[j]
                assert d_mu[j] == pytest.approx(central_diff(f_mu, mu[j], h), rel=1e-5, abs=1e-6)

    def test_domain(self):
        with pytest.raises(DomainError):
            D.dirichlet_multinomial_logpmf([1, 1, 1], PO_MU0, 0.0)
        with pytest.raises(DomainError):
            D.dirichlet_multinomial_logpmf([1, -1, 1], PO_MU0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.integers(0, 50), min_size=3, max_size=3).filter(lambda v: sum(v) > 0),
        st.floats(0.1, 1e4),
    )
    def test_matches_scipy_property(self, y, prec):
        alpha = prec * np.array(PO_MU0)
        ref = stats.dirichlet_multinomial.logpmf(y, alpha, sum(y))
        assert D.dirichlet_multinomial_logpmf(y, PO_MU0, prec) == pytest.approx(ref, rel=1e-9, abs=1e-9)


class TestRandomVariates:
    def test_normal_mean(self):
        assert abs(D.normal_rng(0.0, 1.0, 100_000, rng=1).mean()) < 0.02

    def test_dirichlet_mean(self):
        x = D.dirichlet_rng(PO_MU0, PO_TAU, 10_000, rng=2)
        np.testing.assert_allclose(x.mean(axis=0), PO_MU0, atol=0.02)
        np.testing.assert_allclose(x.sum(axis=1), 1.0, atol=1e-12)

    def test_categorical_degenerate(self):
        assert np.all(D.categorical_rng([1.0, 0.0], 500, rng=3) == 1)

    def test_moments_within_four_se(self):
        n = 50_000
        x = D.lognormal_rng(0.2, 0.5, n, rng=4)
        mean = math.exp(0.2 + 0.125)
        sd = math.sqrt((math.exp(0.25) - 1) * math.exp(0.4 + 0.25))
        assert abs(x.mean() - mean) < 4 * sd / math.sqrt(n)

        u = D.uniform_rng(-1.0, 3.0, n, rng=5)
        assert abs(u.mean() - 1.0) < 4 * (4 / math.sqrt(12)) / math.sqrt(n)

        m = D.multinomial_rng((0.2, 0.5, 0.3), 40, n, rng=6)
        se = np.sqrt(40 * np.array([0.16, 0.25, 0.21]) / n)
        assert np.all(np.abs(m.mean(axis=0) - 40 * np.array([0.2, 0.5, 0.3])) < 4 * se)

    def test_half_cauchy_median(self):
        # median of HC(gamma) is gamma
        x = D.half_cauchy_rng(2.0, 40_000, rng=7)
        assert np.median(x) == pytest.approx(2.0, rel=0.03)
        assert np.all(x >= 0)

    def test_seeding(self):
        a = D.make_rng(11, 1, 2).random(5)
        np.testing.assert_array_equal(a, D.make_rng(11, 1, 2).random(5))
        assert not np.array_equal(a, D.make_rng(11, 2, 1).random(5))

    def test_invalid(self):
        with pytest.raises(DomainError):
            D.dirichlet_rng((0.0, 1.0), 1.0)
        with pytest.raises(DomainError):
            D.multinomial_rng((0.5, 0.5), 2.5)
        with pytest.raises(DomainError):
            D.half_cauchy_rng(-1.0)
