import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln, logsumexp

from heterobayes import hmc, models, simharness
from heterobayes.hmc import PosteriorSamples, SamplerConfig
from heterobayes.models import (
    HabitatDataset,
    HabitatParams,
    HabitatPriors,
    LabelSamples,
    MedianAdcDataset,
    MedianAdcParams,
    MedianAdcPriors,
)

MEDIAN_NAMES = ["sdr", "sd0", "sdd", "mu0", "mud", "lambda"]


def naive_median_lp(theta, data, priors):
    sdr, sd0, sdd, mu0, mud, lam = theta
    g, w = priors.sd_prior, priors.mu_prior
    lp = sum(stats.halfcauchy.logpdf(v, scale=g) for v in (sdr, sd0, sdd))
    lp += stats.norm.logpdf(mu0, 0, w) + stats.norm.logpdf(mud, 0, w)
    lp += stats.norm.logpdf(data.db, 0, math.sqrt(2) * sdr).sum()
    lp += stats.norm.logpdf(data.mb, mu0, math.sqrt(sd0 ** 2 + sdr ** 2 / 2)).sum()
    p0 = stats.norm.pdf(data.dp, 0, math.sqrt(2) * sdr)
    p1 = stats.norm.pdf(data.dp, mud, math.sqrt(sdd ** 2 + 2 * sdr ** 2))
    return lp + np.log((1 - lam) * p0 + lam * p1).sum()


def dm_unnorm(y, alpha):
    y = np.asarray(y, float)
    return (gammaln(alpha.sum()) - gammaln(y.sum() + alpha.sum())
            + np.sum(gammaln(y + alpha) - gammaln(alpha)))


def naive_habitat_lp(theta, data, priors):
    k = data.k
    prec, conc, mu1, lam = theta[0], theta[1], np.asarray(theta[2:2 + k]), theta[2 + k]
    lp = stats.halfcauchy.logpdf(prec, scale=priors.prec_prior)
    lp += stats.halfcauchy.logpdf(conc, scale=priors.prec_prior)
    lp += stats.dirichlet.logpdf(mu1, np.ones(k))
    lp += sum(dm_unnorm(y, prec * data.mu0) for y in data.yb)
    for y in data.yp:
        lp += np.log((1 - lam) * np.exp(dm_unnorm(y, prec * data.mu0))
                     + lam * np.exp(dm_unnorm(y, conc * mu1)))
    return lp


@pytest.fixture(scope="module")
def median_data():
    params = simharness.derive_model_params(
        {"lambda": 0.7, "eta": 0.9, "icc": 0.9, "mu_delta": 0.7, "mu0": 1.0, "sigma": 0.05}
    )
    data, _ = simharness.simulate_median(params, n_baseline=30, n_lesions=40, seed=3)
    return data


@pytest.fixture(scope="module")
def habitat_small():
    # modest counts so the naive (exponentiated) mixture stays finite
    rng = np.random.default_rng(8)
    yb = rng.multinomial(25, [0.1, 0.8, 0.1], size=12)
    yp = np.vstack([rng.multinomial(30, [0.1, 0.8, 0.1], size=5),
                    rng.multinomial(30, [0.05, 0.5, 0.45], size=5)])
    return HabitatDataset(yb, yp)


def random_median_theta(rng):
    return np.array([rng.uniform(0.02, 0.3), rng.uniform(0.05, 0.5), rng.uniform(0.05, 1.0),
                     rng.uniform(0.5, 1.5), rng.uniform(-0.5, 1.5), rng.uniform(0.05, 0.95)])


def random_habitat_theta(rng, k=3):
    return np.concatenate([rng.uniform(1, 60, 2), rng.dirichlet(np.ones(k) * 2), rng.uniform(0.05, 0.95, 1)])


class TestDatasets:
    def test_median_derived_quantities(self):
        d = MedianAdcDataset([1.0, 2.0], [1.2, 1.9], [1.0], [1.5])
        np.testing.assert_allclose(d.db, [0.2, -0.1])
        np.testing.assert_allclose(d.mb, [1.1, 1.95])
        np.testing.assert_allclose(d.dp, [0.5])
        assert d.lesion_ids == [("", "1")]
        assert d.baseline_only().n_lesions == 0

    def test_median_validation(self):
        with pytest.raises(ValueError):
            MedianAdcDataset([], [], [1.0], [1.0])
        with pytest.raises(ValueError):
            MedianAdcDataset([1.0], [np.nan], [1.0], [1.0])
        with pytest.raises(ValueError):
            MedianAdcDataset([1.0], [1.0], [1.0, 2.0], [1.0])

    def test_immutable(self):
        d = MedianAdcDataset([1.0], [1.0], [1.0], [1.0])
        with pytest.raises(ValueError):
            d.yb1[0] = 3.0

    def test_habitat_validation(self):
        with pytest.raises(ValueError):
            HabitatDataset([[1, 2, 0.5]], [[1, 1, 1]])
        with pytest.raises(ValueError):
            HabitatDataset([[0, 0, 0]], [[1, 1, 1]])
        with pytest.raises(ValueError):
            HabitatDataset([[1, 1, 1]], [[1, 1, 1]], mu0=(0.5, 0.6, -0.1))
        d = HabitatDataset([[1, 8, 1]], [[2, 5, 3]])
        assert d.k == 3 and d.n_lesions == 1


class TestMedianLogPosterior:
    def test_matches_naive(self, median_data, rng):
        priors = MedianAdcPriors()
        for _ in range(50):
            theta = random_median_theta(rng)
            lp, _ = models.median_adc_logposterior(theta, median_data, priors)
            ref = naive_median_lp(theta, median_data, priors)
            if np.isfinite(ref):
                assert lp == pytest.approx(ref, abs=1e-8)

    def test_gradient(self, median_data, rng):
        priors = MedianAdcPriors(sd_prior=2.0, mu_prior=3.0)
        for _ in range(50):
            theta = random_median_theta(rng)
            _, g = models.median_adc_logposterior(theta, median_data, priors)
            for j in range(6):
                h = 1e-6 * max(1.0, abs(theta[j]))
                up, dn = theta.copy(), theta.copy()
                up[j] += h
                dn[j] -= h
                fd = (models.median_adc_logposterior(up, median_data, priors)[0]
                      - models.median_adc_logposterior(dn, median_data, priors)[0]) / (2 * h)
                assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-5 * max(1.0, abs(fd)))

    def test_collapsed_mixture_ignores_lambda(self, median_data):
        base = [0.05, 0.2, 1e-8, 1.0, 0.0]
        lp_a, _ = models.median_adc_logposterior(base + [0.2], median_data)
        lp_b, _ = models.median_adc_logposterior(base + [0.9], median_data)
        assert lp_a == pytest.approx(lp_b, abs=1e-6)

    def test_single_zero_residual_pair(self):
        sdr = 0.07
        d = MedianAdcDataset([1.0], [1.0], [1.0], [1.0])
        theta = np.array([sdr, 0.2, 0.1, 1.0, 0.0, 0.5])
        lp, _ = models.median_adc_logposterior(theta, d)
        # remove every term except the baseline difference
        rest = naive_median_lp(theta, d, MedianAdcPriors()) - stats.norm.logpdf(0.0, 0, math.sqrt(2) * sdr)
        assert lp - rest == pytest.approx(-math.log(math.sqrt(2 * math.pi) * math.sqrt(2) * sdr), abs=1e-12)

    def test_single_lesion_enumeration(self):
        d = MedianAdcDataset([1.0, 1.1], [1.02, 1.07], [1.0], [1.3])
        theta = np.array([0.05, 0.2, 0.3, 1.0, 0.4, 0.35])
        base = MedianAdcDataset([1.0, 1.1], [1.02, 1.07], [], [])
        lp, _ = models.median_adc_logposterior(theta, d)
        lp_base, _ = models.median_adc_logposterior(theta, base)
        l0 = stats.norm.pdf(0.3, 0, math.sqrt(2) * 0.05)
        l1 = stats.norm.pdf(0.3, 0.4, math.sqrt(0.09 + 2 * 0.0025))
        assert math.exp(lp - lp_base) == pytest.approx(0.65 * l0 + 0.35 * l1, rel=1e-10)

    @pytest.mark.parametrize("bad", [0, 1, 2, 5])
    def test_constraint_violation(self, median_data, bad):
        theta = np.array([0.05, 0.2, 0.3, 1.0, 0.4, 0.5])
        theta[bad] = -0.1 if bad < 5 else 1.0
        assert models.median_adc_logposterior(theta, median_data)[0] == -np.inf

    def test_params_object(self, median_data):
        p = MedianAdcParams(0.05, 0.2, 0.3, 1.0, 0.4, 0.5)
        assert models.median_adc_logposterior(p, median_data)[0] == \
            models.median_adc_logposterior(p.as_array(), median_data)[0]


class TestHabitatLogPosterior:
    def test_matches_naive(self, habitat_small, rng):
        priors = HabitatPriors()
        for _ in range(30):
            theta = random_habitat_theta(rng)
            lp, _ = models.habitat_logposterior(theta, habitat_small, priors)
            assert lp == pytest.approx(naive_habitat_lp(theta, habitat_small, priors), abs=1e-8)

    def test_gradient_free_coordinates(self, rng):
        data, _ = simharness.simulate_habitat(
            simharness.derive_model_params(
                {"lambda": 0.6, "eta": 0.8, "tau": 11.54, "mu_v": 6.37, "sigma_v": 1.38}, "habitat"
            ),
            n_baseline=20, n_lesions=25, seed=1,
        )
        for _ in range(50):
            theta = random_habitat_theta(rng)
            _, g = models.habitat_logposterior(theta, data)
            for j in range(theta.size):
                h = 1e-6 * max(1.0, abs(theta[j]))
                up, dn = theta.copy(), theta.copy()
                up[j] += h
                dn[j] -= h
                fd = (models.habitat_logposterior(up, data)[0]
                      - models.habitat_logposterior(dn, data)[0]) / (2 * h)
                assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-5 * max(1.0, abs(fd)))

    def test_gradient_stick_broken(self, habitat_small, rng):
        spec = models.transform_for("habitat")
        for _ in range(50):
            u = rng.normal(size=spec.n_unconstrained)

            def target(v):
                theta, lj = spec.constrain(v)
                return models.habitat_logposterior(theta, habitat_small)[0] + lj

            theta, _ = spec.constrain(u)
            g = spec.pullback(u, models.habitat_logposterior(theta, habitat_small)[1])
            for j in range(u.size):
                e = np.zeros(u.size)
                e[j] = 1e-6
                fd = (target(u + e) - target(u - e)) / 2e-6
                assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-5 * max(1.0, abs(fd)))

    def test_equal_components_ignore_lambda(self, habitat_small):
        theta = np.array([11.54, 11.54, 0.1, 0.8, 0.1, 0.3])
        lp_a, _ = models.habitat_logposterior(theta, habitat_small)
        theta[-1] = 0.85
        lp_b, _ = models.habitat_logposterior(theta, habitat_small)
        assert lp_a == pytest.approx(lp_b, abs=1e-10)

    def test_two_bins_beta_binomial(self):
        yb = np.array([[1, 4], [2, 3], [0, 5], [3, 1]])
        yp = np.array([[4, 1], [1, 2], [5, 0]])
        data = HabitatDataset(yb, yp, mu0=(0.3, 0.7))
        theta = np.array([6.0, 2.5, 0.6, 0.4, 0.45])
        lp, _ = models.habitat_logposterior(theta, data)

        def bb(row, a, b):
            n = row.sum()
            # the sampler drops the binomial coefficient
            return stats.betabinom.logpmf(row[0], n, a, b) - math.log(math.comb(n, row[0]))

        ref = stats.halfcauchy.logpdf(6.0, scale=50) + stats.halfcauchy.logpdf(2.5, scale=50)
        ref += sum(bb(r, 1.8, 4.2) for r in yb)
        ref += sum(logsumexp([math.log(0.55) + bb(r, 1.8, 4.2), math.log(0.45) + bb(r, 1.5, 1.0)])
                   for r in yp)
        assert lp == pytest.approx(ref, abs=1e-10)

    def test_constraint_violation(self, habitat_small):
        assert models.habitat_logposterior([-1, 2, 0.2, 0.6, 0.2, 0.5], habitat_small)[0] == -np.inf
        assert models.habitat_logposterior([1, 2, 0.0, 0.8, 0.2, 0.5], habitat_small)[0] == -np.inf


class TestFit:
    def test_lambda_recovery(self):
        params = simharness.derive_model_params(
            {"lambda": 0.7, "eta": 0.9, "icc": 0.9, "mu_delta": 0.7, "mu0": 1.0, "sigma": 0.05}
        )
        hits = 0
        for rep in range(20):
            data, _ = simharness.simulate_median(params, seed=1000 + rep)
            fit = models.fit("median", data, config=SamplerConfig(seed=rep))
            s = hmc.summarize(fit, "lambda")
            hits += s.ci95[0] <= 0.7 <= s.ci95[1]
        assert hits >= 18

    def test_median_fit_converges(self, median_data):
        fit = models.fit("median", median_data, config=SamplerConfig(seed=5))
        assert fit.names == MEDIAN_NAMES
        assert max(fit.rhat.values()) < 1.01
        assert not fit.warnings

    def test_habitat_recovers_precision(self):
        params = simharness.derive_model_params(
            {"lambda": 0.7, "eta": 0.9, "tau": 11.54, "mu_v": 6.37, "sigma_v": 1.38}, "habitat"
        )
        data, _ = simharness.simulate_habitat(params, seed=11)
        fit = models.fit("habitat", data, config=SamplerConfig(seed=2))
        assert np.median(fit.pooled("prec")) == pytest.approx(11.54, rel=0.25)
        assert max(fit.rhat.values()) < 1.01
        assert np.all(fit.draws[:, :, 2:5].sum(axis=-1) == pytest.approx(1.0))

    def test_deterministic(self, median_data):
        cfg = SamplerConfig(iterations=800, warmup=200, seed=7)
        a = models.fit("median", median_data, config=cfg)
        b = models.fit("median", median_data, config=cfg)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_rhat_warning(self, median_data):
        fit = models.fit("median", median_data, config=SamplerConfig(iterations=12, warmup=2, seed=1))
        assert any(w.startswith("R-hat above 1.1") for w in fit.warnings)

    def test_unknown_model(self, median_data):
        with pytest.raises(ValueError):
            models.fit("voxel", median_data)

    def test_baseline_only(self, median_data):
        fit = models.fit("median", median_data.baseline_only(),
                         config=SamplerConfig(iterations=1000, warmup=300))
        assert np.median(fit.pooled("sdr")) == pytest.approx(0.05, rel=0.3)


def fake_samples(names, columns, chains=1):
    draws = np.column_stack(columns).reshape(chains, -1, len(names))
    return PosteriorSamples(names=list(names), draws=draws)


class TestLabels:
    def test_lambda_zero_gives_no_change(self, median_data):
        n = 200
        s = fake_samples(MEDIAN_NAMES, [np.full(n, 0.05), np.full(n, 0.2), np.full(n, 0.3),
                                        np.ones(n), np.full(n, 0.7), np.zeros(n)])
        z = models.sample_labels(s, median_data, "median", seed=1)
        assert z.z.shape == (n, median_data.n_lesions)
        assert not z.z.any()

    def test_symmetric_coin(self):
        # both components identical: P(M1) = lambda = 0.5
        n = 20000
        data = MedianAdcDataset([1.0], [1.0], [1.0], [1.05])
        s = fake_samples(MEDIAN_NAMES, [np.full(n, 0.05), np.full(n, 0.2), np.full(n, 1e-9),
                                        np.ones(n), np.zeros(n), np.full(n, 0.5)])
        frac = models.sample_labels(s, data, "median", seed=2).fraction_m1(0)
        assert abs(frac - 0.5) < 3 * math.sqrt(0.25 / n)

    def test_degenerate_odds_follow_prior(self):
        n = 20000
        data = MedianAdcDataset([1.0], [1.0], [1.0], [1.05])
        s = fake_samples(MEDIAN_NAMES, [np.full(n, 0.05), np.full(n, 0.2), np.full(n, 1e-9),
                                        np.ones(n), np.zeros(n), np.full(n, 0.8)])
        po = models.posterior_odds(models.sample_labels(s, data, "median", seed=3), 0)
        # delta method SE of p / (1 - p) at p = 0.8
        se = math.sqrt(0.8 * 0.2 / n) / 0.2 ** 2
        assert abs(po - 4.0) < 4 * se

    def test_clear_change_labelled(self):
        sigma = 0.05
        n = 2000
        data = MedianAdcDataset([1.0], [1.0], [1.0], [1.0 + 5 * math.sqrt(2) * sigma])
        sdd = sigma * math.sqrt(2 * 0.95 / 0.05)
        s = fake_samples(MEDIAN_NAMES, [np.full(n, sigma), np.full(n, 0.2), np.full(n, sdd),
                                        np.ones(n), np.full(n, 5 * math.sqrt(2) * sigma), np.full(n, 0.5)])
        assert models.sample_labels(s, data, "median", seed=4).fraction_m1(0) > 0.95

    def test_habitat_labels(self, habitat_small):
        n = 500
        s = fake_samples(["prec", "conc", "mu1[1]", "mu1[2]", "mu1[3]", "lambda"],
                         [np.full(n, 11.54), np.full(n, 5.0), np.full(n, 0.05), np.full(n, 0.5),
                          np.full(n, 0.45), np.full(n, 0.5)])
        z = models.sample_labels(s, habitat_small, "habitat", seed=5)
        frac = np.array([z.fraction_m1(i) for i in range(10)])
        assert frac[5:].mean() > frac[:5].mean()

    def test_seeded(self, median_data):
        n = 100
        s = fake_samples(MEDIAN_NAMES, [np.full(n, 0.05), np.full(n, 0.2), np.full(n, 0.3),
                                        np.ones(n), np.full(n, 0.7), np.full(n, 0.5)])
        a = models.sample_labels(s, median_data, "median", seed=9).z
        b = models.sample_labels(s, median_data, "median", seed=9).z
        np.testing.assert_array_equal(a, b)


class TestPosteriorOdds:
    @staticmethod
    def labels(n1, n0):
        return LabelSamples(np.array([1] * n1 + [0] * n0, dtype=np.int8)[:, None], [("", "1")])

    def test_worked_examples(self):
        assert models.posterior_odds(self.labels(7500, 7500), 0) == 1.0
        assert models.posterior_odds(self.labels(9000, 6000), 0) == 1.5
        assert models.posterior_odds(self.labels(15000, 0), 0) == 80000

    def test_configurable_cap(self):
        assert models.posterior_odds(self.labels(10, 0), 0, cap=1e6) == 1e6

    def test_permutation_invariant(self, rng):
        z = (rng.random((3000, 1)) < 0.6).astype(np.int8)
        a = models.posterior_odds(LabelSamples(z), 0)
        b = models.posterior_odds(LabelSamples(rng.permutation(z)), 0)
        assert a == b

    @pytest.mark.parametrize(
        "po, label",
        [
            (0.2, "moderate evidence of no change"),
            (1 / 3, "moderate evidence of no change"),
            (1.0, "insufficient evidence"),
            (3.0, "insufficient evidence"),
            (5.0, "moderate evidence of significant change"),
            (10.0, "moderate evidence of significant change"),
            (20.0, "strong evidence"),
            (30.0, "strong evidence"),
            (80000, "very strong evidence"),
        ],
    )
    def test_bands(self, po, label):
        assert models.classify_po(po) == label


class TestSummary:
    def test_schema(self, median_data):
        fit = models.fit("median", median_data, config=SamplerConfig(iterations=600, warmup=200))
        z = models.sample_labels(fit, median_data, "median")
        out = models.fit_summary(fit, z)
        assert set(out["parameters"]) == set(MEDIAN_NAMES)
        assert set(out["parameters"]["sdr"]) == {"median", "mean", "sd", "ci95", "hdi95", "rhat"}
        assert len(out["lesions"]) == median_data.n_lesions
        for rec in out["lesions"]:
            assert {"po", "category", "label_fraction"} <= set(rec)
