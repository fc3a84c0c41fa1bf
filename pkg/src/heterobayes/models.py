"""Mixture models of post-treatment change and their posterior-odds outputs.

Two targets are provided, both with the per-lesion change label summed out:

* the median-ADC model, a real-valued normal mixture written in collapsed
  form (baseline pairs enter through their difference and mean, treated
  lesions through their pre/post difference);
* the habitat model, a Dirichlet-multinomial mixture over voxel counts in
  ``K`` ADC bins with the baseline centre ``mu0`` fixed.

Label draws are regenerated afterwards from the retained parameter draws,
one categorical draw per (draw, lesion), and turned into posterior odds.
"""

import logging
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.special import gammaln

from . import hmc
from .analytic import sigma_lsq
from .distributions import (
    LOG_SQRT_2PI,
    _nb_half_cauchy_dx,
    _nb_half_cauchy_lpdf,
    _nb_lgamma_digamma_diff,
    _nb_log_sum_exp,
    _nb_normal_dsigma,
    _nb_normal_lpdf,
    make_rng,
)

logger = logging.getLogger(__name__)

__all__ = [
    "MedianAdcDataset",
    "MedianAdcParams",
    "MedianAdcPriors",
    "HabitatDataset",
    "HabitatParams",
    "HabitatPriors",
    "LabelSamples",
    "DEFAULT_MU0",
    "PO_CAP",
    "PO_CATEGORIES",
    "median_adc_logposterior",
    "habitat_logposterior",
    "transform_for",
    "initial_values",
    "fit",
    "sample_labels",
    "posterior_odds",
    "classify_po",
    "fit_summary",
]

DEFAULT_MU0 = (0.1, 0.8, 0.1)
PO_CAP = 80000.0
RHAT_WARN = 1.1
SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# datasets, parameters, priors
# ---------------------------------------------------------------------------


def _ids(ids, n):
    if ids is None:
        return [("", str(i + 1)) for i in range(n)]
    ids = [tuple(str(v) for v in i) for i in ids]
    if len(ids) != n:
        raise ValueError(f"expected {n} lesion ids, got {len(ids)}")
    return ids


@dataclass(frozen=True)
class MedianAdcDataset:
    """Repeat-baseline pairs and pre/post pairs, in 1e-3 mm^2/s."""

    yb1: np.ndarray
    yb2: np.ndarray
    yp1: np.ndarray
    yp2: np.ndarray
    lesion_ids: list = None
    baseline_ids: list = None

    def __post_init__(self):
        for name in ("yb1", "yb2", "yp1", "yp2"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            arr.flags.writeable = False
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if self.yb1.size != self.yb2.size or self.yb1.size < 1:
            raise ValueError("need >= 1 baseline pair with matching yb1/yb2")
        if self.yp1.size != self.yp2.size:
            raise ValueError("yp1 and yp2 differ in length")
        object.__setattr__(self, "lesion_ids", _ids(self.lesion_ids, self.yp1.size))
        object.__setattr__(self, "baseline_ids", _ids(self.baseline_ids, self.yb1.size))

    @property
    def n_baseline(self):
        return self.yb1.size

    @property
    def n_lesions(self):
        return self.yp1.size

    @property
    def db(self):
        return self.yb2 - self.yb1

    @property
    def mb(self):
        return 0.5 * (self.yb1 + self.yb2)

    @property
    def dp(self):
        return self.yp2 - self.yp1

    def baseline_only(self):
        return MedianAdcDataset(
            self.yb1, self.yb2, [], [], lesion_ids=[], baseline_ids=self.baseline_ids
        )


@dataclass(frozen=True)
class MedianAdcParams:
    sdr: float
    sd0: float
    sdd: float
    mu0: float
    mud: float
    lam: float

    def as_array(self):
        return np.array([self.sdr, self.sd0, self.sdd, self.mu0, self.mud, self.lam])


@dataclass(frozen=True)
class MedianAdcPriors:
    """Half-Cauchy scale for the three SDs and normal width for the two means."""

    sd_prior: float = 5.0
    mu_prior: float = 10.0

    def __post_init__(self):
        if not (self.sd_prior > 0 and self.mu_prior > 0):
            raise ValueError("prior widths must be positive")


@dataclass(frozen=True)
class HabitatDataset:
    """Habitat counts: second-scan baseline rows ``yb`` and post rows ``yp``."""

    yb: np.ndarray
    yp: np.ndarray
    mu0: np.ndarray = DEFAULT_MU0
    lesion_ids: list = None
    baseline_ids: list = None

    def __post_init__(self):
        mu0 = np.asarray(self.mu0, dtype=float)
        if mu0.ndim != 1 or mu0.size < 2 or abs(mu0.sum() - 1) > 1e-9 or np.any(mu0 <= 0):
            raise ValueError("mu0 must be a strictly positive simplex")
        k = mu0.size
        for name in ("yb", "yp"):
            raw = np.asarray(getattr(self, name))
            arr = raw.reshape(-1, k).astype(np.int64) if raw.size else np.zeros((0, k), np.int64)
            if raw.size and (np.any(arr != raw.reshape(-1, k)) or np.any(arr < 0)):
                raise ValueError(f"{name} must hold non-negative integer counts")
            if arr.size and np.any(arr.sum(axis=1) < 1):
                raise ValueError(f"every row of {name} needs at least one voxel")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.yb.shape[0] < 1:
            raise ValueError("need at least one baseline row")
        mu0.flags.writeable = False
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "lesion_ids", _ids(self.lesion_ids, self.yp.shape[0]))
        object.__setattr__(self, "baseline_ids", _ids(self.baseline_ids, self.yb.shape[0]))

    @property
    def k(self):
        return self.mu0.size

    @property
    def n_baseline(self):
        return self.yb.shape[0]

    @property
    def n_lesions(self):
        return self.yp.shape[0]

    def baseline_only(self):
        return HabitatDataset(
            self.yb, np.zeros((0, self.k)), self.mu0, lesion_ids=[],
            baseline_ids=self.baseline_ids,
        )


@dataclass(frozen=True)
class HabitatParams:
    prec: float
    conc: float
    mu1: tuple
    lam: float

    def as_array(self):
        return np.array([self.prec, self.conc, *self.mu1, self.lam])


@dataclass(frozen=True)
class HabitatPriors:
    prec_prior: float = 50.0

    def __post_init__(self):
        if not self.prec_prior > 0:
            raise ValueError("prec_prior must be positive")


# ---------------------------------------------------------------------------
# log-posterior kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _median_lp(theta, data):
    db, mb, dp, gamma, mu_prior = data
    sdr, sd0, sdd, mu0, mud, lam = theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]
    g = np.zeros(6)
    if not (sdr > 0 and sd0 > 0 and sdd > 0 and 0 < lam < 1):
        return -np.inf, g

    lp = (
        _nb_half_cauchy_lpdf(sdr, gamma)
        + _nb_half_cauchy_lpdf(sd0, gamma)
        + _nb_half_cauchy_lpdf(sdd, gamma)
        + _nb_normal_lpdf(mu0, 0.0, mu_prior)
        + _nb_normal_lpdf(mud, 0.0, mu_prior)
    )
    g[0] = _nb_half_cauchy_dx(sdr, gamma)
    g[1] = _nb_half_cauchy_dx(sd0, gamma)
    g[2] = _nb_half_cauchy_dx(sdd, gamma)
    g[3] = -mu0 / (mu_prior * mu_prior)
    g[4] = -mud / (mu_prior * mu_prior)

    # repeat-baseline differences and means
    sb = SQRT2 * sdr
    sm = math.sqrt(sd0 * sd0 + 0.5 * sdr * sdr)
    d_sm = 0.0
    for j in range(db.size):
        lp += _nb_normal_lpdf(db[j], 0.0, sb) + _nb_normal_lpdf(mb[j], mu0, sm)
        g[0] += SQRT2 * _nb_normal_dsigma(db[j], 0.0, sb)
        d_sm += _nb_normal_dsigma(mb[j], mu0, sm)
        g[3] += (mb[j] - mu0) / (sm * sm)
    g[1] += d_sm * sd0 / sm
    g[0] += d_sm * 0.5 * sdr / sm

    # treated lesions, label summed out
    s0 = SQRT2 * sdr
    s1 = math.sqrt(sdd * sdd + 2.0 * sdr * sdr)
    l0 = math.log1p(-lam)
    l1 = math.log(lam)
    for n in range(dp.size):
        a = l0 + _nb_normal_lpdf(dp[n], 0.0, s0)
        b = l1 + _nb_normal_lpdf(dp[n], mud, s1)
        m = _nb_log_sum_exp(a, b)
        lp += m
        w0 = math.exp(a - m)
        w1 = math.exp(b - m)
        ds1 = _nb_normal_dsigma(dp[n], mud, s1)
        g[5] += w1 / lam - w0 / (1.0 - lam)
        g[0] += w0 * SQRT2 * _nb_normal_dsigma(dp[n], 0.0, s0) + w1 * ds1 * 2.0 * sdr / s1
        g[2] += w1 * ds1 * sdd / s1
        g[4] += w1 * (dp[n] - mud) / (s1 * s1)
    return lp, g


@nb.njit(cache=True, error_model="numpy")
def _dm_row(y, mu, prec, dmu):
    """Unnormalized DM log mass of one row; fills d/dmu, returns (lp, d/dprec)."""
    n = 0.0
    lp = 0.0
    dprec = 0.0
    for k in range(y.size):
        n += y[k]
        dl, dp = _nb_lgamma_digamma_diff(mu[k] * prec, y[k])
        lp += dl
        dmu[k] = prec * dp
        dprec += mu[k] * dp
    dl, dp = _nb_lgamma_digamma_diff(prec, n)
    return lp - dl, dprec - dp


@nb.njit(cache=True, error_model="numpy")
def _habitat_lp(theta, data):
    mu0, yb, yp, gamma = data
    k = mu0.size
    prec = theta[0]
    conc = theta[1]
    mu1 = theta[2:2 + k]
    lam = theta[2 + k]
    g = np.zeros(theta.size)
    if not (prec > 0 and conc > 0 and 0 < lam < 1):
        return -np.inf, g
    for m in range(k):
        if not mu1[m] > 0:
            return -np.inf, g

    # half-Cauchy priors; flat Dirichlet on mu1 has density Gamma(K)
    lp = (
        _nb_half_cauchy_lpdf(prec, gamma)
        + _nb_half_cauchy_lpdf(conc, gamma)
        + math.lgamma(k)
    )
    g[0] = _nb_half_cauchy_dx(prec, gamma)
    g[1] = _nb_half_cauchy_dx(conc, gamma)

    scratch = np.empty(k)
    dmu1 = np.empty(k)
    for j in range(yb.shape[0]):
        row_lp, row_dprec = _dm_row(yb[j], mu0, prec, scratch)
        lp += row_lp
        g[0] += row_dprec

    l0 = math.log1p(-lam)
    l1 = math.log(lam)
    for n in range(yp.shape[0]):
        lp0, dprec0 = _dm_row(yp[n], mu0, prec, scratch)
        lp1, dconc1 = _dm_row(yp[n], mu1, conc, dmu1)
        a = l0 + lp0
        b = l1 + lp1
        m = _nb_log_sum_exp(a, b)
        lp += m
        w0 = math.exp(a - m)
        w1 = math.exp(b - m)
        g[0] += w0 * dprec0
        g[1] += w1 * dconc1
        for q in range(k):
            g[2 + q] += w1 * dmu1[q]
        g[2 + k] += w1 / lam - w0 / (1.0 - lam)
    return lp, g


def _median_data(data, priors):
    return (
        np.ascontiguousarray(data.db),
        np.ascontiguousarray(data.mb),
        np.ascontiguousarray(data.dp),
        float(priors.sd_prior),
        float(priors.mu_prior),
    )


def _habitat_data(data, priors):
    return (
        np.ascontiguousarray(data.mu0, dtype=float),
        np.ascontiguousarray(data.yb, dtype=float),
        np.ascontiguousarray(data.yp.reshape(-1, data.k), dtype=float),
        float(priors.prec_prior),
    )


def median_adc_logposterior(params, data, priors=None):
    """Log posterior (up to the evidence) and its gradient.

    ``params`` is a :class:`MedianAdcParams` or the array
    ``[sdr, sd0, sdd, mu0, mud, lambda]``. Constraint violations give ``-inf``.
    """
    priors = priors or MedianAdcPriors()
    theta = params.as_array() if isinstance(params, MedianAdcParams) else np.asarray(params, float)
    return _median_lp(theta, _median_data(data, priors))


def habitat_logposterior(params, data, priors=None):
    """Log posterior and gradient for ``[prec, conc, mu1[1..K], lambda]``.

    The ``mu1`` gradient treats each entry as a free coordinate; the simplex
    constraint is enforced by the sampler's stick-breaking transform.
    """
    priors = priors or HabitatPriors()
    theta = params.as_array() if isinstance(params, HabitatParams) else np.asarray(params, float)
    return _habitat_lp(theta, _habitat_data(data, priors))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


MEDIAN_TRANSFORM = hmc.TransformSpec(
    (
        ("sdr", "log", 1),
        ("sd0", "log", 1),
        ("sdd", "log", 1),
        ("mu0", "identity", 1),
        ("mud", "identity", 1),
        ("lambda", "logit", 1),
    )
)


def transform_for(model, k=3):
    if model == "median":
        return MEDIAN_TRANSFORM
    if model == "habitat":
        return hmc.TransformSpec(
            (("prec", "log", 1), ("conc", "log", 1), ("mu1", "simplex", k), ("lambda", "logit", 1))
        )
    raise ValueError(f"unknown model {model!r}; expected 'median' or 'habitat'")


def _smoothed_proportions(counts):
    counts = np.asarray(counts, dtype=float)
    return (counts + 0.5) / (counts + 0.5).sum(axis=-1, keepdims=True)


def _moment_precision(counts, mu):
    """Method-of-moments Dirichlet-multinomial precision from count rows."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum(axis=1)
    p = counts / n[:, None]
    var = np.mean((p - mu) ** 2, axis=0)
    # var_k = mu_k (1 - mu_k) (n + tau) / (n (1 + tau)); use n -> mean n
    ratio = np.mean(mu * (1 - mu) / np.maximum(var, 1e-12))
    nbar = n.mean()
    # solve ratio = n (1 + tau) / (n + tau) for tau
    if ratio >= nbar:
        return 1e4
    tau = (nbar - ratio) / (ratio - 1.0) if ratio > 1.0 else 0.5
    return float(np.clip(tau, 0.5, 1e4))


def initial_values(model, data):
    """Data-driven starting point in constrained space."""
    if model == "median":
        mb = data.mb
        sdr = max(sigma_lsq(np.column_stack([data.yb1, data.yb2])), 1e-3)
        sd0 = max(float(mb.std(ddof=1)) if mb.size > 1 else sdr, 1e-3)
        dp = data.dp
        mud = float(dp.mean()) if dp.size else 0.0
        sdd = max(float(dp.std(ddof=1)) if dp.size > 1 else sdr, 1e-3)
        return MedianAdcParams(sdr, sd0, sdd, float(mb.mean()), mud, 0.5).as_array()
    if model == "habitat":
        prec = _moment_precision(data.yb, data.mu0)
        if data.n_lesions:
            mu1 = _smoothed_proportions(data.yp).mean(axis=0)
        else:
            mu1 = np.full(data.k, 1.0 / data.k)
        return HabitatParams(prec, prec, tuple(mu1 / mu1.sum()), 0.5).as_array()
    raise ValueError(f"unknown model {model!r}")


def fit(model, data, priors=None, config=None):
    """Sample the posterior of ``model`` ("median" or "habitat") with HMC.

    R-hat for every parameter is stored in ``samples.rhat``; any value above
    1.1 adds a convergence warning to ``samples.warnings``.
    """
    config = config or hmc.SamplerConfig()
    if model == "median":
        priors = priors or MedianAdcPriors()
        target, payload = _median_lp, _median_data(data, priors)
        transform = MEDIAN_TRANSFORM
    elif model == "habitat":
        priors = priors or HabitatPriors()
        target, payload = _habitat_lp, _habitat_data(data, priors)
        transform = transform_for("habitat", data.k)
    else:
        raise ValueError(f"unknown model {model!r}; expected 'median' or 'habitat'")

    samples = hmc.sample(target, transform, initial_values(model, data), config, data=payload)
    if samples.n_chains >= 2 and samples.n_draws >= 4:
        samples.rhat = {name: hmc.rhat(samples, name) for name in samples.names}
        bad = {k: v for k, v in samples.rhat.items() if not v <= RHAT_WARN}
        if bad:
            msg = "R-hat above {}: {}".format(
                RHAT_WARN, ", ".join(f"{k}={v:.3f}" for k, v in bad.items())
            )
            samples.warnings.append(msg)
            logger.warning(msg)
    return samples


# ---------------------------------------------------------------------------
# labels and posterior odds
# ---------------------------------------------------------------------------


@dataclass
class LabelSamples:
    """Label draws ``z[draw, lesion]``: 0 for no change (M0), 1 for change (M1)."""

    z: np.ndarray
    lesion_ids: list = field(default_factory=list)

    def counts(self, lesion):
        col = self.z[:, lesion]
        n1 = int(np.count_nonzero(col))
        return n1, int(col.size - n1)

    def fraction_m1(self, lesion):
        n1, n0 = self.counts(lesion)
        return n1 / (n1 + n0)


def _normal_logpdf_arr(x, mu, sigma):
    z = (x - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - LOG_SQRT_2PI


def _dm_logpmf_arr(y, alpha):
    """Unnormalized DM log mass; broadcasts rows ``y`` against ``alpha``."""
    n = y.sum(axis=-1)
    a0 = alpha.sum(axis=-1)
    return gammaln(a0) - gammaln(n + a0) + np.sum(gammaln(y + alpha) - gammaln(alpha), axis=-1)


def component_logliks(samples, data, model):
    """Per-draw, per-lesion ``(log(1-lam) + lp0, log(lam) + lp1)`` arrays."""
    lam = samples.pooled("lambda")[:, None]
    if model == "median":
        dp = data.dp[None, :]
        sdr = samples.pooled("sdr")[:, None]
        sdd = samples.pooled("sdd")[:, None]
        mud = samples.pooled("mud")[:, None]
        lp0 = np.log1p(-lam) + _normal_logpdf_arr(dp, 0.0, SQRT2 * sdr)
        lp1 = np.log(lam) + _normal_logpdf_arr(dp, mud, np.sqrt(sdd ** 2 + 2 * sdr ** 2))
        return lp0, lp1
    if model == "habitat":
        y = data.yp.astype(float)[None, :, :]
        prec = samples.pooled("prec")[:, None, None]
        conc = samples.pooled("conc")[:, None, None]
        mu1 = samples.vector("mu1").reshape(-1, data.k)[:, None, :]
        lp0 = np.log1p(-lam) + _dm_logpmf_arr(y, prec * data.mu0[None, None, :])
        lp1 = np.log(lam) + _dm_logpmf_arr(y, conc * mu1)
        return lp0, lp1
    raise ValueError(f"unknown model {model!r}")


def sample_labels(samples, data, model, seed=0):
    """Draw one change label per retained draw and lesion.

    ``P(z = M1) = exp(lp1 - log_sum_exp(lp0, lp1))`` with both terms
    including their mixing weight.
    """
    with np.errstate(divide="ignore"):
        lp0, lp1 = component_logliks(samples, data, model)
        p1 = np.exp(lp1 - np.logaddexp(lp0, lp1))
    u = make_rng(seed, 0x1abe1).random(p1.shape)
    return LabelSamples(z=(u < p1).astype(np.int8), lesion_ids=list(data.lesion_ids))


def posterior_odds(labels, lesion, cap=PO_CAP):
    """Ratio of M1 to M0 label counts; capped when no M0 label was drawn."""
    n1, n0 = labels.counts(lesion)
    if n0 == 0:
        return float(cap)
    return n1 / n0


# (upper bound inclusive, label)
PO_CATEGORIES = (
    (1.0 / 3.0, "moderate evidence of no change"),
    (3.0, "insufficient evidence"),
    (10.0, "moderate evidence of significant change"),
    (30.0, "strong evidence"),
    (math.inf, "very strong evidence"),
)


def classify_po(po):
    """Five-band verbal category for a posterior-odds value."""
    if not po >= 0:
        raise ValueError("posterior odds must be non-negative")
    for upper, label in PO_CATEGORIES:
        if po <= upper:
            return label
    return PO_CATEGORIES[-1][1]


def fit_summary(samples, labels=None, cap=PO_CAP):
    """JSON-ready summary of parameters and (optionally) per-lesion odds."""
    params = {}
    for name in samples.names:
        s = hmc.summarize(samples, name)
        params[name] = {
            "median": s.median,
            "mean": s.mean,
            "sd": s.sd,
            "ci95": list(s.ci95),
            "hdi95": list(s.hdi95),
            "rhat": samples.rhat.get(name),
        }
    out = {
        "parameters": params,
        "n_chains": samples.n_chains,
        "n_draws": samples.n_draws,
        "divergent": samples.n_divergent,
        "warnings": list(samples.warnings),
    }
    if labels is not None:
        lesions = []
        for i, ident in enumerate(labels.lesion_ids):
            po = posterior_odds(labels, i, cap)
            lesions.append(
                {
                    "patient": ident[0],
                    "lesion": ident[1],
                    "po": po,
                    "log_po": math.log(po) if po > 0 else -math.inf,
                    "category": classify_po(po),
                    "label_fraction": labels.fraction_m1(i),
                }
            )
        out["lesions"] = lesions
    return out
