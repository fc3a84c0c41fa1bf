"""Closed-form repeatability statistics and known-parameter Bayes factors.

All functions are cheap and exact, which makes them double as reference
values when validating the sampled models.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "RepeatabilityEstimate",
    "EffectParams",
    "sigma_lsq",
    "icc",
    "cov",
    "rc",
    "repeatability",
    "conditional_predictive_m0",
    "pvalue_change",
    "log_bf10",
    "expected_log_bf",
    "interpret_bf",
    "BF_CATEGORIES",
]

RC_FACTOR = 1.96 * math.sqrt(2.0)


def _pairs(baseline_pairs):
    pairs = np.asarray(baseline_pairs, dtype=float)
    if pairs.size == 0:
        raise ValueError("at least one baseline pair is required")
    pairs = pairs.reshape(-1, 2)
    if not np.all(np.isfinite(pairs)):
        raise ValueError("baseline pairs must be finite")
    return pairs


def sigma_lsq(baseline_pairs):
    """Least-squares measurement error from repeat baseline pairs.

    ``sqrt(sum((y2 - y1)**2) / (2 * N_b))``.
    """
    pairs = _pairs(baseline_pairs)
    d = pairs[:, 1] - pairs[:, 0]
    return float(np.sqrt(np.sum(d * d) / (2 * len(pairs))))


def icc(sigma0, sigma):
    """Intraclass correlation ``sigma0^2 / (sigma0^2 + sigma^2)``."""
    if sigma0 < 0 or sigma < 0:
        raise ValueError("standard deviations must be non-negative")
    if math.isinf(sigma0):
        return 1.0
    denom = sigma0 * sigma0 + sigma * sigma
    if denom == 0:
        raise ValueError("sigma0 and sigma cannot both be zero")
    return sigma0 * sigma0 / denom


def cov(sigma, mu0):
    """Coefficient of variation in percent."""
    if mu0 == 0:
        raise ValueError("coefficient of variation is undefined for mu0 = 0")
    return 100.0 * sigma / mu0


def rc(sigma_hat):
    """Repeatability coefficient ``1.96 * sqrt(2) * sigma_hat``."""
    if sigma_hat < 0:
        raise ValueError("sigma_hat must be non-negative")
    return RC_FACTOR * sigma_hat


@dataclass(frozen=True)
class RepeatabilityEstimate:
    sigma_hat: float
    n_pairs: int
    icc: float
    cov_pct: float
    rc: float


def repeatability(baseline_pairs):
    """Bland-Altman style summary of a double-baseline study.

    The population spread is estimated from the pair means as
    ``var(mean) - sigma_hat^2 / 2`` (floored at zero), and the population
    mean as the grand mean.
    """
    pairs = _pairs(baseline_pairs)
    s = sigma_lsq(pairs)
    means = pairs.mean(axis=1)
    mu0 = float(means.mean())
    var0 = float(means.var(ddof=1)) - 0.5 * s * s if len(pairs) > 1 else 0.0
    sigma0 = math.sqrt(max(var0, 0.0))
    icc_value = icc(sigma0, s) if (sigma0 > 0 or s > 0) else float("nan")
    cov_value = cov(s, mu0) if mu0 != 0 else float("nan")
    return RepeatabilityEstimate(s, len(pairs), icc_value, cov_value, rc(s))


def conditional_predictive_m0(y0, mu0, sigma0, sigma):
    """Normal predictive of a repeat measurement given baseline ``y0``.

    Returns ``(mu_star, sigma_star)`` with
    ``mu_star = ICC * y0 + (1 - ICC) * mu0`` and
    ``sigma_star = sqrt(1 + ICC) * sigma``. Passing ``sigma0=math.inf``
    gives the ICC = 1 limit ``(y0, sqrt(2) * sigma)``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = icc(sigma0, sigma)
    if r == 1.0:
        return float(y0), math.sqrt(2.0) * sigma
    return r * y0 + (1.0 - r) * mu0, math.sqrt(1.0 + r) * sigma


def pvalue_change(d, baseline_pairs):
    """Two-sided p-value for a measured change ``d`` after marginalising sigma.

    ``t = d / sqrt(mean(db^2))`` follows a Student-t with ``N_b`` degrees of
    freedom under no change.
    """
    pairs = _pairs(baseline_pairs)
    db = pairs[:, 1] - pairs[:, 0]
    msd = float(np.mean(db * db))
    if msd == 0:
        raise ValueError("baseline differences are all zero")
    t = d / math.sqrt(msd)
    return float(2.0 * stats.t.sf(abs(t), len(pairs)))


@dataclass(frozen=True)
class EffectParams:
    """Known change-model parameters for a single lesion Bayes factor."""

    mu_delta: float
    sigma_delta: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not (self.sigma_delta >= 0 and math.isfinite(self.sigma_delta)):
            raise ValueError("sigma_delta must be finite and non-negative")

    @classmethod
    def from_eta(cls, mu_delta, eta, sigma):
        if not 0 <= eta < 1:
            raise ValueError("eta must lie in [0, 1)")
        return cls(mu_delta, sigma * math.sqrt(2.0 * eta / (1.0 - eta)), sigma)

    @property
    def eta(self):
        sd2 = self.sigma_delta ** 2
        return sd2 / (sd2 + 2.0 * self.sigma ** 2)

    @property
    def xi(self):
        return abs(self.mu_delta) / (math.sqrt(2.0) * self.sigma)


def log_bf10(dy, effect):
    """Log Bayes factor of change vs no change for one measured difference."""
    eta = effect.eta
    if eta >= 1:
        raise ValueError("eta must be < 1")
    scale = math.sqrt(2.0) * effect.sigma
    a = (dy - effect.mu_delta) / scale
    b = dy / scale
    return 0.5 * (math.log1p(-eta) - (1.0 - eta) * a * a + b * b)


def expected_log_bf(eta, xi, under_model):
    """Expectation of :func:`log_bf10` when ``under_model`` ("M0"/"M1") is true."""
    if not 0 <= eta < 1:
        raise ValueError("eta must lie in [0, 1)")
    model = str(under_model).upper()
    if model == "M0":
        return 0.5 * (math.log1p(-eta) + eta - (1.0 - eta) * xi * xi)
    if model == "M1":
        return 0.5 * (math.log1p(-eta) + eta / (1.0 - eta) + xi * xi)
    raise ValueError(f"under_model must be 'M0' or 'M1', got {under_model!r}")


# (lower bound, label); a value on a boundary takes the stronger label
BF_CATEGORIES = (
    (30.0, "Very strong evidence for M1"),
    (10.0, "Strong evidence for M1"),
    (3.0, "Moderate evidence for M1"),
    (1.0, "Anecdotal evidence for M1"),
)
_BF_M0 = (
    (1.0 / 10.0, "Strong evidence for M0"),
    (1.0 / 3.0, "Moderate evidence for M0"),
    (1.0, "Anecdotal evidence for M0"),
)


def interpret_bf(bf):
    """Jeffreys-style verbal category for a Bayes factor."""
    if not bf > 0:
        raise ValueError("Bayes factor must be positive")
    for lower, label in BF_CATEGORIES:
        if bf >= lower:
            return label
    for upper, label in _BF_M0:
        if bf <= upper:
            return label
    raise AssertionError("unreachable")
