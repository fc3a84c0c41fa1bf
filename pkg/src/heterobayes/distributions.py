"""Log densities, gradients and random variates for the model distributions.

Public functions validate their arguments and raise :class:`DomainError`.
The ``_nb_*`` kernels are unchecked numba versions used inside the
log-posterior targets, where validation would cost more than the arithmetic.
"""

import math

import numba as nb
import numpy as np

__all__ = [
    "DomainError",
    "as_simplex",
    "as_counts",
    "lgamma",
    "digamma",
    "log_sum_exp",
    "normal_logpdf",
    "normal_logpdf_grad",
    "half_cauchy_logpdf",
    "half_cauchy_logpdf_grad",
    "student_t_logpdf",
    "dirichlet_logpdf",
    "multinomial_logpmf",
    "dirichlet_multinomial_logpmf",
    "dirichlet_multinomial_logpmf_grad",
    "make_rng",
    "normal_rng",
    "uniform_rng",
    "lognormal_rng",
    "half_cauchy_rng",
    "dirichlet_rng",
    "multinomial_rng",
    "categorical_rng",
]

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Argument outside the support or parameter space of a distribution."""


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _nb_lgamma_digamma(x):
    """Return (lgamma(x), digamma(x)) for x > 0 with a shared Stirling tail.

    Arguments below 10 are shifted up by recurrence; the series is truncated
    after the x**-11 term (error < 1e-13 for x >= 10).
    """
    shift_prod = 1.0
    shift_psi = 0.0
    while x < 10.0:
        shift_prod *= x
        shift_psi += 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    logx = math.log(x)
    lg = (
        (x - 0.5) * logx
        - x
        + LOG_SQRT_2PI
        + inv
        * (
            1.0 / 12
            - inv2
            * (
                1.0 / 360
                - inv2 * (1.0 / 1260 - inv2 * (1.0 / 1680 - inv2 * (1.0 / 1188)))
            )
        )
    )
    psi = (
        logx
        - 0.5 * inv
        - inv2
        * (
            1.0 / 12
            - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132))))
        )
    )
    return lg - math.log(shift_prod), psi - shift_psi


@nb.njit(cache=True, error_model="numpy")
def _nb_stirling_tails(x):
    # lgamma and digamma series remainders beyond the log terms, x >= 10
    inv = 1.0 / x
    inv2 = inv * inv
    lg = inv * (
        1.0 / 12
        - inv2 * (1.0 / 360 - inv2 * (1.0 / 1260 - inv2 * (1.0 / 1680 - inv2 * (1.0 / 1188))))
    )
    psi = inv2 * (
        1.0 / 12
        - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132))))
    )
    return lg, psi


@nb.njit(cache=True, error_model="numpy")
def _nb_lgamma_digamma_diff(x, n):
    """Return (lgamma(x + n) - lgamma(x), digamma(x + n) - digamma(x)).

    Computed without forming either lgamma separately, so the result keeps
    full relative accuracy when ``x`` is huge and ``n`` modest (the
    large-precision tail of a Dirichlet-multinomial).
    """
    if n == 0.0:
        return 0.0, 0.0
    if x < 10.0:
        # no cancellation at small x, so the plain difference is accurate
        return (
            math.lgamma(x + n) - math.lgamma(x),
            _nb_lgamma_digamma(x + n)[1] - _nb_lgamma_digamma(x)[1],
        )
    z = x + n
    r = math.log1p(n / x)
    lead = (x - 0.5) * r + n * math.log(z) - n
    lgx, psx = _nb_stirling_tails(x)
    lgz, psz = _nb_stirling_tails(z)
    dpsi = r - 0.5 * (1.0 / z - 1.0 / x) - (psz - psx)
    return lead + (lgz - lgx), dpsi


@nb.njit(cache=True, error_model="numpy")
def _nb_digamma(x):
    return _nb_lgamma_digamma(x)[1]


def lgamma(x):
    """Log of the gamma function for positive arguments."""
    if not x > 0:
        raise DomainError(f"lgamma requires x > 0, got {x}")
    return math.lgamma(x)


def digamma(x):
    """Digamma function for positive arguments (absolute error below 1e-13)."""
    if not x > 0:
        raise DomainError(f"digamma requires x > 0, got {x}")
    return _nb_digamma(float(x))


@nb.njit(cache=True, error_model="numpy")
def _nb_log_sum_exp(a, b):
    if a == -np.inf and b == -np.inf:
        return -np.inf
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def log_sum_exp(a, b):
    """Overflow-safe ``ln(exp(a) + exp(b))``."""
    return _nb_log_sum_exp(float(a), float(b))


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------


def _finite(name, value):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{name} must be finite, got {value}")


def _positive(name, value):
    _finite(name, value)
    if not np.all(np.asarray(value) > 0):
        raise DomainError(f"{name} must be > 0, got {value}")


def as_simplex(values, name="simplex"):
    """Validate and return a probability vector as a float array."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise DomainError(f"{name} must be a vector with at least 2 entries")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DomainError(f"{name} entries must be finite and non-negative")
    if abs(x.sum() - 1.0) > 1e-9:
        raise DomainError(f"{name} must sum to 1, sums to {x.sum()!r}")
    return x


def as_counts(values, name="counts"):
    """Validate and return a count vector as an int64 array."""
    y = np.asarray(values)
    if y.ndim != 1 or y.size < 2:
        raise DomainError(f"{name} must be a vector with at least 2 entries")
    yi = y.astype(np.int64)
    if np.any(yi != y) or np.any(yi < 0):
        raise DomainError(f"{name} must be non-negative integers")
    return yi


# ---------------------------------------------------------------------------
# normal
# ---------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _nb_normal_lpdf(x, mu, sigma):
    z = (x - mu) / sigma
    return -0.5 * z * z - math.log(sigma) - LOG_SQRT_2PI


@nb.njit(cache=True, error_model="numpy")
def _nb_normal_dsigma(x, mu, sigma):
    z = (x - mu) / sigma
    return (z * z - 1.0) / sigma


def normal_logpdf(x, mu, sigma):
    """ln N(x; mu, sigma)."""
    _finite("x", x)
    _finite("mu", mu)
    _positive("sigma", sigma)
    z = (np.asarray(x, float) - mu) / sigma
    out = -0.5 * z * z - np.log(sigma) - LOG_SQRT_2PI
    return float(out) if np.ndim(out) == 0 else out


def normal_logpdf_grad(x, mu, sigma):
    """Partial derivatives of :func:`normal_logpdf` as ``(d_mu, d_sigma)``."""
    _finite("x", x)
    _finite("mu", mu)
    _positive("sigma", sigma)
    z = (x - mu) / sigma
    return z / sigma, (z * z - 1.0) / sigma


# ---------------------------------------------------------------------------
# half-Cauchy (location 0)
# ---------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _nb_half_cauchy_lpdf(x, gamma):
    r = x / gamma
    return math.log(2.0 / (math.pi * gamma)) - math.log1p(r * r)


@nb.njit(cache=True, error_model="numpy")
def _nb_half_cauchy_dx(x, gamma):
    return -2.0 * x / (gamma * gamma + x * x)


def half_cauchy_logpdf(x, gamma):
    """ln of the half-Cauchy density ``2 / (pi gamma (1 + (x/gamma)^2))``."""
    _finite("x", x)
    _positive("gamma", gamma)
    if np.any(np.asarray(x) < 0):
        raise DomainError(f"half-Cauchy support is x >= 0, got {x}")
    r = np.asarray(x, float) / gamma
    out = np.log(2.0 / (np.pi * gamma)) - np.log1p(r * r)
    return float(out) if np.ndim(out) == 0 else out


def half_cauchy_logpdf_grad(x, gamma):
    """Derivative of :func:`half_cauchy_logpdf` with respect to ``x``."""
    half_cauchy_logpdf(x, gamma)
    return -2.0 * x / (gamma * gamma + x * x)


# ---------------------------------------------------------------------------
# Student-t
# ---------------------------------------------------------------------------


def student_t_logpdf(t, nu):
    """Standard Student-t log density with ``nu`` degrees of freedom."""
    _finite("t", t)
    _positive("nu", nu)
    t = np.asarray(t, float)
    out = (
        math.lgamma(0.5 * (nu + 1))
        - math.lgamma(0.5 * nu)
        - 0.5 * math.log(nu * math.pi)
        - 0.5 * (nu + 1) * np.log1p(t * t / nu)
    )
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Dirichlet, multinomial, Dirichlet-multinomial
# ---------------------------------------------------------------------------


def dirichlet_logpdf(x, mu, tau):
    """Dirichlet log density in mean/concentration form, alpha = tau * mu.

    Points on the boundary of the simplex (any ``x_m <= 0``) return ``-inf``.
    """
    x = np.asarray(x, dtype=float)
    mu = as_simplex(mu, "mu")
    _positive("tau", tau)
    if x.shape != mu.shape:
        raise DomainError(f"dimension mismatch: x{x.shape} vs mu{mu.shape}")
    alpha = tau * mu
    if np.any(alpha <= 0):
        raise DomainError("tau * mu must be strictly positive")
    if np.any(x <= 0):
        return -np.inf
    return float(
        math.lgamma(tau)
        - sum(math.lgamma(a) for a in alpha)
        + np.sum((alpha - 1.0) * np.log(x))
    )


def _log_multinomial_coef(y):
    return math.lgamma(int(y.sum()) + 1) - sum(math.lgamma(int(v) + 1) for v in y)


def multinomial_logpmf(y, x, n):
    """Multinomial log mass including the coefficient ``n! / prod(y_k!)``."""
    y = as_counts(y, "y")
    x = np.asarray(x, dtype=float)
    if x.shape != y.shape:
        raise DomainError(f"dimension mismatch: y{y.shape} vs x{x.shape}")
    if int(y.sum()) != int(n):
        raise DomainError(f"counts sum to {int(y.sum())}, expected n={n}")
    as_simplex(x, "x")
    out = _log_multinomial_coef(y)
    for yk, xk in zip(y, x):
        if yk == 0:
            continue
        if xk <= 0:
            return -np.inf
        out += yk * math.log(xk)
    return float(out)


@nb.njit(cache=True, error_model="numpy")
def _nb_dm_lpmf(y, mu, prec):
    # unnormalized form: no multinomial coefficient
    n = 0.0
    out = 0.0
    for k in range(y.size):
        n += y[k]
        out += _nb_lgamma_digamma_diff(mu[k] * prec, y[k])[0]
    return out - _nb_lgamma_digamma_diff(prec, n)[0]


@nb.njit(cache=True, error_model="numpy")
def _nb_dm_dprec(y, mu, prec):
    n = 0.0
    out = 0.0
    for k in range(y.size):
        n += y[k]
        out += mu[k] * _nb_lgamma_digamma_diff(mu[k] * prec, y[k])[1]
    return out - _nb_lgamma_digamma_diff(prec, n)[1]


def dirichlet_multinomial_logpmf(y, mu, prec, normalized=True):
    """Dirichlet-multinomial log mass with concentration vector ``prec * mu``.

    With ``normalized=False`` the multinomial coefficient is omitted, which
    is the form used inside the samplers (it is constant in the parameters).
    """
    y = as_counts(y, "y")
    mu = as_simplex(mu, "mu")
    _positive("prec", prec)
    if mu.shape != y.shape:
        raise DomainError(f"dimension mismatch: y{y.shape} vs mu{mu.shape}")
    if np.any(mu * prec <= 0):
        raise DomainError("prec * mu must be strictly positive")
    out = _nb_dm_lpmf(y.astype(float), mu, float(prec))
    if normalized:
        out += _log_multinomial_coef(y)
    return float(out)


def dirichlet_multinomial_logpmf_grad(y, mu, prec):
    """Gradient of the Dirichlet-multinomial log mass.

    Returns ``(d_mu, d_prec)`` where ``d_mu`` treats the entries of ``mu`` as
    free coordinates (the simplex constraint is handled by the caller).
    """
    y = as_counts(y, "y").astype(float)
    mu = as_simplex(mu, "mu")
    _positive("prec", prec)
    a = mu * prec
    d_mu = np.array(
        [prec * (_nb_digamma(yk + ak) - _nb_digamma(ak)) for yk, ak in zip(y, a)]
    )
    return d_mu, _nb_dm_dprec(y, mu, float(prec))


# ---------------------------------------------------------------------------
# random variates
# ---------------------------------------------------------------------------


def make_rng(seed, *keys):
    """Counter-based (Philox) generator keyed by ``seed`` and any sub-keys.

    Distinct key tuples give statistically independent streams, which is how
    chains, repetitions and lesions get their own generators.
    """
    if isinstance(seed, np.random.Generator):
        if keys:
            raise TypeError("sub-keys require an integer seed")
        return seed
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def normal_rng(mu, sigma, size=None, rng=None):
    _finite("mu", mu)
    if np.any(np.asarray(sigma) < 0):
        raise DomainError("sigma must be >= 0")
    return make_rng(0 if rng is None else rng).normal(mu, sigma, size)


def uniform_rng(low=0.0, high=1.0, size=None, rng=None):
    if not high >= low:
        raise DomainError("uniform requires high >= low")
    return make_rng(0 if rng is None else rng).uniform(low, high, size)


def lognormal_rng(mu, sigma, size=None, rng=None):
    _finite("mu", mu)
    _positive("sigma", sigma)
    return make_rng(0 if rng is None else rng).lognormal(mu, sigma, size)


def half_cauchy_rng(gamma, size=None, rng=None):
    _positive("gamma", gamma)
    return gamma * np.abs(make_rng(0 if rng is None else rng).standard_cauchy(size))


def dirichlet_rng(mu, tau, size=None, rng=None):
    """Draw simplexes from Dir(tau * mu)."""
    mu = as_simplex(mu, "mu")
    _positive("tau", tau)
    if np.any(mu <= 0):
        raise DomainError("Dirichlet mean must be strictly positive")
    return make_rng(0 if rng is None else rng).dirichlet(tau * mu, size)


def multinomial_rng(x, n, size=None, rng=None):
    x = as_simplex(x, "x")
    if int(n) != n or n < 0:
        raise DomainError(f"n must be a non-negative integer, got {n}")
    return make_rng(0 if rng is None else rng).multinomial(int(n), x / x.sum(), size)


def categorical_rng(p, size=None, rng=None):
    """Draw 1-based category indices with probabilities ``p``."""
    p = as_simplex(p, "p")
    return make_rng(0 if rng is None else rng).choice(p.size, size=size, p=p) + 1
