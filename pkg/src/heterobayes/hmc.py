"""Hamiltonian Monte Carlo over unconstrained space.

Targets are numba-compiled functions ``logp(theta, data) -> (lp, grad)``
evaluated in *constrained* space; the sampler maps to unconstrained
coordinates through a :class:`TransformSpec` and adds the log-Jacobian.
Plain Python targets are compiled with ``numba.njit`` on first use, so they
must stick to the numba-supported subset of numpy.

The transition is fixed-length HMC with the number of leapfrog steps drawn
uniformly from ``[1, max_leapfrog_steps]``. Warmup runs dual averaging on
the step size and estimates a diagonal inverse metric from the second half
of warmup.
"""

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numba as nb
import numpy as np

from .distributions import make_rng

logger = logging.getLogger(__name__)

__all__ = [
    "IDENTITY",
    "LOG",
    "LOGIT",
    "SIMPLEX",
    "TransformSpec",
    "SamplerConfig",
    "PosteriorSamples",
    "Summary",
    "DegenerateRhatWarning",
    "leapfrog",
    "sample",
    "rhat",
    "split_rhat",
    "summarize",
    "hdi",
]

IDENTITY, LOG, LOGIT, SIMPLEX = 0, 1, 2, 3
_KIND_NAMES = {"identity": IDENTITY, "log": LOG, "logit": LOGIT, "simplex": SIMPLEX}

# numerical guard for the divergence test, in units of the Hamiltonian
MAX_ENERGY_ERROR = 1000.0


class DegenerateRhatWarning(UserWarning):
    """All chains have zero variance; R-hat is reported as 1 by convention."""


# ---------------------------------------------------------------------------
# constraint transforms (numba kernels)
# ---------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _logistic(u):
    if u >= 0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


@nb.njit(cache=True, error_model="numpy")
def _constrain(u, kinds, sizes, n_con):
    theta = np.empty(n_con)
    logjac = 0.0
    iu = 0
    it = 0
    for b in range(kinds.size):
        kind = kinds[b]
        size = sizes[b]
        if kind == SIMPLEX:
            stick = 1.0
            for k in range(size - 1):
                z = _logistic(u[iu + k] - math.log(size - k - 1.0))
                theta[it + k] = stick * z
                logjac += math.log(z) + math.log1p(-z) + math.log(stick)
                stick -= theta[it + k]
            theta[it + size - 1] = stick
            iu += size - 1
            it += size
        else:
            for k in range(size):
                v = u[iu + k]
                if kind == IDENTITY:
                    theta[it + k] = v
                elif kind == LOG:
                    theta[it + k] = math.exp(v)
                    logjac += v
                else:
                    z = _logistic(v)
                    theta[it + k] = z
                    logjac += math.log(z) + math.log1p(-z)
            iu += size
            it += size
    return theta, logjac


@nb.njit(cache=True, error_model="numpy")
def _unconstrain(theta, kinds, sizes, n_unc):
    u = np.empty(n_unc)
    iu = 0
    it = 0
    for b in range(kinds.size):
        kind = kinds[b]
        size = sizes[b]
        if kind == SIMPLEX:
            stick = 1.0
            for k in range(size - 1):
                z = theta[it + k] / stick
                u[iu + k] = math.log(z) - math.log1p(-z) + math.log(size - k - 1.0)
                stick -= theta[it + k]
            iu += size - 1
            it += size
        else:
            for k in range(size):
                v = theta[it + k]
                if kind == IDENTITY:
                    u[iu + k] = v
                elif kind == LOG:
                    u[iu + k] = math.log(v)
                else:
                    u[iu + k] = math.log(v) - math.log1p(-v)
            iu += size
            it += size
    return u


@nb.njit(cache=True, error_model="numpy")
def _pullback(u, theta, gtheta, kinds, sizes, n_unc):
    """Gradient wrt u of f(constrain(u)) + logjac(u), given df/dtheta."""
    g = np.empty(n_unc)
    iu = 0
    it = 0
    for b in range(kinds.size):
        kind = kinds[b]
        size = sizes[b]
        if kind == SIMPLEX:
            zs = np.empty(size - 1)
            sticks = np.empty(size - 1)
            stick = 1.0
            for k in range(size - 1):
                zs[k] = _logistic(u[iu + k] - math.log(size - k - 1.0))
                sticks[k] = stick
                stick -= stick * zs[k]
            adj = gtheta[it + size - 1]
            for k in range(size - 2, -1, -1):
                z = zs[k]
                gz = (gtheta[it + k] - adj) * sticks[k]
                g[iu + k] = gz * z * (1.0 - z) + 1.0 - 2.0 * z
                adj = gtheta[it + k] * z + adj * (1.0 - z) + 1.0 / sticks[k]
            iu += size - 1
            it += size
        else:
            for k in range(size):
                t = theta[it + k]
                if kind == IDENTITY:
                    g[iu + k] = gtheta[it + k]
                elif kind == LOG:
                    g[iu + k] = gtheta[it + k] * t + 1.0
                else:
                    g[iu + k] = gtheta[it + k] * t * (1.0 - t) + 1.0 - 2.0 * t
            iu += size
            it += size
    return g


@nb.njit(error_model="numpy")
def _lp_unconstrained(logp, data, u, kinds, sizes, n_con):
    theta, logjac = _constrain(u, kinds, sizes, n_con)
    lp, gtheta = logp(theta, data)
    return lp + logjac, _pullback(u, theta, gtheta, kinds, sizes, u.size)


@nb.njit(cache=True, error_model="numpy")
def _all_finite(x):
    for v in x:
        if not math.isfinite(v):
            return False
    return True


@dataclass(frozen=True)
class TransformSpec:
    """Ordered parameter blocks, each ``(name, kind, size)``.

    ``kind`` is one of ``"identity"``, ``"log"`` (positive reals),
    ``"logit"`` (the open unit interval) or ``"simplex"`` (stick-breaking,
    ``size - 1`` unconstrained coordinates). Non-simplex blocks of size > 1
    are transformed elementwise.
    """

    blocks: tuple

    def __post_init__(self):
        blocks = tuple((str(n), str(k), int(s)) for n, k, s in self.blocks)
        for name, kind, size in blocks:
            if kind not in _KIND_NAMES:
                raise ValueError(f"unknown transform kind {kind!r} for {name}")
            if size < 1 or (kind == "simplex" and size < 2):
                raise ValueError(f"invalid size {size} for {name}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def kinds(self):
        return np.array([_KIND_NAMES[k] for _, k, _ in self.blocks], dtype=np.int64)

    @property
    def sizes(self):
        return np.array([s for _, _, s in self.blocks], dtype=np.int64)

    @property
    def n_constrained(self):
        return int(self.sizes.sum())

    @property
    def n_unconstrained(self):
        return sum(s - 1 if k == "simplex" else s for _, k, s in self.blocks)

    @property
    def names(self):
        """Constrained coordinate names; vector blocks become ``name[i]``."""
        out = []
        for name, _, size in self.blocks:
            if size == 1:
                out.append(name)
            else:
                out.extend(f"{name}[{i + 1}]" for i in range(size))
        return out

    def constrain(self, u):
        """Map unconstrained ``u`` to ``(theta, log_jacobian)``."""
        return _constrain(
            np.asarray(u, float), self.kinds, self.sizes, self.n_constrained
        )

    def unconstrain(self, theta):
        theta = np.asarray(theta, float)
        if theta.size != self.n_constrained:
            raise ValueError(f"expected {self.n_constrained} values, got {theta.size}")
        return _unconstrain(theta, self.kinds, self.sizes, self.n_unconstrained)

    def pullback(self, u, gtheta):
        """Unconstrained gradient of ``f(constrain(u)) + log_jacobian(u)``."""
        u = np.asarray(u, float)
        theta, _ = self.constrain(u)
        return _pullback(
            u, theta, np.asarray(gtheta, float), self.kinds, self.sizes, u.size
        )


# ---------------------------------------------------------------------------
# integrator
# ---------------------------------------------------------------------------


class LeapfrogResult(NamedTuple):
    position: np.ndarray
    momentum: np.ndarray
    divergent: bool


def leapfrog(position, momentum, grad_fn, step, n_steps, inv_metric=None):
    """Symplectic leapfrog integration of Hamiltonian dynamics.

    ``grad_fn(q)`` returns the gradient of the log density. The kinetic
    energy is ``0.5 * p @ (inv_metric * p)``. If a non-finite gradient is met
    the trajectory is abandoned and the initial state returned with
    ``divergent=True``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    q = np.array(position, dtype=float)
    p = np.array(momentum, dtype=float)
    minv = np.ones_like(q) if inv_metric is None else np.asarray(inv_metric, float)
    g = np.asarray(grad_fn(q), float)
    if not np.all(np.isfinite(g)):
        return LeapfrogResult(np.array(position, float), np.array(momentum, float), True)
    for _ in range(int(n_steps)):
        p = p + 0.5 * step * g
        q = q + step * minv * p
        g = np.asarray(grad_fn(q), float)
        if not np.all(np.isfinite(g)):
            return LeapfrogResult(
                np.array(position, float), np.array(momentum, float), True
            )
        p = p + 0.5 * step * g
    return LeapfrogResult(q, p, False)


# ---------------------------------------------------------------------------
# chain runner
# ---------------------------------------------------------------------------


@nb.njit(error_model="numpy")
def _trajectory(logp, data, kinds, sizes, n_con, q, p, g, eps, minv, n_steps):
    qn = q.copy()
    pn = p.copy()
    gn = g.copy()
    lpn = -np.inf
    for _ in range(n_steps):
        pn += 0.5 * eps * gn
        qn += eps * minv * pn
        lpn, gn = _lp_unconstrained(logp, data, qn, kinds, sizes, n_con)
        if not (math.isfinite(lpn) and _all_finite(gn)):
            return qn, pn, gn, -np.inf, True
        pn += 0.5 * eps * gn
    return qn, pn, gn, lpn, False


@nb.njit(cache=True, error_model="numpy")
def _accept_prob(lp0, p0, lp1, p1, minv, divergent):
    if divergent:
        return 0.0, True
    h0 = -lp0 + 0.5 * np.sum(p0 * p0 * minv)
    h1 = -lp1 + 0.5 * np.sum(p1 * p1 * minv)
    dh = h0 - h1
    if not math.isfinite(dh) or -dh > MAX_ENERGY_ERROR:
        return 0.0, True
    return min(1.0, math.exp(dh)), False


@nb.njit(error_model="numpy")
def _initial_step(logp, data, kinds, sizes, n_con, q, lp, g, minv, z, eps):
    p = z / np.sqrt(minv)
    _, p1, _, lp1, div = _trajectory(logp, data, kinds, sizes, n_con, q, p, g, eps, minv, 1)
    acc, _ = _accept_prob(lp, p, lp1, p1, minv, div)
    direction = 1.0 if acc > 0.5 else -1.0
    for _ in range(60):
        if direction > 0 and not acc > 0.5:
            break
        if direction < 0 and acc > 0.5:
            break
        eps = eps * 2.0 ** direction
        _, p1, _, lp1, div = _trajectory(
            logp, data, kinds, sizes, n_con, q, p, g, eps, minv, 1
        )
        acc, _ = _accept_prob(lp, p, lp1, p1, minv, div)
    return eps


@nb.njit(error_model="numpy")
def _run_chain(
    logp, data, kinds, sizes, n_con, u0, n_warmup, target_accept, z, unif, n_steps
):
    n_iter = unif.size
    d = u0.size
    n_post = n_iter - n_warmup
    draws = np.empty((n_post, n_con))
    accept = np.empty(n_post)
    divergent = np.zeros(n_post, dtype=np.bool_)

    q = u0.copy()
    lp, g = _lp_unconstrained(logp, data, q, kinds, sizes, n_con)
    minv = np.ones(d)
    eps = _initial_step(logp, data, kinds, sizes, n_con, q, lp, g, minv, z[0], 1.0)

    # dual averaging constants (Hoffman & Gelman 2014)
    gamma, t0, kappa = 0.05, 10.0, 0.75
    mu = math.log(10.0 * eps)
    hbar = 0.0
    log_eps_bar = 0.0
    t = 0.0

    adapt_metric = n_warmup >= 100
    collect_start = n_warmup // 2
    collect_end = (4 * n_warmup) // 5
    w_n = 0.0
    w_mean = np.zeros(d)
    w_m2 = np.zeros(d)

    for i in range(n_iter):
        p = z[i] / np.sqrt(minv)
        qn, pn, gn, lpn, div = _trajectory(
            logp, data, kinds, sizes, n_con, q, p, g, eps, minv, n_steps[i]
        )
        acc, div = _accept_prob(lp, p, lpn, pn, minv, div)
        if unif[i] < acc:
            q = qn
            g = gn
            lp = lpn

        if i < n_warmup:
            t += 1.0
            hbar = (1.0 - 1.0 / (t + t0)) * hbar + (target_accept - acc) / (t + t0)
            log_eps = mu - math.sqrt(t) / gamma * hbar
            w = t ** (-kappa)
            log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar
            eps = math.exp(log_eps)

            if adapt_metric and collect_start <= i < collect_end:
                w_n += 1.0
                delta = q - w_mean
                w_mean += delta / w_n
                w_m2 += delta * (q - w_mean)
            if adapt_metric and i == collect_end - 1:
                var = w_m2 / (w_n - 1.0)
                # shrink toward unit scale as Stan does
                minv = (w_n / (w_n + 5.0)) * var + 1e-3 * (5.0 / (w_n + 5.0))
                eps = _initial_step(
                    logp, data, kinds, sizes, n_con, q, lp, g, minv, z[i], eps
                )
                mu = math.log(10.0 * eps)
                hbar = 0.0
                log_eps_bar = 0.0
                t = 0.0
            if i == n_warmup - 1:
                eps = math.exp(log_eps_bar)
        else:
            j = i - n_warmup
            theta, _ = _constrain(q, kinds, sizes, n_con)
            draws[j] = theta
            accept[j] = acc
            divergent[j] = div
    return draws, accept, divergent, eps, minv


# ---------------------------------------------------------------------------
# public sampling API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    """HMC run settings; defaults follow the 3 x (500 burn-in + 5000) protocol."""

    chains: int = 3
    iterations: int = 5500
    warmup: int = 500
    target_accept: float = 0.8
    max_leapfrog_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("require 0 <= warmup < iterations")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_leapfrog_steps < 1:
            raise ValueError("max_leapfrog_steps must be >= 1")

    @property
    def retained(self):
        return self.iterations - self.warmup


@dataclass
class PosteriorSamples:
    """Post-warmup draws in constrained space, shaped (chain, draw, param)."""

    names: list
    draws: np.ndarray
    accept_stat: np.ndarray = None
    divergent: np.ndarray = None
    step_size: np.ndarray = None
    inv_metric: np.ndarray = None
    warmup: int = 0
    warnings: list = field(default_factory=list)
    rhat: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_draws(self):
        return self.draws.shape[1]

    def __getitem__(self, name):
        """Draws of one parameter as a (chain, draw) array."""
        try:
            return self.draws[:, :, self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def pooled(self, name):
        return self[name].reshape(-1)

    def vector(self, name):
        """Stack ``name[1..K]`` into a (chain, draw, K) array."""
        cols = [i for i, n in enumerate(self.names) if n.startswith(name + "[")]
        if not cols:
            raise KeyError(name)
        return self.draws[:, :, cols]

    @property
    def n_divergent(self):
        return 0 if self.divergent is None else int(self.divergent.sum())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["chain", "iter", *self.names])
            for c in range(self.n_chains):
                for s in range(self.n_draws):
                    writer.writerow(
                        [c + 1, s + 1, *(repr(float(v)) for v in self.draws[c, s])]
                    )

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["chain", "iter"]:
                raise ValueError(f"{path}: expected 'chain,iter,...' header")
            rows = [(int(r[0]), [float(v) for v in r[2:]]) for r in reader if r]
        chains = sorted({c for c, _ in rows})
        per_chain = [[v for c, v in rows if c == ch] for ch in chains]
        if len({len(x) for x in per_chain}) != 1:
            raise ValueError(f"{path}: chains have unequal lengths")
        return cls(names=header[2:], draws=np.array(per_chain, dtype=float))


def _compile(logdensity):
    if isinstance(logdensity, nb.core.registry.CPUDispatcher):
        return logdensity
    return nb.njit(error_model="numpy")(logdensity)


def _as_vector(init, names):
    if isinstance(init, dict):
        flat = []
        for name in names:
            if name in init:
                flat.append(init[name])
            else:
                base, idx = name[:-1].split("[")
                flat.append(np.asarray(init[base])[int(idx) - 1])
        return np.asarray(flat, dtype=float)
    return np.asarray(init, dtype=float)


def sample(logdensity_with_grad, transform, init, config=None, data=(), init_jitter=0.25):
    """Run ``config.chains`` independent HMC chains.

    Parameters
    ----------
    logdensity_with_grad : callable
        ``f(theta, data) -> (lp, grad)`` in constrained space.
    transform : TransformSpec
    init : array-like or dict
        A feasible constrained starting point. Each chain starts from it
        after a uniform jitter of ``+-init_jitter`` in unconstrained space.
    config : SamplerConfig
    data : tuple
        Passed through to the target unchanged.

    Returns
    -------
    PosteriorSamples
    """
    config = config or SamplerConfig()
    logp = _compile(logdensity_with_grad)
    kinds, sizes = transform.kinds, transform.sizes
    n_con = transform.n_constrained

    theta0 = _as_vector(init, transform.names)
    try:
        u_init = transform.unconstrain(theta0)
        lp0, g0 = _lp_unconstrained(logp, data, u_init, kinds, sizes, n_con)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"infeasible initial point: {exc}") from exc
    if not (np.isfinite(lp0) and np.all(np.isfinite(g0))):
        raise ValueError("log density is not finite at the initial point")

    d = u_init.size
    out = []
    for chain in range(config.chains):
        rng = make_rng(config.seed, chain)
        u0 = u_init + rng.uniform(-init_jitter, init_jitter, d)
        lp, _ = _lp_unconstrained(logp, data, u0, kinds, sizes, n_con)
        for _ in range(100):
            if np.isfinite(lp):
                break
            u0 = rng.uniform(-1.0, 1.0, d)
            lp, _ = _lp_unconstrained(logp, data, u0, kinds, sizes, n_con)
        z = rng.standard_normal((config.iterations, d))
        unif = rng.random(config.iterations)
        n_steps = rng.integers(1, config.max_leapfrog_steps + 1, config.iterations)
        out.append(
            _run_chain(
                logp, data, kinds, sizes, n_con, u0,
                config.warmup, config.target_accept, z, unif, n_steps,
            )
        )

    result = PosteriorSamples(
        names=transform.names,
        draws=np.stack([o[0] for o in out]),
        accept_stat=np.stack([o[1] for o in out]),
        divergent=np.stack([o[2] for o in out]),
        step_size=np.array([o[3] for o in out]),
        inv_metric=np.stack([o[4] for o in out]),
        warmup=config.warmup,
    )
    frac = result.n_divergent / result.divergent.size
    if frac > 0.01:
        msg = f"{result.n_divergent} divergent transitions ({frac:.1%}) after warmup"
        result.warnings.append(msg)
        logger.warning(msg)
    return result


# ---------------------------------------------------------------------------
# diagnostics and summaries
# ---------------------------------------------------------------------------


def split_rhat(chains):
    """Split-chain potential scale reduction for a (chain, draw) array."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("split R-hat needs >= 2 chains of >= 4 draws")
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = parts.shape[1]
    within = parts.var(axis=1, ddof=1).mean()
    between = n * parts.mean(axis=1).var(ddof=1)
    if within == 0:
        if between == 0:
            warnings.warn("all chains are constant", DegenerateRhatWarning, stacklevel=2)
            return 1.0
        return np.inf
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def rhat(samples, parameter):
    return split_rhat(samples[parameter])


def hdi(draws, prob=0.95):
    """Shortest interval containing ``prob`` of the draws."""
    x = np.sort(np.asarray(draws, dtype=float).reshape(-1))
    n = x.size
    k = int(math.ceil(prob * n))
    if k >= n:
        return float(x[0]), float(x[-1])
    widths = x[k - 1:] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


class Summary(NamedTuple):
    median: float
    mean: float
    sd: float
    ci95: tuple
    hdi95: tuple


def summarize(samples, parameter=None):
    """Median, mean, sd, central 95% interval and 95% HDI.

    ``samples`` may be a :class:`PosteriorSamples` (with ``parameter``) or a
    plain array of draws.
    """
    x = samples if parameter is None else samples[parameter]
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size < 100:
        raise ValueError(f"need at least 100 draws to summarize, got {x.size}")
    lo, hi = np.quantile(x, [0.025, 0.975])
    return Summary(
        median=float(np.median(x)),
        mean=float(x.mean()),
        sd=float(x.std(ddof=1)),
        ci95=(float(lo), float(hi)),
        hdi95=hdi(x, 0.95),
    )
