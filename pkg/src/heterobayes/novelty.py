"""Posterior-predictive novelty detection under the no-change model.

A lesion's follow-up measurement is compared with predictive draws generated
as if nothing had changed. A density is fitted to those draws, its mode is
located, and each point is scored by the kernel distance
``D(y) = |p(mode) - p(y)|``. The ``1 - alpha`` percentile of ``D`` over the
predictive draws bounds the credible region, and a measurement with a
larger distance is flagged as anomalous.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import digamma, gammaln, logsumexp, polygamma

from . import hmc
from .distributions import make_rng
from .ingest import barycentric, from_barycentric

logger = logging.getLogger(__name__)

__all__ = [
    "ConvergenceError",
    "PredictiveSamples",
    "GaussianKDE",
    "DirichletMixture",
    "Box",
    "SimplexDomain",
    "CredibleRegion",
    "predictive_sample_m0",
    "smooth_counts",
    "gaussian_kde",
    "silverman_bandwidth",
    "dirichlet_mixture_em",
    "find_mode",
    "kernel_distance",
    "credible_region",
    "is_anomaly",
    "boundary_polyline",
    "write_boundary_csv",
]

MIN_PREDICTIVE_DRAWS = 100
COUNT_SMOOTHING = 0.5


# ---------------------------------------------------------------------------
# predictive draws
# ---------------------------------------------------------------------------


@dataclass
class PredictiveSamples:
    """Predictive measurements, one per retained posterior draw.

    ``kind`` is ``"scalar"`` for the median model and ``"counts"`` for the
    habitat model, in which case ``draws`` has shape (S, K).
    """

    draws: np.ndarray
    kind: str = "scalar"
    lesion: int = None
    baseline_value: object = None

    def __len__(self):
        return len(self.draws)

    def points(self):
        """Draws in the space the density is fitted in."""
        if self.kind == "counts":
            return smooth_counts(self.draws)
        return np.asarray(self.draws, dtype=float)


def smooth_counts(counts, pseudo=COUNT_SMOOTHING):
    """Counts to interior simplex points by adding ``pseudo`` to every bin."""
    c = np.asarray(counts, dtype=float) + pseudo
    return c / c.sum(axis=-1, keepdims=True)


def _lesion_index(data, lesion):
    n = data.n_lesions
    if isinstance(lesion, (int, np.integer)):
        if not 0 <= lesion < n:
            raise IndexError(f"lesion index {lesion} out of range for {n} lesions")
        return int(lesion)
    key = tuple(str(v) for v in lesion)
    try:
        return list(data.lesion_ids).index(key)
    except ValueError:
        raise KeyError(f"unknown lesion {key}") from None


class ConvergenceError(RuntimeError):
    """Predictive draws requested from a fit with R-hat warnings."""


def _check_converged(samples, force):
    if force:
        return
    bad = [w for w in samples.warnings if w.startswith("R-hat")]
    if bad:
        raise ConvergenceError(f"fit has not converged ({bad[0]}); pass force=True to override")


def predictive_sample_m0(samples, model, data, lesion, seed=0, force=False):
    """No-change predictive draws for one lesion's follow-up measurement.

    Median model: ``y = y0 + N(0, sqrt(2) * sdr)`` with ``y0`` the lesion's
    pre-treatment value. Habitat model: ``x ~ Dir(mu0, prec)`` then
    ``y ~ Mult(x, N_v)`` with ``N_v`` the lesion's follow-up voxel count.
    An infinite ``prec`` draw collapses to ``x = mu0``.
    """
    _check_converged(samples, force)
    i = _lesion_index(data, lesion)
    rng = make_rng(seed, 0x9ed, i)
    if model == "median":
        y0 = float(data.yp1[i])
        sdr = samples.pooled("sdr")
        return PredictiveSamples(
            y0 + math.sqrt(2.0) * sdr * rng.standard_normal(sdr.size),
            kind="scalar", lesion=i, baseline_value=y0,
        )
    if model == "habitat":
        n_v = int(data.yp[i].sum())
        prec = samples.pooled("prec")
        x = np.empty((prec.size, data.k))
        for s, t in enumerate(prec):
            x[s] = data.mu0 if math.isinf(t) else rng.dirichlet(t * data.mu0)
        return PredictiveSamples(
            rng.multinomial(n_v, x), kind="counts", lesion=i, baseline_value=data.mu0
        )
    raise ValueError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# density estimators
# ---------------------------------------------------------------------------


@dataclass
class GaussianKDE:
    """Isotropic Gaussian kernel density estimate."""

    points: np.ndarray
    bandwidth: float
    kind: str = "gaussian-kde"

    @property
    def dim(self):
        return self.points.shape[1]

    def evaluate(self, y, chunk=2048):
        y = np.asarray(y, dtype=float)
        scalar = y.ndim == 0 or (y.ndim == 1 and self.dim > 1 and y.size == self.dim)
        y = y.reshape(-1, self.dim)
        h = self.bandwidth
        norm = (2.0 * math.pi * h * h) ** (-0.5 * self.dim) / len(self.points)
        out = np.empty(len(y))
        p2 = np.sum(self.points ** 2, axis=1)
        for a in range(0, len(y), chunk):
            q = y[a:a + chunk]
            d2 = np.sum(q ** 2, axis=1)[:, None] + p2[None, :] - 2.0 * q @ self.points.T
            out[a:a + chunk] = norm * np.exp(-0.5 * np.maximum(d2, 0.0) / (h * h)).sum(axis=1)
        return float(out[0]) if scalar else out

    __call__ = evaluate

    def default_domain(self):
        pad = 3.0 * self.bandwidth
        return Box(self.points.min(axis=0) - pad, self.points.max(axis=0) + pad)


def silverman_bandwidth(points):
    """Isotropic rule-of-thumb bandwidth, ``(4 / (d + 2)) ** (1/(d+4)) * n ** (-1/(d+4)) * s``."""
    x = np.asarray(points, dtype=float)
    x = x.reshape(len(x), -1)
    n, d = x.shape
    s = float(np.mean(x.std(axis=0, ddof=1)))
    return (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0)) * s


def gaussian_kde(points, bandwidth=None):
    """Fit an isotropic KDE; ``bandwidth=None`` uses Silverman's rule."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 0 or len(x) < 1:
        raise ValueError("need at least one point")
    x = x.reshape(len(x), -1)
    if bandwidth is None:
        if len(x) < 2:
            raise ValueError("Silverman bandwidth needs at least two points")
        bandwidth = silverman_bandwidth(x)
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    return GaussianKDE(x.copy(), float(bandwidth))


def _dirichlet_logpdf_rows(logx, alpha):
    """log Dir(x | alpha) for rows of ``log x``; ``alpha`` is (M, K) -> (N, M)."""
    a0 = alpha.sum(axis=1)
    norm = gammaln(a0) - gammaln(alpha).sum(axis=1)
    return norm[None, :] + logx @ (alpha - 1.0).T


@dataclass
class DirichletMixture:
    """Finite mixture of Dirichlets in mean/precision form."""

    weights: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    loglik_history: list = field(default_factory=list)
    n_iter: int = 0
    reseeds: int = 0
    kind: str = "dirichlet-mixture"

    @property
    def dim(self):
        return self.mu.shape[1]

    @property
    def alpha(self):
        return self.mu * self.tau[:, None]

    def _logx(self, y):
        y = np.asarray(y, dtype=float)
        scalar = y.ndim == 1
        y = y.reshape(-1, self.dim)
        with np.errstate(divide="ignore"):
            return np.log(y), scalar, np.all(y > 0, axis=1)

    def component_logpdf(self, y):
        logx, _, inside = self._logx(y)
        out = _dirichlet_logpdf_rows(np.where(inside[:, None], logx, 0.0), self.alpha)
        out[~inside] = -np.inf
        return out

    def logpdf(self, y):
        logx, scalar, _ = self._logx(y)
        comp = self.component_logpdf(y) + np.log(self.weights)[None, :]
        out = logsumexp(comp, axis=1)
        return float(out[0]) if scalar else out

    def evaluate(self, y):
        return np.exp(self.logpdf(y))

    __call__ = evaluate

    def default_domain(self):
        return SimplexDomain(self.dim)


def _inv_digamma(y, iters=6):
    """Inverse digamma by Newton's method from Minka's starting point."""
    y = np.asarray(y, dtype=float)
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y - digamma(1.0)))
    for _ in range(iters):
        x = x - (digamma(x) - y) / polygamma(1, x)
    return x


def _dirichlet_mle_step(alpha, mean_logx, iters=50, tol=1e-12):
    """Fixed-point updates of ``alpha`` towards the weighted Dirichlet MLE.

    Each update cannot decrease the weighted log-likelihood, so starting from
    the previous estimate keeps the overall EM monotone.
    """
    for _ in range(iters):
        new = _inv_digamma(digamma(alpha.sum()) + mean_logx)
        done = np.max(np.abs(new - alpha) / alpha) < tol
        alpha = new
        if done:
            break
    return alpha


def _moment_alpha(x, w):
    """Method-of-moments Dirichlet parameters from weighted points."""
    w = w / w.sum()
    m = w @ x
    v = w @ (x - m) ** 2
    ratio = m * (1 - m) / np.maximum(v, 1e-12) - 1.0
    tau = float(np.clip(np.median(ratio), 1e-2, 1e5))
    return np.maximum(m, 1e-8) * tau


def dirichlet_mixture_em(points, n_components=5, seed=0, max_iter=500, tol=1e-8,
                         max_reseeds=None, tau_max=1e6):
    """Fit a mixture of Dirichlets by expectation maximization.

    Initial centres are picked from the data k-means++ style; components are
    then initialised by weighted moments. The M-step updates each
    component's concentration vector with warm-started fixed-point
    iterations, so the observed-data log-likelihood never decreases.
    Iteration stops once the relative improvement falls below ``tol``.

    A component whose weight vanishes or whose precision exceeds
    ``tau_max`` is re-seeded at the worst-fitting point; more than
    ``max_reseeds`` (default ``10 * n_components``) re-seeds raise
    ``RuntimeError``.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("points must be an (N, K) array of simplexes, K >= 2")
    n, k = x.shape
    m = int(n_components)
    if m < 1 or n < 10 * m:
        raise ValueError(f"need at least {10 * m} points for {m} components, got {n}")
    if np.any(x <= 0) or np.any(np.abs(x.sum(axis=1) - 1) > 1e-9):
        raise ValueError("points must lie strictly inside the simplex")
    if max_reseeds is None:
        max_reseeds = 10 * m
    rng = make_rng(seed, 0xe3)
    logx = np.log(x)

    # k-means++ centres in log-ratio coordinates
    z = logx - logx.mean(axis=1, keepdims=True)
    centres = [int(rng.integers(n))]
    d2 = np.sum((z - z[centres[0]]) ** 2, axis=1)
    for _ in range(1, m):
        c = int(rng.choice(n, p=d2 / d2.sum())) if d2.sum() > 0 else int(rng.integers(n))
        centres.append(c)
        d2 = np.minimum(d2, np.sum((z - z[c]) ** 2, axis=1))
    nearest = np.argmin(
        np.stack([np.sum((z - z[c]) ** 2, axis=1) for c in centres], axis=1), axis=1
    )
    alpha = np.empty((m, k))
    weights = np.empty(m)
    for j in range(m):
        member = (nearest == j).astype(float) + 1e-3
        alpha[j] = _moment_alpha(x, member)
        weights[j] = member.sum()
    weights /= weights.sum()

    history = []
    reseeds = 0
    prev = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        comp = _dirichlet_logpdf_rows(logx, alpha) + np.log(weights)[None, :]
        total = logsumexp(comp, axis=1)
        ll = float(total.sum())
        history.append(ll)
        if it > 1 and abs(ll - prev) <= tol * abs(ll):
            break
        prev = ll
        resp = np.exp(comp - total[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        for j in range(m):
            tau_j = alpha[j].sum()
            if nk[j] < 1e-8 * n or not tau_j < tau_max:
                reseeds += 1
                if reseeds > max_reseeds:
                    raise RuntimeError(f"Dirichlet mixture EM: {reseeds} component re-seeds")
                worst = int(np.argmin(total))
                logger.info("re-seeding component %d at point %d", j, worst)
                alpha[j] = x[worst] * np.median(alpha.sum(axis=1))
                weights[j] = 1.0 / n
                history = []  # monotonicity restarts after a re-seed
                prev = -np.inf
                continue
            alpha[j] = _dirichlet_mle_step(alpha[j], resp[:, j] @ logx / nk[j])
        weights /= weights.sum()

    tau = alpha.sum(axis=1)
    return DirichletMixture(
        weights=weights, mu=alpha / tau[:, None], tau=tau,
        loglik_history=history, n_iter=it, reseeds=reseeds,
    )


# ---------------------------------------------------------------------------
# mode finding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def grid(self, per_dim=25):
        axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(np.atleast_1d(self.lower),
                                                                np.atleast_1d(self.upper))]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in mesh], axis=1)


@dataclass(frozen=True)
class SimplexDomain:
    k: int

    def grid(self, resolution=60):
        """Interior barycentric lattice points (all coordinates >= 1/resolution)."""
        if self.k == 2:
            i = np.arange(1, resolution)
            return np.column_stack([i, resolution - i]) / resolution
        pts = []

        def rec(prefix, remaining, slots):
            if slots == 1:
                if remaining >= 1:
                    pts.append(prefix + [remaining])
                return
            for v in range(1, remaining - slots + 2):
                rec(prefix + [v], remaining - v, slots - 1)

        rec([], resolution, self.k)
        return np.array(pts, dtype=float) / resolution


def _simplex_transform(k):
    return hmc.TransformSpec((("x", "simplex", k),))


def find_mode(density, domain=None, grid_size=None):
    """Grid search followed by Nelder-Mead refinement of the density maximum.

    ``domain`` is a :class:`Box` or :class:`SimplexDomain`; by default the
    estimator supplies one. On the simplex the search runs in stick-breaking
    coordinates so every trial point stays inside the domain.
    """
    domain = domain or density.default_domain()
    if isinstance(domain, SimplexDomain):
        grid = domain.grid(grid_size or 60)
    else:
        d = np.atleast_1d(domain.lower).size
        grid = domain.grid(grid_size or (200 if d == 1 else 25))
    values = np.asarray(density.evaluate(grid), dtype=float)
    ok = np.isfinite(values)
    if not ok.any():
        raise ValueError("density is non-finite on the whole search grid")
    start = grid[np.argmax(np.where(ok, values, -np.inf))]

    if isinstance(domain, SimplexDomain):
        spec = _simplex_transform(domain.k)

        def to_point(u):
            return spec.constrain(np.asarray(u, float))[0]

        u0 = spec.unconstrain(start)
    else:

        def to_point(u):
            return np.asarray(u, float)

        u0 = np.asarray(start, float)

    def objective(u):
        p = float(np.ravel(density.evaluate(to_point(u)[None, :]))[0])
        return -math.log(p) if p > 0 else np.inf

    res = optimize.minimize(
        objective, u0, method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000 * u0.size},
    )
    best = to_point(res.x) if res.fun <= objective(u0) else to_point(u0)
    return best


# ---------------------------------------------------------------------------
# credible region
# ---------------------------------------------------------------------------


def _density_at(density, y):
    y = np.asarray(y, dtype=float).reshape(-1, density.dim)
    return np.asarray(density.evaluate(y), dtype=float).reshape(-1)


def kernel_distance(density, mode, y):
    """``|p(mode) - p(y)|``; scalar for one point, array for several."""
    peak = _density_at(density, mode)[0]
    y = np.asarray(y, dtype=float)
    d = np.abs(peak - _density_at(density, y))
    single = y.ndim == 0 or (y.ndim == 1 and y.size == density.dim)
    return float(d[0]) if single else d


@dataclass
class CredibleRegion:
    density: object
    mode: np.ndarray
    threshold: float
    alpha: float
    kind: str = "scalar"

    @property
    def mode_density(self):
        return float(_density_at(self.density, self.mode)[0])

    def prepare(self, y):
        """Map a raw measurement into the density's space."""
        return smooth_counts(y) if self.kind == "counts" else np.asarray(y, dtype=float)

    def distance(self, y):
        return kernel_distance(self.density, self.mode, self.prepare(y))

    def contains(self, y):
        return np.asarray(self.distance(y)) <= self.threshold


def credible_region(pred, alpha=0.05, estimator=None, bandwidth=None, n_components=5,
                    seed=0):
    """Fit a density to predictive draws and threshold their kernel distances.

    ``estimator`` is ``"kde"`` or ``"dirichlet-mixture"``; by default count
    draws use a Dirichlet mixture and real-valued draws a Gaussian KDE.
    ``pred`` may also be a raw array of real-valued draws.
    """
    if not isinstance(pred, PredictiveSamples):
        pred = PredictiveSamples(np.asarray(pred, dtype=float))
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if len(pred) < MIN_PREDICTIVE_DRAWS:
        raise ValueError(f"need at least {MIN_PREDICTIVE_DRAWS} predictive draws, got {len(pred)}")
    pts = pred.points()
    if estimator is None:
        estimator = "dirichlet-mixture" if pred.kind == "counts" else "kde"
    if estimator == "kde":
        density = gaussian_kde(pts, bandwidth)
    elif estimator == "dirichlet-mixture":
        density = dirichlet_mixture_em(pts, n_components=n_components, seed=seed)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    mode = find_mode(density)
    dist = kernel_distance(density, mode, pts.reshape(len(pts), -1))
    threshold = float(np.percentile(dist, 100.0 * (1.0 - alpha)))
    return CredibleRegion(density, np.atleast_1d(mode), threshold, alpha, pred.kind)


def is_anomaly(region, y1):
    """True when ``y1`` lies outside the credible region."""
    d = region.distance(y1)
    return bool(d > region.threshold) if np.ndim(d) == 0 else d > region.threshold


# ---------------------------------------------------------------------------
# boundary export
# ---------------------------------------------------------------------------


def _ray_exit(inside, origin, direction, r_max, n_steps=200, iters=50):
    """First radius along a ray where ``inside`` turns false (or ``r_max``)."""
    radii = np.linspace(0.0, r_max, n_steps + 1)[1:]
    pts = origin[None, :] + radii[:, None] * direction[None, :]
    flags = inside(pts)
    out = np.flatnonzero(~flags)
    if out.size == 0:
        return r_max
    hi = radii[out[0]]
    lo = radii[out[0] - 1] if out[0] > 0 else 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if inside((origin + mid * direction)[None, :])[0]:
            lo = mid
        else:
            hi = mid
    return lo


def boundary_polyline(region, n_rays=360):
    """Region boundary traced by casting rays from the mode.

    Scalar regions return the two interval end points. Two-dimensional
    regions (a 2-D box or the 3-simplex, traced in its barycentric plane)
    return a closed polyline whose last vertex repeats the first; rays are
    clipped at the triangle edge. Non-star-shaped regions are traced by
    their first exit along each ray.
    """
    cut = region.mode_density - region.threshold
    dens = region.density

    if region.kind == "counts" or isinstance(dens, DirichletMixture):
        if dens.dim != 3:
            raise ValueError("boundary export supports the 3-simplex only")
        origin = np.asarray(barycentric(region.mode), dtype=float)

        def inside(p):
            s = from_barycentric(p)
            ok = np.all(s > 0, axis=1)
            val = np.full(len(p), -np.inf)
            if ok.any():
                val[ok] = _density_at(dens, s[ok])
            return ok & (val >= cut)

        r_max = 1.5
    else:
        origin = np.asarray(region.mode, dtype=float)
        if origin.size == 1:
            pts = dens.points.reshape(-1)
            span = 4.0 * (np.ptp(pts) + dens.bandwidth)
            inside1 = lambda p: _density_at(dens, p[:, :1]) >= cut  # noqa: E731
            lo = origin[0] - _ray_exit(inside1, origin, np.array([-1.0]), span)
            hi = origin[0] + _ray_exit(inside1, origin, np.array([1.0]), span)
            return np.array([[lo], [hi]])
        if origin.size != 2:
            raise ValueError("boundary export supports 1-D, 2-D and 3-simplex regions")

        def inside(p):
            return _density_at(dens, p) >= cut

        r_max = 4.0 * (np.ptp(dens.points, axis=0).max() + dens.bandwidth)

    angles = np.linspace(0.0, 2.0 * math.pi, n_rays, endpoint=False)
    poly = []
    for a in angles:
        direction = np.array([math.cos(a), math.sin(a)])
        if region.kind == "counts" or isinstance(dens, DirichletMixture):
            # stay inside the triangle
            limit = _ray_exit(
                lambda p: np.all(from_barycentric(p) >= 0, axis=1), origin, direction, r_max
            )
            r = _ray_exit(inside, origin, direction, limit)
        else:
            r = _ray_exit(inside, origin, direction, r_max)
        poly.append(origin + r * direction)
    poly.append(poly[0])
    return np.array(poly)


def write_boundary_csv(region, path, n_rays=360):
    """Write the boundary polyline; simplex regions also get ``c1..c3``."""
    poly = boundary_polyline(region, n_rays)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if poly.shape[1] == 1:
            w.writerow(["y"])
            w.writerows([[repr(float(v[0]))] for v in poly])
        elif region.kind == "counts" or isinstance(region.density, DirichletMixture):
            w.writerow(["x", "y", "c1", "c2", "c3"])
            simp = from_barycentric(poly)
            for p, s in zip(poly, simp):
                w.writerow([repr(float(v)) for v in (*p, *s)])
        else:
            w.writerow(["x", "y"])
            w.writerows([[repr(float(v)) for v in p] for p in poly])
    return poly
