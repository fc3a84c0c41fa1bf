"""Simulation study: Latin-hypercube sweeps, synthetic cohorts, diagnostics.

Each parameter combination is simulated ``n_reps`` times, fitted with the
matching mixture model and scored for bias, HDI coverage, R-hat and the
diagnostic accuracy of per-lesion posterior odds against the true labels.
"""

import csv
import dataclasses
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc, rankdata

from . import hmc, models
from .distributions import make_rng

logger = logging.getLogger(__name__)

__all__ = [
    "ParamRange",
    "MEDIAN_RANGES",
    "HABITAT_RANGES",
    "HABITAT_MU0",
    "HABITAT_MU1",
    "SimResult",
    "Accuracy",
    "BiasUndefinedWarning",
    "latin_hypercube",
    "derive_model_params",
    "simulate_median",
    "simulate_habitat",
    "bias_pct",
    "coverage_flag",
    "coverage_pct",
    "diagnostic_accuracy",
    "true_parameters",
    "run_study",
    "read_results",
    "aggregate",
    "RESULT_COLUMNS",
]


@dataclass(frozen=True)
class ParamRange:
    name: str
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"{self.name}: lower > upper")

    @property
    def fixed(self):
        return self.lower == self.upper

    @classmethod
    def at(cls, name, value):
        return cls(name, value, value)


MEDIAN_RANGES = (
    ParamRange("lambda", 0.4, 0.95),
    ParamRange("eta", 0.6, 0.99),
    ParamRange("icc", 0.6, 0.99),
    ParamRange("mu_delta", -0.5, 2.0),
    ParamRange.at("mu0", 1.0),
    ParamRange.at("sigma", 0.05),
)

HABITAT_RANGES = (
    ParamRange("lambda", 0.4, 0.95),
    ParamRange("eta", 0.6, 0.99),
    ParamRange.at("tau", 11.54),
    ParamRange.at("mu_v", 6.37),
    ParamRange.at("sigma_v", 1.38),
)

HABITAT_MU0 = (0.1, 0.8, 0.1)
# the tabulated centre (0.01, 0.54, 0.36) sums to 0.91; renormalised
HABITAT_MU1 = tuple(np.array([0.01, 0.54, 0.36]) / 0.91)


def latin_hypercube(ranges, n, seed=0):
    """``n`` stratified combinations; fixed ranges stay constant."""
    if n < 1:
        raise ValueError("n must be >= 1")
    free = [r for r in ranges if not r.fixed]
    out = [{r.name: float(r.lower) for r in ranges if r.fixed} for _ in range(n)]
    if free:
        rng = make_rng(seed, 0x145)
        unit = qmc.LatinHypercube(d=len(free), seed=rng).random(n)
        for j, r in enumerate(free):
            col = r.lower + unit[:, j] * (r.upper - r.lower)
            for i in range(n):
                out[i][r.name] = float(col[i])
    return [{r.name: c[r.name] for r in ranges} for c in out]


def derive_model_params(combo, model="median"):
    """Generative parameters implied by a table combination."""
    p = dict(combo)
    eta = p["eta"]
    if model == "median":
        icc = p["icc"]
        if not (0 <= eta < 1 and 0 <= icc < 1):
            raise ValueError("eta and icc must lie in [0, 1)")
        s = p["sigma"]
        p["sigma_delta"] = s * math.sqrt(2.0 * eta / (1.0 - eta))
        p["sigma0"] = s * math.sqrt(icc / (1.0 - icc))
    elif model == "habitat":
        if not 0 < eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        p["tau1"] = p["tau"] * (1.0 - eta) / eta
        p.setdefault("mu0", HABITAT_MU0)
        p.setdefault("mu1", HABITAT_MU1)
    else:
        raise ValueError(f"unknown model {model!r}")
    return p


def simulate_median(params, n_baseline=73, n_lesions=100, seed=0):
    """Synthetic repeat-baseline pairs and pre/post pairs with true labels.

    ``params`` needs ``mu0, sigma, sigma0, sigma_delta, mu_delta, lambda``
    (:func:`derive_model_params` fills the SDs from ``eta``/``icc``).
    """
    if n_baseline < 1 or n_lesions < 1:
        raise ValueError("sizes must be >= 1")
    if "sigma0" not in params or "sigma_delta" not in params:
        params = derive_model_params(params, "median")
    rng = make_rng(seed, 0x5d)
    mu0, s, s0 = params["mu0"], params["sigma"], params["sigma0"]
    x0 = rng.normal(mu0, s0, n_baseline)
    yb1 = x0 + rng.normal(0.0, s, n_baseline)
    yb2 = x0 + rng.normal(0.0, s, n_baseline)
    xp = rng.normal(mu0, s0, n_lesions)
    labels = rng.uniform(0.0, 1.0, n_lesions) < params["lambda"]
    moved = rng.normal(xp + params["mu_delta"], params["sigma_delta"])
    x1 = np.where(labels, moved, xp)
    yp1 = xp + rng.normal(0.0, s, n_lesions)
    yp2 = x1 + rng.normal(0.0, s, n_lesions)
    return models.MedianAdcDataset(yb1, yb2, yp1, yp2), labels


def _voxel_counts(rng, mu_v, sigma_v, n):
    return np.maximum(1, np.rint(rng.lognormal(mu_v, sigma_v, n))).astype(np.int64)


def simulate_habitat(params, n_baseline=73, n_lesions=100, seed=0):
    """Synthetic habitat counts with true labels.

    Each row draws ``N_v`` from a rounded log-normal, a simplex from the
    null ``Dir(mu0, tau)`` or, for changed lesions, ``Dir(mu1, tau1)``, and
    counts from the multinomial.
    """
    if n_baseline < 1 or n_lesions < 1:
        raise ValueError("sizes must be >= 1")
    if "tau1" not in params:
        params = derive_model_params(params, "habitat")
    rng = make_rng(seed, 0x4ab)
    mu0 = np.asarray(params.get("mu0", HABITAT_MU0), dtype=float)
    mu1 = np.asarray(params.get("mu1", HABITAT_MU1), dtype=float)
    tau, tau1 = params["tau"], params["tau1"]
    mu_v, sigma_v = params.get("mu_v", 6.37), params.get("sigma_v", 1.38)

    nb_v = _voxel_counts(rng, mu_v, sigma_v, n_baseline)
    yb = np.array([rng.multinomial(n, rng.dirichlet(tau * mu0)) for n in nb_v])
    labels = rng.uniform(0.0, 1.0, n_lesions) < params["lambda"]
    np_v = _voxel_counts(rng, mu_v, sigma_v, n_lesions)
    yp = np.empty((n_lesions, mu0.size), dtype=np.int64)
    for i in range(n_lesions):
        x = rng.dirichlet(tau1 * mu1) if labels[i] else rng.dirichlet(tau * mu0)
        # tiny concentrations can leave round-off off the simplex
        yp[i] = rng.multinomial(np_v[i], x / x.sum())
    return models.HabitatDataset(yb, yp, mu0), labels


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


class BiasUndefinedWarning(UserWarning):
    """Percentage bias requested for a true value of zero."""


def bias_pct(true_value, posterior):
    """Percentage bias of the posterior median.

    ``posterior`` is an array of draws or an already computed median. A true
    value of zero has no percentage bias; the absolute bias is returned and a
    :class:`BiasUndefinedWarning` is issued.
    """
    med = float(np.median(posterior))
    if true_value == 0:
        warnings.warn("true value is 0; returning absolute bias", BiasUndefinedWarning,
                      stacklevel=2)
        return med
    return 100.0 * (med - true_value) / true_value


def coverage_flag(true_value, posterior, level=0.95, interval="hdi"):
    """Whether ``true_value`` lies inside the posterior HDI (or central interval)."""
    draws = np.asarray(posterior, dtype=float).reshape(-1)
    if draws.size == 0:
        raise ValueError("posterior is empty")
    if interval == "hdi":
        lo, hi = hmc.hdi(draws, level)
    elif interval == "central":
        lo, hi = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2])
    else:
        raise ValueError("interval must be 'hdi' or 'central'")
    return bool(lo <= true_value <= hi)


def coverage_pct(flags):
    flags = np.asarray(flags, dtype=bool)
    return float(100.0 * flags.mean()) if flags.size else float("nan")


@dataclass(frozen=True)
class Accuracy:
    sensitivity: float
    specificity: float
    auc: float
    flags: tuple = ()


def diagnostic_accuracy(labels, log_po):
    """Sensitivity/specificity at ``PO > 1`` and rank-sum AUC.

    Undefined metrics (no positives or no negatives) are NaN and named in
    ``flags``.
    """
    y = np.asarray(labels, dtype=bool).reshape(-1)
    s = np.asarray(log_po, dtype=float).reshape(-1)
    if y.size != s.size:
        raise ValueError("labels and scores differ in length")
    pred = s > 0
    n1 = int(y.sum())
    n0 = y.size - n1
    flags = []
    if n1:
        sens = float(np.count_nonzero(pred & y) / n1)
    else:
        sens = float("nan")
        flags.append("sensitivity")
    if n0:
        spec = float(np.count_nonzero(~pred & ~y) / n0)
    else:
        spec = float("nan")
        flags.append("specificity")
    if n1 and n0:
        ranks = rankdata(s)
        auc = float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))
    else:
        auc = float("nan")
        flags.append("auc")
    return Accuracy(sens, spec, auc, tuple(flags))


# ---------------------------------------------------------------------------
# study driver
# ---------------------------------------------------------------------------


RESULT_COLUMNS = (
    "combo", "rep", "param", "true", "median", "bias_pct", "covered",
    "rhat_max", "sens", "spec", "auc", "seconds",
)


@dataclass
class SimResult:
    combo: int
    rep: int
    combo_params: dict
    true: dict
    median: dict = field(default_factory=dict)
    bias_pct: dict = field(default_factory=dict)
    covered: dict = field(default_factory=dict)
    covered_central: dict = field(default_factory=dict)
    rhat_max: float = float("nan")
    sensitivity: float = float("nan")
    specificity: float = float("nan")
    auc: float = float("nan")
    seconds: float = float("nan")
    error: str = ""

    def rows(self, timing=False):
        for name, t in self.true.items():
            yield {
                "combo": self.combo,
                "rep": self.rep,
                "param": name,
                "true": t,
                "median": self.median.get(name, ""),
                "bias_pct": self.bias_pct.get(name, ""),
                "covered": int(self.covered[name]) if name in self.covered else "",
                "rhat_max": self.rhat_max,
                "sens": self.sensitivity,
                "spec": self.specificity,
                "auc": self.auc,
                "seconds": self.seconds if timing else "",
            }


def true_parameters(model, params):
    """True values keyed by the fitted parameter names."""
    if model == "median":
        return {
            "sdr": params["sigma"],
            "sd0": params["sigma0"],
            "sdd": params["sigma_delta"],
            "mu0": params["mu0"],
            "mud": params["mu_delta"],
            "lambda": params["lambda"],
        }
    mu1 = params.get("mu1", HABITAT_MU1)
    out = {"prec": params["tau"], "conc": params["tau1"]}
    out.update({f"mu1[{i + 1}]": float(v) for i, v in enumerate(mu1)})
    out["lambda"] = params["lambda"]
    return out


def _one_rep(task):
    model, combo_id, rep, combo, n_baseline, n_lesions, config, seed = task
    params = derive_model_params(combo, model)
    truth = true_parameters(model, params)
    res = SimResult(combo_id, rep, dict(combo), truth)
    start = time.perf_counter()
    rep_seed = int(make_rng(seed, combo_id, rep).integers(2 ** 63))
    try:
        simulate = simulate_median if model == "median" else simulate_habitat
        data, labels = simulate(params, n_baseline, n_lesions, seed=rep_seed)
        samples = models.fit(model, data, config=dataclasses.replace(config, seed=rep_seed))
        for name, t in truth.items():
            draws = samples.pooled(name)
            res.median[name] = float(np.median(draws))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", BiasUndefinedWarning)
                res.bias_pct[name] = bias_pct(t, draws)
            res.covered[name] = coverage_flag(t, draws)
            res.covered_central[name] = coverage_flag(t, draws, interval="central")
        res.rhat_max = max(samples.rhat.values()) if samples.rhat else float("nan")
        z = models.sample_labels(samples, data, model, seed=rep_seed)
        log_po = [math.log(max(models.posterior_odds(z, i), 1e-300)) for i in range(data.n_lesions)]
        acc = diagnostic_accuracy(labels, log_po)
        res.sensitivity, res.specificity, res.auc = acc.sensitivity, acc.specificity, acc.auc
    except Exception as exc:  # record and carry on with the study
        logger.error("combo %d rep %d failed: %s", combo_id, rep, exc)
        res.error = f"{type(exc).__name__}: {exc}"
    res.seconds = time.perf_counter() - start
    return res


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def run_study(model="median", n_combos=50, n_reps=10, n_baseline=73, n_lesions=100,
              config=None, seed=0, out_path=None, ranges=None, jobs=1, timing=False,
              progress=None):
    """Simulate, fit and score every combination x repetition.

    Rows are appended to ``out_path`` (if given) as each task completes, in
    task order, so a partially finished study still leaves usable output.
    Returns the list of :class:`SimResult`.
    """
    if model not in ("median", "habitat"):
        raise ValueError(f"unknown model {model!r}")
    config = config or hmc.SamplerConfig()
    ranges = ranges or (MEDIAN_RANGES if model == "median" else HABITAT_RANGES)
    combos = latin_hypercube(ranges, n_combos, seed)
    tasks = [
        (model, c, r, combos[c], n_baseline, n_lesions, config, seed)
        for c in range(n_combos)
        for r in range(n_reps)
    ]
    results = []
    fh = writer = None
    if out_path is not None:
        fh = open(out_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
    try:
        if jobs > 1:
            pool = ProcessPoolExecutor(max_workers=jobs)
            stream = pool.map(_one_rep, tasks)
        else:
            pool = None
            stream = map(_one_rep, tasks)
        for k, res in enumerate(stream):
            results.append(res)
            if writer is not None:
                for row in res.rows(timing):
                    writer.writerow({c: _fmt(v) for c, v in row.items()})
                fh.flush()
            if progress is not None:
                progress(k + 1, len(tasks), res)
        if pool is not None:
            pool.shutdown()
    finally:
        if fh is not None:
            fh.close()
    return results


def read_results(path):
    """Load a results CSV back into a list of row dicts with numeric fields."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if k == "param":
                    rec[k] = v
                elif v == "":
                    rec[k] = float("nan")
                elif k in ("combo", "rep", "covered"):
                    rec[k] = int(v)
                else:
                    rec[k] = float(v)
            out.append(rec)
    return out


def aggregate(results):
    """Per-combination summaries in the style of the study figures.

    Returns one dict per combo with mean bias%, HDI coverage% per parameter,
    the largest R-hat and mean sensitivity/specificity/AUC over repetitions.
    """
    by_combo = {}
    for r in results:
        by_combo.setdefault(r.combo, []).append(r)
    out = []
    for combo, reps in sorted(by_combo.items()):
        ok = [r for r in reps if not r.error]
        row = {"combo": combo, **reps[0].combo_params, "n_ok": len(ok), "n_failed": len(reps) - len(ok)}
        for name in reps[0].true:
            row[f"bias_pct[{name}]"] = float(np.mean([r.bias_pct[name] for r in ok])) if ok else math.nan
            row[f"coverage_pct[{name}]"] = coverage_pct([r.covered[name] for r in ok])
        row["rhat_max"] = max((r.rhat_max for r in ok), default=math.nan)
        for key in ("sensitivity", "specificity", "auc"):
            vals = [getattr(r, key) for r in ok if not math.isnan(getattr(r, key))]
            row[key] = float(np.mean(vals)) if vals else math.nan
        out.append(row)
    return out
