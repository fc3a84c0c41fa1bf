"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical
failure (including convergence warnings under ``--strict``).
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analytic, hmc, ingest, models, novelty, simharness

logger = logging.getLogger("heterobayes")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "HETEROBAYES_SEED"


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj, fh=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if fh is None:
        sys.stdout.write(text)
    else:
        fh.write(text)


def _write_json(path, obj):
    with open(path, "w") as fh:
        _dump(obj, fh)


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _sampler_config(args):
    try:
        return hmc.SamplerConfig(
            chains=args.chains,
            iterations=args.iterations,
            warmup=args.warmup,
            target_accept=args.target_accept,
            max_leapfrog_steps=args.max_leapfrog,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# analytic
# ---------------------------------------------------------------------------


def _parse_pairs(text):
    try:
        pairs = [tuple(float(v) for v in chunk.split(",")) for chunk in text.split(";") if chunk.strip()]
    except ValueError:
        raise UsageError(f"cannot parse pairs {text!r}; expected 'y1,y2;y1,y2;...'") from None
    if not pairs or any(len(p) != 2 for p in pairs):
        raise UsageError("pairs must be 'y1,y2' separated by ';'")
    return np.array(pairs)


def _baseline_pairs(args):
    if args.pairs:
        return _parse_pairs(args.pairs)
    if args.input:
        data = ingest.load_median_csv(args.input, units=args.units, log=args.log)
        return np.column_stack([data.yb1, data.yb2])
    raise UsageError("give --pairs or --input")


def cmd_analytic(args):
    a = args.action
    try:
        if a == "rc":
            out = {"sigma": args.sigma, "rc": analytic.rc(args.sigma)}
        elif a == "icc":
            out = {"icc": analytic.icc(args.sigma0, args.sigma)}
        elif a == "cov":
            out = {"cov_pct": analytic.cov(args.sigma, args.mu0)}
        elif a == "sigma":
            est = analytic.repeatability(_baseline_pairs(args))
            out = {
                "sigma_hat": est.sigma_hat,
                "n_pairs": est.n_pairs,
                "icc": est.icc,
                "cov_pct": est.cov_pct,
                "rc": est.rc,
            }
        elif a == "predictive":
            sigma0 = math.inf if args.sigma0 == "inf" else float(args.sigma0)
            mu, sd = analytic.conditional_predictive_m0(args.y0, args.mu0, sigma0, args.sigma)
            out = {"icc": analytic.icc(sigma0, args.sigma), "mu_star": mu, "sigma_star": sd}
        elif a == "pvalue":
            pairs = _baseline_pairs(args)
            out = {"d": args.d, "n_pairs": len(pairs), "p_value": analytic.pvalue_change(args.d, pairs)}
        elif a == "bf":
            if (args.eta is None) == (args.sigma_delta is None):
                raise UsageError("give exactly one of --eta or --sigma-delta")
            if args.eta is not None:
                effect = analytic.EffectParams.from_eta(args.mu_delta, args.eta, args.sigma)
            else:
                effect = analytic.EffectParams(args.mu_delta, args.sigma_delta, args.sigma)
            lbf = analytic.log_bf10(args.dy, effect)
            bf = math.exp(lbf)
            out = {
                "log_bf10": lbf,
                "bf10": bf,
                "eta": effect.eta,
                "xi": effect.xi,
                "category": analytic.interpret_bf(max(bf, 5e-324)),
            }
        elif a == "expected-bf":
            which = [args.model] if args.model else ["M0", "M1"]
            out = {f"expected_log_bf_{m}": analytic.expected_log_bf(args.eta, args.xi, m) for m in which}
        elif a == "bf-interpret":
            out = {"bf": args.bf, "category": analytic.interpret_bf(args.bf)}
        else:  # pragma: no cover - argparse restricts the choices
            raise UsageError(f"unknown action {a}")
    except ingest.DataError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _dump(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _finish_fit(args, model, data, samples, out):
    labels = models.sample_labels(samples, data, model, seed=args.seed) if data.n_lesions else None
    summary = models.fit_summary(samples, labels, cap=args.po_cap)
    summary["model"] = model
    summary["seed"] = args.seed
    samples.to_csv(out / "samples.csv")
    _write_json(out / "summary.json", summary)
    with open(out / "rhat.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "rhat"])
        for name in samples.names:
            w.writerow([name, repr(float(samples.rhat.get(name, math.nan)))])
    if labels is not None:
        with open(out / "lesions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient", "lesion", "po", "log_po", "category", "label_fraction"])
            for row in summary["lesions"]:
                w.writerow([row["patient"], row["lesion"], repr(float(row["po"])), repr(float(row["log_po"])),
                            row["category"], repr(float(row["label_fraction"]))])
    if args.strict and samples.warnings:
        raise NumericalError("convergence warnings under --strict: " + "; ".join(samples.warnings))
    return summary


def cmd_fit_median(args):
    data = ingest.load_median_csv(args.input, units=args.units, log=args.log)
    priors = models.MedianAdcPriors(sd_prior=args.sd_prior, mu_prior=args.mu_prior)
    samples = models.fit("median", data, priors, _sampler_config(args))
    _finish_fit(args, "median", data, samples, _out_dir(args.out))
    return EXIT_OK


def _mu0_arg(text):
    try:
        mu0 = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"cannot parse --mu0 {text!r}") from None
    return mu0


def cmd_fit_habitat(args):
    data = ingest.load_habitat_csv(args.input, mu0=_mu0_arg(args.mu0))
    priors = models.HabitatPriors(prec_prior=args.prec_prior)
    samples = models.fit("habitat", data, priors, _sampler_config(args))
    out = _out_dir(args.out)
    summary = _finish_fit(args, "habitat", data, samples, out)
    lesions = summary.get("lesions", [])
    ingest.write_barycentric_csv(
        out / "barycentric.csv", data,
        po=[r["po"] for r in lesions] or None,
        categories=[r["category"] for r in lesions] or None,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# novelty
# ---------------------------------------------------------------------------


def _load_fit(fit_dir):
    fit_dir = Path(fit_dir)
    samples_path = fit_dir / "samples.csv"
    if not samples_path.exists():
        raise ingest.DataError(f"missing fit artifact {samples_path}")
    samples = hmc.PosteriorSamples.from_csv(samples_path)
    summary_path = fit_dir / "summary.json"
    if summary_path.exists():
        with open(summary_path) as fh:
            summary = json.load(fh)
        samples.warnings = list(summary.get("warnings", []))
    return samples


def _safe(text):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)


def cmd_novelty(args):
    if args.model == "median":
        data = ingest.load_median_csv(args.input, units=args.units, log=args.log)
    else:
        data = ingest.load_habitat_csv(args.input, mu0=_mu0_arg(args.mu0))
    if data.n_lesions == 0:
        raise ingest.DataError("no post-treatment lesions to score")
    samples = _load_fit(args.fit)
    out = _out_dir(args.out)
    wanted = range(data.n_lesions)
    if args.lesion:
        keys = [tuple(s.split("/", 1)) if "/" in s else ("", s) for s in args.lesion]
        try:
            wanted = [novelty._lesion_index(data, k) for k in keys]
        except (KeyError, IndexError) as exc:
            raise UsageError(f"--lesion: {exc}") from None
    try:
        with open(out / "anomalies.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient", "lesion", "kernel_distance", "threshold", "anomaly", "boundary"])
            for i in wanted:
                pred = novelty.predictive_sample_m0(
                    samples, args.model, data, i, seed=args.seed, force=args.force
                )
                region = novelty.credible_region(
                    pred, alpha=args.alpha, bandwidth=args.bandwidth,
                    n_components=args.components, seed=args.seed,
                )
                y1 = data.yp2[i] if args.model == "median" else data.yp[i]
                dist = float(region.distance(y1))
                patient, lesion = data.lesion_ids[i]
                bname = f"boundary_{_safe(patient)}_{_safe(lesion)}.csv" if patient else f"boundary_{_safe(lesion)}.csv"
                novelty.write_boundary_csv(region, out / bname, n_rays=args.rays)
                w.writerow([patient, lesion, repr(float(dist)), repr(float(region.threshold)),
                            int(dist > region.threshold), bname])
    except RuntimeError as exc:
        raise NumericalError(str(exc)) from None
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulation and sensitivity
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    combos, reps = (500, 20) if args.full else (args.combos, args.reps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def progress(k, total, res):
        logger.info("task %d/%d combo %d rep %d%s", k, total, res.combo, res.rep,
                    f" FAILED {res.error}" if res.error else "")

    results = simharness.run_study(
        model=args.model, n_combos=combos, n_reps=reps,
        n_baseline=args.n_baseline, n_lesions=args.n_lesions,
        config=_sampler_config(args), seed=args.seed, out_path=out,
        jobs=args.jobs, timing=args.timing, progress=progress,
    )
    agg = simharness.aggregate(results)
    summary_path = Path(args.summary) if args.summary else out.with_name(out.stem + "_summary.csv")
    keys = list(agg[0].keys()) if agg else []
    with open(summary_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in agg:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
    failed = sum(1 for r in results if r.error)
    if failed:
        logger.warning("%d of %d fits failed", failed, len(results))
    return EXIT_OK


SENSITIVITY_GRID = {
    "median": {"mu_prior": (0.01, 0.1, 1.0, 10.0, 100.0), "sd_prior": (0.1, 1.0, 5.0, 50.0)},
    "habitat": {"prec_prior": (1.0, 10.0, 50.0, 500.0)},
}
SENSITIVITY_PARAMS = {"median": ("sdr", "sd0", "mu0"), "habitat": ("prec",)}


def _grid_values(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"cannot parse grid {text!r}") from None


def cmd_sensitivity(args):
    model = args.model
    if model == "median":
        data = ingest.load_median_csv(args.input, units=args.units, log=args.log)
        base = {"mu_prior": args.mu_prior, "sd_prior": args.sd_prior}
    else:
        data = ingest.load_habitat_csv(args.input, mu0=_mu0_arg(args.mu0))
        base = {"prec_prior": args.prec_prior}
    grid = {k: v for k, v in SENSITIVITY_GRID[model].items()}
    for spec in args.grid or []:
        name, _, values = spec.partition("=")
        if name not in grid:
            raise UsageError(f"unknown prior {name!r} for {model}; choose from {sorted(grid)}")
        grid[name] = _grid_values(values)
    params = SENSITIVITY_PARAMS[model]
    config = _sampler_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ["prior", "value", "post_data"]
    for p in params:
        header += [f"{p}_median", f"{p}_ci_low", f"{p}_ci_high"]
    header += ["rhat_max"]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for prior_name, values in grid.items():
            for value in values:
                setting = dict(base, **{prior_name: value})
                priors = (models.MedianAdcPriors(**setting) if model == "median"
                          else models.HabitatPriors(**setting))
                for with_post in (True, False):
                    d = data if with_post else data.baseline_only()
                    samples = models.fit(model, d, priors, config)
                    row = [prior_name, repr(float(value)), int(with_post)]
                    for p in params:
                        s = hmc.summarize(samples, p)
                        row += [repr(float(s.median)), repr(float(s.ci95[0])), repr(float(s.ci95[1]))]
                    row.append(repr(float(max(samples.rhat.values()))) if samples.rhat else "")
                    w.writerow(row)
                    fh.flush()
    return EXIT_OK


def cmd_habitat_extract(args):
    records = ingest.load_voxels_csv(args.input, units=args.units)
    rows = ingest.extract_habitats(records, args.p_low, args.p_high, reference=args.reference)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ingest.write_habitat_rows(rows, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _sampler_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("sampler")
    g.add_argument("--chains", type=int, default=3)
    g.add_argument("--iterations", type=int, default=5500, help="per chain, including warmup")
    g.add_argument("--warmup", type=int, default=500)
    g.add_argument("--target-accept", type=float, default=0.8)
    g.add_argument("--max-leapfrog", type=int, default=10)
    g.add_argument("--seed", type=int, default=None,
                   help=f"base seed (default: ${SEED_ENV} or 0)")
    return p


def _units_parent():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--units", choices=sorted(ingest.UNIT_SCALE), default="1e-3mm2/s",
                   help="units of ADC values in the input file")
    p.add_argument("--log", action="store_true", help="log-transform median values")
    return p


def build_parser():
    parser = _Parser(prog="heterobayes", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of option defaults (keys are option names)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sampler = _sampler_parent()
    units = _units_parent()

    # analytic
    pa = sub.add_parser("analytic", help="closed-form repeatability and Bayes-factor calculators")
    acts = pa.add_subparsers(dest="action", required=True, parser_class=_Parser)
    a = acts.add_parser("rc", help="repeatability coefficient")
    a.add_argument("--sigma", type=float, required=True)
    a = acts.add_parser("icc", help="intraclass correlation")
    a.add_argument("--sigma0", type=float, required=True)
    a.add_argument("--sigma", type=float, required=True)
    a = acts.add_parser("cov", help="coefficient of variation (%%)")
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--mu0", type=float, required=True)
    for name, helptext in (("sigma", "repeatability summary of baseline pairs"),
                           ("pvalue", "p-value of a measured change")):
        a = acts.add_parser(name, help=helptext, parents=[units])
        a.add_argument("--pairs", help="'y1,y2;y1,y2;...'")
        a.add_argument("--input", help="median.csv (b1/b2 rows are used)")
        if name == "pvalue":
            a.add_argument("--d", type=float, required=True)
    a = acts.add_parser("predictive", help="no-change predictive given a baseline value")
    a.add_argument("--y0", type=float, required=True)
    a.add_argument("--mu0", type=float, required=True)
    a.add_argument("--sigma0", required=True, help="population SD, or 'inf'")
    a.add_argument("--sigma", type=float, required=True)
    a = acts.add_parser("bf", help="log Bayes factor for one measured change")
    a.add_argument("--dy", type=float, required=True)
    a.add_argument("--mu-delta", type=float, required=True)
    a.add_argument("--eta", type=float)
    a.add_argument("--sigma-delta", type=float)
    a.add_argument("--sigma", type=float, required=True)
    a = acts.add_parser("expected-bf", help="expected log Bayes factor")
    a.add_argument("--eta", type=float, required=True)
    a.add_argument("--xi", type=float, required=True)
    a.add_argument("--model", choices=("M0", "M1"))
    a = acts.add_parser("bf-interpret", help="verbal category of a Bayes factor")
    a.add_argument("--bf", type=float, required=True)
    pa.set_defaults(func=cmd_analytic)

    # fitting
    common_fit = argparse.ArgumentParser(add_help=False)
    common_fit.add_argument("--input", required=True)
    common_fit.add_argument("--out", required=True, help="output directory")
    common_fit.add_argument("--po-cap", type=float, default=models.PO_CAP)
    common_fit.add_argument("--strict", action="store_true",
                            help="exit 3 when the fit carries convergence warnings")
    p = sub.add_parser("fit-median", parents=[common_fit, sampler, units],
                       help="fit the median-ADC mixture model")
    p.add_argument("--mu-prior", type=float, default=10.0)
    p.add_argument("--sd-prior", type=float, default=5.0)
    p.set_defaults(func=cmd_fit_median)
    p = sub.add_parser("fit-habitat", parents=[common_fit, sampler],
                       help="fit the habitat Dirichlet-multinomial mixture")
    p.add_argument("--prec-prior", type=float, default=50.0)
    p.add_argument("--mu0", default="0.1,0.8,0.1")
    p.set_defaults(func=cmd_fit_habitat)

    # novelty
    p = sub.add_parser("novelty", parents=[sampler, units],
                       help="posterior-predictive anomaly flags per lesion")
    p.add_argument("--model", choices=("median", "habitat"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--fit", required=True, help="directory written by fit-median/fit-habitat")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bandwidth", type=float, help="KDE bandwidth (default Silverman)")
    p.add_argument("--components", type=int, default=5)
    p.add_argument("--rays", type=int, default=360)
    p.add_argument("--lesion", action="append", help="'patient/lesion'; repeatable")
    p.add_argument("--mu0", default="0.1,0.8,0.1")
    p.add_argument("--force", action="store_true", help="ignore convergence warnings")
    p.set_defaults(func=cmd_novelty)

    # simulate
    p = sub.add_parser("simulate", parents=[sampler], help="run the simulation study")
    p.add_argument("--model", choices=("median", "habitat"), required=True)
    p.add_argument("--combos", type=int, default=50)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--full", action="store_true", help="500 combinations x 20 repetitions")
    p.add_argument("--n-baseline", type=int, default=73)
    p.add_argument("--n-lesions", type=int, default=100)
    p.add_argument("--out", required=True, help="results CSV")
    p.add_argument("--summary", help="per-combination summary CSV")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="record wall time per fit")
    p.set_defaults(func=cmd_simulate)

    # sensitivity
    p = sub.add_parser("sensitivity", parents=[sampler, units], help="prior-width sweep")
    p.add_argument("--model", choices=("median", "habitat"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--grid", action="append", help="e.g. 'mu_prior=0.1,1,10'; repeatable")
    p.add_argument("--mu-prior", type=float, default=10.0)
    p.add_argument("--sd-prior", type=float, default=5.0)
    p.add_argument("--prec-prior", type=float, default=50.0)
    p.add_argument("--mu0", default="0.1,0.8,0.1")
    p.set_defaults(func=cmd_sensitivity)

    # habitat extraction
    p = sub.add_parser("habitat-extract", help="voxels.csv -> habitat.csv")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--units", choices=sorted(ingest.UNIT_SCALE), default="1e-3mm2/s")
    p.add_argument("--p-low", type=float, default=10.0)
    p.add_argument("--p-high", type=float, default=90.0)
    p.add_argument("--reference", choices=("baseline1", "both"), default="baseline1")
    p.set_defaults(func=cmd_habitat_extract)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` JSON (flags still win)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    try:
        with open(known.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    args = parser.parse_args(argv)
    explicit = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for k, v in cfg.items():
        if k not in explicit and (hasattr(args, k) or k == "seed"):
            setattr(args, k, v)
    return args


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        return args.func(args)
    except UsageError as exc:
        print(f"heterobayes: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ingest.DataError, OSError) as exc:
        print(f"heterobayes: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, RuntimeError) as exc:
        print(f"heterobayes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"heterobayes: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
