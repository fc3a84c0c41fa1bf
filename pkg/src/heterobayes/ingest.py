"""Tabular input: per-lesion ADC values, voxel lists and habitat counts.

ADC values are held internally in 1e-3 mm^2/s. Files written in mm^2/s are
read with ``units="mm2/s"`` and rescaled on the way in.
"""

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .models import DEFAULT_MU0, HabitatDataset, MedianAdcDataset

__all__ = [
    "DataError",
    "UNIT_SCALE",
    "ADC_MAX",
    "Thresholds",
    "LesionVoxelRecord",
    "HabitatRow",
    "rescale",
    "percentile_thresholds",
    "habitat_counts",
    "habitat_mu0",
    "extract_habitats",
    "barycentric",
    "from_barycentric",
    "load_median_csv",
    "write_median_csv",
    "load_voxels_csv",
    "write_voxels_csv",
    "load_habitat_csv",
    "write_habitat_csv",
    "write_habitat_rows",
    "write_barycentric_csv",
]

# multiply by this to reach 1e-3 mm^2/s
UNIT_SCALE = {"1e-3mm2/s": 1.0, "mm2/s": 1000.0}
ADC_MAX = 4.0
MIN_THRESHOLD_VOXELS = 10
SQRT3_2 = math.sqrt(3.0) / 2.0


class DataError(ValueError):
    """Malformed or out-of-range input data."""


def rescale(values, units="1e-3mm2/s", log=False):
    """Convert to 1e-3 mm^2/s, check the [0, 4] bound, optionally take logs."""
    try:
        scale = UNIT_SCALE[units]
    except KeyError:
        raise DataError(f"unknown units {units!r}; expected one of {sorted(UNIT_SCALE)}") from None
    v = np.asarray(values, dtype=float) * scale
    bad = np.flatnonzero(~((v >= 0) & (v <= ADC_MAX)))
    if bad.size:
        raise DataError(
            f"ADC value {v.reshape(-1)[bad[0]]!r} at position {bad[0]} outside [0, {ADC_MAX}]"
            " (1e-3 mm^2/s)"
        )
    if log:
        with np.errstate(divide="ignore"):
            v = np.log(v)
        if not np.all(np.isfinite(v)):
            raise DataError("log transform needs strictly positive values")
    return v


# ---------------------------------------------------------------------------
# habitats
# ---------------------------------------------------------------------------


class Thresholds(NamedTuple):
    low: float
    high: float

    @property
    def degenerate(self):
        return self.low == self.high


def percentile_thresholds(baseline_voxels, p_low=10.0, p_high=90.0):
    """Linear-interpolation percentiles of the baseline voxel values."""
    v = np.asarray(baseline_voxels, dtype=float).reshape(-1)
    if v.size < MIN_THRESHOLD_VOXELS:
        raise DataError(f"need at least {MIN_THRESHOLD_VOXELS} voxels for thresholds, got {v.size}")
    if not 0 <= p_low < p_high <= 100:
        raise ValueError("need 0 <= p_low < p_high <= 100")
    lo, hi = np.percentile(v, [p_low, p_high])
    return Thresholds(float(lo), float(hi))


def habitat_counts(voxels, thresholds):
    """Voxel counts below, within (closed) and above the threshold band."""
    lo, hi = thresholds[0], thresholds[1]
    if lo > hi:
        raise ValueError("thresholds must be ordered")
    v = np.asarray(voxels, dtype=float).reshape(-1)
    below = int(np.count_nonzero(v < lo))
    above = int(np.count_nonzero(v > hi))
    return np.array([below, v.size - below - above, above], dtype=np.int64)


def habitat_mu0(p_low=10.0, p_high=90.0):
    """Expected baseline proportions implied by the percentile cut points."""
    return (p_low / 100.0, (p_high - p_low) / 100.0, 1.0 - p_high / 100.0)


@dataclass(frozen=True)
class LesionVoxelRecord:
    patient: str
    lesion: str
    timepoint: str
    values: np.ndarray


@dataclass(frozen=True)
class HabitatRow:
    patient: str
    lesion: str
    set: str
    counts: np.ndarray


def extract_habitats(records, p_low=10.0, p_high=90.0, reference="baseline1"):
    """Habitat counts per lesion.

    Thresholds come from the ``reference`` scan (``"baseline1"`` or
    ``"both"`` for pooled repeat baselines). ``baseline2`` voxels give the
    lesion's baseline row and ``post`` voxels its post-treatment row.
    """
    if reference not in ("baseline1", "both"):
        raise ValueError("reference must be 'baseline1' or 'both'")
    by_lesion = OrderedDict()
    for r in records:
        by_lesion.setdefault((r.patient, r.lesion), {})[r.timepoint] = r.values
    rows = []
    for (patient, lesion), scans in by_lesion.items():
        if "baseline1" not in scans:
            raise DataError(f"lesion {patient}/{lesion} has no baseline1 voxels")
        ref = scans["baseline1"]
        if reference == "both" and "baseline2" in scans:
            ref = np.concatenate([ref, scans["baseline2"]])
        try:
            t = percentile_thresholds(ref, p_low, p_high)
        except DataError as exc:
            raise DataError(f"lesion {patient}/{lesion}: {exc}") from None
        for tp, label in (("baseline2", "baseline"), ("post", "post")):
            if tp in scans:
                rows.append(HabitatRow(patient, lesion, label, habitat_counts(scans[tp], t)))
    return rows


def barycentric(simplex):
    """Map 3-simplexes ``(a, b, c)`` into the unit-edge triangle."""
    s = np.asarray(simplex, dtype=float)
    if s.shape[-1] != 3:
        raise ValueError(f"barycentric coordinates need 3 components, got {s.shape[-1]}")
    x = s[..., 1] + 0.5 * s[..., 2]
    y = SQRT3_2 * s[..., 2]
    return np.stack([x, y], axis=-1)


def from_barycentric(xy):
    """Inverse of :func:`barycentric`."""
    p = np.asarray(xy, dtype=float)
    c = p[..., 1] / SQRT3_2
    b = p[..., 0] - 0.5 * c
    return np.stack([1.0 - b - c, b, c], axis=-1)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _reader(path, required):
    fh = open(path, newline="")
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    return fh, reader


def _number(path, line, column, text):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataError(f"{path}:{line}: non-numeric {column} {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{line}: non-finite {column} {text!r}")
    return v


def _fmt(v):
    return repr(float(v))


MEDIAN_TIMEPOINTS = ("b1", "b2", "pre", "post")


def load_median_csv(path, units="1e-3mm2/s", log=False):
    """Read ``patient,lesion,timepoint,value`` rows into a dataset.

    Lesions with ``b1``/``b2`` rows form baseline pairs and lesions with
    ``pre``/``post`` rows form treated pairs; a lesion may provide both.
    """
    fh, reader = _reader(path, ("patient", "lesion", "timepoint", "value"))
    values = OrderedDict()
    with fh:
        for line, row in enumerate(reader, start=2):
            tp = row["timepoint"].strip()
            if tp not in MEDIAN_TIMEPOINTS:
                raise DataError(f"{path}:{line}: unknown timepoint {tp!r}")
            key = (row["patient"].strip(), row["lesion"].strip())
            v = _number(path, line, "value", row["value"])
            try:
                v = float(rescale([v], units, log)[0])
            except DataError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            slot = values.setdefault(key, {})
            if tp in slot:
                raise DataError(f"{path}:{line}: duplicate {key[0]}/{key[1]}/{tp}")
            slot[tp] = v
    base, post = [], []
    for key, slot in values.items():
        for pair, out in ((("b1", "b2"), base), (("pre", "post"), post)):
            present = [t in slot for t in pair]
            if all(present):
                out.append((key, slot[pair[0]], slot[pair[1]]))
            elif any(present):
                raise DataError(f"{path}: lesion {key[0]}/{key[1]} has an incomplete {pair} pair")
    if not base:
        raise DataError(f"{path}: no baseline (b1/b2) pairs")
    return MedianAdcDataset(
        [b[1] for b in base], [b[2] for b in base],
        [p[1] for p in post], [p[2] for p in post],
        lesion_ids=[p[0] for p in post], baseline_ids=[b[0] for b in base],
    )


def write_median_csv(dataset, path):
    """Write a dataset back out in 1e-3 mm^2/s."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient", "lesion", "timepoint", "value"])
        for (p, l), a, b in zip(dataset.baseline_ids, dataset.yb1, dataset.yb2):
            w.writerow([p, l, "b1", _fmt(a)])
            w.writerow([p, l, "b2", _fmt(b)])
        for (p, l), a, b in zip(dataset.lesion_ids, dataset.yp1, dataset.yp2):
            w.writerow([p, l, "pre", _fmt(a)])
            w.writerow([p, l, "post", _fmt(b)])


VOXEL_TIMEPOINTS = ("baseline1", "baseline2", "post")


def load_voxels_csv(path, units="1e-3mm2/s"):
    """Read one-voxel-per-row ``patient,lesion,timepoint,adc`` data."""
    fh, reader = _reader(path, ("patient", "lesion", "timepoint", "adc"))
    groups = OrderedDict()
    with fh:
        for line, row in enumerate(reader, start=2):
            tp = row["timepoint"].strip()
            if tp not in VOXEL_TIMEPOINTS:
                raise DataError(f"{path}:{line}: unknown timepoint {tp!r}")
            v = _number(path, line, "adc", row["adc"])
            try:
                v = float(rescale([v], units)[0])
            except DataError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            groups.setdefault((row["patient"].strip(), row["lesion"].strip(), tp), []).append(v)
    return [LesionVoxelRecord(p, l, t, np.array(v)) for (p, l, t), v in groups.items()]


def write_voxels_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient", "lesion", "timepoint", "adc"])
        for r in records:
            for v in r.values:
                w.writerow([r.patient, r.lesion, r.timepoint, _fmt(v)])


def load_habitat_csv(path, mu0=DEFAULT_MU0):
    """Read ``patient,lesion,set,c1,c2,c3`` rows (``set`` is baseline/post)."""
    fh, reader = _reader(path, ("patient", "lesion", "set", "c1", "c2", "c3"))
    seen = set()
    base, post, base_ids, post_ids = [], [], [], []
    with fh:
        for line, row in enumerate(reader, start=2):
            s = row["set"].strip()
            if s not in ("baseline", "post"):
                raise DataError(f"{path}:{line}: set must be 'baseline' or 'post', got {s!r}")
            key = (row["patient"].strip(), row["lesion"].strip())
            if (key, s) in seen:
                raise DataError(f"{path}:{line}: duplicate {key[0]}/{key[1]}/{s}")
            seen.add((key, s))
            counts = []
            for c in ("c1", "c2", "c3"):
                v = _number(path, line, c, row[c])
                if v < 0 or v != int(v):
                    raise DataError(f"{path}:{line}: {c} must be a non-negative integer")
                counts.append(int(v))
            if sum(counts) < 1:
                raise DataError(f"{path}:{line}: row has no voxels")
            (base if s == "baseline" else post).append(counts)
            (base_ids if s == "baseline" else post_ids).append(key)
    if not base:
        raise DataError(f"{path}: no baseline rows")
    return HabitatDataset(
        np.array(base), np.array(post).reshape(-1, 3), mu0,
        lesion_ids=post_ids, baseline_ids=base_ids,
    )


def write_habitat_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient", "lesion", "set", "c1", "c2", "c3"])
        for r in rows:
            w.writerow([r.patient, r.lesion, r.set, *(int(c) for c in r.counts)])


def write_habitat_csv(dataset, path):
    rows = [HabitatRow(p, l, "baseline", c) for (p, l), c in zip(dataset.baseline_ids, dataset.yb)]
    rows += [HabitatRow(p, l, "post", c) for (p, l), c in zip(dataset.lesion_ids, dataset.yp)]
    write_habitat_rows(rows, path)


def write_barycentric_csv(path, dataset, po=None, categories=None):
    """Per-lesion baseline and follow-up positions in the habitat triangle.

    ``x0`` is the baseline centre ``mu0``; ``x1`` the follow-up proportions.
    """
    x0 = barycentric(dataset.mu0)
    n = dataset.n_lesions
    po = [""] * n if po is None else [_fmt(v) for v in po]
    categories = [""] * n if categories is None else list(categories)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient", "lesion", "x0_x", "x0_y", "x1_x", "x1_y", "po", "category"])
        for i, (p, l) in enumerate(dataset.lesion_ids):
            y = dataset.yp[i]
            x1 = barycentric(y / y.sum())
            w.writerow([p, l, _fmt(x0[0]), _fmt(x0[1]), _fmt(x1[0]), _fmt(x1[1]), po[i], categories[i]])
