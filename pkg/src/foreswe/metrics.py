"""Accuracy and calibration metrics, and the evaluation report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.core import SWE
from .data.windows import calendar_date, target_days, valid_days
from .errors import (
    DegenerateActual,
    IncompleteForecasts,
    NonPositiveVariance,
    ShapeMismatch,
    ZeroDenominator,
)

NSE_BUCKETS = (">0.75", "0.5-0.75", "0.25-0.5", "0-0.25", "<0")


def _pair(predicted, actual, min_len=1):
    p = np.asarray(predicted, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.shape != a.shape:
        raise ShapeMismatch(f"predicted has {p.size} values, actual {a.size}")
    if p.size < min_len:
        raise ShapeMismatch(f"need at least {min_len} values")
    return p, a


def nse(predicted, actual, reference_mean=None):
    """Nash-Sutcliffe efficiency.

    ``reference_mean`` replaces the mean of ``actual`` in the denominator,
    e.g. with a training-years climatological mean.
    """
    p, a = _pair(predicted, actual, min_len=2)
    ref = a.mean() if reference_mean is None else float(reference_mean)
    denom = np.sum((a - ref) ** 2)
    if denom == 0.0:
        raise DegenerateActual("actual series has zero spread around the reference mean")
    return float(1.0 - np.sum((p - a) ** 2) / denom)


def relative_bias(predicted, actual):
    """``sum(P - A) / sum(A)``."""
    p, a = _pair(predicted, actual)
    total = a.sum()
    if total == 0.0:
        raise ZeroDenominator("actual values sum to zero")
    return float(np.sum(p - a) / total)


def nll_gaussian(y, mean, variance):
    """Mean Gaussian negative log likelihood (natural log) over all points."""
    y, mu = _pair(y, mean)
    var = np.asarray(variance, dtype=float).ravel()
    if var.shape != y.shape:
        var = np.broadcast_to(var, y.shape)
    if np.any(~(var > 0)):
        raise NonPositiveVariance("variance must be strictly positive")
    return float(np.mean(0.5 * np.log(2 * math.pi * var) + (y - mu) ** 2 / (2 * var)))


def ece_coverage(intervals, actuals, alpha=0.95):
    """Coverage (%) of ``actuals`` by the intervals and ``|coverage - alpha|``.

    ``intervals`` is a ForecastInterval or a sequence of them, aligned
    with ``actuals``.
    """
    if hasattr(intervals, "lower"):
        intervals = [intervals]
    lower = np.concatenate([np.ravel(i.lower) for i in intervals])
    upper = np.concatenate([np.ravel(i.upper) for i in intervals])
    _, y = _pair(lower, actuals)
    inside = (lower <= y) & (y <= upper)
    coverage = 100.0 * inside.mean()
    return float(abs(coverage / 100.0 - alpha)), float(coverage)


def nse_bucket(value):
    """Bucket label; upper edges are inclusive except for the top bucket."""
    if value > 0.75:
        return NSE_BUCKETS[0]
    if value > 0.5:
        return NSE_BUCKETS[1]
    if value > 0.25:
        return NSE_BUCKETS[2]
    if value >= 0.0:
        return NSE_BUCKETS[3]
    return NSE_BUCKETS[4]


# ---------------------------------------------------------------------------


@dataclass
class ForecastTable:
    """Forecasts for a set of (station, year, day) origins.

    Arrays ``mean``, ``variance``, ``lower`` and ``upper`` have shape
    ``(N, h)``; ``location``, ``year`` and ``day`` have shape ``(N,)``.
    """

    location: np.ndarray
    year: np.ndarray
    day: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def horizon(self):
        return self.mean.shape[1]

    def __len__(self):
        return len(self.day)


def actual_targets(dataset, table, mode):
    """Observed SWE at every forecast target, shape ``(N, h)``."""
    cube = dataset.cube
    yi = np.searchsorted(dataset.years, table.year)
    idx = np.stack([target_days(int(t), table.horizon, mode) for t in table.day]) if len(table) else \
        np.zeros((0, table.horizon), int)
    return cube[table.location[:, None], yi[:, None], SWE, idx]


@dataclass
class EvaluationReport:
    mode: str
    alpha: float
    station_ids: list
    nse: dict
    relative_bias: dict
    per_year: dict
    nse_buckets: dict
    group_month_bias: dict
    groups: dict = field(default_factory=dict)

    def median_nse(self):
        vals = [v for v in self.nse.values() if not math.isnan(v)]
        return float(np.median(vals)) if vals else float("nan")

    def to_dict(self):
        return {
            "mode": self.mode,
            "alpha": self.alpha,
            "station_ids": list(self.station_ids),
            "nse": self.nse,
            "relative_bias": self.relative_bias,
            "per_year": {str(y): v for y, v in self.per_year.items()},
            "nse_buckets": self.nse_buckets,
            "group_month_bias": {
                str(g): {str(m): v for m, v in row.items()} for g, row in self.group_month_bias.items()
            },
            "groups": self.groups,
            "median_nse": self.median_nse(),
        }

    def to_json(self):
        # NaN is written as null so the file stays strict JSON
        return json.dumps(_nan_to_none(self.to_dict()), indent=2)

    def write(self, out_dir):
        """Write report.json and one CSV per sub-table; returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json"]
        paths[0].write_text(self.to_json() + "\n", encoding="utf-8")
        rows = [
            (sid, self.groups.get(sid, ""), _fmt(self.nse[sid]), _fmt(self.relative_bias[sid]))
            for sid in self.station_ids
        ]
        paths.append(_write_csv(out / "per_location.csv",
                                ("station_id", "group", "nse", "relative_bias"), rows))
        rows = [(y, _fmt(v["nll"]), _fmt(v["ece"]), _fmt(v["coverage"])) for y, v in self.per_year.items()]
        paths.append(_write_csv(out / "per_year.csv", ("water_year", "nll", "ece", "coverage_pct"), rows))
        rows = list(self.nse_buckets.items())
        paths.append(_write_csv(out / "nse_buckets.csv", ("bucket", "count"), rows))
        rows = [(g, m, _fmt(v)) for g, row in self.group_month_bias.items() for m, v in row.items()]
        paths.append(_write_csv(out / "group_month_bias.csv",
                                ("group", "month", "median_relative_bias"), rows))
        return paths


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _check_complete(dataset, table, years, mode):
    expected = {
        (loc, y, int(t))
        for y in years
        for t in valid_days(dataset.n_days, table.horizon, mode)
        for loc in range(len(dataset.stations))
    }
    got = set(zip(table.location.tolist(), table.year.tolist(), table.day.tolist()))
    missing = expected - got
    if missing:
        loc, y, t = min(missing)
        raise IncompleteForecasts(
            f"{len(missing)} (station, day) origins lack forecasts, e.g. "
            f"{dataset.station_ids[loc]} year {y} day {t}"
        )


def build_report(forecasts, dataset, groups, mode, alpha=0.95, test_years=None,
                 climatology_years=None):
    """Assemble every metric aggregation for a set of test-year forecasts.

    Parameters
    ----------
    forecasts : ForecastTable
    dataset : Dataset
    groups : list of LocationGroup
    mode : {'daily', 'weekly'}
    test_years : iterable of int, optional
        Years that must be fully covered; defaults to those present.
    climatology_years : iterable of int, optional
        If given, NSE uses each station's mean SWE over these years as the
        reference instead of the mean over the evaluated span.

    Location-months whose observed SWE sums to zero have no relative bias
    and are left out of the group-month medians; stations with a constant
    test series get NaN NSE and are not bucketed.
    """
    years = sorted(set(forecasts.year.tolist())) if test_years is None else sorted(test_years)
    _check_complete(dataset, forecasts, years, mode)
    keep = np.isin(forecasts.year, years)
    actual = actual_targets(dataset, forecasts, mode)[keep]
    loc = forecasts.location[keep]
    year = forecasts.year[keep]
    day = forecasts.day[keep]
    mean, var = forecasts.mean[keep], forecasts.variance[keep]
    lower, upper = forecasts.lower[keep], forecasts.upper[keep]

    ref = None
    if climatology_years is not None:
        cols = [dataset.years.index(y) for y in climatology_years]
        ref = dataset.cube[:, cols, SWE, :].mean(axis=(1, 2))

    ids = list(dataset.station_ids)
    nse_by, rb_by = {}, {}
    for i, sid in enumerate(ids):
        k = loc == i
        try:
            nse_by[sid] = nse(mean[k], actual[k], None if ref is None else ref[i])
        except DegenerateActual:
            nse_by[sid] = float("nan")
        try:
            rb_by[sid] = relative_bias(mean[k], actual[k])
        except ZeroDenominator:
            rb_by[sid] = float("nan")

    per_year = {}
    for y in years:
        k = year == y
        ece, cov = ece_coverage(_Bounds(lower[k], upper[k]), actual[k], alpha)
        per_year[int(y)] = {"nll": nll_gaussian(actual[k], mean[k], var[k]), "ece": ece, "coverage": cov}

    buckets = {b: 0 for b in NSE_BUCKETS}
    for v in nse_by.values():
        if not math.isnan(v):
            buckets[nse_bucket(v)] += 1

    member = {sid: g.group_id for g in groups for sid in g.station_ids}
    months = np.array([calendar_date(int(y), int(t)).month for y, t in zip(year, day)], dtype=int)
    # water-year order: Dec, Jan, ...
    present = sorted(set(months.tolist()), key=lambda m: (m - 12) % 12)
    table = {}
    for g in sorted({g.group_id for g in groups}):
        row = {}
        for m in present:
            vals = []
            for i, sid in enumerate(ids):
                if member.get(sid) != g:
                    continue
                k = (loc == i) & (months == m)
                if k.any() and actual[k].sum() != 0:
                    vals.append(relative_bias(mean[k], actual[k]))
            row[m] = float(np.median(vals)) if vals else float("nan")
        table[g] = row

    return EvaluationReport(
        mode=mode,
        alpha=alpha,
        station_ids=ids,
        nse=nse_by,
        relative_bias=rb_by,
        per_year=per_year,
        nse_buckets=buckets,
        group_month_bias=table,
        groups={sid: member.get(sid) for sid in ids},
    )


@dataclass
class _Bounds:
    lower: np.ndarray
    upper: np.ndarray
