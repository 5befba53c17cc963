"""Binning stations by their average yearly peak SWE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import TooFewStations
from .core import SWE

PERCENTILES = (30, 60, 90)


@dataclass(frozen=True)
class LocationGroup:
    group_id: int
    station_ids: tuple
    peak_low: float
    peak_high: float


def nearest_rank(sorted_values, q):
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    n = len(sorted_values)
    rank = max(1, math.ceil(q / 100.0 * n))
    return sorted_values[rank - 1]


def average_peaks(dataset, years=None):
    """Mean over ``years`` of each station's yearly max SWE."""
    all_years = dataset.years
    years = all_years if years is None else list(years)
    cols = [all_years.index(y) for y in years]
    peaks = dataset.cube[:, cols, SWE, :].max(axis=2)
    return dict(zip(dataset.station_ids, peaks.mean(axis=1)))


def group_by_peak_swe(dataset, years=None):
    """Four groups split at the 30th/60th/90th nearest-rank percentiles.

    A station whose peak equals a breakpoint goes to the lower group.
    """
    peaks = average_peaks(dataset, years)
    if len(peaks) < 4:
        raise TooFewStations(f"need at least 4 stations, got {len(peaks)}")
    ordered = sorted(peaks.values())
    cuts = [nearest_rank(ordered, q) for q in PERCENTILES]
    members = {g: [] for g in range(1, 5)}
    for sid in sorted(peaks):
        members[1 + sum(peaks[sid] > c for c in cuts)].append(sid)
    groups = []
    for g in range(1, 5):
        vals = [peaks[s] for s in members[g]]
        groups.append(
            LocationGroup(
                g, tuple(members[g]),
                float(min(vals)) if vals else float("nan"),
                float(max(vals)) if vals else float("nan"),
            )
        )
    return groups


def group_lookup(groups):
    return {sid: g.group_id for g in groups for sid in g.station_ids}
