"""Turning season series into (location, day) training instances.

Day indices before 0 reach back into the previous water year, so day
``-1`` of year ``Y`` is the last day of year ``Y - 1``. Histories include
day ``t``; targets start after it.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InsufficientHistory
from .core import SWE
from .synthetic import day_length_hours, season_day_of_year

RESOLUTION_STRIDE = {"daily": 1, "weekly": 7, "monthly": 30}
MODE_STRIDE = {"daily": 1, "weekly": 7}
DEFAULT_WINDOWS = (("daily", 30), ("weekly", 12))
SPATIAL_FEATURES = ("latitude", "longitude", "elevation_ft", "southness", "day_number", "day_length")


def window_stride(resolution):
    try:
        return RESOLUTION_STRIDE[resolution]
    except KeyError:
        raise ConfigError(f"unsupported window resolution {resolution!r}") from None


def mode_stride(mode):
    try:
        return MODE_STRIDE[mode]
    except KeyError:
        raise ConfigError(f"mode must be 'daily' or 'weekly', got {mode!r}") from None


def history_days(t, resolution, k):
    """Day indices of a window ending at ``t``, oldest first."""
    s = window_stride(resolution)
    return t - s * np.arange(k - 1, -1, -1)


def target_days(t, horizon, mode):
    return t + mode_stride(mode) * np.arange(1, horizon + 1)


def calendar_date(water_year, day_index):
    return _dt.date(water_year - 1, 12, 1) + _dt.timedelta(days=int(day_index))


@dataclass(frozen=True)
class SplitSpec:
    buffer_years: tuple
    train_years: tuple
    test_years: tuple

    def __post_init__(self):
        b, tr, te = set(self.buffer_years), set(self.train_years), set(self.test_years)
        if b & tr or b & te or tr & te:
            raise ConfigError("buffer, train and test years must be disjoint")
        ts = sorted(self.test_years)
        if ts and ts != list(range(ts[0], ts[0] + len(ts))):
            raise ConfigError("test years must be consecutive")

    @classmethod
    def from_years(cls, years, n_buffer=3, n_test=1):
        years = sorted(years)
        if len(years) < n_buffer + n_test + 1:
            raise ConfigError(
                f"{len(years)} years cannot hold {n_buffer} buffer + {n_test} test + 1 train"
            )
        return cls(
            tuple(years[:n_buffer]),
            tuple(years[n_buffer : len(years) - n_test]),
            tuple(years[len(years) - n_test :]),
        )


@dataclass
class AccessLog:
    """Which (stage, kind, year, day range) slices of the data were read."""

    entries: list = field(default_factory=list)

    def record(self, stage, kind, year, first_day, last_day):
        self.entries.append(
            dict(stage=stage, kind=kind, year=int(year), first_day=int(first_day), last_day=int(last_day))
        )

    def target_years(self, stage):
        return sorted({e["year"] for e in self.entries if e["stage"] == stage and e["kind"] == "target"})


@dataclass(frozen=True)
class WindowedExample:
    location_index: int
    water_year: int
    day: int
    histories: tuple  # one (f, k_c) array per window
    spatial_features: np.ndarray
    target: np.ndarray
    history_index: tuple  # absolute day indices per window
    target_index: np.ndarray


@dataclass
class Windows:
    """Column-oriented batch of windowed examples.

    ``histories[c]`` has shape ``(N, f, k_c)``; ``targets`` has shape
    ``(N, h)``. Indexing yields a :class:`WindowedExample`.
    """

    windows: tuple
    mode: str
    horizon: int
    location: np.ndarray
    year: np.ndarray
    day: np.ndarray
    histories: list
    spatial: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.day)

    def __getitem__(self, i):
        t = int(self.day[i])
        return WindowedExample(
            location_index=int(self.location[i]),
            water_year=int(self.year[i]),
            day=t,
            histories=tuple(h[i] for h in self.histories),
            spatial_features=self.spatial[i],
            target=self.targets[i],
            history_index=tuple(history_days(t, r, k) for r, k in self.windows),
            target_index=target_days(t, self.horizon, self.mode),
        )

    def select(self, mask):
        return Windows(
            self.windows, self.mode, self.horizon, self.location[mask], self.year[mask],
            self.day[mask], [h[mask] for h in self.histories], self.spatial[mask],
            self.targets[mask],
        )

    def days(self):
        """Distinct (year, day) pairs in order of first appearance."""
        seen = {}
        for y, d in zip(self.year, self.day):
            seen.setdefault((int(y), int(d)), None)
        return list(seen)


def spatial_features(stations, water_year, day):
    """Raw (lat, lon, elevation_ft, southness, day_number, day_length)."""
    lat = np.array([s.latitude for s in stations])
    doy = season_day_of_year(day)
    return np.stack(
        [
            lat,
            np.array([s.longitude for s in stations]),
            np.array([s.elevation_ft for s in stations]),
            np.array([s.southness for s in stations]),
            np.full(len(stations), float(day)),
            day_length_hours(lat, doy),
        ],
        axis=1,
    )


def max_lookback(windows):
    return max(window_stride(r) * (k - 1) for r, k in windows)


def valid_days(n_days, horizon, mode):
    """Days with the whole target inside the season."""
    return np.arange(0, n_days - mode_stride(mode) * horizon)


def build_windows(dataset, years, windows=DEFAULT_WINDOWS, horizon=10, mode="daily", days=None,
                  log=None, stage=None):
    """Emit one example per (station, year, day).

    Parameters
    ----------
    dataset : Dataset
    years : iterable of int
        Water years whose days are the forecast origins ``t``.
    windows : sequence of (resolution, k)
    horizon : int
    mode : {'daily', 'weekly'}
        Weekly targets are SWE point samples every 7th day after ``t``.
    days : iterable of int, optional
        Restrict the origins; by default every day whose target fits in
        the season.
    log : AccessLog, optional
        Records the history and target ranges read, tagged with ``stage``.
    """
    windows = tuple((r, int(k)) for r, k in windows)
    stride = mode_stride(mode)
    cube = dataset.cube
    all_years = dataset.years
    m = cube.shape[-1]
    if days is None:
        days = valid_days(m, horizon, mode)
    days = np.asarray(list(days), dtype=int)
    lookback = max_lookback(windows)

    loc, yr, dy, hists, spat, targ = [], [], [], [[] for _ in windows], [], []
    n = cube.shape[0]
    for year in years:
        j = all_years.index(year)
        # buffer-extended block: all earlier years followed by this one
        ext = cube[:, : j + 1].transpose(0, 2, 1, 3).reshape(n, cube.shape[2], (j + 1) * m)
        offset = j * m
        for t in days:
            if t + stride * horizon > m - 1:
                raise InsufficientHistory(
                    f"day {t} + horizon {horizon} ({mode}) runs past the season end"
                )
            if t - lookback + offset < 0:
                raise InsufficientHistory(
                    f"day {t} of {year} needs {lookback} days of history; "
                    f"only {t + offset} available"
                )
            for c, (res, k) in enumerate(windows):
                idx = history_days(t, res, k) + offset
                hists[c].append(ext[:, :, idx])
            tidx = target_days(t, horizon, mode)
            targ.append(cube[:, j, SWE, tidx])
            spat.append(spatial_features(dataset.stations, year, t))
            loc.append(np.arange(n))
            yr.append(np.full(n, year))
            dy.append(np.full(n, t))
            if log is not None:
                log.record(stage, "history", year, int(t) - lookback, int(t))
                log.record(stage, "target", year, int(tidx[0]), int(tidx[-1]))
    if not dy:
        f = cube.shape[2]
        return Windows(
            windows, mode, horizon, np.zeros(0, int), np.zeros(0, int), np.zeros(0, int),
            [np.zeros((0, f, k)) for _, k in windows], np.zeros((0, 6)), np.zeros((0, horizon)),
        )
    return Windows(
        windows,
        mode,
        horizon,
        np.concatenate(loc),
        np.concatenate(yr),
        np.concatenate(dy),
        [np.concatenate(h) for h in hists],
        np.concatenate(spat),
        np.concatenate(targ),
    )
