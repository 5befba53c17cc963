"""GP baseline on hand-built raw features instead of encoder outputs.

Each (station, day) becomes a 21-vector: the 6 spatial features, the 12
attribute values on day t, and three SWE summaries over the trailing
daily history (7-day mean, 7-day least-squares slope, season-to-date max).
"""

from __future__ import annotations

import numpy as np

from . import gp
from . import numerics as nm
from .data.core import ATTRIBUTES, SWE
from .errors import ConfigError

N_RAW_FEATURES = 21
TRAIL = 7
GP_FORMAT = "rawgp-v1"
RAW_FEATURE_NAMES = (
    ("latitude", "longitude", "elevation_ft", "southness", "day_number", "day_length")
    + ATTRIBUTES
    + ("swe_mean_7d", "swe_slope_7d", "swe_season_max")
)


def trailing_slope(values):
    """Least-squares slope per row of ``(N, k)`` equally spaced values."""
    values = np.asarray(values, float)
    k = values.shape[-1]
    x = np.arange(k) - (k - 1) / 2.0
    return values @ x / (x @ x)


def _daily_block(windows):
    for (res, k), h in zip(windows.windows, windows.histories):
        if res == "daily":
            return h
    raise ConfigError("raw features need a daily-resolution history window")


def raw_features(windows, season_max):
    """Unscaled ``(N, 21)`` features.

    Parameters
    ----------
    windows : Windows
    season_max : (N,) array
        Max SWE from day 0 of the water year through day t.
    """
    h = _daily_block(windows)
    if h.shape[2] < TRAIL:
        raise ConfigError(f"daily window must hold at least {TRAIL} days")
    swe = h[:, SWE, -TRAIL:]
    return np.column_stack([
        windows.spatial,
        h[:, :, -1],
        swe.mean(axis=1),
        trailing_slope(swe),
        season_max,
    ])


def season_max_swe(dataset, windows):
    """Season-to-date max SWE (day 0..t) for each window."""
    cube = dataset.cube
    running = np.maximum.accumulate(cube[:, :, SWE, :], axis=2)
    yi = np.searchsorted(dataset.years, windows.year)
    return running[windows.location, yi, windows.day]


def build_raw_features(dataset, windows, scaler=None):
    """Standardized raw features and the scaler used.

    Pass ``scaler=None`` on the training split to freeze new statistics;
    reuse the returned scaler for every other split.
    """
    x = raw_features(windows, season_max_swe(dataset, windows))
    if scaler is None:
        scaler = nm.Standardizer.fit(x)
    return scaler.transform(x), scaler


def _gp_data(x, targets):
    h = targets.shape[1]
    return np.repeat(x, h, axis=0), np.tile(np.arange(1, h + 1), len(x)), targets.ravel()


def fit_raw(features, targets, tau=3, n_inducing=128, iterations=100, learning_rate=0.05,
            max_fit_points=2000, seed=0):
    """Sparse GP on raw features; targets are ``(N, h)``."""
    targets = np.asarray(targets, float)
    x, t, y = _gp_data(np.asarray(features, float), targets)
    hp = gp.GpHyperparams.initial(x, tau=tau, n_times=targets.shape[1] + 1, seed=seed)
    return gp.fit(x, t, y, hp, mode="sparse", n_inducing=min(n_inducing, len(y)),
                  iterations=iterations, learning_rate=learning_rate,
                  max_fit_points=max_fit_points, seed=seed)


def forecast_raw(posterior, features, horizon, alpha=0.95):
    return gp.forecast(posterior, np.asarray(features, float), horizon, alpha)
