"""Desk-scale stand-in for SNOTEL + gridMET + passive-microwave data.

Snowpack evolves under a degree-day/radiation melt model driven by
weather that is shared between stations through a handful of regional
processes; a station's loading on each process decays with great-circle
distance to the region centre, so anomalies are spatially smooth.
Temperature falls with elevation and latitude and precipitation grows
with elevation, so peak SWE rises with both.
"""

from __future__ import annotations

import numpy as np

from ..geo import EARTH_RADIUS_M, FEET_TO_METERS
from .core import ATTRIBUTES, SEASON_DAYS, DailySeries, Dataset, StationMeta

N_REGIONS = 5
REGION_SCALE_M = 350_000.0
LAPSE_C_PER_KM = 6.5
DEGREE_DAY_MM = 2.5
FIRST_WATER_YEAR = 2001


def day_length_hours(latitude, day_of_year):
    """Daylight hours from latitude (deg) and day of year (1-366), using
    Cooper's solar declination."""
    decl = np.radians(23.44) * np.sin(2 * np.pi * (284 + np.asarray(day_of_year)) / 365.0)
    x = -np.tan(np.radians(latitude)) * np.tan(decl)
    return 24.0 / np.pi * np.arccos(np.clip(x, -1.0, 1.0))


def season_day_of_year(day_index):
    """Day of year for a 0-based day index counted from Dec 1 (non-leap)."""
    return (np.asarray(day_index) + 334) % 365 + 1


def _region_weights(lat, lon, c_lat, c_lon):
    p1, p2 = np.radians(lat)[:, None], np.radians(c_lat)[None, :]
    dl = np.radians(c_lon)[None, :] - np.radians(lon)[:, None]
    h = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    d = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0, 1)))
    w = np.exp(-0.5 * (d / REGION_SCALE_M) ** 2) + 1e-6
    return w / w.sum(axis=1, keepdims=True)


def _prompt_key(lon, elev_ft):
    region = "maritime" if lon < -117.0 else "continental"
    band = "low" if elev_ft < 5500 else ("mid" if elev_ft < 8500 else "high")
    return f"{region}-{band}"


def generate_synthetic(n_stations, n_years, seed, n_days=SEASON_DAYS, first_year=FIRST_WATER_YEAR,
                       sites=None):
    """Generate a deterministic synthetic dataset.

    Parameters
    ----------
    n_stations, n_years : int
        Both at least 2.
    seed : int
        Seeds every random draw; equal seeds give bit-identical output.
    sites : sequence of (latitude, longitude, elevation_ft, southness), optional
        Fixed station placements replacing the random ones; the weather
        draws are unchanged.
    """
    if n_stations < 2 or n_years < 2:
        raise ValueError("need at least 2 stations and 2 years")
    rng = np.random.default_rng(seed)
    n, Y, m = n_stations, n_years, n_days

    lat = rng.uniform(38.0, 48.0, n)
    lon = rng.uniform(-122.0, -106.0, n)
    elev_ft = rng.uniform(3000.0, 11000.0, n)
    south = rng.uniform(-1.0, 1.0, n)
    cover = rng.integers(1, 6, n)
    if sites is not None:
        if len(sites) != n:
            raise ValueError(f"expected {n} sites, got {len(sites)}")
        lat, lon, elev_ft, south = (np.array(col, dtype=float) for col in zip(*sites))
    c_lat = rng.uniform(37.0, 49.0, N_REGIONS)
    c_lon = rng.uniform(-123.0, -105.0, N_REGIONS)
    w = _region_weights(lat, lon, c_lat, c_lon)  # (n, K)

    # yearly regional anomalies
    year_temp = rng.normal(0.0, 1.5, (Y, N_REGIONS))
    year_wet = rng.normal(0.0, 0.25, (Y, N_REGIONS))
    year_melt = rng.normal(0.0, 0.2, (Y, N_REGIONS))
    # daily regional weather
    shocks = rng.normal(0.0, 1.8, (Y, m, N_REGIONS))
    storm_on = rng.random((Y, m, N_REGIONS)) < 0.35
    storm_amt = rng.gamma(0.9, 7.0, (Y, m, N_REGIONS)) * storm_on
    # local noise
    local_t = rng.normal(0.0, 0.5, (n, Y, m))
    dtr = rng.uniform(6.0, 16.0, (n, Y, m))
    srad_noise = rng.normal(0.0, 10.0, (n, Y, m))
    wind = rng.gamma(2.0, 1.5, (n, Y, m))
    rh_noise = rng.normal(0.0, 5.0, (2, n, Y, m))
    tb_noise = rng.normal(0.0, 1.0, (2, n, Y, m))
    swe_noise = rng.normal(0.0, 2.0, (n, Y, m))

    weather = np.zeros((Y, m, N_REGIONS))
    for t in range(m):
        prev = weather[:, t - 1] if t else 0.0
        weather[:, t] = 0.8 * prev + shocks[:, t]

    t_idx = np.arange(m)
    elev_km = elev_ft * FEET_TO_METERS / 1000.0
    base_t = 17.0 - 11.0 * np.cos(2 * np.pi * (t_idx - 45) / 365.0)  # (m,)
    temp = (
        base_t[None, None, :]
        - LAPSE_C_PER_KM * elev_km[:, None, None]
        - 0.4 * (lat[:, None, None] - 38.0)
        + (w @ year_temp.T)[:, :, None]
        + np.einsum("nk,ytk->nyt", w, weather)
        + local_t
    )
    precip = (
        np.einsum("nk,ytk->nyt", w, storm_amt)
        * np.exp(w @ year_wet.T)[:, :, None]
        * (0.2 + 0.8 * elev_km)[:, None, None]
        * (1.0 + 0.03 * (lat - 38.0))[:, None, None]
    )
    wet = np.clip(precip / 10.0, 0.0, 1.0)
    doy = season_day_of_year(t_idx)
    daylen = day_length_hours(lat[:, None], doy[None, :])  # (n, m)
    srad = np.maximum((25.0 * daylen - 100.0)[:, None, :] * (1.0 - 0.5 * wet) + srad_noise, 0.0)

    snow_frac = np.clip((2.0 - temp) / 4.0, 0.0, 1.0)
    melt_scale = np.exp(w @ year_melt.T)  # (n, Y)
    ddf = DEGREE_DAY_MM * melt_scale
    rad_coef = 0.015 * (1.0 + 0.4 * south)[:, None]
    swe = np.zeros((n, Y, m))
    state = np.zeros((n, Y))
    for t in range(m):
        melt = np.maximum(ddf * temp[:, :, t] + rad_coef * srad[:, :, t], 0.0)
        state = np.maximum(state + snow_frac[:, :, t] * precip[:, :, t] - melt, 0.0)
        swe[:, :, t] = state
    swe_obs = np.where(swe > 0, np.maximum(swe + swe_noise, 0.0), 0.0)

    rhmax = np.clip(75.0 + 15.0 * wet + rh_noise[0], 30.0, 100.0)
    rhmin = np.clip(rhmax - 35.0 + 10.0 * wet + rh_noise[1], 5.0, rhmax)
    spec_h = 0.003 * np.exp(0.06 * temp) * (rhmax + rhmin) / 140.0
    warm = (temp > 0.0).astype(float)
    tb19 = 255.0 + 0.6 * temp - 0.015 * swe + tb_noise[0]
    tb37 = 250.0 + 0.6 * temp - 0.045 * swe * (1.0 - 0.7 * warm) + tb_noise[1]

    fields = {
        "swe_mm": swe_obs,
        "tmax_c": temp + dtr / 2,
        "tmin_c": temp - dtr / 2,
        "precip_accum_mm": np.cumsum(precip, axis=2),
        "srad_wm2": srad,
        "wind_ms": wind + 0.5 * wet,
        "rhmax_pct": rhmax,
        "rhmin_pct": rhmin,
        "spec_humidity": spec_h,
        "tb19v_k": tb19,
        "tb37v_k": tb37,
    }
    fields["tb_diff_k"] = fields["tb19v_k"] - fields["tb37v_k"]
    cube = np.stack([fields[a] for a in ATTRIBUTES], axis=2)  # (n, Y, f, m)

    stations = [
        StationMeta(
            station_id=f"SYN{i:03d}",
            latitude=float(lat[i]),
            longitude=float(lon[i]),
            elevation_ft=float(elev_ft[i]),
            southness=float(south[i]),
            land_cover=int(cover[i]),
            prompt_key=_prompt_key(lon[i], elev_ft[i]),
        )
        for i in range(n)
    ]
    series = [
        DailySeries(stations[i].station_id, first_year + y, np.ascontiguousarray(cube[i, y]))
        for i in range(n)
        for y in range(Y)
    ]
    return Dataset(stations, series)
