"""Station metadata, per-season attribute series and the dataset container."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geo import FEET_TO_METERS, GeoPoint

ATTRIBUTES = (
    "swe_mm",
    "tmax_c",
    "tmin_c",
    "precip_accum_mm",
    "srad_wm2",
    "wind_ms",
    "rhmax_pct",
    "rhmin_pct",
    "spec_humidity",
    "tb19v_k",
    "tb37v_k",
    "tb_diff_k",
)
SWE = ATTRIBUTES.index("swe_mm")
TB19 = ATTRIBUTES.index("tb19v_k")
TB37 = ATTRIBUTES.index("tb37v_k")
TBDIFF = ATTRIBUTES.index("tb_diff_k")
TMAX = ATTRIBUTES.index("tmax_c")
TMIN = ATTRIBUTES.index("tmin_c")

SEASON_DAYS = 180


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    latitude: float
    longitude: float
    elevation_ft: float
    southness: float
    land_cover: int
    prompt_key: str

    def __post_init__(self):
        if not -1.0 <= self.southness <= 1.0:
            raise ValueError(f"{self.station_id}: southness {self.southness} outside [-1, 1]")

    @property
    def geo(self) -> GeoPoint:
        return GeoPoint(self.latitude, self.longitude, self.elevation_ft * FEET_TO_METERS)


@dataclass
class DailySeries:
    """One station's attributes for one water year, shape ``(f, m)``.

    Column ``d`` is day ``d`` counted from Dec 1 of the previous calendar
    year.
    """

    station_id: str
    water_year: int
    attributes: np.ndarray

    @property
    def n_days(self):
        return self.attributes.shape[1]

    @property
    def swe(self):
        return self.attributes[SWE]

    def check(self, atol=1e-9):
        a = self.attributes
        if a.shape[0] != len(ATTRIBUTES):
            raise ValueError(f"expected {len(ATTRIBUTES)} attribute rows, got {a.shape[0]}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{self.station_id}/{self.water_year}: non-finite values")
        if np.any(a[SWE] < 0):
            raise ValueError(f"{self.station_id}/{self.water_year}: negative SWE")
        if np.any(a[TMAX] < a[TMIN]):
            raise ValueError(f"{self.station_id}/{self.water_year}: tmax < tmin")
        if np.max(np.abs(a[TBDIFF] - (a[TB19] - a[TB37]))) > atol:
            raise ValueError(f"{self.station_id}/{self.water_year}: tb_diff inconsistent")


@dataclass
class Dataset:
    """Stations plus one :class:`DailySeries` per (station, water year).

    Every station has every water year. Unpacks as ``(stations, series)``.
    """

    stations: list
    series: list
    _cube: np.ndarray = field(default=None, repr=False, compare=False)

    def __iter__(self):
        yield self.stations
        yield self.series

    @property
    def station_ids(self):
        return [s.station_id for s in self.stations]

    @property
    def years(self):
        return sorted({s.water_year for s in self.series})

    @property
    def n_days(self):
        return self.series[0].n_days if self.series else SEASON_DAYS

    def station_index(self, station_id):
        return self.station_ids.index(station_id)

    @property
    def cube(self):
        """Array of shape ``(n_stations, n_years, f, m)``."""
        if self._cube is None:
            ids = {sid: i for i, sid in enumerate(self.station_ids)}
            yrs = {y: j for j, y in enumerate(self.years)}
            cube = np.full(
                (len(ids), len(yrs), len(ATTRIBUTES), self.n_days), np.nan
            )
            for s in self.series:
                cube[ids[s.station_id], yrs[s.water_year]] = s.attributes
            if np.isnan(cube).any():
                raise ValueError("dataset is missing some (station, year) series")
            self._cube = cube
        return self._cube

    def get(self, station_id, water_year):
        for s in self.series:
            if s.station_id == station_id and s.water_year == water_year:
                return s
        raise KeyError((station_id, water_year))

    def subset(self, station_ids):
        keep = set(station_ids)
        return Dataset(
            [s for s in self.stations if s.station_id in keep],
            [s for s in self.series if s.station_id in keep],
        )
