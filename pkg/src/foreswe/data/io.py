"""CSV ingestion and export.

Stations with more than 10% missing SWE in any water year are dropped.
Remaining gaps are forward-filled within the year, then zero-filled, and
``tb_diff_k`` is recomputed from the two brightness temperatures.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from ..errors import EmptyDataset, ParseError, SchemaError
from .core import ATTRIBUTES, SEASON_DAYS, SWE, TB19, TB37, TBDIFF, TMAX, TMIN, DailySeries, Dataset, StationMeta

log = logging.getLogger(__name__)

STATION_COLUMNS = (
    "station_id",
    "latitude",
    "longitude",
    "elevation_ft",
    "southness",
    "land_cover",
    "prompt_key",
)
DAILY_COLUMNS = ("station_id", "water_year", "day_index") + ATTRIBUTES[:-1]
MAX_MISSING_FRACTION = 0.10

_MISSING = {"", "nan", "NaN", "NA", "null"}


def _check_header(header, expected, path):
    if header is None:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in header]
    if tuple(header) != expected:
        missing = [c for c in expected if c not in header]
        extra = [c for c in header if c not in expected]
        detail = []
        if missing:
            detail.append(f"missing {missing}")
        if extra:
            detail.append(f"unexpected {extra}")
        if not detail:
            detail.append("columns out of order")
        raise SchemaError(f"{path}: bad header ({'; '.join(detail)})")


def _float(text, row, column, allow_missing=False):
    text = text.strip()
    if text in _MISSING:
        if allow_missing:
            return np.nan
        raise ParseError(f"missing value in column {column!r}", row)
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} in column {column!r}", row) from None


def _int(text, row, column):
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"cannot parse {text!r} in column {column!r} as integer", row) from None


def read_stations(path):
    path = Path(path)
    stations = []
    seen = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), STATION_COLUMNS, path)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(STATION_COLUMNS):
                raise ParseError(f"expected {len(STATION_COLUMNS)} fields, got {len(row)}", row_no)
            sid = row[0].strip()
            if sid in seen:
                raise SchemaError(f"{path}: duplicate station_id {sid!r}")
            seen.add(sid)
            try:
                stations.append(
                    StationMeta(
                        station_id=sid,
                        latitude=_float(row[1], row_no, "latitude"),
                        longitude=_float(row[2], row_no, "longitude"),
                        elevation_ft=_float(row[3], row_no, "elevation_ft"),
                        southness=_float(row[4], row_no, "southness"),
                        land_cover=_int(row[5], row_no, "land_cover"),
                        prompt_key=row[6].strip(),
                    )
                )
            except ValueError as exc:
                raise ParseError(str(exc), row_no) from None
    return stations


def read_daily(path, station_ids):
    """Raw per-(station, year) arrays with NaN for anything missing."""
    path = Path(path)
    known = set(station_ids)
    records = {}
    n_days = SEASON_DAYS
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), DAILY_COLUMNS, path)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DAILY_COLUMNS):
                raise ParseError(f"expected {len(DAILY_COLUMNS)} fields, got {len(row)}", row_no)
            sid = row[0].strip()
            if sid not in known:
                raise SchemaError(f"{path}: unknown station_id {sid!r} (row {row_no})")
            year = _int(row[1], row_no, "water_year")
            day = _int(row[2], row_no, "day_index")
            if day < 0:
                raise ParseError(f"negative day_index {day}", row_no)
            values = [
                _float(v, row_no, c, allow_missing=True)
                for v, c in zip(row[3:], DAILY_COLUMNS[3:])
            ]
            records.setdefault((sid, year), {})[day] = values
            n_days = max(n_days, day + 1)
    return records, n_days


def _forward_fill(row):
    out = row.copy()
    last = np.nan
    for i, v in enumerate(out):
        if np.isnan(v):
            out[i] = last
        else:
            last = v
    return np.nan_to_num(out, nan=0.0)


def load_dataset(stations_csv, daily_csv) -> Dataset:
    stations = read_stations(stations_csv)
    if not stations:
        raise EmptyDataset(f"{stations_csv}: no stations")
    records, n_days = read_daily(daily_csv, [s.station_id for s in stations])
    years = sorted({y for _, y in records})
    if not years:
        raise EmptyDataset(f"{daily_csv}: no daily rows")

    kept_stations, series = [], []
    f = len(ATTRIBUTES)
    for st in stations:
        arrays = []
        dropped = False
        for year in years:
            a = np.full((f, n_days), np.nan)
            for day, values in records.get((st.station_id, year), {}).items():
                a[: f - 1, day] = values
            if np.isnan(a[SWE]).mean() > MAX_MISSING_FRACTION:
                log.info("dropping %s: water year %d has >10%% missing SWE", st.station_id, year)
                dropped = True
                break
            arrays.append((year, a))
        if dropped:
            continue
        kept_stations.append(st)
        for year, a in arrays:
            for i in range(f - 1):
                a[i] = _forward_fill(a[i])
            a[SWE] = np.maximum(a[SWE], 0.0)
            hi = np.maximum(a[TMAX], a[TMIN])
            lo = np.minimum(a[TMAX], a[TMIN])
            a[TMAX], a[TMIN] = hi, lo
            a[TBDIFF] = a[TB19] - a[TB37]
            series.append(DailySeries(st.station_id, year, a))
    if not kept_stations:
        raise EmptyDataset("every station failed the missing-data filter")
    return Dataset(kept_stations, series)


def write_dataset(dataset, out_dir):
    """Write ``stations.csv`` and ``daily.csv``; floats use ``repr`` so a
    reload reproduces them exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stations_path = out_dir / "stations.csv"
    daily_path = out_dir / "daily.csv"
    with stations_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATION_COLUMNS)
        for s in dataset.stations:
            w.writerow(
                [s.station_id, repr(float(s.latitude)), repr(float(s.longitude)),
                 repr(float(s.elevation_ft)), repr(float(s.southness)), int(s.land_cover),
                 s.prompt_key]
            )
    with daily_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DAILY_COLUMNS)
        for s in sorted(dataset.series, key=lambda s: (s.station_id, s.water_year)):
            a = s.attributes
            for d in range(s.n_days):
                w.writerow(
                    [s.station_id, s.water_year, d]
                    + [repr(float(v)) for v in a[: len(ATTRIBUTES) - 1, d]]
                )
    return stations_path, daily_path
