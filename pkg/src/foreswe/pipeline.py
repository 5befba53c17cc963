"""End-to-end runs: data, split, windows, pretraining, GP fit, forecast,
report; plus checkpoint I/O and the scaling benchmark."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gp
from . import numerics as nm
from . import plotting, rawgp
from .data import AccessLog, Dataset, SplitSpec, build_windows, generate_synthetic, load_dataset
from .data import group_by_peak_swe, write_dataset
from .data.windows import DEFAULT_WINDOWS
from .errors import ConfigError, ForeSWEError, NumericalError
from .geo import pairwise_geo
from .metrics import ForecastTable, actual_targets, build_report
from .model import Encoder, EncoderConfig, _const, _spatial, init_params, pretrain

log = logging.getLogger(__name__)

RUN_FORMAT = "foreswe-run-v1"
GP_FORMAT = "foreswe-gp-v1"
MODE_HORIZON = {"daily": 10, "weekly": 4}
FORECAST_HEADER = ("station_id", "day_index", "horizon_step", "lower_mm", "mean_mm", "upper_mm")


# ---------------------------------------------------------------------------
# configuration


def _from_mapping(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {', '.join(sorted(unknown))}")
    return cls(**d)


@dataclass
class SplitConfig:
    """Explicit year lists, or counts taken from the ends of the data."""

    buffer_years: list = None
    train_years: list = None
    test_years: list = None
    n_buffer: int = 3
    n_test: int = 1

    def __post_init__(self):
        explicit = (self.buffer_years, self.train_years, self.test_years)
        if any(v is not None for v in explicit) and (self.train_years is None or self.test_years is None):
            raise ConfigError("give both train_years and test_years, or neither")

    def resolve(self, years):
        if self.train_years is None:
            return SplitSpec.from_years(years, self.n_buffer, self.n_test)
        split = SplitSpec(tuple(self.buffer_years or ()), tuple(self.train_years), tuple(self.test_years))
        missing = set(split.buffer_years + split.train_years + split.test_years) - set(years)
        if missing:
            raise ConfigError(f"split names years absent from the data: {sorted(missing)}")
        return split


@dataclass
class EncoderSettings:
    d_model: int = 64
    windows: list = field(default_factory=lambda: [list(w) for w in DEFAULT_WINDOWS])
    d_gp: int = 8
    inner_softmax: bool = False
    prompt_scale: float = 0.5
    epochs: int = 25
    learning_rate: float = 0.1
    batch_days: int = 16
    clip_norm: float = 1.0


@dataclass
class GpSettings:
    tau: int = 3
    d_t: int = 4
    n_inducing: int = 128
    iterations: int = 100
    learning_rate: float = 0.05
    max_fit_points: int = 2000
    alpha: float = 0.95


@dataclass
class PathsConfig:
    stations_csv: str = None
    daily_csv: str = None
    out_dir: str = None


@dataclass
class SyntheticConfig:
    stations: int = 16
    years: int = 8


@dataclass
class RunConfig:
    mode: str = "daily"
    horizon: int = None
    split: SplitConfig = field(default_factory=SplitConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    gp: GpSettings = field(default_factory=GpSettings)
    model: str = "foreswe"
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in MODE_HORIZON:
            raise ConfigError(f"mode must be one of {sorted(MODE_HORIZON)}, got {self.mode!r}")
        if self.horizon is None:
            self.horizon = MODE_HORIZON[self.mode]
        if self.horizon != MODE_HORIZON[self.mode]:
            raise ConfigError(f"{self.mode} mode forecasts {MODE_HORIZON[self.mode]} steps, not {self.horizon}")
        if self.model not in ("foreswe", "rawgp"):
            raise ConfigError(f"model must be 'foreswe' or 'rawgp', got {self.model!r}")
        if (self.paths.stations_csv is None) != (self.paths.daily_csv is None):
            raise ConfigError("give both stations_csv and daily_csv, or neither for synthetic data")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        d = dict(d)
        nested = {"split": SplitConfig, "encoder": EncoderSettings, "gp": GpSettings,
                  "paths": PathsConfig, "synthetic": SyntheticConfig}
        for key, sub in nested.items():
            d[key] = _from_mapping(sub, d.get(key), key)
        try:
            return _from_mapping(cls, d, "config")
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def to_dict(self):
        return asdict(self)

    def encoder_config(self):
        e = self.encoder
        return EncoderConfig(d_model=e.d_model, windows=tuple(tuple(w) for w in e.windows), d_gp=e.d_gp,
                             horizon=self.horizon, seed=self.seed, inner_softmax=e.inner_softmax,
                             prompt_scale=e.prompt_scale)


# ---------------------------------------------------------------------------
# helpers


@contextlib.contextmanager
def stage(name):
    """Prefix errors raised inside the block with the pipeline stage."""
    try:
        yield
    except ForeSWEError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
            exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        err = NumericalError(f"[{name}] {exc}")
        err.stage = name
        raise err from exc


@contextlib.contextmanager
def _single_thread(enabled):
    if enabled:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def load_data(config):
    if config.paths.stations_csv is not None:
        return load_dataset(config.paths.stations_csv, config.paths.daily_csv)
    return generate_synthetic(config.synthetic.stations, config.synthetic.years, config.seed)


def _gp_training_set(features, targets):
    h = targets.shape[1]
    return (np.repeat(features, h, axis=0), np.tile(np.arange(1, h + 1), len(features)),
            targets.ravel())


def fit_head(config, features, targets):
    x, t, y = _gp_training_set(features, targets)
    g = config.gp
    hp = gp.GpHyperparams.initial(x, tau=g.tau, n_times=config.horizon + 1, d_t=g.d_t, seed=config.seed)
    return gp.fit(x, t, y, hp, mode="sparse", n_inducing=min(g.n_inducing, len(y)),
                  iterations=g.iterations, learning_rate=g.learning_rate,
                  max_fit_points=g.max_fit_points, seed=config.seed)


@dataclass
class Checkpoint:
    """Everything needed to forecast and evaluate without retraining."""

    config: RunConfig
    split: SplitSpec
    dataset: Dataset
    posterior: gp.GpPosterior
    encoder: Encoder = None
    raw_scaler: nm.Standardizer = None

    @property
    def bias(self):
        norm = None if self.encoder is None else self.encoder.geo_normalization
        return pairwise_geo([s.geo for s in self.dataset.stations], norm)

    def windows(self, years, days=None, log=None, stage_name=None):
        c = self.config
        wins = c.encoder.windows
        return build_windows(self.dataset, years, wins, c.horizon, c.mode, days=days, log=log,
                             stage=stage_name)

    def features(self, windows):
        if self.encoder is not None:
            reps, _ = self.encoder.encode(windows, self.dataset.stations, self.bias)
            return reps
        x, _ = rawgp.build_raw_features(self.dataset, windows, self.raw_scaler)
        return x

    def forecast_table(self, windows):
        mean, var = gp.predict_horizon(self.posterior, self.features(windows), self.config.horizon)
        iv = gp.interval(mean, var, self.config.gp.alpha)
        return ForecastTable(windows.location, windows.year, windows.day, mean, var, iv.lower, iv.upper)

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": RUN_FORMAT,
            "config": self.config.to_dict(),
            "split": {k: list(v) for k, v in asdict(self.split).items()},
        }
        _dump(out / "checkpoint.json", meta)
        write_dataset(self.dataset, out / "data")
        if self.encoder is not None:
            _dump(out / "encoder.json", self.encoder.to_dict())
            _dump(out / "gp.json", self.posterior.to_dict(GP_FORMAT))
        else:
            d = self.posterior.to_dict(rawgp.GP_FORMAT)
            d["raw_scaler"] = self.raw_scaler.to_dict()
            _dump(out / "gp.json", d)

    @classmethod
    def load(cls, path):
        root = Path(path)
        try:
            meta = json.loads((root / "checkpoint.json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{root} is not a run checkpoint: {exc}") from exc
        if meta.get("format") != RUN_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {meta.get('format')!r}")
        config = RunConfig.from_dict(meta["config"])
        split = SplitSpec(**{k: tuple(v) for k, v in meta["split"].items()})
        dataset = load_dataset(root / "data" / "stations.csv", root / "data" / "daily.csv")
        gpd = json.loads((root / "gp.json").read_text(encoding="utf-8"))
        if config.model == "foreswe":
            encoder = Encoder.from_dict(json.loads((root / "encoder.json").read_text(encoding="utf-8")))
            return cls(config, split, dataset, gp.GpPosterior.from_dict(gpd, GP_FORMAT), encoder)
        return cls(config, split, dataset, gp.GpPosterior.from_dict(gpd, rawgp.GP_FORMAT),
                   raw_scaler=nm.Standardizer.from_dict(gpd["raw_scaler"]))


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def write_forecast_csv(path, table, dataset):
    """One row per (origin, station, step), ordered by day, station, step."""
    order = np.lexsort((table.location, table.day, table.year))
    ids = dataset.station_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_HEADER)
        for i in order:
            for j in range(table.horizon):
                w.writerow((ids[table.location[i]], int(table.day[i]), j + 1,
                            f"{table.lower[i, j]:.6f}", f"{table.mean[i, j]:.6f}",
                            f"{table.upper[i, j]:.6f}"))
    return Path(path)


def check_audit(audit, split):
    """Raise if any training stage touched a test-year target."""
    test = set(split.test_years)
    for rec in audit.entries:
        if rec["stage"] != "forecast" and rec["kind"] == "target" and rec["year"] in test:
            raise ConfigError(f"stage {rec['stage']!r} read test-year {rec['year']} targets")


def audit_ranges(audit):
    """Collapse the access log to one day range per (stage, kind, year).

    History ranges may start below 0, meaning days of earlier years.
    """
    spans = {}
    for e in audit.entries:
        key = (e["stage"], e["kind"], e["year"])
        lo, hi = spans.get(key, (e["first_day"], e["last_day"]))
        spans[key] = (min(lo, e["first_day"]), max(hi, e["last_day"]))
    return [dict(stage=k[0], kind=k[1], year=k[2], first_day=v[0], last_day=v[1])
            for k, v in sorted(spans.items())]


# ---------------------------------------------------------------------------
# run


def train(config):
    """Fit the encoder (unless Raw-GP) and the GP head on the training years.

    Returns the checkpoint and the access log of training-stage reads.
    """
    audit = AccessLog()
    with stage("data"):
        dataset = load_data(config)
    with stage("split"):
        split = config.split.resolve(dataset.years)
    with stage("windows"):
        train_w = build_windows(dataset, split.train_years, config.encoder.windows, config.horizon,
                                config.mode, log=audit, stage="train")
    if config.model == "foreswe":
        with stage("pretrain"):
            bias = pairwise_geo([s.geo for s in dataset.stations])
            encoder = Encoder.initialize(config.encoder_config(), train_w, dataset.stations,
                                         bias.normalization)
            e = config.encoder
            pretrain(encoder, train_w, dataset.stations, bias, epochs=e.epochs,
                     learning_rate=e.learning_rate, batch_days=e.batch_days, clip_norm=e.clip_norm)
        with stage("represent"):
            features, _ = encoder.encode(train_w, dataset.stations, bias)
        scaler = None
    else:
        encoder = None
        with stage("represent"):
            features, scaler = rawgp.build_raw_features(dataset, train_w)
    with stage("gp_fit"):
        posterior = fit_head(config, features, train_w.targets)
    return Checkpoint(config, split, dataset, posterior, encoder, scaler), audit


def evaluate(ckpt, audit=None):
    """Forecast every test-year origin and build the report."""
    with stage("forecast"):
        test_w = ckpt.windows(ckpt.split.test_years, log=audit, stage_name="forecast")
        table = ckpt.forecast_table(test_w)
    with stage("report"):
        groups = group_by_peak_swe(ckpt.dataset, ckpt.split.train_years)
        report = build_report(table, ckpt.dataset, groups, ckpt.config.mode, ckpt.config.gp.alpha,
                              test_years=ckpt.split.test_years)
    return table, report


def write_outputs(ckpt, table, report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for y in ckpt.split.test_years:
        k = table.year == y
        sub = ForecastTable(*(getattr(table, f.name)[k] for f in fields(ForecastTable)))
        paths.append(write_forecast_csv(out / f"forecasts_{y}.csv", sub, ckpt.dataset))
    paths += report.write(out / "report")
    figs = out / "figures"
    paths.append(plotting.nse_histogram(report, figs / "nse_buckets.png"))
    paths.append(plotting.group_month_heatmap(report, figs / "group_month_bias.png"))
    # the station with the median NSE, first test year, step 1
    ranked = sorted((v, s) for s, v in report.nse.items() if np.isfinite(v))
    if ranked:
        sid = ranked[len(ranked) // 2][1]
        k = (table.location == ckpt.dataset.station_index(sid)) & (table.year == ckpt.split.test_years[0])
        actual = actual_targets(ckpt.dataset, table, ckpt.config.mode)[k]
        paths.append(plotting.station_forecast(
            table.day[k], actual[:, 0], table.lower[k, 0], table.mean[k, 0], table.upper[k, 0],
            sid, 1, figs / "median_station.png"))
    return paths


def run_pipeline(config, out_dir=None):
    """Train, forecast the test years and report.

    Artifacts (checkpoint, forecasts, report tables, figures, audit log)
    go to ``out_dir`` or ``config.paths.out_dir`` when either is set.
    """
    out_dir = out_dir or config.paths.out_dir
    with _single_thread(config.deterministic):
        ckpt, audit = train(config)
        check_audit(audit, ckpt.split)
        table, report = evaluate(ckpt, audit)
        if out_dir is not None:
            ckpt.save(out_dir)
            write_outputs(ckpt, table, report, out_dir)
            _dump(Path(out_dir) / "audit.json", {"ranges": audit_ranges(audit)})
    return report


def forecast_day(ckpt, day, year=None):
    """ForecastTable for every station at origin ``day`` of ``year``
    (default: the last test year)."""
    year = ckpt.split.test_years[-1] if year is None else int(year)
    if year not in ckpt.dataset.years:
        raise ConfigError(f"year {year} is not in the checkpoint data")
    with stage("forecast"):
        return ckpt.forecast_table(ckpt.windows([year], days=[int(day)]))


# ---------------------------------------------------------------------------
# benchmark


def _best_time(fn, repeats, calls=1):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(calls):
            fn()
        best = min(best, (time.perf_counter() - t0) / calls)
    return best


def benchmark(sizes, d_model=2, batch_days=1024, attention_calls=20, points_per_station=1024,
              n_inducing=32, gp_iterations=5, repeats=5, seed=0):
    """Wall time of spatial attention and of a sparse GP fit for each
    station count ``n``.

    Attention runs on ``batch_days`` days of ``n`` stations with a small
    ``d_model`` so the ``n^2`` terms dominate; the GP fit uses
    ``points_per_station * n`` points at fixed ``n_inducing``.
    Returns a list of row dicts with doubling ratios against the
    previous size.
    """
    sizes = [int(n) for n in sizes]
    if not sizes or any(n < 1 for n in sizes) or sizes != sorted(sizes):
        raise ConfigError("benchmark sizes must be positive and ascending")
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(d_model=d_model, d_gp=max(1, d_model // 2), seed=seed)
    params = _const(init_params(cfg))
    rows = []
    for n in sizes:
        x = nm.Tensor(rng.standard_normal((batch_days, n, cfg.width)))
        dist = np.abs(rng.standard_normal((n, n)))
        dist = (dist + dist.T) / 2
        np.fill_diagonal(dist, 0.0)
        t_att = _best_time(lambda: _spatial(params, x, dist, dist, d_model, cfg.inner_softmax),
                           repeats, attention_calls)

        npts = points_per_station * n
        xs = rng.standard_normal((npts, 8))
        ys = np.sin(xs[:, 0]) + 0.1 * rng.standard_normal(npts)
        ts = np.zeros(npts, dtype=int)
        hp = gp.GpHyperparams.initial(xs, tau=1, n_times=1, seed=seed)
        t_gp = _best_time(lambda: gp.fit(xs, ts, ys, hp, mode="sparse", n_inducing=n_inducing,
                                         iterations=gp_iterations, seed=seed), repeats)
        row = {"n": n, "gp_points": npts, "attention_s": t_att, "gp_fit_s": t_gp,
               "attention_ratio": float("nan"), "gp_ratio": float("nan")}
        if rows:
            row["attention_ratio"] = t_att / rows[-1]["attention_s"]
            row["gp_ratio"] = t_gp / rows[-1]["gp_fit_s"]
        rows.append(row)
    return rows


BENCH_COLUMNS = ("n", "gp_points", "attention_s", "gp_fit_s", "attention_ratio", "gp_ratio")


def write_benchmark_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r["n"], r["gp_points"]] + [
                "" if np.isnan(r[c]) else f"{r[c]:.6g}" for c in BENCH_COLUMNS[2:]])
    return Path(path)


def scaling_ok(rows, attention_band=(2.5, 8.0), gp_band=(1.5, 3.0)):
    """Whether every doubling step lands in the expected ratio bands.

    Only steps where ``n`` exactly doubles are checked; a single row
    passes trivially.
    """
    ok = True
    for prev, cur in zip(rows, rows[1:]):
        if cur["n"] != 2 * prev["n"]:
            continue
        ok &= attention_band[0] <= cur["attention_ratio"] <= attention_band[1]
        ok &= gp_band[0] <= cur["gp_ratio"] <= gp_band[1]
    return bool(ok)
