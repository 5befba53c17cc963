"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal
summary under "acceptance criteria".
"""

import math
import time

import numpy as np
import pytest

from foreswe import gp, metrics, pipeline
from foreswe import numerics as nm
from foreswe.data.core import ATTRIBUTES
from foreswe.geo import GeoNormalization
from foreswe.model import Encoder, EncoderConfig, init_params, mse_objective
from oracles import aggregate_oracle, kernel_oracle, predict_oracle, spatial_oracle

SEEDS = range(5)
F = len(ATTRIBUTES)


class Bias:
    def __init__(self, distance, angle):
        self.distance, self.angle = distance, angle


def rel_err(got, want):
    got, want = np.asarray(got, float), np.asarray(want, float)
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)))


def random_encoder(rng, cfg):
    enc = Encoder(cfg, init_params(cfg), nm.Standardizer(np.zeros(6), np.ones(6)),
                  nm.Standardizer(np.zeros(F), np.ones(F)), GeoNormalization(0, 1, 0, 1))
    enc.params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in enc.params.items()}
    return enc


def random_geo(rng, n):
    d, a = rng.uniform(0, 1, (2, n, n))
    d, a = (d + d.T) / 2, (a + a.T) / 2
    np.fill_diagonal(d, 0)
    np.fill_diagonal(a, 0)
    return d, a


def random_hp(rng, d=2, tau=2, n_times=4, d_t=3, noise=0.1):
    return gp.GpHyperparams(
        log_ell=np.log(rng.uniform(0.5, 2.0, tau)), log_sigma=np.log(rng.uniform(0.5, 1.5, tau)),
        time_emb=rng.standard_normal((n_times, d_t)), mix=rng.standard_normal((tau, d_t)),
        gamma0=np.array(rng.standard_normal()), gamma1=rng.standard_normal(d),
        log_noise=np.log(np.array(noise)),
    )


def test_ac1_formula_oracles(criterion):
    start = time.perf_counter()
    worst = {"aggregate": 0.0, "spatial": 0.0, "kernel": 0.0, "predict": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = EncoderConfig(d_model=5, d_gp=2, windows=(("daily", 4), ("weekly", 3)),
                            inner_softmax=bool(seed % 2))
        enc = random_encoder(rng, cfg)
        c = seed % 2
        q, h = rng.standard_normal(5), rng.standard_normal((F, cfg.windows[c][1]))
        worst["aggregate"] = max(worst["aggregate"], rel_err(
            enc.aggregate_attributes(q, h, c), aggregate_oracle(enc.params, c, q, h, 5)))
        n = 2 + seed % 6
        x = rng.standard_normal((n, cfg.width))
        d, a = random_geo(rng, n)
        worst["spatial"] = max(worst["spatial"], rel_err(
            enc.spatial_attention(x, Bias(d, a)), spatial_oracle(enc.params, x, d, a, 5, cfg.inner_softmax)))

        hp = random_hp(rng, tau=1 + seed % 3)
        r1, r2 = rng.standard_normal((2, 2))
        t1, t2 = (int(v) for v in rng.integers(0, 4, 2))
        worst["kernel"] = max(worst["kernel"], rel_err(
            gp.kernel_lmc(r1, t1, r2, t2, hp), kernel_oracle(r1, t1, r2, t2, hp)))

        xt, xs = rng.standard_normal((8, 2)), rng.standard_normal((3, 2))
        tt, ts = rng.integers(1, 4, 8), rng.integers(1, 4, 3)
        y = 5 + 2 * rng.standard_normal(8)
        got = gp.fit(xt, tt, y, hp, iterations=0).predict(xs, ts)
        want = predict_oracle(hp, xt, tt, y, xs, ts)
        worst["predict"] = max(worst["predict"], rel_err(got[0], want[0]), rel_err(got[1], want[1]))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-10 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; 20 instances each; {elapsed:.1f}s"
    assert criterion("AC1 formula oracles", ok, detail)


def test_ac2_gradients(criterion):
    # step 1e-4: at 1e-6 roundoff swamps gradient entries near 1e-7
    start = time.perf_counter()
    worst = {}
    for seed in range(3):
        rng = np.random.default_rng(seed)
        cfg = EncoderConfig(d_model=4, d_gp=2, windows=(("daily", 3), ("weekly", 2)), horizon=3,
                            inner_softmax=bool(seed % 2))
        params = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in init_params(cfg).items()}
        n, B = 3, 2
        d, a = random_geo(rng, n)
        obj = mse_objective(cfg, rng.standard_normal((B, n, 6)), rng.standard_normal((n, 4)),
                            [rng.standard_normal((B, n, F, k)) for _, k in cfg.windows],
                            rng.standard_normal((B, n, 3)), d, a)
        tape = nm.GradientTape(obj, params)
        for name in params:
            worst[f"encoder.{name}"] = max(worst.get(f"encoder.{name}", 0.0), nm.grad_check(tape, name, 1e-4))

        hp = random_hp(rng).replace(inducing=rng.standard_normal((3, 2)))
        x, t, y = rng.standard_normal((8, 2)), rng.integers(1, 4, 8), rng.standard_normal(8)
        for mode, objective, keys in (
            ("exact", gp.exact_objective(x, t, y), gp.HP_KEYS),
            ("sparse", gp.sparse_objective(x, t, y, hp.tau), gp.HP_KEYS + ("inducing",)),
        ):
            tape = nm.GradientTape(objective, hp.as_dict(with_inducing=mode == "sparse"))
            for name in keys:
                key = f"gp_{mode}.{name}"
                worst[key] = max(worst.get(key, 0.0), nm.grad_check(tape, name, 1e-4))
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 60
    detail = f"{len(worst)} parameter arrays x 3 instances, worst {name} {err:.1e}; {elapsed:.1f}s"
    assert criterion("AC2 gradient suite", ok, detail)


def test_ac3_gp_recovery(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    truth = gp.GpHyperparams(
        log_ell=np.zeros(1), log_sigma=np.zeros(1), time_emb=np.ones((1, 1)), mix=np.ones((1, 1)),
        gamma0=np.zeros(()), gamma1=np.zeros(1), log_noise=np.log(np.array(0.01)),
    )
    n_train, n_test = 200, 1000
    x = rng.uniform(-10, 10, (n_train + n_test, 1))
    t = np.zeros(len(x), int)
    k = gp.kernel_matrix(x, t, x, t, truth) + truth.noise_var * np.eye(len(x))
    y = np.linalg.cholesky(k) @ rng.standard_normal(len(x))
    start_hp = gp.GpHyperparams.initial(x[:n_train], tau=1, n_times=1, d_t=1)
    start_hp = start_hp.replace(time_emb=np.ones((1, 1)), mix=np.ones((1, 1)))
    post = gp.fit(x[:n_train], t[:n_train], y[:n_train], start_hp, iterations=200,
                  learning_rate=0.05, fixed=("time_emb", "mix"))
    ell = math.exp(post.hp.log_ell[0])
    mean, var = post.predict(x[n_train:], t[n_train:])
    iv = gp.interval(mean, var, 0.95)
    cover = 100 * np.mean((iv.lower <= y[n_train:]) & (y[n_train:] <= iv.upper))
    elapsed = time.perf_counter() - start
    ok = 1 / 1.5 <= ell <= 1.5 and 90 <= cover <= 98 and elapsed < 120
    detail = f"fitted ell {ell:.3f} (truth 1), coverage {cover:.1f}% over {n_test} draws; {elapsed:.1f}s"
    assert criterion("AC3 GP recovery", ok, detail)


def test_ac4_sparse_exact_agreement(criterion):
    rng = np.random.default_rng(4)
    n = 200
    hp = random_hp(rng, tau=2)
    x = rng.uniform(-3, 3, (n, 2))
    t = rng.integers(1, 4, n)
    y = np.sin(x[:, 0]) * t + 0.1 * rng.standard_normal(n)
    exact = gp.fit(x, t, y, hp, iterations=10)
    sparse = gp.fit(x, t, y, hp.replace(inducing=x), mode="sparse", iterations=10, fixed=("inducing",))
    xs, ts = rng.uniform(-3, 3, (50, 2)), rng.integers(1, 4, 50)
    diff = np.max(np.abs(exact.predict(xs, ts)[0] - sparse.predict(xs, ts)[0])) / exact.y_scale

    excess = -np.inf
    for seed in range(50):
        r = np.random.default_rng(1000 + seed)
        h = random_hp(r).replace(inducing=r.standard_normal((1 + seed % 6, 2)))
        xb, tb, yb = r.standard_normal((12, 2)), r.integers(1, 4, 12), r.standard_normal(12)
        bound, _ = gp.sparse_bound(xb, tb, yb, h)
        excess = max(excess, bound + gp.nlml(xb, tb, yb, h)[0])
    ok = diff < 1e-4 and excess <= 1e-6
    detail = f"max mean gap {diff:.1e} (standardized, N={n}); largest bound - exact over 50 cases {excess:.2e}"
    assert criterion("AC4 sparse-exact agreement", ok, detail)


@pytest.fixture(scope="module")
def runs():
    cache = {}

    def get(model, mode, seed):
        key = (model, mode, seed)
        if key not in cache:
            cache[key] = pipeline.run_pipeline(pipeline.RunConfig(model=model, mode=mode, seed=seed))
        return cache[key]

    return get


@pytest.mark.slow
def test_ac5_end_to_end(criterion, runs):
    start = time.perf_counter()
    values = [runs("foreswe", "daily", s).median_nse() for s in SEEDS]
    elapsed = time.perf_counter() - start
    passes = sum(v > 0.75 for v in values)
    ok = passes >= 4 and elapsed < 600
    detail = f"median NSE {', '.join(f'{v:.3f}' for v in values)}; {passes}/5 > 0.75; {elapsed:.0f}s"
    assert criterion("AC5 end-to-end daily", ok, detail)


@pytest.mark.slow
def test_ac6a_foreswe_beats_rawgp_weekly(criterion, runs):
    fs = [runs("foreswe", "weekly", s).median_nse() for s in SEEDS]
    raw = [runs("rawgp", "weekly", s).median_nse() for s in SEEDS]
    wins = sum(a >= b for a, b in zip(fs, raw))
    detail = "foreswe/rawgp weekly " + ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(fs, raw))
    assert criterion("AC6a foreswe weekly >= rawgp weekly", wins >= 4, f"{detail}; {wins}/5")


@pytest.mark.slow
def test_ac6b_rawgp_daily_beats_weekly(criterion, runs):
    daily = [runs("rawgp", "daily", s).median_nse() for s in SEEDS]
    weekly = [runs("rawgp", "weekly", s).median_nse() for s in SEEDS]
    wins = sum(a >= b for a, b in zip(daily, weekly))
    detail = "rawgp daily/weekly " + ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(daily, weekly))
    assert criterion("AC6b rawgp daily >= rawgp weekly", wins >= 4, f"{detail}; {wins}/5")


def test_ac7_metric_examples(criterion):
    one = [gp.ForecastInterval(np.array([-1.0]), np.array([0.0]), np.array([1.0]))] * 100
    y = np.zeros(100)
    y[:5] = 9.0
    checks = {
        "nse 0.8": abs(metrics.nse([1, 2, 3, 5], [1, 2, 3, 4]) - 0.8) < 1e-12,
        "rb 0.10": abs(metrics.relative_bias([1.1, 2.2], [1, 2]) - 0.10) < 1e-12,
        "nll 0.918939": abs(metrics.nll_gaussian([0.0], [0.0], [1.0]) - 0.918939) < 1e-6,
        "nll +0.5": abs(metrics.nll_gaussian([1.0], [0.0], [1.0]) - 1.418939) < 1e-6,
        "ece all inside": np.allclose(metrics.ece_coverage(one, np.zeros(100), 0.95), (0.05, 100.0)),
        "ece none inside": np.allclose(metrics.ece_coverage(one, np.full(100, 9.0), 0.95), (0.95, 0.0)),
        "ece 95/100": np.allclose(metrics.ece_coverage(one, y, 0.95), (0.0, 95.0)),
    }
    failed = [k for k, v in checks.items() if not v]
    detail = f"{len(checks) - len(failed)}/{len(checks)} examples" + (f"; failed {failed}" if failed else "")
    assert criterion("AC7 metric examples", not failed, detail)


def test_ac8_scaling(criterion):
    rows = pipeline.benchmark([8, 16, 32])
    ok = pipeline.scaling_ok(rows)
    detail = "; ".join(f"n {r['n']}: attention x{r['attention_ratio']:.2f}, gp x{r['gp_ratio']:.2f}"
                       for r in rows[1:])
    assert criterion("AC8 scaling", ok, detail)


def test_ac9_reproducibility(criterion, tmp_path):
    cfg = {"seed": 7, "synthetic": {"stations": 6, "years": 5},
           "encoder": {"d_model": 8, "d_gp": 4, "epochs": 2},
           "gp": {"n_inducing": 16, "iterations": 5, "max_fit_points": 300}}
    for name in ("a", "b"):
        pipeline.run_pipeline(pipeline.RunConfig.from_dict(cfg), tmp_path / name)
    files = sorted(p.name for p in (tmp_path / "a").glob("forecasts_*.csv"))
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    ok = bool(files) and all(same)
    assert criterion("AC9 reproducibility", ok, f"{sum(same)}/{len(files)} forecast CSVs byte-identical")
