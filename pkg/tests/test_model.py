import numpy as np
import pytest

from foreswe import numerics as nm
from foreswe.data import SplitSpec, build_windows, generate_synthetic
from foreswe.data.core import ATTRIBUTES, SWE
from foreswe.errors import ConfigError, DivergenceError, ShapeMismatch
from foreswe.geo import GeoNormalization, pairwise_geo
from foreswe.model import (
    Encoder,
    EncoderConfig,
    forward,
    init_params,
    mse_objective,
    pretrain,
    prompt_vector,
)
from oracles import aggregate_oracle, spatial_oracle

F = len(ATTRIBUTES)


def make_encoder(config, rng=None):
    enc = Encoder(config, init_params(config), nm.Standardizer(np.zeros(6), np.ones(6)),
                  nm.Standardizer(np.zeros(F), np.ones(F)), GeoNormalization(0, 1, 0, 1))
    if rng is not None:
        # nonzero geo-bias and biases so every term is exercised
        for k, v in enc.params.items():
            enc.params[k] = v + 0.3 * rng.standard_normal(v.shape)
    return enc


def random_bias(rng, n):
    d = rng.uniform(0, 1, (n, n))
    a = rng.uniform(0, 1, (n, n))
    d, a = (d + d.T) / 2, (a + a.T) / 2
    np.fill_diagonal(d, 0)
    np.fill_diagonal(a, 0)
    return d, a


class Bias:
    def __init__(self, d, a):
        self.distance, self.angle = d, a


class TestConfig:
    def test_reduced_dimension_must_be_smaller(self):
        with pytest.raises(ConfigError):
            EncoderConfig(d_model=8, d_gp=8)

    def test_initial_geo_bias_is_zero(self):
        p = init_params(EncoderConfig(d_model=8, d_gp=2))
        assert p["w_h"] == 0.0 and p["w_theta"] == 0.0
        assert p["w_h"].shape == ()


class TestEmbedLocation:
    def test_zero_spatial_weights_leave_prompt(self, small_dataset):
        enc = make_encoder(EncoderConfig(d_model=8, d_gp=2))
        enc.params["sp_w"][:] = 0
        st = small_dataset.stations[0]
        np.testing.assert_allclose(enc.embed_location(st, 2004, 10), prompt_vector(st.prompt_key, 8))

    def test_shared_prompt_key(self):
        np.testing.assert_array_equal(prompt_vector("alpine-high", 16), prompt_vector("alpine-high", 16))
        assert not np.array_equal(prompt_vector("alpine-high", 16), prompt_vector("maritime-low", 16))


class TestAggregateAttributes:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cfg = EncoderConfig(d_model=6, d_gp=2, windows=(("daily", 5), ("weekly", 3)), seed=seed)
        enc = make_encoder(cfg, rng)
        c = seed % 2
        k = cfg.windows[c][1]
        q, h = rng.standard_normal(6), rng.standard_normal((F, k))
        got = enc.aggregate_attributes(q, h, c)
        want = aggregate_oracle(enc.params, c, q, h, 6)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_single_attribute_returns_value_projection(self, rng):
        cfg = EncoderConfig(d_model=4, d_gp=2, windows=(("daily", 3),), n_attributes=1)
        enc = make_encoder(cfg, rng)
        h = rng.standard_normal((1, 3))
        expected = (h[0] @ enc.params["emb_w0"][0] + enc.params["emb_b0"][0]) @ enc.params["tv0"]
        for _ in range(3):
            np.testing.assert_allclose(enc.aggregate_attributes(rng.standard_normal(4), h, 0), expected)

    def test_identical_rows_give_common_value(self, rng):
        cfg = EncoderConfig(d_model=4, d_gp=2, windows=(("daily", 3),))
        enc = make_encoder(cfg)
        enc.params["emb_w0"][:] = enc.params["emb_w0"][0]
        h = np.tile(rng.standard_normal(3), (F, 1))
        expected = (h[0] @ enc.params["emb_w0"][0]) @ enc.params["tv0"]
        np.testing.assert_allclose(enc.aggregate_attributes(rng.standard_normal(4), h, 0), expected)

    def test_shape_mismatch(self):
        enc = make_encoder(EncoderConfig(d_model=4, d_gp=2))
        with pytest.raises(ShapeMismatch):
            enc.aggregate_attributes(np.zeros(4), np.zeros((F, 7)), 0)


class TestSpatialAttention:
    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("inner", [True, False])
    def test_matches_oracle(self, seed, inner):
        rng = np.random.default_rng(100 + seed)
        cfg = EncoderConfig(d_model=3, d_gp=2, windows=(("daily", 4), ("weekly", 2)),
                            inner_softmax=inner, seed=seed)
        enc = make_encoder(cfg, rng)
        n = 2 + seed % 5
        x = rng.standard_normal((n, cfg.width))
        d, a = random_bias(rng, n)
        got = enc.spatial_attention(x, Bias(d, a))
        want = spatial_oracle(enc.params, x, d, a, 3, inner)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_single_location(self, rng):
        enc = make_encoder(EncoderConfig(d_model=4, d_gp=2, inner_softmax=True), rng)
        x = rng.standard_normal((1, 8))
        np.testing.assert_allclose(enc.spatial_attention(x, Bias(np.zeros((1, 1)), np.zeros((1, 1)))),
                                   x @ enc.params["sv"])

    def test_zero_bias_weights_ignore_geo(self, rng):
        enc = make_encoder(EncoderConfig(d_model=4, d_gp=2, inner_softmax=True), rng)
        enc.params["w_h"] = np.zeros(())
        enc.params["w_theta"] = np.zeros(())
        x = rng.standard_normal((4, 8))
        a = enc.spatial_attention(x, Bias(*random_bias(rng, 4)))
        b = enc.spatial_attention(x, Bias(*random_bias(rng, 4)))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("inner", [True, False])
    def test_both_softmax_stages_row_stochastic(self, rng, inner):
        enc = make_encoder(EncoderConfig(d_model=4, d_gp=2, inner_softmax=inner), rng)
        x = 10 * rng.standard_normal((5, 8))
        logits = enc.spatial_logits(x, Bias(*random_bias(rng, 5)))
        np.testing.assert_allclose(nm.softmax_rows(logits).sum(axis=1), 1.0, atol=1e-12)
        if inner:
            scores = (x @ enc.params["sq"]) @ (x @ enc.params["sk"]).T / 2.0
            np.testing.assert_allclose(nm.softmax_rows(scores).sum(axis=1), 1.0, atol=1e-12)

    def test_negative_distance_weight_lowers_logit(self, rng):
        enc = make_encoder(EncoderConfig(d_model=4, d_gp=2, inner_softmax=True), rng)
        enc.params["w_h"] = np.array(-0.7)
        x = rng.standard_normal((3, 8))
        d, a = random_bias(rng, 3)
        before = enc.spatial_logits(x, Bias(d, a))[0, 1]
        d2 = d.copy()
        d2[0, 1] += 0.2
        d2[1, 0] += 0.2
        assert enc.spatial_logits(x, Bias(d2, a))[0, 1] < before


class TestEncodeDay:
    @pytest.fixture
    def setup(self, small_dataset, rng):
        cfg = EncoderConfig(d_model=8, d_gp=3, windows=(("daily", 10), ("weekly", 3)), horizon=5)
        w = build_windows(small_dataset, [2004], cfg.windows, horizon=5, days=[40])
        bias = pairwise_geo([s.geo for s in small_dataset.stations])
        enc = Encoder.initialize(cfg, w, small_dataset.stations, bias.normalization)
        examples = [w[i] for i in range(len(w))]
        return enc, examples, bias, small_dataset.stations

    def test_shapes(self, setup):
        enc, examples, bias, stations = setup
        reps = enc.encode_day(examples, stations, bias)
        assert len(reps) == len(examples)
        assert all(r.r.shape == (3,) and r.t == 40 for r in reps)

    def test_permutation_equivariance(self, setup, rng):
        enc, examples, bias, stations = setup
        base = np.array([r.r for r in enc.encode_day(examples, stations, bias)])
        order = rng.permutation(len(examples))
        permuted = [examples[i] for i in order]
        reps = enc.encode_day(permuted, stations, bias.permute(order))
        np.testing.assert_allclose(np.array([r.r for r in reps]), base[order], atol=1e-12)
        assert [r.location_index for r in reps] == [int(i) for i in order]

    def test_zero_reduction(self, setup):
        enc, examples, bias, stations = setup
        enc.params["reduce"][:] = 0
        assert all(np.all(r.r == 0) for r in enc.encode_day(examples, stations, bias))

    def test_deterministic(self, setup):
        enc, examples, bias, stations = setup
        a = [r.r for r in enc.encode_day(examples, stations, bias)]
        b = [r.r for r in enc.encode_day(examples, stations, bias)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_mixed_days_rejected(self, setup, small_dataset):
        enc, examples, bias, stations = setup
        other = build_windows(small_dataset, [2004], enc.config.windows, horizon=5, days=[41])
        with pytest.raises(ShapeMismatch):
            enc.encode_day(examples[:-1] + [other[0]], stations, bias)

    def test_encode_matches_encode_day(self, setup, small_dataset):
        enc, examples, bias, stations = setup
        w = build_windows(small_dataset, [2004], enc.config.windows, horizon=5, days=[40])
        reps, _ = enc.encode(w, stations, bias)
        np.testing.assert_allclose(reps, [r.r for r in enc.encode_day(examples, stations, bias)],
                                   atol=1e-12)


class TestGradients:
    def test_every_encoder_parameter(self):
        rng = np.random.default_rng(7)
        cfg = EncoderConfig(d_model=4, d_gp=2, windows=(("daily", 3), ("weekly", 2)), horizon=3,
                            inner_softmax=True)
        params = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in init_params(cfg).items()}
        n, B = 3, 2
        d, a = random_bias(rng, n)
        obj = mse_objective(cfg, rng.standard_normal((B, n, 6)), rng.standard_normal((n, 4)),
                            [rng.standard_normal((B, n, F, k)) for _, k in cfg.windows],
                            rng.standard_normal((B, n, 3)), d, a)
        tape = nm.GradientTape(obj, params)
        for name in params:
            assert nm.grad_check(tape, name, 1e-6) < 1e-4, name


def tiny_windows(dataset, cfg, years):
    return build_windows(dataset, years, cfg.windows, cfg.horizon)


class TestPretrain:
    def test_zero_epochs_is_noop(self, small_dataset):
        cfg = EncoderConfig(d_model=6, d_gp=2, windows=(("daily", 5),), horizon=3)
        w = tiny_windows(small_dataset, cfg, [2004])
        bias = pairwise_geo([s.geo for s in small_dataset.stations])
        enc = Encoder.initialize(cfg, w, small_dataset.stations, bias.normalization)
        before = {k: v.copy() for k, v in enc.params.items()}
        pretrain(enc, w, small_dataset.stations, bias, epochs=0)
        assert all(np.array_equal(before[k], enc.params[k]) for k in before)
        assert enc.loss_history == []

    def test_constant_swe_is_learned(self, small_dataset):
        cube = small_dataset.cube.copy()
        cube[:, :, SWE] = 100.0
        from foreswe.data.core import DailySeries, Dataset

        years = small_dataset.years
        series = [DailySeries(s.station_id, y, cube[i, j]) for i, s in enumerate(small_dataset.stations)
                  for j, y in enumerate(years)]
        ds = Dataset(small_dataset.stations, series)
        cfg = EncoderConfig(d_model=6, d_gp=2, windows=(("daily", 5),), horizon=3)
        w = tiny_windows(ds, cfg, [2004])
        bias = pairwise_geo([s.geo for s in ds.stations])
        enc = Encoder.initialize(cfg, w, ds.stations, bias.normalization)
        spatial, hists, targets = enc.day_batches(w, len(ds.stations))
        initial = nm.GradientTape(
            mse_objective(cfg, spatial, enc.prompts(ds.stations), hists, targets, bias.distance,
                          bias.angle), enc.params).value
        pretrain(enc, w, ds.stations, bias, epochs=15)
        # targets are standardized, so unit variance is the reference scale
        assert enc.loss_history[-1] < 1e-2
        assert enc.loss_history[-1] < initial

    def test_loss_mostly_decreases(self):
        ds = generate_synthetic(8, 5, seed=11)
        split = SplitSpec.from_years(ds.years)
        cfg = EncoderConfig()
        w = build_windows(ds, split.train_years, cfg.windows, cfg.horizon)
        bias = pairwise_geo([s.geo for s in ds.stations])
        enc = Encoder.initialize(cfg, w, ds.stations, bias.normalization)
        pretrain(enc, w, ds.stations, bias, epochs=12)
        h = enc.loss_history
        down = sum(b <= a for a, b in zip(h, h[1:]))
        assert down >= 0.8 * (len(h) - 1)

    def test_reproducible(self, small_dataset):
        cfg = EncoderConfig(d_model=6, d_gp=2, windows=(("daily", 5),), horizon=3)
        w = tiny_windows(small_dataset, cfg, [2004])
        bias = pairwise_geo([s.geo for s in small_dataset.stations])
        runs = []
        for _ in range(2):
            enc = Encoder.initialize(cfg, w, small_dataset.stations, bias.normalization)
            pretrain(enc, w, small_dataset.stations, bias, epochs=2)
            runs.append(enc)
        assert all(np.array_equal(runs[0].params[k], runs[1].params[k]) for k in runs[0].params)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, small_dataset):
        cfg = EncoderConfig(d_model=6, d_gp=2, windows=(("daily", 5),), horizon=3)
        w = tiny_windows(small_dataset, cfg, [2004])
        bias = pairwise_geo([s.geo for s in small_dataset.stations])
        enc = Encoder.initialize(cfg, w, small_dataset.stations, bias.normalization)
        enc.params["head_b"] = np.full(3, np.inf)
        with pytest.raises(DivergenceError):
            pretrain(enc, w, small_dataset.stations, bias, epochs=1)

    def test_checkpoint_round_trip(self, small_dataset):
        cfg = EncoderConfig(d_model=6, d_gp=2, windows=(("daily", 5),), horizon=3)
        w = tiny_windows(small_dataset, cfg, [2004])
        bias = pairwise_geo([s.geo for s in small_dataset.stations])
        enc = Encoder.initialize(cfg, w, small_dataset.stations, bias.normalization)
        back = Encoder.from_dict(enc.to_dict())
        assert back.config == enc.config
        a, _ = enc.encode(w, small_dataset.stations, bias)
        b, _ = back.encode(w, small_dataset.stations, bias)
        np.testing.assert_array_equal(a, b)

    def test_checkpoint_format_checked(self):
        with pytest.raises(ConfigError):
            Encoder.from_dict({"format": "something-else"})
