"""Attention encoder producing low-dimensional location representations.

Per day, every station gets a location embedding (affine map of its
spatial features plus a fixed prompt vector). For each history window the
station's attribute histories are embedded one attribute at a time and
fused by single-query attention, queried by the location embedding. The
per-window vectors are concatenated, mixed across stations by spatial
attention whose weights carry learnable distance and angle biases, and
projected down to ``d_gp`` dimensions. A linear head on that projection
is used only for MSE pretraining.

Arrays are batched as ``(days, stations, ...)``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .data.core import ATTRIBUTES, SWE
from .data.windows import DEFAULT_WINDOWS, spatial_features
from .errors import ConfigError, DivergenceError, ShapeMismatch
from .geo import GeoNormalization

log = logging.getLogger(__name__)

CKPT_FORMAT = "foreswe-ckpt-v1"
N_SPATIAL = 6


@dataclass
class EncoderConfig:
    d_model: int = 64
    windows: tuple = DEFAULT_WINDOWS
    d_gp: int = 8
    horizon: int = 10
    seed: int = 0
    n_attributes: int = len(ATTRIBUTES)
    # True applies a softmax to the scaled scores before the geo biases
    inner_softmax: bool = False
    prompt_scale: float = 0.5

    def __post_init__(self):
        self.windows = tuple((str(r), int(k)) for r, k in self.windows)
        if min(self.d_model, self.d_gp, self.horizon, self.n_attributes, len(self.windows)) < 1:
            raise ConfigError("encoder dimensions must be positive")
        if self.d_gp >= self.d_model:
            raise ConfigError("d_gp must be smaller than d_model")

    @property
    def n_windows(self):
        return len(self.windows)

    @property
    def width(self):
        return self.n_windows * self.d_model


@dataclass(frozen=True)
class LatentRepresentation:
    r: np.ndarray
    t: int
    location_index: int


def prompt_vector(key, d_model, scale=0.5):
    """Fixed pseudo-random vector keyed by the prompt string."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return scale * rng.standard_normal(d_model)


def init_params(config):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases and
    zero geo-bias scalars."""
    rng = np.random.default_rng(config.seed)
    d, f, w = config.d_model, config.n_attributes, config.width

    def u(fan_in, *shape):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, shape)

    p = {"sp_w": u(N_SPATIAL, N_SPATIAL, d), "sp_b": np.zeros(d)}
    for c, (_, k) in enumerate(config.windows):
        p[f"emb_w{c}"] = u(k, f, k, d)
        p[f"emb_b{c}"] = np.zeros((f, d))
        p[f"tq{c}"] = u(d, d, d)
        p[f"tk{c}"] = u(d, d, d)
        p[f"tv{c}"] = u(d, d, d)
    p["sq"] = u(w, w, w)
    p["sk"] = u(w, w, w)
    p["sv"] = u(w, w, w)
    p["w_h"] = np.zeros(())
    p["w_theta"] = np.zeros(())
    p["reduce"] = u(w, w, config.d_gp)
    p["head_w"] = u(config.d_gp, config.d_gp, config.horizon)
    p["head_b"] = np.zeros(config.horizon)
    return p


# ---------------------------------------------------------------------------
# forward blocks (Tensor in, Tensor out)


def _location(p, spatial, prompts):
    return spatial @ p["sp_w"] + p["sp_b"] + prompts


def _aggregate(p, c, query, hist, d_model):
    """query (..., d), hist (..., f, k) -> (..., d)."""
    lead = hist.shape[:-2]
    f, k = hist.shape[-2:]
    flat = hist.reshape(-1, f, k).swapaxes(0, 1)  # (f, M, k)
    emb = (flat @ p[f"emb_w{c}"]).swapaxes(0, 1).reshape(*lead, f, d_model)
    emb = emb + p[f"emb_b{c}"]
    q = query @ p[f"tq{c}"]
    keys = emb @ p[f"tk{c}"]
    vals = emb @ p[f"tv{c}"]
    scores = (keys @ q.reshape(*lead, d_model, 1)).reshape(*lead, 1, f) / math.sqrt(d_model)
    weights = nm.softmax(scores, axis=-1)
    return (weights @ vals).reshape(*lead, d_model)


def _spatial_logits(p, x, dist, angle, d_model, inner_softmax):
    q = x @ p["sq"]
    k = x @ p["sk"]
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(d_model)
    inner = nm.softmax(scores, axis=-1) if inner_softmax else scores
    return inner + p["w_h"] * dist + p["w_theta"] * angle


def _spatial(p, x, dist, angle, d_model, inner_softmax):
    logits = _spatial_logits(p, x, dist, angle, d_model, inner_softmax)
    return nm.softmax(logits, axis=-1) @ (x @ p["sv"])


def forward(p, config, spatial, prompts, histories, dist, angle):
    """Full encoder pass.

    Parameters
    ----------
    p : dict of Tensor
    spatial : (B, n, 6) standardized spatial features
    prompts : (n, d_model)
    histories : list of (B, n, f, k_c) standardized histories
    dist, angle : (n, n) normalized geo matrices

    Returns
    -------
    (representations (B, n, d_gp), head outputs (B, n, h))
    """
    d = config.d_model
    loc = _location(p, spatial, prompts)
    xs = [_aggregate(p, c, loc, h, d) for c, h in enumerate(histories)]
    x = nm.concatenate(xs, axis=-1) if len(xs) > 1 else xs[0]
    xbar = _spatial(p, x, dist, angle, d, config.inner_softmax)
    r = xbar @ p["reduce"]
    return r, r @ p["head_w"] + p["head_b"]


def _const(params):
    return {k: nm.Tensor(v) for k, v in params.items()}


# ---------------------------------------------------------------------------


@dataclass
class Encoder:
    """Encoder parameters plus the frozen input scaling it was trained with."""

    config: EncoderConfig
    params: dict
    spatial_scaler: nm.Standardizer
    attribute_scaler: nm.Standardizer
    geo_normalization: GeoNormalization
    loss_history: list = field(default_factory=list)

    @classmethod
    def initialize(cls, config, windows, stations, geo_normalization):
        """Fresh parameters with scalers fitted on ``windows``."""
        spatial_scaler = nm.Standardizer.fit(windows.spatial)
        # attribute statistics from the daily-resolution history block
        h = windows.histories[0]
        attribute_scaler = nm.Standardizer.fit(h.transpose(1, 0, 2).reshape(h.shape[1], -1), axis=1)
        return cls(config, init_params(config), spatial_scaler, attribute_scaler, geo_normalization)

    # -- input preparation ----------------------------------------------

    @property
    def swe_mean(self):
        return float(self.attribute_scaler.mean[SWE])

    @property
    def swe_scale(self):
        return float(self.attribute_scaler.scale[SWE])

    def prompts(self, stations):
        return np.stack(
            [prompt_vector(s.prompt_key, self.config.d_model, self.config.prompt_scale) for s in stations]
        )

    def scale_histories(self, histories):
        m, s = self.attribute_scaler.mean[:, None], self.attribute_scaler.scale[:, None]
        return [(h - m) / s for h in histories]

    def scale_targets(self, y):
        return (y - self.swe_mean) / self.swe_scale

    def unscale_targets(self, z):
        return z * self.swe_scale + self.swe_mean

    def day_batches(self, windows, n_stations):
        """Reshape a windows batch (ordered by day, then station) into
        ``(days, n, ...)`` blocks."""
        B = len(windows) // n_stations
        if B * n_stations != len(windows):
            raise ShapeMismatch("windows do not hold complete days")
        if np.any(windows.location.reshape(B, n_stations) != np.arange(n_stations)):
            raise ShapeMismatch("windows are not ordered station-major within each day")
        spatial = self.spatial_scaler.transform(windows.spatial).reshape(B, n_stations, N_SPATIAL)
        hists = [
            h.reshape(B, n_stations, *h.shape[1:]) for h in self.scale_histories(windows.histories)
        ]
        targets = self.scale_targets(windows.targets).reshape(B, n_stations, -1)
        return spatial, hists, targets

    # -- single-instance operations ------------------------------------

    def embed_location(self, meta, water_year, day):
        raw = spatial_features([meta], water_year, day)
        s = self.spatial_scaler.transform(raw)
        return _location(_const(self.params), nm.Tensor(s), self.prompts([meta])).value[0]

    def aggregate_attributes(self, query, histories, window):
        """Attention over one station's ``(f, k)`` standardized histories,
        queried by its location embedding."""
        query = np.asarray(query, dtype=float)
        histories = np.asarray(histories, dtype=float)
        _, k = self.config.windows[window]
        if query.shape != (self.config.d_model,) or histories.shape != (self.config.n_attributes, k):
            raise ShapeMismatch(
                f"expected query ({self.config.d_model},) and histories "
                f"({self.config.n_attributes}, {k}); got {query.shape}, {histories.shape}"
            )
        out = _aggregate(_const(self.params), window, nm.Tensor(query[None]),
                         nm.Tensor(histories[None]), self.config.d_model)
        return out.value[0]

    def spatial_attention(self, x, bias):
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        if x.ndim != 2 or x.shape[1] != self.config.width or bias.distance.shape != (n, n):
            raise ShapeMismatch(f"X must be (n, {self.config.width}) with matching geo matrices")
        return _spatial(_const(self.params), nm.Tensor(x), bias.distance, bias.angle,
                        self.config.d_model, self.config.inner_softmax).value

    def spatial_logits(self, x, bias):
        return _spatial_logits(_const(self.params), nm.Tensor(np.asarray(x, float)), bias.distance,
                               bias.angle, self.config.d_model, self.config.inner_softmax).value

    def encode_day(self, examples, stations, bias):
        """Representations for one day's examples (one per station)."""
        days = {ex.day for ex in examples}
        if len(days) != 1:
            raise ShapeMismatch("encode_day needs examples that share one day")
        n = len(examples)
        if bias.distance.shape != (n, n):
            raise ShapeMismatch("geo matrices do not match the example count")
        spatial = self.spatial_scaler.transform(np.stack([ex.spatial_features for ex in examples]))
        hists = self.scale_histories(
            [np.stack([ex.histories[c] for ex in examples]) for c in range(self.config.n_windows)]
        )
        prompts = self.prompts([stations[ex.location_index] for ex in examples])
        r, _ = forward(_const(self.params), self.config, nm.Tensor(spatial[None]), prompts,
                       [nm.Tensor(h[None]) for h in hists], bias.distance, bias.angle)
        t = days.pop()
        return [LatentRepresentation(r.value[0, i], t, ex.location_index) for i, ex in enumerate(examples)]

    def encode(self, windows, stations, bias, batch_days=64):
        """Representations and head outputs (in mm) for a whole windows
        batch, in the batch's own order."""
        n = len(stations)
        spatial, hists, _ = self.day_batches(windows, n)
        prompts = self.prompts(stations)
        p = _const(self.params)
        reps, heads = [], []
        for s in range(0, spatial.shape[0], batch_days):
            sl = slice(s, s + batch_days)
            r, y = forward(p, self.config, nm.Tensor(spatial[sl]), prompts,
                           [nm.Tensor(h[sl]) for h in hists], bias.distance, bias.angle)
            reps.append(r.value)
            heads.append(y.value)
        reps = np.concatenate(reps).reshape(len(windows), -1)
        heads = self.unscale_targets(np.concatenate(heads).reshape(len(windows), -1))
        return reps, heads

    # -- serialization ---------------------------------------------------

    def to_dict(self):
        cfg = asdict(self.config)
        cfg["windows"] = [list(w) for w in self.config.windows]
        return {
            "format": CKPT_FORMAT,
            "config": cfg,
            "params": {
                k: {"shape": list(v.shape), "data": np.asarray(v).ravel().tolist()}
                for k, v in self.params.items()
            },
            "spatial_scaler": self.spatial_scaler.to_dict(),
            "attribute_scaler": self.attribute_scaler.to_dict(),
            "geo_normalization": self.geo_normalization.to_dict(),
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != CKPT_FORMAT:
            raise ConfigError(f"not an encoder checkpoint (format {d.get('format')!r})")
        cfg = EncoderConfig(**{**d["config"], "windows": tuple(tuple(w) for w in d["config"]["windows"])})
        params = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()
        }
        return cls(
            cfg, params, nm.Standardizer.from_dict(d["spatial_scaler"]),
            nm.Standardizer.from_dict(d["attribute_scaler"]),
            GeoNormalization(**d["geo_normalization"]), list(d.get("loss_history", [])),
        )


def mse_objective(config, spatial, prompts, hists, targets, dist, angle):
    """Closure computing the pretraining MSE from a dict of parameter Tensors."""

    def objective(p):
        _, y = forward(p, config, nm.Tensor(spatial), prompts, [nm.Tensor(h) for h in hists],
                       dist, angle)
        err = y - targets
        return (err * err).mean()

    return objective


def pretrain(encoder, windows, stations, bias, epochs=25, learning_rate=0.1, batch_days=16,
             clip_norm=1.0, seed=None):
    """Fit the encoder and its linear head by minibatch gradient descent on
    the MSE of standardized SWE targets. Mutates and returns ``encoder``."""
    if len(windows) == 0:
        raise ValueError("no training windows")
    n = len(stations)
    spatial, hists, targets = encoder.day_batches(windows, n)
    prompts = encoder.prompts(stations)
    rng = np.random.default_rng(encoder.config.seed if seed is None else seed)
    n_days = spatial.shape[0]
    params = {k: v.copy() for k, v in encoder.params.items()}
    for epoch in range(epochs):
        order = rng.permutation(n_days)
        total, count = 0.0, 0
        for s in range(0, n_days, batch_days):
            idx = np.sort(order[s : s + batch_days])
            obj = mse_objective(encoder.config, spatial[idx], prompts, [h[idx] for h in hists],
                                targets[idx], bias.distance, bias.angle)
            tape = nm.GradientTape(obj, params)
            if not np.isfinite(tape.value):
                raise DivergenceError(f"pretraining loss became {tape.value} in epoch {epoch}")
            grads, _ = nm.clip_by_global_norm(tape.gradients, clip_norm)
            params = {k: params[k] - learning_rate * grads[k] for k in params}
            total += tape.value * len(idx)
            count += len(idx)
        encoder.loss_history.append(total / count)
        log.debug("epoch %d: mse %.5f", epoch, encoder.loss_history[-1])
    encoder.params = params
    return encoder
