"""Coregionalized GP head with exact and collapsed-sparse inference.

Inputs are pairs ``z = (r, t)``: a representation vector ``r`` and an
integer time index ``t`` (steps ahead of the representation's day). The
covariance is a sum of ``tau`` RBF components in ``r``, each scaled by
time-dependent mixing weights ``zeta(t, i) = B_i . h_t`` where ``h_t`` is a
learned embedding row. The mean is affine in ``r``.

The sparse mode places ``p`` shared inducing inputs in ``r``-space and
uses the values of every latent RBF component there as inducing
variables, which gives the Titsias collapsed bound.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm

from . import numerics as nm
from .errors import ConfigError, DivergenceError, HorizonOutOfRange, NotPositiveDefinite

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
EXACT_LIMIT = 5000
HP_KEYS = ("log_ell", "log_sigma", "time_emb", "mix", "gamma0", "gamma1", "log_noise")


@dataclass
class GpHyperparams:
    """Unconstrained hyperparameters.

    ``log_ell``, ``log_sigma``: (tau,) log length-scales and log signal
    amplitudes; ``time_emb``: (n_times, d_t); ``mix``: (tau, d_t);
    ``gamma0``: () and ``gamma1``: (d_r,) mean coefficients; ``log_noise``:
    () log noise variance; ``inducing``: (p, d_r) or None.
    """

    log_ell: np.ndarray
    log_sigma: np.ndarray
    time_emb: np.ndarray
    mix: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    log_noise: np.ndarray
    inducing: np.ndarray = None

    @property
    def tau(self):
        return len(self.log_ell)

    @property
    def n_times(self):
        return self.time_emb.shape[0]

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise))

    def zeta(self):
        """(n_times, tau) mixing weights."""
        return self.time_emb @ self.mix.T

    def as_dict(self, with_inducing=True):
        d = {k: np.asarray(getattr(self, k), dtype=float) for k in HP_KEYS}
        if with_inducing and self.inducing is not None:
            d["inducing"] = np.asarray(self.inducing, dtype=float)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=float) for k in HP_KEYS},
                   inducing=None if d.get("inducing") is None else np.asarray(d["inducing"], float))

    def replace(self, **kw):
        d = self.as_dict()
        d.setdefault("inducing", self.inducing)
        d.update(kw)
        return GpHyperparams.from_dict(d)

    @classmethod
    def initial(cls, inputs, tau=3, n_times=1, d_t=4, noise_var=0.1, seed=0):
        """Starting point scaled to unit-variance targets.

        Length-scales spread around the median pairwise distance of the
        inputs; mixing weights start near ``1/sqrt(tau)``.
        """
        rng = np.random.default_rng(seed)
        x = np.asarray(inputs, dtype=float)
        sub = x[rng.permutation(len(x))[:500]]
        d2 = _sqdist(sub, sub)
        med = math.sqrt(max(np.median(d2[d2 > 0]) if np.any(d2 > 0) else 1.0, 1e-12))
        spread = np.geomspace(0.5, 2.0, tau) if tau > 1 else np.ones(1)
        return cls(
            log_ell=np.log(med * spread),
            log_sigma=np.zeros(tau),
            time_emb=1.0 + 0.1 * rng.standard_normal((n_times, d_t)),
            mix=np.full((tau, d_t), 1.0 / (d_t * math.sqrt(tau))),
            gamma0=np.zeros(()),
            gamma1=np.zeros(x.shape[1]),
            log_noise=np.log(np.array(noise_var)),
        )


def _sqdist(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.maximum(d, 0.0)


def _sqdist_t(a, b):
    """Squared distances where either side may be a Tensor."""
    a, b = nm._as_tensor(a), nm._as_tensor(b)
    aa = (a * a).sum(axis=1).reshape(-1, 1)
    bb = (b * b).sum(axis=1).reshape(1, -1)
    return aa + bb - 2.0 * (a @ b.T)


def _check_times(times, n_times):
    times = np.asarray(times, dtype=int)
    if times.size and (times.min() < 0 or times.max() >= n_times):
        raise HorizonOutOfRange(f"time index outside the {n_times}-row embedding table")
    return times


# ---------------------------------------------------------------------------
# kernel


def kernel_lmc(r1, t1, r2, t2, hp):
    """Covariance between single inputs ``(r1, t1)`` and ``(r2, t2)``."""
    return float(kernel_matrix(np.atleast_2d(r1), [t1], np.atleast_2d(r2), [t2], hp)[0, 0])


def kernel_matrix(x1, t1, x2, t2, hp):
    """Cross-covariance matrix, numpy in and out."""
    p = {k: nm.Tensor(v) for k, v in hp.as_dict().items()}
    return _kernel(p, np.asarray(x1, float), _check_times(t1, hp.n_times),
                   np.asarray(x2, float), _check_times(t2, hp.n_times)).value


def _components(p, d2):
    """(tau, N, M) stack of sigma_i^2 exp(-d2 / (2 ell_i^2))."""
    ell2 = nm.exp(2.0 * p["log_ell"]).reshape(-1, 1, 1)
    sig2 = nm.exp(2.0 * p["log_sigma"]).reshape(-1, 1, 1)
    d2 = nm._as_tensor(d2)
    return sig2 * nm.exp(-0.5 * d2.reshape(1, *d2.shape) / ell2)


def _zeta_rows(p, times):
    return (p["time_emb"] @ p["mix"].T)[times]


def _kernel(p, x1, t1, x2, t2):
    comps = _components(p, _sqdist_t(x1, x2) if isinstance(x1, nm.Tensor) or isinstance(x2, nm.Tensor)
                        else _sqdist(x1, x2))
    z1 = _zeta_rows(p, t1)
    z2 = _zeta_rows(p, t2)
    return nm.einsum("ni,mi,inm->nm", z1, z2, comps)


def _kdiag(p, times):
    z = _zeta_rows(p, times)
    sig2 = nm.exp(2.0 * p["log_sigma"])
    return (z * z * sig2).sum(axis=1)


def _mean(p, x):
    return (nm.Tensor(x) @ p["gamma1"].reshape(-1, 1)).reshape(-1) + p["gamma0"]


# ---------------------------------------------------------------------------
# objectives (negative, to be minimized)


def exact_objective(x, times, y):
    """Negative log marginal likelihood ``-log N(y; m, K + noise I)``."""
    n = len(y)

    def objective(p):
        k = _kernel(p, x, times, x, times) + nm.exp(p["log_noise"]) * np.eye(n)
        L = nm.cholesky(k)
        v = nm.solve_triangular(L, (y - _mean(p, x)).reshape(-1, 1))
        return 0.5 * (v * v).sum() + nm.log(nm.diagonal(L)).sum() + 0.5 * n * LOG_2PI

    return objective


def _sparse_terms(p, x, times, tau):
    """Per-component Cholesky factors of K_uu and the stacked
    ``A = L_uu^{-1} K_uf`` (before noise scaling)."""
    u = p["inducing"]
    zx = _zeta_rows(p, times)  # (N, tau)
    kuu = _components(p, _sqdist_t(u, u))
    kuf = _components(p, _sqdist_t(u, x))
    Ls, As = [], []
    for i in range(tau):
        Li = nm.cholesky(kuu[i])
        Ls.append(Li)
        As.append(nm.solve_triangular(Li, kuf[i] * zx[:, i].reshape(1, -1)))
    return Ls, nm.concatenate(As, axis=0)


def sparse_objective(x, times, y, tau):
    """Negative collapsed variational lower bound on the log marginal
    likelihood."""
    n = len(y)

    def objective(p):
        noise = nm.exp(p["log_noise"])
        sd = nm.sqrt(noise)
        _, a = _sparse_terms(p, x, times, tau)
        a = a / sd
        m = a.shape[0]
        bmat = a @ a.T + np.eye(m)
        LB = nm.cholesky(bmat)
        err = (y - _mean(p, x)).reshape(-1, 1)
        c = nm.solve_triangular(LB, a @ err) / sd
        kdiag = _kdiag(p, times).sum()
        bound = (
            -0.5 * n * LOG_2PI
            - nm.log(nm.diagonal(LB)).sum()
            - 0.5 * n * p["log_noise"]
            - 0.5 * (err * err).sum() / noise
            + 0.5 * (c * c).sum()
            - 0.5 * kdiag / noise
            + 0.5 * (a * a).sum()
        )
        return -bound

    return objective


def nlml(inputs, times, targets, hp):
    """Exact negative log marginal likelihood and its gradients.

    Returns
    -------
    value : float
    gradients : dict
        Keyed like :meth:`GpHyperparams.as_dict`.
    """
    x = np.asarray(inputs, float)
    times = _check_times(times, hp.n_times)
    tape = nm.GradientTape(exact_objective(x, times, np.asarray(targets, float)),
                           hp.as_dict(with_inducing=False))
    return tape.value, tape.gradients


def sparse_bound(inputs, times, targets, hp):
    """Collapsed lower bound (positive, comparable to ``-nlml``)."""
    x = np.asarray(inputs, float)
    times = _check_times(times, hp.n_times)
    tape = nm.GradientTape(sparse_objective(x, times, np.asarray(targets, float), hp.tau), hp.as_dict())
    return -tape.value, {k: -g for k, g in tape.gradients.items()}


# ---------------------------------------------------------------------------
# fitting and prediction


def kmeans_pp(x, p, rng):
    """k-means++ seeding: ``p`` rows of ``x``."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sqdist(x, x[chosen]).ravel()
    for _ in range(1, p):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, _sqdist(x, x[[idx]]).ravel())
    return x[chosen].copy()


@dataclass
class GpPosterior:
    """Fitted hyperparameters plus the cached solves needed to predict.

    Targets are standardized internally; ``y_mean``/``y_scale`` undo it.
    """

    hp: GpHyperparams
    mode: str
    y_mean: float
    y_scale: float
    cache: dict
    history: list = field(default_factory=list)

    def predict(self, x, times):
        """Predictive mean and variance (noise included) in target units."""
        x = np.atleast_2d(np.asarray(x, float))
        times = _check_times(np.broadcast_to(np.asarray(times), (len(x),)), self.hp.n_times)
        p = {k: nm.Tensor(v) for k, v in self.hp.as_dict().items()}
        mean0 = _mean(p, x).value
        kss = _kdiag(p, times).value
        if self.mode == "exact":
            ks = _kernel(p, x, times, self.cache["x"], self.cache["times"]).value  # (M, N)
            mean = mean0 + ks @ self.cache["alpha"]
            v = solve_triangular(self.cache["L"], ks.T, lower=True)
            var = kss - (v * v).sum(0)
        else:
            tmp1 = self._inducing_solve(p, x, times)
            tmp2 = solve_triangular(self.cache["LB"], tmp1, lower=True)
            mean = mean0 + tmp2.T @ self.cache["c"]
            var = kss - (tmp1 * tmp1).sum(0) + (tmp2 * tmp2).sum(0)
        var = np.maximum(var, 0.0) + self.hp.noise_var
        return mean * self.y_scale + self.y_mean, var * self.y_scale**2

    def _inducing_solve(self, p, x, times):
        u = self.hp.inducing
        comps = _components(p, _sqdist(u, x)).value
        z = _zeta_rows(p, times).value
        blocks = [
            solve_triangular(self.cache["Luu"][i], comps[i] * z[:, i][None, :], lower=True)
            for i in range(self.hp.tau)
        ]
        return np.concatenate(blocks, axis=0)

    def to_dict(self, tag):
        return {
            "format": tag,
            "mode": self.mode,
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "hyperparams": {k: _pack(v) for k, v in self.hp.as_dict().items()},
            "cache": {k: _pack(v) for k, v in self.cache.items()},
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, d, tag):
        if d.get("format") != tag:
            raise ConfigError(f"expected GP checkpoint {tag!r}, found {d.get('format')!r}")
        hp = GpHyperparams.from_dict({k: _unpack(v) for k, v in d["hyperparams"].items()})
        cache = {k: _unpack(v) for k, v in d["cache"].items()}
        if "times" in cache:
            cache["times"] = cache["times"].astype(int)
        return cls(hp, d["mode"], float(d["y_mean"]), float(d["y_scale"]), cache, list(d.get("history", [])))


def _pack(v):
    v = np.asarray(v)
    if v.dtype == object:  # list of per-component factors
        return {"stack": [_pack(x) for x in v]}
    return {"shape": list(v.shape), "data": v.ravel().tolist()}


def _unpack(d):
    if "stack" in d:
        return np.stack([_unpack(x) for x in d["stack"]])
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def _build_cache(hp, mode, x, times, y):
    p = {k: nm.Tensor(v) for k, v in hp.as_dict().items()}
    err = y - _mean(p, x).value
    if mode == "exact":
        k = _kernel(p, x, times, x, times).value + hp.noise_var * np.eye(len(y))
        L, _ = nm.jittered_cholesky(k)
        alpha = solve_triangular(L, solve_triangular(L, err, lower=True), lower=True, trans="T")
        return {"x": x, "times": times, "L": L, "alpha": alpha}
    u = hp.inducing
    zx = _zeta_rows(p, times).value
    Luu, blocks = [], []
    # accumulate A A^T and A err blockwise over the data to bound memory
    for i in range(hp.tau):
        Luu.append(nm.jittered_cholesky(_components({"log_ell": p["log_ell"][i:i + 1],
                                                      "log_sigma": p["log_sigma"][i:i + 1]},
                                                     _sqdist(u, u)).value[0])[0])
    sd = math.sqrt(hp.noise_var)
    m = hp.tau * len(u)
    aat = np.zeros((m, m))
    aerr = np.zeros(m)
    step = 4096
    for s in range(0, len(y), step):
        xs, zs, es = x[s:s + step], zx[s:s + step], err[s:s + step]
        comps = _components(p, _sqdist(u, xs)).value
        a = np.concatenate(
            [solve_triangular(Luu[i], comps[i] * zs[:, i][None, :], lower=True) for i in range(hp.tau)]
        ) / sd
        aat += a @ a.T
        aerr += a @ es
    LB, _ = nm.jittered_cholesky(aat + np.eye(m))
    c = solve_triangular(LB, aerr, lower=True) / sd
    return {"Luu": np.stack(Luu), "LB": LB, "c": c}


def fit(inputs, times, targets, hp_init, mode="exact", n_inducing=128, iterations=100,
        learning_rate=0.05, max_fit_points=None, seed=0, fixed=()):
    """Maximize the (exact or collapsed sparse) marginal likelihood with Adam.

    Parameters
    ----------
    inputs : (N, d) array
    times : (N,) int array
    targets : (N,) array
    hp_init : GpHyperparams
        In sparse mode, inducing inputs are seeded by k-means++ on the
        inputs when ``hp_init.inducing`` is None.
    max_fit_points : int, optional
        Optimize on a seeded random subset of this size; the returned
        posterior still conditions on every point.
    fixed : iterable of str
        Hyperparameter names to hold constant.
    """
    x = np.asarray(inputs, float)
    times = _check_times(times, hp_init.n_times)
    y = np.asarray(targets, float)
    n = len(y)
    if mode not in ("exact", "sparse"):
        raise ConfigError(f"unknown GP mode {mode!r}")
    if mode == "exact" and n > EXACT_LIMIT:
        raise ConfigError(f"exact GP limited to {EXACT_LIMIT} points, got {n}")
    rng = np.random.default_rng(seed)
    y_mean = float(y.mean())
    y_scale = float(y.std()) if y.std() > 0 else 1.0
    ys = (y - y_mean) / y_scale

    hp = hp_init
    if mode == "sparse":
        if hp.inducing is None:
            if not 1 <= n_inducing <= n:
                raise ConfigError(f"need 1 <= p <= N, got p={n_inducing}, N={n}")
            hp = hp.replace(inducing=kmeans_pp(x, n_inducing, rng))
    else:
        hp = hp.replace(inducing=None)

    if max_fit_points is not None and n > max_fit_points:
        sub = np.sort(rng.choice(n, max_fit_points, replace=False))
    else:
        sub = slice(None)
    xf, tf, yf = x[sub], times[sub], ys[sub]
    objective = (exact_objective(xf, tf, yf) if mode == "exact"
                 else sparse_objective(xf, tf, yf, hp.tau))

    params = hp.as_dict(with_inducing=(mode == "sparse"))
    opt = nm.Adam(lr=learning_rate)
    history = []
    fixed = set(fixed)
    for it in range(iterations):
        try:
            tape = nm.GradientTape(objective, params)
        except NotPositiveDefinite as err:
            raise DivergenceError(f"GP objective failed at iteration {it}: {err}") from err
        if not np.isfinite(tape.value):
            raise DivergenceError(f"GP objective became {tape.value} at iteration {it}")
        history.append(tape.value)
        grads = {k: g for k, g in tape.gradients.items() if k not in fixed}
        params = opt.step(params, grads)
    if mode == "exact":
        params["inducing"] = None
    hp = GpHyperparams.from_dict(params)
    cache = _build_cache(hp, mode, x, times, ys)
    return GpPosterior(hp, mode, y_mean, y_scale, cache, history)


# ---------------------------------------------------------------------------
# intervals and forecasts


@dataclass(frozen=True)
class ForecastInterval:
    """Lower, mean and upper values, one entry per horizon step."""

    lower: np.ndarray
    mean: np.ndarray
    upper: np.ndarray


def interval(mean, variance, alpha=0.95):
    """Symmetric Gaussian interval with half-width
    ``Phi^{-1}((1 + alpha) / 2) * sqrt(variance)``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    variance = np.asarray(variance, float)
    if np.any(variance < 0):
        raise ValueError("variance must be non-negative")
    mean = np.asarray(mean, float)
    half = norm.ppf(0.5 * (1.0 + alpha)) * np.sqrt(variance)
    return ForecastInterval(mean - half, mean, mean + half)


def predict_horizon(posterior, inputs, horizon):
    """Predictive mean and variance at time indices 1..horizon for each
    row of ``inputs``; both ``(len(inputs), horizon)``."""
    if horizon >= posterior.hp.n_times:
        raise HorizonOutOfRange(
            f"horizon {horizon} needs time indices up to {horizon}; "
            f"table has {posterior.hp.n_times} rows"
        )
    x = np.asarray(inputs, float)
    times = np.tile(np.arange(1, horizon + 1), len(x))
    mean, var = posterior.predict(np.repeat(x, horizon, axis=0), times)
    return mean.reshape(-1, horizon), var.reshape(-1, horizon)


def forecast(posterior, representations, horizon, alpha=0.95):
    """For each representation, predict ``horizon`` steps ahead (time
    indices 1..horizon) and return one :class:`ForecastInterval` each."""
    reps = np.asarray([getattr(r, "r", r) for r in representations], float)
    mean, var = predict_horizon(posterior, reps, horizon)
    return [interval(mean[i], var[i], alpha) for i in range(len(reps))]
