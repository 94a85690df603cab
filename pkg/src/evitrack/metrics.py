"""Forecasting and filtering metrics for a weighted hypothesis set.

Forecast metrics use M Monte Carlo rollouts per hypothesis from the
transition prior. PLL, MSE and BA evaluated at the same (t, H) share one set of
rollouts; a single rollout of length max(H) serves every horizon.

Sign convention: sign(0) = +1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .inference import LOG_FLOOR, HypothesisSet
from .world_model import LOG_SQRT_2PI, Trajectory, WorldModelParams, drift_mean, emission_mean

FILTER_METRICS = ("z_hat", "z_bias", "z_var", "z_mse", "ba_filt", "ess", "entropy", "entropy_norm")
FORECAST_METRICS = ("pll", "mse", "ba")


class ClampedUnderflow(RuntimeWarning):
    pass


def _sign(z):
    return np.where(z >= 0, 1, -1)


def _lse(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def metric_names(horizons: Sequence[int]) -> list[str]:
    return list(FILTER_METRICS) + [f"{m}_h{h}" for h in horizons for m in FORECAST_METRICS]


def rollouts(current: np.ndarray, H: int, M: int, params: WorldModelParams,
             rng: np.random.Generator) -> np.ndarray:
    """Latent continuations, shape (K, M, H); ``[..., h-1]`` is z at t + h."""
    K = len(current)
    eps = rng.standard_normal((H, K, M))
    out = np.empty((K, M, H))
    z = np.broadcast_to(np.asarray(current, dtype=float)[:, None], (K, M))
    for h in range(H):
        z = drift_mean(z, params) + params.sigma_z * eps[h]
        out[:, :, h] = z
    return out


def _endpoints(hset, H, M, params, rng, paths):
    if paths is None:
        paths = rollouts(hset.current, H, M, params, rng)
    return paths[:, :, H - 1]


def _pll_from_endpoints(logw: np.ndarray, z_end: np.ndarray, x_future: float,
                        params: WorldModelParams) -> tuple[float, int]:
    r = (x_future - emission_mean(z_end, params)) / params.sigma_x
    loglik = -0.5 * r * r - math.log(params.sigma_x) - LOG_SQRT_2PI
    ell = _lse(loglik, axis=1) - math.log(z_end.shape[1])
    clamped = int(np.sum(ell < LOG_FLOOR))
    if clamped:
        ell = np.maximum(ell, LOG_FLOOR)
    return float(_lse(logw + ell, axis=0)), clamped


def forecast_pll(hset: HypothesisSet, weights: np.ndarray, x_future: float, H: int, M: int,
                 params: WorldModelParams, rng: Optional[np.random.Generator] = None,
                 paths: Optional[np.ndarray] = None) -> float:
    """log sum_i w_i * (1/M) sum_m p(x_future | z^(i,m)_{t+H}), in log space."""
    z_end = _endpoints(hset, H, M, params, rng, paths)
    with np.errstate(divide="ignore"):
        value, clamped = _pll_from_endpoints(np.log(weights), z_end, x_future, params)
    if clamped:
        warnings.warn(f"{clamped} per-hypothesis likelihoods clamped at {LOG_FLOOR}",
                      ClampedUnderflow, stacklevel=2)
    return value


def forecast_mse(hset: HypothesisSet, weights: np.ndarray, x_future: float, H: int, M: int,
                 params: WorldModelParams, rng: Optional[np.random.Generator] = None,
                 paths: Optional[np.ndarray] = None) -> float:
    z_end = _endpoints(hset, H, M, params, rng, paths)
    x_hat = float(weights @ emission_mean(z_end, params).mean(axis=1))
    return (x_hat - x_future) ** 2


def forecast_ba(hset: HypothesisSet, weights: np.ndarray, z_true_future: float, H: int, M: int,
                params: WorldModelParams, rng: Optional[np.random.Generator] = None,
                paths: Optional[np.ndarray] = None) -> float:
    z_end = _endpoints(hset, H, M, params, rng, paths)
    hit = (_sign(z_end) == _sign(z_true_future)).mean(axis=1)
    return float(weights @ hit)


@dataclass
class FilteringStats:
    z_hat: float
    bias: float
    variance: float
    mse: float
    ba_filt: float


def filtering_stats(hset_or_z, weights: np.ndarray, z_true: float) -> FilteringStats:
    z = hset_or_z.current if isinstance(hset_or_z, HypothesisSet) else np.asarray(hset_or_z)
    z_hat = float(weights @ z)
    return FilteringStats(
        z_hat=z_hat,
        bias=z_hat - z_true,
        variance=float(weights @ (z - z_hat) ** 2),
        mse=float(weights @ (z - z_true) ** 2),
        ba_filt=float(weights @ (_sign(z) == _sign(z_true))),
    )


def ess(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(np.square(weights)))


def weight_entropy(weights: np.ndarray, normalized: bool = False) -> float:
    w = np.asarray(weights, dtype=float)
    nz = w[w > 0]
    h = float(-np.sum(nz * np.log(nz)))
    if normalized:
        return h / math.log(len(w)) if len(w) > 1 else 0.0
    return h


class MetricRecorder:
    """Metric sink for ``run_inference``: one row of values per t.

    ``values[k, t-1]`` holds metric ``names[k]`` at time t (NaN when the
    horizon runs past T). Rollouts for time t come from one stream per
    recorder, consumed in t order, so records are reproducible.
    """

    def __init__(self, T: int, params: WorldModelParams, horizons: Sequence[int] = (1, 5, 10),
                 M: int = 20, rng: Optional[np.random.Generator] = None,
                 forecast_times: Optional[np.ndarray] = None):
        self.params = params
        self.horizons = tuple(sorted(horizons))
        self._hs = np.array(self.horizons, dtype=int)
        self._usable = np.arange(len(self.horizons))
        self.M = M
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.names = metric_names(self.horizons)
        self.values = np.full((len(self.names), T), np.nan)
        self.forecast_times = forecast_times
        self.clamps = 0
        self.identity_violations = 0

    def __call__(self, hset: HypothesisSet, weights: np.ndarray, traj: Trajectory, t: int) -> None:
        col = t - 1
        fs = filtering_stats(hset.current, weights, traj.latent[col])
        if abs(fs.mse - (fs.bias**2 + fs.variance)) > 1e-9 * max(1.0, fs.mse):
            self.identity_violations += 1
        v = self.values
        v[0:5, col] = (fs.z_hat, fs.bias, fs.variance, fs.mse, fs.ba_filt)
        v[5, col] = ess(weights)
        v[6, col] = weight_entropy(weights)
        v[7, col] = v[6, col] / math.log(len(weights)) if len(weights) > 1 else 0.0
        if self.forecast_times is not None and not self.forecast_times[col]:
            return
        usable = self._usable[: int(np.searchsorted(self._hs, traj.T - t, side="right"))]
        if not usable.size:
            return
        hs = self._hs[usable]
        paths = rollouts(hset.current, int(hs[-1]), self.M, self.params, self.rng)
        z_end = paths[:, :, hs - 1]                               # (K, M, nh)
        x_f, z_f = traj.obs[col + hs], traj.latent[col + hs]
        h_end = emission_mean(z_end, self.params)
        r = (x_f - h_end) / self.params.sigma_x
        loglik = -0.5 * r * r - (math.log(self.params.sigma_x) + LOG_SQRT_2PI)
        ell = _lse(loglik, axis=1) - math.log(self.M)             # (K, nh)
        clamped = ell < LOG_FLOOR
        if clamped.any():
            self.clamps += int(clamped.sum())
            ell = np.maximum(ell, LOG_FLOOR)
        with np.errstate(divide="ignore"):
            logw = np.log(weights)
        rows = len(FILTER_METRICS) + 3 * usable
        v[rows, col] = _lse(logw[:, None] + ell, axis=0)
        v[rows + 1, col] = (weights @ h_end.mean(axis=1) - x_f) ** 2
        v[rows + 2, col] = weights @ (_sign(z_end) == _sign(z_f)).mean(axis=1)
