"""Grid-quadrature ground-truth filter, disambiguation time, and binned datasets.

The filtering posterior p(z_t | x_{1:t}) is represented as probability mass on
a uniform grid (cell width absorbed). The transition kernel is a dense
``n x n`` matrix whose rows are the discretised N(mu(z_i), sigma_z^2),
normalised over the grid in log space.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import rng as rng_mod
from .world_model import (
    Trajectory,
    WorldModelParams,
    drift_mean,
    emission_mean,
    load_trajectory,
    save_trajectory,
    simulate_batch,
)

log = logging.getLogger(__name__)

_KERNEL_FLOOR = 1e-18
_MASS_FLOOR = 1e-250


class AllMassLost(RuntimeError):
    """A filtering row had no finite mass left; the grid is too narrow."""


class ExhaustedAttempts(RuntimeError):
    """A DD bin could not be filled within the simulation cap."""

    def __init__(self, message: str, stats: dict):
        super().__init__(message)
        self.stats = stats


def sign(z):
    """Basin label with the convention sign(0) = +1."""
    return np.where(np.asarray(z) >= 0, 1, -1)


@dataclass(frozen=True)
class QuadratureGrid:
    z_min: float = -6.0
    z_max: float = 6.0
    n_points: int = 1201

    def __post_init__(self):
        if self.n_points < 2 or not self.z_max > self.z_min:
            raise ValueError("grid needs n_points >= 2 and z_max > z_min")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.z_min, self.z_max, self.n_points)

    @property
    def cell_width(self) -> float:
        return (self.z_max - self.z_min) / (self.n_points - 1)

    def refined(self, factor: int = 2) -> "QuadratureGrid":
        return QuadratureGrid(self.z_min, self.z_max, factor * (self.n_points - 1) + 1)

    def check_coverage(self, params: WorldModelParams) -> None:
        """Grid must hold the initial prior and both wells with 5-sigma margins."""
        lo = min(params.mu0 - 5 * params.sigma0, -params.a - 5 * params.sigma_z)
        hi = max(params.mu0 + 5 * params.sigma0, params.a + 5 * params.sigma_z)
        if not (self.z_min < lo and self.z_max > hi):
            raise ValueError(
                f"grid [{self.z_min}, {self.z_max}] does not cover [{lo:.3g}, {hi:.3g}]"
            )


@dataclass(frozen=True)
class DDBins:
    early: tuple = (30, 80)
    mid: tuple = (80, 140)
    late: tuple = (140, 170)

    @property
    def reject_below(self) -> int:
        return self.early[0]

    @property
    def reject_above(self) -> int:
        return self.late[1]

    @property
    def labels(self) -> tuple:
        return ("early", "mid", "late")

    def label(self, dd_time: Optional[int]) -> Optional[str]:
        """Early/Mid are half-open, Late is closed on the right."""
        if dd_time is None:
            return None
        if self.early[0] <= dd_time < self.early[1]:
            return "early"
        if self.mid[0] <= dd_time < self.mid[1]:
            return "mid"
        if self.late[0] <= dd_time <= self.late[1]:
            return "late"
        return None


@lru_cache(maxsize=8)
def _log_kernel(params: WorldModelParams, grid: QuadratureGrid) -> np.ndarray:
    g = grid.nodes
    r = (g[None, :] - drift_mean(g, params)[:, None]) / params.sigma_z
    logk = -0.5 * r * r
    return logk - logsumexp(logk, axis=1, keepdims=True)


def transition_kernel(params: WorldModelParams, grid: QuadratureGrid) -> np.ndarray:
    """Row-stochastic matrix K[i, j] = P(z_next = node j | z_prev = node i)."""
    return _kernel(params, grid)


@lru_cache(maxsize=8)
def _kernel(params: WorldModelParams, grid: QuadratureGrid) -> np.ndarray:
    kern = np.exp(_log_kernel(params, grid))
    # Entries below 1e-18 are dropped: they only ever produce subnormal
    # products, which slow the matrix product by an order of magnitude.
    kern[kern < _KERNEL_FLOOR] = 0.0
    return kern


def _emission_loglik(x: np.ndarray, params: WorldModelParams, grid: QuadratureGrid) -> np.ndarray:
    """Emission log-likelihood per node, constant terms dropped.

    h jumps at |z| = d (from d^2 to d). A node sitting on the jump averages
    the likelihoods of both branches, since half of its cell lies on each side;
    this keeps the quadrature error second order in the cell width.
    """
    g = grid.nodes
    x = np.asarray(x, dtype=float)[..., None]
    r = (x - emission_mean(g, params)) / params.sigma_x
    out = -0.5 * r * r
    edge = np.abs(np.abs(g) - params.d) <= 1e-9 * grid.cell_width
    if edge.any():
        r_out = (x - g[edge]) / params.sigma_x
        out[..., edge] = np.logaddexp(out[..., edge], -0.5 * r_out * r_out) - np.log(2.0)
    return out


def _normalise_log(logp: np.ndarray) -> np.ndarray:
    m = np.max(logp, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise AllMassLost("posterior row underflowed; widen the quadrature grid")
    p = np.exp(logp - m)
    p[p < _MASS_FLOOR] = 0.0
    return p / p.sum(axis=-1, keepdims=True)


def _prior_row(params: WorldModelParams, grid: QuadratureGrid) -> np.ndarray:
    r = (grid.nodes - params.mu0) / params.sigma0
    return -0.5 * r * r


def filter_posterior(obs: Sequence[float], params: WorldModelParams,
                     grid: QuadratureGrid = QuadratureGrid()) -> np.ndarray:
    """Forward recursion; returns a (T, n_points) matrix of per-node masses."""
    obs = np.asarray(obs, dtype=float)
    kern = transition_kernel(params, grid)
    loglik = _emission_loglik(obs, params, grid)
    rows = np.empty((len(obs), grid.n_points))
    with np.errstate(divide="ignore"):
        rows[0] = _normalise_log(_prior_row(params, grid) + loglik[0])
        for t in range(1, len(obs)):
            rows[t] = _normalise_log(np.log(rows[t - 1] @ kern) + loglik[t])
    return rows


def basin_mass(row: np.ndarray, basin: int, grid: QuadratureGrid = QuadratureGrid()) -> float | np.ndarray:
    """Mass on nodes of sign ``basin``; a node at exactly zero splits evenly.

    Works on a single row or a stack of rows (last axis = nodes).
    """
    g = grid.nodes
    w = np.where(g > 0, 1.0, 0.0) if basin > 0 else np.where(g < 0, 1.0, 0.0)
    w[g == 0] = 0.5
    out = np.asarray(row) @ w
    return float(out) if np.ndim(out) == 0 else out


def detect_dd(posterior: np.ndarray, true_basin: int, tau: float = 0.8,
              grid: QuadratureGrid = QuadratureGrid()) -> Optional[int]:
    """First (1-based) t whose true-basin mass exceeds ``tau``; None if never."""
    if not 0.5 < tau < 1:
        raise ValueError("tau must lie in (0.5, 1)")
    mass = basin_mass(posterior, true_basin, grid)
    hits = np.flatnonzero(mass > tau)
    return int(hits[0]) + 1 if hits.size else None


def detect_dd_batch(obs: np.ndarray, true_basin: np.ndarray, params: WorldModelParams,
                    grid: QuadratureGrid, tau: float, stop_after: Optional[int] = None) -> list[Optional[int]]:
    """t_DD for a batch of observation sequences, filtering all rows together.

    A row stops being filtered once its t_DD is known or once t passes
    ``stop_after`` (then it is reported as None; callers reject it either
    way). Rows that are not cut short give the same answer as ``detect_dd``.
    """
    obs = np.asarray(obs, dtype=float)
    B, T = obs.shape
    kern = transition_kernel(params, grid)
    g = grid.nodes
    w_pos = np.where(g > 0, 1.0, np.where(g == 0, 0.5, 0.0))
    w_neg = np.where(g < 0, 1.0, np.where(g == 0, 0.5, 0.0))
    w_true = np.where(np.asarray(true_basin)[:, None] > 0, w_pos, w_neg)
    last = T if stop_after is None else min(T, stop_after)
    result: list[Optional[int]] = [None] * B
    active = np.arange(B)
    rows = None
    with np.errstate(divide="ignore"):
        for t in range(last):
            loglik = _emission_loglik(obs[active, t], params, grid)
            if t == 0:
                rows = _normalise_log(_prior_row(params, grid) + loglik)
            else:
                rows = _normalise_log(np.log(rows @ kern) + loglik)
            mass = np.einsum("ij,ij->i", rows, w_true[active])
            hit = mass > tau
            for i in active[hit]:
                result[i] = t + 1
            keep = ~hit
            active, rows = active[keep], rows[keep]
            if not active.size:
                break
    return result


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    params: WorldModelParams
    bins: DDBins = DDBins()
    tau: float = 0.8
    root_seed: int = 0
    stats: dict = field(default_factory=dict)

    def by_bin(self, label: str) -> list[Trajectory]:
        return [tr for tr in self.trajectories if tr.dd_bin == label]


def generate_dataset(params: WorldModelParams, bins: DDBins = DDBins(), per_bin: int = 100,
                     root_seed: int = 0, tau: float = 0.8,
                     grid: QuadratureGrid = QuadratureGrid(),
                     max_attempts: int = 1_000_000, batch_size: int = 512) -> Dataset:
    """Rejection-sample a balanced DD-binned dataset.

    Candidate ``i`` is simulated from seed ``derive_seed(root_seed, "candidate", i)``
    and accepted into its bin, in candidate order, while the bin has room. The
    result therefore does not depend on ``batch_size``.
    """
    if per_bin < 1:
        raise ValueError("per_bin must be >= 1")
    grid.check_coverage(params)
    labels = bins.labels
    kept: dict[str, list[Trajectory]] = {b: [] for b in labels}
    stats = {"simulated": 0, "too_early": 0, "too_late_or_none": 0, "bin_full": 0}
    next_idx = 0
    while any(len(kept[b]) < per_bin for b in labels):
        if next_idx >= max_attempts:
            stats["accepted"] = {b: len(kept[b]) for b in labels}
            raise ExhaustedAttempts(
                f"DD bins not filled after {max_attempts} simulations: "
                + ", ".join(f"{b}={len(kept[b])}/{per_bin}" for b in labels),
                stats,
            )
        idx = np.arange(next_idx, min(next_idx + batch_size, max_attempts))
        seeds = [rng_mod.derive_seed(root_seed, "candidate", int(i)) for i in idx]
        z, x = simulate_batch(params, seeds)
        basin = sign(z[:, -1])
        dd = detect_dd_batch(x, basin, params, grid, tau, stop_after=bins.reject_above)
        for j, i in enumerate(idx):
            if all(len(kept[b]) >= per_bin for b in labels):
                break
            stats["simulated"] += 1
            label = bins.label(dd[j])
            if label is None:
                if dd[j] is not None and dd[j] < bins.reject_below:
                    stats["too_early"] += 1
                else:
                    stats["too_late_or_none"] += 1
                continue
            if len(kept[label]) >= per_bin:
                stats["bin_full"] += 1
                continue
            kept[label].append(Trajectory(
                latent=z[j], obs=x[j], seed=seeds[j], dd_time=dd[j], dd_bin=label,
                true_basin=int(basin[j]), traj_id=int(i),
            ))
        next_idx = int(idx[-1]) + 1
        log.debug("candidates %d: %s", next_idx, {b: len(v) for b, v in kept.items()})
    n = stats["simulated"]
    stats["accepted"] = {b: len(kept[b]) for b in labels}
    stats["rejected_fraction"] = (n - per_bin * len(labels)) / n
    trajs = sorted((tr for b in labels for tr in kept[b]), key=lambda tr: tr.traj_id)
    return Dataset(trajs, params, bins, tau, root_seed, stats)


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write trajectories, ``manifest.csv`` (one row each) and ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "trajectories").mkdir(parents=True, exist_ok=True)
    with (out_dir / "manifest.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "traj_id", "seed", "dd_time", "bin", "true_basin"])
        for tr in ds.trajectories:
            rel = f"trajectories/traj_{tr.traj_id:07d}.csv"
            save_trajectory(tr, out_dir / rel)
            writer.writerow([rel, tr.traj_id, tr.seed, tr.dd_time, tr.dd_bin, tr.true_basin])
    meta = {
        "params": ds.params.to_mapping(),
        "bins": {b: list(getattr(ds.bins, b)) for b in ds.bins.labels},
        "tau": ds.tau,
        "root_seed": ds.root_seed,
        "rejection_stats": ds.stats,
    }
    (out_dir / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out_dir


def load_dataset(out_dir: str | Path) -> Dataset:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "manifest.json").read_text())
    with (out_dir / "manifest.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    trajs = [load_trajectory(out_dir / r["path"]) for r in rows]
    return Dataset(
        trajectories=trajs,
        params=WorldModelParams.from_mapping(meta["params"]),
        bins=DDBins(**{k: tuple(v) for k, v in meta["bins"].items()}),
        tau=meta["tau"],
        root_seed=meta["root_seed"],
        stats=meta["rejection_stats"],
    )
