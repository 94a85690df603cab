"""Hypothesis-set inference: EviTrack, SIS and the bootstrap particle filter.

All three methods share one state object, ``HypothesisSet``: a stack of latent
prefixes (one row per hypothesis) with accumulated log-scores. Every step
consumes the next observation and returns a new set; the input is not mutated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import stats

from . import rng as rng_mod
from .scoring import EVIDENCE, ScoreKind, initial_score, score_increment
from .world_model import (
    Trajectory,
    WorldModelParams,
    drift_mean,
    emission_logpdf,
    emission_mean,
    transition_logpdf,
)

EVITRACK, SIS, BPF = "evitrack", "sis", "bpf"
LOG_FLOOR = -1e9


@dataclass
class HypothesisSet:
    paths: np.ndarray            # (K, t) latent prefixes
    scores: np.ndarray           # (K,)
    lineage: np.ndarray          # (K, t-1) parent index chosen at each step
    clamps: int = 0              # -inf scores clamped to LOG_FLOOR so far
    resamples: int = 0

    @property
    def t(self) -> int:
        return self.paths.shape[1]

    @property
    def size(self) -> int:
        return self.paths.shape[0]

    @property
    def current(self) -> np.ndarray:
        return self.paths[:, -1]

    def take(self, idx: np.ndarray) -> "HypothesisSet":
        return replace(self, paths=self.paths[idx], scores=self.scores[idx],
                       lineage=self.lineage[idx])


@dataclass(frozen=True)
class InferenceConfig:
    """One inference method.

    ``G`` is the global pruning interval (``math.inf`` disables it).
    ``global_pool`` decides what a global step ranks: ``"children"`` takes the
    top K of all K*C freshly scored children (no per-parent selection on that
    step); ``"selected"`` first selects per parent and then ranks the survivors,
    which only truncates when ``keep_children > 1``.
    """

    method: str = EVITRACK
    kind: ScoreKind = ScoreKind()
    K: int = 32
    C: int = 2
    G: float = math.inf
    ess_threshold_fraction: float = 0.5
    keep_children: int = 1
    global_pool: str = "children"

    def __post_init__(self):
        if self.method not in (EVITRACK, SIS, BPF):
            raise ValueError(f"unknown method {self.method!r}")
        if self.K < 1 or self.C < 1:
            raise ValueError("K and C must be >= 1")
        if self.method in (SIS, BPF):
            if self.C != 1:
                raise ValueError("SIS/BPF use C = 1")
            if self.kind.name != EVIDENCE:
                raise ValueError("SIS/BPF weight by the evidence score")
        if not (self.G == math.inf or (self.G >= 1 and int(self.G) == self.G)):
            raise ValueError(f"G must be a positive integer or inf, got {self.G}")
        if not 0 < self.ess_threshold_fraction <= 1:
            raise ValueError("ess_threshold_fraction must lie in (0, 1]")
        if not 1 <= self.keep_children <= self.C:
            raise ValueError("keep_children must lie in [1, C]")
        if self.keep_children > 1 and self.G == math.inf:
            raise ValueError("keep_children > 1 needs a finite G to bound the pool")
        if self.global_pool not in ("children", "selected"):
            raise ValueError(f"unknown global_pool {self.global_pool!r}")

    @classmethod
    def evitrack(cls, kind: str | ScoreKind = "joint", K: int = 32, C: int = 2,
                 G: float = math.inf, sigma_bg: float = 1.0, **kw) -> "InferenceConfig":
        if isinstance(kind, str):
            kind = ScoreKind.parse(kind, sigma_bg)
        return cls(EVITRACK, kind, K, C, G, **kw)

    @classmethod
    def sis(cls, N: int = 64) -> "InferenceConfig":
        return cls(SIS, ScoreKind(EVIDENCE), N, 1)

    @classmethod
    def bpf(cls, N: int = 64, ess_threshold_fraction: float = 0.5) -> "InferenceConfig":
        return cls(BPF, ScoreKind(EVIDENCE), N, 1, ess_threshold_fraction=ess_threshold_fraction)

    @property
    def budget(self) -> int:
        return self.K * self.C

    @property
    def descriptor(self) -> str:
        if self.method == EVITRACK:
            g = "inf" if self.G == math.inf else str(int(self.G))
            base = f"evitrack-{self.kind.short}_K{self.K}_C{self.C}_G{g}"
            if self.keep_children > 1:
                base += f"_keep{self.keep_children}"
            if self.global_pool != "children" and self.G != math.inf:
                base += f"_pool-{self.global_pool}"
            return base
        if self.method == SIS:
            return f"sis_N{self.K}"
        thr = f"_ess{self.ess_threshold_fraction:g}" if self.ess_threshold_fraction != 0.5 else ""
        return f"bpf_N{self.K}{thr}"


def _guard(scores: np.ndarray) -> tuple[np.ndarray, int]:
    bad = ~np.isfinite(scores)
    if not bad.any():
        return scores, 0
    return np.where(bad, LOG_FLOOR, scores), int(bad.sum())


def init_hypotheses(config: InferenceConfig, params: WorldModelParams, x1: float,
                    rng: np.random.Generator) -> HypothesisSet:
    z1 = params.mu0 + params.sigma0 * rng.standard_normal(config.K)
    scores, clamps = _guard(np.asarray(initial_score(config.kind, z1, x1, params), dtype=float))
    return HypothesisSet(z1[:, None], scores, np.empty((config.K, 0), dtype=np.int64), clamps)


def _ranked(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties go to the lower index."""
    return np.lexsort((np.arange(len(scores)), -scores))


def global_prune(hset: HypothesisSet, K_keep: int) -> HypothesisSet:
    """Keep the ``K_keep`` best hypotheses, ordered by score then index."""
    if K_keep > hset.size:
        raise ValueError(f"cannot keep {K_keep} of {hset.size} hypotheses")
    return hset.take(_ranked(hset.scores)[:K_keep])


def _extend(hset: HypothesisSet, parent: np.ndarray, child_z: np.ndarray,
            child_scores: np.ndarray) -> HypothesisSet:
    scores, clamps = _guard(child_scores)
    return HypothesisSet(
        paths=np.concatenate([hset.paths[parent], child_z[:, None]], axis=1),
        scores=scores,
        lineage=np.concatenate([hset.lineage[parent], parent[:, None]], axis=1),
        clamps=hset.clamps + clamps,
        resamples=hset.resamples,
    )


def is_global_step(t_next: int, G: float) -> bool:
    return G != math.inf and t_next % int(G) == 0


def evitrack_step(hset: HypothesisSet, x_new: float, config: InferenceConfig,
                  params: WorldModelParams, rng: np.random.Generator) -> HypothesisSet:
    """Branch every parent into C children, then select (locally or globally)."""
    n, C = hset.size, config.C
    parents = hset.current
    children = drift_mean(parents, params)[:, None] + params.sigma_z * rng.standard_normal((n, C))
    child_scores = hset.scores[:, None] + score_increment(
        config.kind, parents[:, None], children, x_new, params)
    global_step = is_global_step(hset.t + 1, config.G)

    if global_step and config.global_pool == "children":
        flat = child_scores.ravel()
        keep = _ranked(flat)[: min(config.K, flat.size)]
        return _extend(hset, keep // C, children.ravel()[keep], flat[keep])

    if config.keep_children == 1:
        # argmax returns the first maximum: ties go to the lowest child index.
        best = np.argmax(child_scores, axis=1)
        rows = np.arange(n)
        out = _extend(hset, rows, children[rows, best], child_scores[rows, best])
    else:
        order = np.lexsort((np.broadcast_to(np.arange(C), (n, C)), -child_scores), axis=1)
        best = order[:, : config.keep_children]
        rows = np.repeat(np.arange(n), config.keep_children)
        cols = best.ravel()
        out = _extend(hset, rows, children[rows, cols], child_scores[rows, cols])
    if global_step and out.size > config.K:
        out = global_prune(out, config.K)
    return out


def sis_step(hset: HypothesisSet, x_new: float, params: WorldModelParams,
             rng: np.random.Generator) -> HypothesisSet:
    """Propagate from the transition prior; the log-weight gains log p(x | z)."""
    z = drift_mean(hset.current, params) + params.sigma_z * rng.standard_normal(hset.size)
    new_scores = hset.scores + emission_logpdf(x_new, z, params)
    return _extend(hset, np.arange(hset.size), z, new_scores)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def bpf_step(hset: HypothesisSet, x_new: float, params: WorldModelParams,
             rng: np.random.Generator, ess_threshold_fraction: float = 0.5) -> HypothesisSet:
    """SIS step followed by systematic resampling when ESS < threshold * N.

    After resampling the survivors' full prefixes are copied and all scores
    reset to 0, i.e. uniform weights.
    """
    out = sis_step(hset, x_new, params, rng)
    w = mixture_weights(out)
    if 1.0 / np.sum(w * w) < ess_threshold_fraction * out.size:
        out = out.take(systematic_resample(w, rng))
        out.scores = np.zeros(out.size)
        out.resamples += 1
    return out


def mixture_weights(hset_or_scores) -> np.ndarray:
    """Softmax of the scores (max-subtracted); accepts a set or a score array."""
    s = hset_or_scores.scores if isinstance(hset_or_scores, HypothesisSet) else hset_or_scores
    s, _ = _guard(np.asarray(s, dtype=float))
    w = np.exp(s - s.max())
    return w / w.sum()


def step(hset: HypothesisSet, x_new: float, config: InferenceConfig,
         params: WorldModelParams, rng: np.random.Generator) -> HypothesisSet:
    if config.method == EVITRACK:
        return evitrack_step(hset, x_new, config, params, rng)
    if config.method == SIS:
        return sis_step(hset, x_new, params, rng)
    return bpf_step(hset, x_new, params, rng, config.ess_threshold_fraction)


@dataclass
class StepRecord:
    traj_id: int
    method: str
    t: int
    size: int
    ess: float
    resampled: bool
    clamps: int


MetricSink = Callable[[HypothesisSet, np.ndarray, Trajectory, int], None]


def run_inference(trajectory: Trajectory, config: InferenceConfig, params: WorldModelParams,
                  seed: int, sink: Optional[MetricSink] = None,
                  rng: Optional[np.random.Generator] = None) -> tuple[HypothesisSet, list[StepRecord]]:
    """Filter a whole trajectory; the sink sees the state at every t = 1..T.

    The inference stream is derived from ``(seed, "infer", descriptor,
    traj_id)`` unless an explicit generator is given.
    """
    if rng is None:
        rng = rng_mod.stream(seed, "infer", config.descriptor, trajectory.traj_id)
    obs = trajectory.obs
    hset = init_hypotheses(config, params, obs[0], rng)
    if sink is not None:
        sink(hset, mixture_weights(hset), trajectory, 1)
    records = []
    for t in range(1, len(obs)):
        before = hset.resamples
        hset = step(hset, obs[t], config, params, rng)
        w = mixture_weights(hset)
        records.append(StepRecord(trajectory.traj_id, config.descriptor, t + 1, hset.size,
                                  float(1.0 / np.sum(w * w)), hset.resamples > before, hset.clamps))
        if sink is not None:
            sink(hset, w, trajectory, t + 1)
    return hset, records


# --- local selection as an order statistic ---------------------------------

@dataclass
class OrderStatCheck:
    bin_edges: np.ndarray
    observed: np.ndarray          # counts per bin
    expected_prob: np.ndarray     # reference probability per bin
    chi2: float
    p_value: float
    dof: int
    samples: np.ndarray = field(repr=False)
    score_argmax: float = float("nan")


def _default_x(z_parent: float, params: WorldModelParams) -> float:
    # One transition sigma above the drift target, so selection visibly tilts.
    return float(emission_mean(drift_mean(z_parent, params) + params.sigma_z, params))


def selected_child_density_check(params: WorldModelParams, z_parent: float, kind: ScoreKind,
                                 C: int, n_samples: int, rng: np.random.Generator,
                                 x_new: Optional[float] = None, n_bins: int = 64,
                                 n_quad: int = 40001) -> OrderStatCheck:
    """Compare the empirical law of the locally selected child with C p(z) F(S(z))^(C-1).

    Samples are produced by the same branching-and-argmax rule as
    ``evitrack_step`` (one parent, many independent repetitions). The
    reference is evaluated by quadrature on a fine grid over mu +- 8 sigma_z,
    with F the CDF of the child score under the transition, and integrated
    over ``n_bins`` equal bins spanning mu +- 5 sigma_z. Bins with expected
    count below 5 are merged into their neighbours before the chi-square test.
    """
    if n_samples < 10_000:
        raise ValueError("n_samples must be >= 1e4")
    x = _default_x(z_parent, params) if x_new is None else x_new
    mu, sz = float(drift_mean(z_parent, params)), params.sigma_z

    # Empirical: run local selection n_samples times from the same parent.
    hset = HypothesisSet(np.full((n_samples, 1), float(z_parent)), np.zeros(n_samples),
                         np.empty((n_samples, 0), dtype=np.int64))
    cfg = InferenceConfig(EVITRACK, kind, K=n_samples, C=C)
    samples = evitrack_step(hset, x, cfg, params, rng).current

    # Reference by quadrature.
    grid = np.linspace(mu - 8 * sz, mu + 8 * sz, n_quad)
    dz = grid[1] - grid[0]
    dens = np.exp(transition_logpdf(grid, z_parent, params))
    score = score_increment(kind, z_parent, grid, x, params)
    order = np.argsort(score, kind="stable")
    mass = dens[order] * dz
    cdf_sorted = np.cumsum(mass) / mass.sum()
    # F(S(z)) = P(S <= S(z)); ties share the largest cumulative value.
    sorted_scores = score[order]
    pos = np.searchsorted(sorted_scores, score, side="right") - 1
    F = cdf_sorted[pos]
    ref = C * dens * F ** (C - 1)

    edges = np.linspace(mu - 5 * sz, mu + 5 * sz, n_bins + 1)
    cum = np.concatenate([[0.0], np.cumsum(ref) * dz])
    cum_at = np.interp(edges, grid + 0.5 * dz, cum[1:])
    probs = np.diff(cum_at)
    probs = probs / probs.sum()
    inside = (samples >= edges[0]) & (samples < edges[-1])
    observed = np.histogram(samples[inside], bins=edges)[0].astype(float)
    expected = probs * inside.sum()

    obs_m, exp_m = _merge_small(observed, expected, 5.0)
    chi2, p = stats.chisquare(obs_m, exp_m)
    argmax = float(grid[np.argmax(np.where(np.abs(grid - mu) <= 5 * sz, score, -np.inf))])
    return OrderStatCheck(edges, observed, probs, float(chi2), float(p), len(obs_m) - 1,
                          samples, argmax)


def _merge_small(observed: np.ndarray, expected: np.ndarray, min_expected: float):
    obs_out, exp_out = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(observed, expected):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            obs_out.append(o_acc)
            exp_out.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if obs_out:
            obs_out[-1] += o_acc
            exp_out[-1] += e_acc
        else:
            obs_out.append(o_acc)
            exp_out.append(e_acc)
    obs_arr, exp_arr = np.array(obs_out), np.array(exp_out)
    return obs_arr, exp_arr * obs_arr.sum() / exp_arr.sum()
