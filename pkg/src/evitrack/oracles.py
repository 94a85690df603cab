"""Independent reference computations and the built-in verification suite.

Each check returns a ``CheckResult``; ``run_checks`` runs a selection and is
what ``evitrack verify`` prints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as rng_mod
from .exact_filter import QuadratureGrid, filter_posterior
from .inference import InferenceConfig, run_inference, selected_child_density_check
from .metrics import MetricRecorder
from .scoring import ScoreKind, score_from_scratch
from .world_model import WorldModelParams, simulate


@dataclass
class CheckResult:
    family: str
    name: str
    passed: bool
    detail: str


def kalman_filter(obs: Sequence[float], mu0: float, var0: float, q: float, r: float):
    """Scalar random-walk Kalman filter: z_t = z_{t-1} + N(0, q), x_t = z_t + N(0, r).

    Returns filtered means and variances, both of length T.
    """
    obs = np.asarray(obs, dtype=float)
    means, variances = np.empty(len(obs)), np.empty(len(obs))
    m, P = mu0, var0
    for t, x in enumerate(obs):
        if t:
            P = P + q
        gain = P / (P + r)
        m = m + gain * (x - m)
        P = (1.0 - gain) * P
        means[t], variances[t] = m, P
    return means, variances


def linear_params(base: WorldModelParams = WorldModelParams(), T: int = 200) -> WorldModelParams:
    """The linear-Gaussian special case: no drift (V0 = 0), identity emission (d = 0).

    Built without ``validate`` since it deliberately breaks a > d > 0.
    """
    return dataclasses.replace(base, V0=0.0, d=0.0, T=T)


def grid_moments(posterior: np.ndarray, grid: QuadratureGrid) -> tuple[np.ndarray, np.ndarray]:
    g = grid.nodes
    mean = posterior @ g
    var = posterior @ (g * g) - mean * mean
    return mean, var


# --- checks ------------------------------------------------------------------

def check_kalman(n_seeds: int = 20, tol: float = 1e-3, root_seed: int = 0,
                 grid: QuadratureGrid = QuadratureGrid()) -> list[CheckResult]:
    p = linear_params()
    worst_m = worst_v = 0.0
    for i in range(n_seeds):
        tr = simulate(p, rng_mod.derive_seed(root_seed, "kalman", i))
        post = filter_posterior(tr.obs, p, grid)
        gm, gv = grid_moments(post, grid)
        km, kv = kalman_filter(tr.obs, p.mu0, p.sigma0**2, p.sigma_z**2, p.sigma_x**2)
        worst_m = max(worst_m, float(np.max(np.abs(gm - km))))
        worst_v = max(worst_v, float(np.max(np.abs(gv - kv))))
    return [
        CheckResult("kalman", "posterior mean", worst_m <= tol, f"max |err| {worst_m:.2e} over {n_seeds} seeds"),
        CheckResult("kalman", "posterior variance", worst_v <= tol, f"max |err| {worst_v:.2e} over {n_seeds} seeds"),
    ]


def check_order_stats(params: WorldModelParams = WorldModelParams(), Cs: Sequence[int] = (2, 8, 64),
                      n_samples: int = 100_000, alpha: float = 0.01, root_seed: int = 0,
                      kind: Optional[ScoreKind] = None) -> list[CheckResult]:
    kind = kind or ScoreKind("joint")
    out = []
    for C in Cs:
        for z in (0.0, params.a / 2, params.a):
            rng = rng_mod.stream(root_seed, "order-stats", C, z)
            res = selected_child_density_check(params, z, kind, C, n_samples, rng)
            out.append(CheckResult("order-stats", f"C={C} z_parent={z:g}", res.p_value > alpha,
                                   f"chi2={res.chi2:.1f} dof={res.dof} p={res.p_value:.3f}"))
    return out


def check_additivity(params: WorldModelParams = WorldModelParams(), n_runs: int = 50,
                     T: int = 60, tol: float = 1e-9, root_seed: int = 0,
                     sigma_bg: float = 1.0) -> list[CheckResult]:
    """Accumulated EviTrack scores against a from-scratch rescoring of every kept path."""
    p = dataclasses.replace(params, T=T)
    out = []
    for name in ("joint", "evidence", "tbd"):
        kind = ScoreKind(name, sigma_bg)
        cfg = InferenceConfig.evitrack(kind, K=8, C=4)
        worst = 0.0
        for i in range(n_runs):
            tr = simulate(p, rng_mod.derive_seed(root_seed, "additivity", i))
            tr.traj_id = i
            hset, _ = run_inference(tr, cfg, p, root_seed)
            for path, s in zip(hset.paths, hset.scores):
                worst = max(worst, abs(s - score_from_scratch(kind, path, tr.obs, p)))
        out.append(CheckResult("additivity", f"kind={name}", worst <= tol,
                               f"max |err| {worst:.2e} over {n_runs} runs"))
    return out


def check_metric_identity(params: WorldModelParams = WorldModelParams(), n_runs: int = 3,
                          tol: float = 1e-9, root_seed: int = 0) -> list[CheckResult]:
    """mse = bias^2 + variance on every filtering record of a small run."""
    out = []
    for cfg in (InferenceConfig.evitrack("joint"), InferenceConfig.sis(), InferenceConfig.bpf()):
        worst, count = 0.0, 0
        for i in range(n_runs):
            tr = simulate(params, rng_mod.derive_seed(root_seed, "identity", i))
            tr.traj_id = i
            rec = MetricRecorder(params.T, params, rng=rng_mod.stream(root_seed, "rollout", i))
            run_inference(tr, cfg, params, root_seed, rec)
            bias, var, mse = rec.values[1], rec.values[2], rec.values[3]
            err = np.abs(mse - (bias**2 + var)) / np.maximum(1.0, np.abs(mse))
            worst = max(worst, float(np.max(err)))
            count += len(mse)
        out.append(CheckResult("metric-identity", cfg.descriptor, worst <= tol,
                               f"max rel err {worst:.2e} on {count} records"))
    return out


def check_sis_equivalence(params: WorldModelParams = WorldModelParams(), n_traj: int = 10,
                          N: int = 64, root_seed: int = 0) -> list[CheckResult]:
    """SIS and EviTrack-E with C=1, K=N must agree bit for bit on a shared stream."""
    sis = InferenceConfig.sis(N)
    evi = InferenceConfig.evitrack("evidence", K=N, C=1)
    mismatches = 0
    for i in range(n_traj):
        tr = simulate(params, rng_mod.derive_seed(root_seed, "sis-equivalence", i))
        a, _ = run_inference(tr, sis, params, root_seed, rng=rng_mod.stream(root_seed, "shared", i))
        b, _ = run_inference(tr, evi, params, root_seed, rng=rng_mod.stream(root_seed, "shared", i))
        same = np.array_equal(a.paths, b.paths) and np.array_equal(a.scores, b.scores)
        mismatches += not same
    return [CheckResult("sis-equivalence", f"N={N}", mismatches == 0,
                        f"{n_traj - mismatches}/{n_traj} trajectories bit-identical")]


CHECKS: dict[str, Callable[..., list[CheckResult]]] = {
    "kalman": check_kalman,
    "order-stats": check_order_stats,
    "additivity": check_additivity,
    "metric-identity": check_metric_identity,
    "sis-equivalence": check_sis_equivalence,
}


def run_checks(families: Optional[Sequence[str]] = None, params: Optional[WorldModelParams] = None,
               sigma_bg: float = 1.0, root_seed: int = 0) -> list[CheckResult]:
    families = list(families or CHECKS)
    unknown = [f for f in families if f not in CHECKS]
    if unknown:
        raise ValueError(f"unknown check families {unknown}; choose from {sorted(CHECKS)}")
    results = []
    for fam in families:
        kw = {"root_seed": root_seed}
        if params is not None and fam != "kalman":
            kw["params"] = params
        if fam == "additivity":
            kw["sigma_bg"] = sigma_bg
        results += CHECKS[fam](**kw)
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    w_f = max(len("family"), *(len(r.family) for r in results))
    w_n = max(len("check"), *(len(r.name) for r in results))
    lines = [f"{'family':<{w_f}}  {'check':<{w_n}}  result  detail"]
    for r in results:
        lines.append(f"{r.family:<{w_f}}  {r.name:<{w_n}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
