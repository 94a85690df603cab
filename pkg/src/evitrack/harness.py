"""Experiment orchestration: methods x trajectories x seeds, DD alignment, aggregation.

Each (config, seed, trajectory) run produces a metric matrix over t. Only the
window ``t - t_DD in [-W, +W]`` is kept (``RunRecords.window``); aggregation
is a deterministic reduce over those arrays:

1. per seed and bin: mean over trajectories at every offset (trajectories
   whose window runs past T - H are left out at those offsets only);
2. across seeds: mean and sample standard deviation (n - 1) of step 1.

Pre-DD is offsets [-W, -1], post-DD is [0, +W].
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__
from . import rng as rng_mod
from .config import RunConfig, format_G, parse_G
from .exact_filter import Dataset
from .inference import InferenceConfig, run_inference
from .metrics import MetricRecorder, metric_names
from .scoring import ScoreKind
from .world_model import Trajectory, WorldModelParams

log = logging.getLogger(__name__)

BIN_LABELS = ("early", "mid", "late")
ALL = "all"


class EmptyBin(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    horizons: tuple = (1, 5, 10)
    M: int = 20
    window: int = 20

    @property
    def names(self) -> list[str]:
        return metric_names(self.horizons)

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.window, self.window + 1)


@dataclass
class RunRecords:
    """Windowed metrics for one inference config.

    ``window[s, j, k, o]``: seed ``seeds[s]``, trajectory ``traj_ids[j]``,
    metric ``names[k]``, offset ``offsets[o]``. NaN marks values that do not
    exist (horizon past T).
    """

    descriptor: str
    seeds: list[int]
    traj_ids: np.ndarray
    bins: np.ndarray
    names: list[str]
    offsets: np.ndarray
    window: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path, descriptor=self.descriptor, seeds=np.array(self.seeds), traj_ids=self.traj_ids,
            bins=self.bins, names=np.array(self.names), offsets=self.offsets, window=self.window,
            diagnostics=json.dumps(self.diagnostics, sort_keys=True),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunRecords":
        with np.load(path, allow_pickle=False) as z:
            return cls(str(z["descriptor"]), [int(s) for s in z["seeds"]], z["traj_ids"],
                       z["bins"].astype(str), [str(n) for n in z["names"]], z["offsets"],
                       z["window"], json.loads(str(z["diagnostics"])))


# --- running -----------------------------------------------------------------

def run_trajectory(traj: Trajectory, config: InferenceConfig, params: WorldModelParams,
                   seed: int, settings: EvalSettings) -> tuple[np.ndarray, dict]:
    """Full metric matrix (n_metrics, T) for one run plus run diagnostics."""
    recorder = MetricRecorder(
        traj.T, params, settings.horizons, settings.M,
        rng=rng_mod.stream(seed, "rollout", config.descriptor, traj.traj_id),
    )
    hset, steps = run_inference(traj, config, params, seed, recorder)
    diag = {
        "score_clamps": hset.clamps,
        "pll_clamps": recorder.clamps,
        "resamples": hset.resamples,
        "identity_violations": recorder.identity_violations,
    }
    return recorder.values, diag


def _window_of(values: np.ndarray, dd_time: int, settings: EvalSettings) -> np.ndarray:
    cols = dd_time - 1 + settings.offsets
    out = np.full((values.shape[0], len(cols)), np.nan)
    ok = (cols >= 0) & (cols < values.shape[1])
    out[:, ok] = values[:, cols[ok]]
    return out


def _work(args):
    trajs, config, params, seed, settings = args
    windows, diags = [], []
    for tr in trajs:
        values, diag = run_trajectory(tr, config, params, seed, settings)
        windows.append(_window_of(values, tr.dd_time, settings))
        diags.append(diag)
    return windows, diags


def run_config(dataset: Dataset, config: InferenceConfig, seeds: Sequence[int],
               settings: EvalSettings = EvalSettings(), jobs: int = 1,
               chunk: int = 25) -> RunRecords:
    """Run one config over every trajectory and seed.

    Work is split into chunks of trajectories; results are placed by index,
    so the output does not depend on ``jobs``.
    """
    trajs = dataset.trajectories
    if any(tr.dd_time is None for tr in trajs):
        raise ValueError("every trajectory needs a dd_time")
    tasks = [(trajs[i:i + chunk], config, dataset.params, int(s), settings)
             for s in seeds for i in range(0, len(trajs), chunk)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_work, tasks))
    else:
        results = [_work(t) for t in tasks]
    windows = np.array([w for ws, _ in results for w in ws]).reshape(
        len(seeds), len(trajs), len(settings.names), len(settings.offsets))
    diags = [d for _, ds in results for d in ds]
    totals = {k: int(sum(d[k] for d in diags)) for k in diags[0]} if diags else {}
    return RunRecords(
        descriptor=config.descriptor,
        seeds=[int(s) for s in seeds],
        traj_ids=np.array([tr.traj_id for tr in trajs]),
        bins=np.array([tr.dd_bin for tr in trajs]),
        names=settings.names,
        offsets=settings.offsets,
        window=windows,
        diagnostics=totals,
    )


# --- aggregation -------------------------------------------------------------

@dataclass
class AlignedSeries:
    metric: str
    method: str
    bin: str
    offsets: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n: np.ndarray            # trajectories contributing at each offset
    n_seeds: int


@dataclass
class PrePostSummary:
    metric: str
    method: str
    bin: str
    pre_mean: float
    pre_std: float
    post_mean: float
    post_std: float


def _seed_std(x: np.ndarray) -> np.ndarray:
    """Sample std across seeds (axis 0); zero for a single seed."""
    if x.shape[0] < 2:
        return np.zeros(x.shape[1:])
    return np.std(x, axis=0, ddof=1)


def _per_seed_means(rec: RunRecords, k: int, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    block = rec.window[:, mask, k, :]                       # (seeds, trajs, offsets)
    n = np.sum(~np.isnan(block[0]), axis=0)
    with np.errstate(invalid="ignore"):
        means = np.nansum(block, axis=1) / n
    return means, n


def _bin_mask(rec: RunRecords, label: str) -> np.ndarray:
    return np.ones(len(rec.bins), dtype=bool) if label == ALL else rec.bins == label


def align_and_average(rec: RunRecords, metrics: Optional[Iterable[str]] = None,
                      labels: Sequence[str] = BIN_LABELS + (ALL,)) -> list[AlignedSeries]:
    out = []
    for name in metrics or rec.names:
        k = rec.names.index(name)
        for label in labels:
            mask = _bin_mask(rec, label)
            if not mask.any():
                raise EmptyBin(f"bin {label!r} has no trajectories for {rec.descriptor}")
            means, n = _per_seed_means(rec, k, mask)
            if not np.any(n):
                raise EmptyBin(f"bin {label!r} has no usable values for {name}")
            out.append(AlignedSeries(name, rec.descriptor, label, rec.offsets,
                                     means.mean(axis=0), _seed_std(means), n, len(rec.seeds)))
    return out


def pre_post_summary(rec: RunRecords, metrics: Optional[Iterable[str]] = None,
                     labels: Sequence[str] = BIN_LABELS + (ALL,)) -> list[PrePostSummary]:
    """Per seed: average the per-offset means over the pre/post window; then
    mean and sample std across seeds. ``all`` pools the trajectories of every
    bin before averaging."""
    pre, post = rec.offsets < 0, rec.offsets >= 0
    out = []
    for name in metrics or rec.names:
        k = rec.names.index(name)
        for label in labels:
            mask = _bin_mask(rec, label)
            if not mask.any():
                raise EmptyBin(f"bin {label!r} has no trajectories for {rec.descriptor}")
            means, _ = _per_seed_means(rec, k, mask)
            with np.errstate(invalid="ignore"), _quiet():
                pre_s = np.nanmean(means[:, pre], axis=1)
                post_s = np.nanmean(means[:, post], axis=1)
            out.append(PrePostSummary(name, rec.descriptor, label,
                                      float(pre_s.mean()), float(_seed_std(pre_s[:, None])[0]),
                                      float(post_s.mean()), float(_seed_std(post_s[:, None])[0])))
    return out


class _quiet:
    def __enter__(self):
        import warnings
        self._cm = warnings.catch_warnings()
        self._cm.__enter__()
        warnings.simplefilter("ignore", RuntimeWarning)

    def __exit__(self, *exc):
        return self._cm.__exit__(*exc)


def summary_lookup(summaries: Sequence[PrePostSummary]) -> dict:
    return {(s.method, s.bin, s.metric): s for s in summaries}


# --- experiments -------------------------------------------------------------

EXPERIMENTS = ("main", "scoring", "g-sweep", "c-sweep", "k-sweep")


@dataclass
class SweepSpec:
    sweep_id: str
    configs: list[InferenceConfig]
    # grid value each config belongs to, e.g. {"G": "inf"} or {"K": 8, "role": "sis"}
    labels: list[dict]


def _evitrack(cfg: RunConfig, **over) -> InferenceConfig:
    inf = cfg.raw["inference"]
    kw = dict(kind=ScoreKind.parse(inf["score_kind"], cfg.sigma_bg), K=inf["K"], C=inf["C"],
              G=parse_G(inf["G"]), keep_children=inf["keep_children"],
              global_pool=inf["global_pool"])
    kw.update(over)
    return InferenceConfig("evitrack", **kw)


def experiment_spec(name: str, cfg: RunConfig) -> SweepSpec:
    inf, sw = cfg.raw["inference"], cfg.raw["sweeps"]
    N = inf["budget"]
    thr = inf["ess_threshold_fraction"]
    if name == "main":
        configs = [_evitrack(cfg), InferenceConfig.sis(N), InferenceConfig.bpf(N, thr)]
        labels = [{"role": "evitrack"}, {"role": "sis"}, {"role": "bpf"}]
    elif name == "scoring":
        configs = [_evitrack(cfg, kind=ScoreKind.parse(k, cfg.sigma_bg), G=math.inf)
                   for k in sw["scoring"]]
        labels = [{"score_kind": c.kind.name} for c in configs]
    elif name == "g-sweep":
        configs = [_evitrack(cfg, G=parse_G(g)) for g in sw["G"]]
        labels = [{"G": format_G(c.G)} for c in configs]
    elif name == "c-sweep":
        configs = [_evitrack(cfg, C=c, K=N // c, G=parse_G(sw["C_sweep_G"])) for c in sw["C"]]
        labels = [{"C": c.C, "K": c.K} for c in configs]
    elif name == "k-sweep":
        c = sw["K_sweep_C"]
        configs, labels = [], []
        for k in sw["K"]:
            configs += [_evitrack(cfg, K=k, C=c, G=math.inf), InferenceConfig.sis(k * c),
                        InferenceConfig.bpf(k * c, thr)]
            labels += [{"K": k, "N": k * c, "role": r} for r in ("evitrack", "sis", "bpf")]
    else:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    return SweepSpec(name, configs, labels)


@dataclass
class ExperimentResult:
    spec: SweepSpec
    records: list[RunRecords]
    summaries: list[PrePostSummary]
    series: list[AlignedSeries]


class Runner:
    """Runs experiments on one dataset, reusing records for repeated configs."""

    def __init__(self, dataset: Dataset, seeds: Sequence[int], settings: EvalSettings = EvalSettings(),
                 jobs: int = 1):
        self.dataset = dataset
        self.seeds = list(seeds)
        self.settings = settings
        self.jobs = jobs
        self._cache: dict[str, RunRecords] = {}

    def records(self, config: InferenceConfig) -> RunRecords:
        key = config.descriptor
        if key not in self._cache:
            t0 = time.time()
            self._cache[key] = run_config(self.dataset, config, self.seeds, self.settings, self.jobs)
            log.info("%s: %d runs in %.1fs", key, len(self.seeds) * len(self.dataset.trajectories),
                     time.time() - t0)
        return self._cache[key]

    def run(self, spec: SweepSpec) -> ExperimentResult:
        records = [self.records(c) for c in spec.configs]
        summaries = [s for r in records for s in pre_post_summary(r)]
        series = [s for r in records for s in align_and_average(r)]
        return ExperimentResult(spec, records, summaries, series)


def run_main_experiment(dataset: Dataset, cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2),
                        jobs: int = 1) -> ExperimentResult:
    return Runner(dataset, seeds, eval_settings(cfg), jobs).run(experiment_spec("main", cfg))


def run_sweep(spec: SweepSpec, dataset: Dataset, seeds: Sequence[int],
              settings: EvalSettings = EvalSettings(), jobs: int = 1) -> ExperimentResult:
    return Runner(dataset, seeds, settings, jobs).run(spec)


def eval_settings(cfg: RunConfig) -> EvalSettings:
    ev = cfg.raw["evaluation"]
    return EvalSettings(tuple(int(h) for h in ev["horizons"]), int(ev["M"]), int(ev["window"]))


# --- output ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_result(result: ExperimentResult, out_dir: str | Path, manifest: dict) -> Path:
    """Write aligned series (one CSV per metric), the summary CSV, records, manifest."""
    out_dir = Path(out_dir) / result.spec.sweep_id
    (out_dir / "records").mkdir(parents=True, exist_ok=True)
    for rec in result.records:
        rec.save(out_dir / "records" / f"{rec.descriptor}.npz")
    write_tables(result.spec, result.summaries, result.series, out_dir)
    manifest = dict(manifest)
    manifest["experiment"] = result.spec.sweep_id
    manifest["methods"] = [
        {"descriptor": c.descriptor, **lab} for c, lab in zip(result.spec.configs, result.spec.labels)
    ]
    manifest["diagnostics"] = {r.descriptor: r.diagnostics for r in result.records}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return out_dir


def write_tables(spec: SweepSpec, summaries, series, out_dir: Path) -> None:
    order = {c.descriptor: i for i, c in enumerate(spec.configs)}
    by_metric: dict[str, list[AlignedSeries]] = {}
    for s in series:
        by_metric.setdefault(s.metric, []).append(s)
    (out_dir / "series").mkdir(parents=True, exist_ok=True)
    for metric, rows in by_metric.items():
        with (out_dir / "series" / f"{metric}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "bin", "offset", "mean", "std", "n"])
            for s in sorted(rows, key=lambda s: (order[s.method], s.bin)):
                for o, m, sd, n in zip(s.offsets, s.mean, s.std, s.n):
                    w.writerow([s.method, s.bin, int(o), _fmt(m), _fmt(sd), int(n)])
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "bin", "metric", "pre_mean", "pre_std", "post_mean", "post_std"])
        for s in sorted(summaries, key=lambda s: (order[s.method], s.bin, s.metric)):
            w.writerow([s.method, s.bin, s.metric, _fmt(s.pre_mean), _fmt(s.pre_std),
                        _fmt(s.post_mean), _fmt(s.post_std)])


def summarize_dir(exp_dir: str | Path) -> ExperimentResult:
    """Re-aggregate the record files of an experiment directory."""
    exp_dir = Path(exp_dir)
    manifest = json.loads((exp_dir / "manifest.json").read_text())
    records = [RunRecords.load(exp_dir / "records" / f"{m['descriptor']}.npz")
               for m in manifest["methods"]]
    spec = SweepSpec(manifest["experiment"], [_Named(r.descriptor) for r in records],
                     [{k: v for k, v in m.items() if k != "descriptor"} for m in manifest["methods"]])
    summaries = [s for r in records for s in pre_post_summary(r)]
    series = [s for r in records for s in align_and_average(r)]
    result = ExperimentResult(spec, records, summaries, series)
    write_tables(spec, summaries, series, exp_dir)
    return result


@dataclass(frozen=True)
class _Named:
    descriptor: str


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
