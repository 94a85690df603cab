import json
import math

import numpy as np
import pytest

from evitrack.config import RunConfig
from evitrack.harness import (
    EmptyBin,
    EvalSettings,
    Runner,
    RunRecords,
    align_and_average,
    experiment_spec,
    pre_post_summary,
    run_config,
    summarize_dir,
    write_result,
)
from evitrack.inference import InferenceConfig

SETTINGS = EvalSettings(horizons=(1, 5), M=4, window=20)


def _records(values, bins=("early", "mid", "late"), names=("m",)):
    """values: (seeds, trajs, offsets) for one metric."""
    values = np.asarray(values, dtype=float)
    S, J, O = values.shape
    return RunRecords("x", list(range(S)), np.arange(J), np.array(bins[:J] if len(bins) >= J else bins),
                      list(names), np.arange(O) - O // 2, values[:, :, None, :])


def test_single_seed_std_zero():
    rec = _records(np.random.default_rng(0).normal(size=(1, 3, 41)))
    for s in align_and_average(rec):
        assert np.all(s.std == 0) and s.n_seeds == 1


def test_constant_metric():
    rec = _records(np.full((3, 3, 41), 2.5))
    for s in align_and_average(rec):
        np.testing.assert_array_equal(s.mean, 2.5)
        np.testing.assert_array_equal(s.std, 0.0)
    for s in pre_post_summary(rec):
        assert s.pre_mean == s.post_mean == 2.5 and s.pre_std == 0.0


def test_sample_std_across_seeds():
    vals = np.zeros((3, 3, 41))
    vals[0], vals[1], vals[2] = 1.0, 2.0, 3.0
    (early,) = [s for s in align_and_average(_records(vals)) if s.bin == "early"]
    np.testing.assert_allclose(early.mean, 2.0)
    np.testing.assert_allclose(early.std, 1.0)


def test_pre_post_split_at_zero():
    vals = np.zeros((2, 3, 41))
    vals[:, :, 20:] = 1.0          # offsets 0..20 count as post
    for s in pre_post_summary(_records(vals)):
        assert s.pre_mean == 0.0 and s.post_mean == 1.0


def test_truncated_offsets_counted():
    vals = np.ones((1, 3, 41))
    vals[0, 2, 35:] = np.nan       # a late trajectory runs out of horizon
    series = {s.bin: s for s in align_and_average(_records(vals))}
    assert series["late"].n[35] == 0 and np.isnan(series["late"].mean[35])
    assert series["all"].n[35] == 2 and series["all"].mean[35] == 1.0


def test_all_within_bin_range():
    rng = np.random.default_rng(0)
    rec = _records(rng.normal(size=(3, 9, 41)), bins=("early", "mid", "late") * 3)
    rec.bins = np.array(["early", "mid", "late"] * 3)
    by = {s.bin: s for s in pre_post_summary(rec)}
    for attr in ("pre_mean", "post_mean"):
        vals = [getattr(by[b], attr) for b in ("early", "mid", "late")]
        assert min(vals) - 1e-12 <= getattr(by["all"], attr) <= max(vals) + 1e-12


def test_empty_bin():
    rec = _records(np.ones((1, 2, 41)), bins=("early", "mid"))
    with pytest.raises(EmptyBin):
        align_and_average(rec)


def test_experiment_specs():
    cfg = RunConfig()
    main = experiment_spec("main", cfg)
    assert [c.descriptor for c in main.configs] == ["evitrack-J_K32_C2_Ginf", "sis_N64", "bpf_N64"]
    scoring = experiment_spec("scoring", cfg)
    assert len(scoring.configs) == 3
    assert all(c.K == 32 and c.C == 2 and c.G == math.inf for c in scoring.configs)
    g = experiment_spec("g-sweep", cfg)
    assert [lab["G"] for lab in g.labels] == ["1", "5", "10", "20", "inf"]
    c = experiment_spec("c-sweep", cfg)
    assert [x.C for x in c.configs] == [2, 4, 8, 16, 32]
    assert all(x.K * x.C == 64 and x.G == 1 for x in c.configs)
    k = experiment_spec("k-sweep", cfg)
    evi = [x for x in k.configs if x.method == "evitrack"]
    base = [x for x in k.configs if x.method != "evitrack"]
    assert len(evi) == 6 and len(base) == 12
    assert all(x.C == 2 and x.G == math.inf for x in evi)
    assert sorted({x.K for x in base}) == [4, 8, 16, 32, 64, 128]
    with pytest.raises(ValueError):
        experiment_spec("nope", cfg)


def test_run_config_independent_of_jobs(small_dataset):
    cfg = InferenceConfig.evitrack("joint", K=4, C=2)
    a = run_config(small_dataset, cfg, [0, 1], SETTINGS, jobs=1, chunk=2)
    b = run_config(small_dataset, cfg, [0, 1], SETTINGS, jobs=2, chunk=4)
    np.testing.assert_array_equal(a.window, b.window)
    assert a.window.shape == (2, 6, len(SETTINGS.names), 41)
    assert a.diagnostics["identity_violations"] == 0


def test_window_alignment(small_dataset, slow_params):
    from evitrack.harness import run_trajectory
    cfg = InferenceConfig.sis(8)
    rec = run_config(small_dataset, cfg, [3], SETTINGS)
    tr = small_dataset.trajectories[0]
    full, _ = run_trajectory(tr, cfg, slow_params, 3, SETTINGS)
    np.testing.assert_array_equal(rec.window[0, 0, :, 20], full[:, tr.dd_time - 1])
    np.testing.assert_array_equal(rec.window[0, 0, :, 0], full[:, tr.dd_time - 21])


def test_write_and_summarize_round_trip(small_dataset, tmp_path):
    cfg = RunConfig.from_dict({"world_model": {"v0": 0.002}, "inference": {"K": 4, "C": 2, "budget": 8}})
    spec = experiment_spec("main", cfg)
    result = Runner(small_dataset, [0, 1], SETTINGS).run(spec)
    out = write_result(result, tmp_path, {"seeds": [0, 1]})
    summary = (out / "summary.csv").read_text()
    header = summary.splitlines()[0]
    assert header == "method,bin,metric,pre_mean,pre_std,post_mean,post_std"
    assert (out / "series" / "ba_filt.csv").read_text().splitlines()[0] == "method,bin,offset,mean,std,n"
    manifest = json.loads((out / "manifest.json").read_text())
    assert [m["descriptor"] for m in manifest["methods"]] == ["evitrack-J_K4_C2_Ginf", "sis_N8", "bpf_N8"]
    methods = {line.split(",")[0] for line in summary.splitlines()[1:]}
    bins = {line.split(",")[1] for line in summary.splitlines()[1:]}
    assert len(methods) == 3 and bins == {"early", "mid", "late", "all"}
    summarize_dir(out)
    assert (out / "summary.csv").read_text() == summary
