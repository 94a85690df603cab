import dataclasses
import math

import numpy as np
import pytest

from evitrack.exact_filter import QuadratureGrid
from evitrack.world_model import (
    ParameterError,
    Trajectory,
    WorldModelParams,
    drift_mean,
    emission_logpdf,
    emission_mean,
    load_trajectory,
    save_trajectory,
    simulate,
    simulate_batch,
    transition_logpdf,
    transition_sample,
)


def test_drift_fixed_points_and_value(params):
    assert drift_mean(0.0, params) == 0.0
    assert drift_mean(3.0, params) == 3.0
    assert drift_mean(1.0, params) == pytest.approx(1.48, abs=1e-12)


def test_drift_is_odd(params):
    z = np.linspace(-5, 5, 101)
    np.testing.assert_array_equal(drift_mean(-z, params), -drift_mean(z, params))


def test_emission_piecewise(params):
    assert emission_mean(1.5, params) == 2.25
    assert emission_mean(-1.5, params) == 2.25
    assert emission_mean(2.5, params) == 2.5
    z = np.linspace(0, params.d, 50)
    np.testing.assert_array_equal(emission_mean(z, params), emission_mean(-z, params))
    outer = np.linspace(params.d + 1e-6, 6, 50)
    assert np.all(np.diff(emission_mean(outer, params)) > 0)
    assert np.all(np.diff(emission_mean(-outer[::-1], params)) > 0)


def test_transition_logpdf_values(params):
    mode = transition_logpdf(drift_mean(0.7, params), 0.7, params)
    assert mode == pytest.approx(-math.log(0.05) - 0.5 * math.log(2 * math.pi), abs=1e-12)
    assert mode == pytest.approx(2.0767, abs=1e-4)
    off = transition_logpdf(drift_mean(0.7, params) + params.sigma_z, 0.7, params)
    assert off == pytest.approx(mode - 0.5, abs=1e-12)


def test_emission_logpdf_values(params):
    assert emission_logpdf(emission_mean(1.0, params), 1.0, params) == pytest.approx(1.2014, abs=1e-4)
    x = emission_mean(2.5, params) + params.sigma_x
    assert emission_logpdf(x, 2.5, params) == pytest.approx(1.2014 - 0.5, abs=1e-4)
    assert emission_logpdf(0.3, 1.5, params) == emission_logpdf(0.3, -1.5, params)


def test_transition_density_integrates_to_one(params):
    g = QuadratureGrid().nodes
    dz = g[1] - g[0]
    for z_prev in (-3.0, -1.0, 0.0, 0.5, 3.0):
        assert np.exp(transition_logpdf(g, z_prev, params)).sum() * dz == pytest.approx(1.0, abs=1e-6)


def test_transition_sample(params):
    rng = np.random.default_rng(5)
    draws = transition_sample(np.full(100_000, 1.0), params, rng)
    assert abs(draws.mean() - 1.48) < 3 * params.sigma_z / math.sqrt(1e5)
    a = transition_sample(1.0, params, np.random.default_rng(9))
    b = transition_sample(1.0, params, np.random.default_rng(9))
    assert a == b
    tiny = dataclasses.replace(params, sigma_z=1e-300)
    assert transition_sample(1.0, tiny, rng) == drift_mean(1.0, params)


def test_simulate_deterministic_and_batch_consistent(params):
    a, b = simulate(params, 123), simulate(params, 123)
    np.testing.assert_array_equal(a.latent, b.latent)
    np.testing.assert_array_equal(a.obs, b.obs)
    z, x = simulate_batch(params, [7, 123, 99])
    np.testing.assert_array_equal(z[1], a.latent)
    np.testing.assert_array_equal(x[1], a.obs)


def test_simulate_noiseless_fixed_point(params):
    p = dataclasses.replace(params, sigma0=0.0, sigma_z=0.0, sigma_x=0.0, mu0=params.a)
    tr = simulate(p, 0)
    assert np.all(tr.latent == params.a)
    assert np.all(tr.obs == params.a)


def test_trajectories_settle_outside_even_region(params):
    z, _ = simulate_batch(params, range(500))
    assert np.mean(np.abs(z[:, -1]) > params.d) > 0.95


@pytest.mark.parametrize("field,value", [("sigma_z", 0.0), ("sigma_x", -1.0), ("sigma0", 0.0),
                                         ("T", 1), ("d", 0.0), ("a", 2.0)])
def test_validate_rejects(params, field, value):
    with pytest.raises(ParameterError):
        dataclasses.replace(params, **{field: value}).validate()


def test_validate_warns_on_non_contracting_wells(params):
    params.validate()
    with pytest.warns(UserWarning):
        dataclasses.replace(params, V0=0.5).validate()


def test_mapping_round_trip(params):
    m = params.to_mapping()
    assert m["v0"] == 0.06 and "V0" not in m
    assert WorldModelParams.from_mapping(m) == params
    with pytest.raises(ParameterError):
        WorldModelParams.from_mapping({"bogus": 1})


def test_trajectory_file_round_trip(tmp_path, params):
    tr = simulate(params, 3)
    tr.dd_time, tr.dd_bin, tr.true_basin, tr.traj_id = 40, "early", -1, 17
    save_trajectory(tr, tmp_path / "t.csv")
    back = load_trajectory(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.latent, tr.latent)
    np.testing.assert_array_equal(back.obs, tr.obs)
    assert (back.dd_time, back.dd_bin, back.true_basin, back.traj_id) == (40, "early", -1, 17)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory(np.zeros(3), np.zeros(4), seed=0)
    with pytest.raises(ValueError):
        Trajectory(np.zeros(3), np.zeros(3), seed=0, dd_time=4)
