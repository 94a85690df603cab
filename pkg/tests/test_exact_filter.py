import dataclasses

import numpy as np
import pytest

from evitrack import rng as rng_mod
from evitrack.exact_filter import (
    DDBins,
    ExhaustedAttempts,
    QuadratureGrid,
    basin_mass,
    detect_dd,
    filter_posterior,
    generate_dataset,
    load_dataset,
    save_dataset,
    sign,
)
from evitrack.oracles import grid_moments, kalman_filter, linear_params
from evitrack.world_model import simulate


def test_kalman_oracle_simple_case():
    # One observation, prior N(0, 1), noise var 1: posterior mean x/2, var 1/2.
    m, v = kalman_filter([2.0], 0.0, 1.0, 0.0, 1.0)
    assert m[0] == pytest.approx(1.0) and v[0] == pytest.approx(0.5)


@pytest.mark.parametrize("i", range(20))
def test_quadrature_matches_kalman(i):
    p = linear_params()
    grid = QuadratureGrid()
    tr = simulate(p, rng_mod.derive_seed(0, "kalman", i))
    gm, gv = grid_moments(filter_posterior(tr.obs, p, grid), grid)
    km, kv = kalman_filter(tr.obs, p.mu0, p.sigma0**2, p.sigma_z**2, p.sigma_x**2)
    assert np.max(np.abs(gm - km)) < 1e-3
    assert np.max(np.abs(gv - kv)) < 1e-3


def test_grid_nodes_and_coverage(params):
    g = QuadratureGrid()
    assert np.allclose(np.diff(g.nodes), g.cell_width) and g.cell_width == pytest.approx(0.01)
    g.check_coverage(params)
    with pytest.raises(ValueError):
        QuadratureGrid(-3, 3, 601).check_coverage(params)


def test_rows_normalised(params):
    post = filter_posterior(simulate(params, 1).obs, params)
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-9)


def test_noiseless_fixed_point_concentrates(params):
    p = dataclasses.replace(params, sigma0=1e-3, sigma_z=1e-3, sigma_x=1e-3, mu0=params.a)
    tr = simulate(p, 0)
    post = filter_posterior(tr.obs[:20], p)
    node = np.argmin(np.abs(QuadratureGrid().nodes - params.a))
    assert np.all(post[:, node] > 0.99)


def test_mirror_symmetry_inside_even_region(params):
    tr = simulate(params, 11)
    inside = np.flatnonzero(np.abs(tr.latent) > 1.0)[0]
    assert inside > 2
    post = filter_posterior(tr.obs[:inside], params)
    # the mirrored latent produces the same observations; rows must be even in z
    np.testing.assert_allclose(post, post[:, ::-1], atol=1e-6)


def _refinement_pair(tr, p):
    base, fine = QuadratureGrid(), QuadratureGrid().refined(2)
    coarse = filter_posterior(tr.obs, p, base)
    refined = filter_posterior(tr.obs, p, fine)
    return base, fine, coarse, refined


def test_grid_refinement_invariance(params):
    for seed in range(5):
        tr = simulate(params, seed)
        base, fine, coarse, refined = _refinement_pair(tr, params)
        # per-node mass on the shared nodes, rescaled to the coarse cell width;
        # observations near the jump of h at |z| = d limit this to ~1e-5
        assert np.max(np.abs(coarse - 2 * refined[:, ::2])) < 1e-4
        np.testing.assert_allclose(basin_mass(coarse, basin := int(sign(tr.latent[-1])), base),
                                   basin_mass(refined, basin, fine), atol=1e-5)
        assert detect_dd(coarse, basin, 0.8, base) == detect_dd(refined, basin, 0.8, fine)


def test_grid_refinement_tight_away_from_jump(params):
    # Trajectories whose observations never sit near the jump of h agree to 1e-6.
    for seed in (0, 1, 2):
        tr = simulate(params, seed)
        _, _, coarse, refined = _refinement_pair(tr, params)
        assert np.max(np.abs(coarse - 2 * refined[:, ::2])) < 1e-6


def test_grid_refinement_basin_mass_slow_variant(slow_params):
    # Latents that linger near |z| = d see the jump of h there, so pointwise
    # densities move with resolution; basin masses and t_DD must not.
    for seed in range(5):
        tr = simulate(slow_params, seed)
        base, fine, coarse, refined = _refinement_pair(tr, slow_params)
        basin = int(sign(tr.latent[-1]))
        np.testing.assert_allclose(basin_mass(coarse, basin, base), basin_mass(refined, basin, fine), atol=1e-5)
        assert detect_dd(coarse, basin, 0.8, base) == detect_dd(refined, basin, 0.8, fine)


def test_basin_mass_examples():
    g = QuadratureGrid()
    uniform = np.full(g.n_points, 1.0 / g.n_points)
    assert basin_mass(uniform, 1, g) == pytest.approx(0.5)
    assert basin_mass(uniform, -1, g) == pytest.approx(0.5)
    at_a = np.zeros(g.n_points)
    at_a[np.argmin(np.abs(g.nodes - 3.0))] = 1.0
    assert basin_mass(at_a, 1, g) == 1.0
    rows = np.random.default_rng(0).dirichlet(np.ones(g.n_points), size=5)
    np.testing.assert_allclose(basin_mass(rows, 1, g) + basin_mass(rows, -1, g), 1.0, atol=1e-12)


def _rows_with_mass(mass):
    g = QuadratureGrid()
    rows = np.zeros((len(mass), g.n_points))
    rows[:, -1] = mass
    rows[:, 0] = 1 - np.asarray(mass)
    return rows


def test_detect_dd_examples():
    assert detect_dd(_rows_with_mass([1.0, 1.0]), 1) == 1
    assert detect_dd(_rows_with_mass([0.5] * 10), 1) is None
    mass = np.linspace(0.5, 0.9, 200)
    t = detect_dd(_rows_with_mass(mass), 1)
    assert mass[t - 2] <= 0.8 < mass[t - 1]
    ramp = np.where(np.arange(1, 201) >= 100, 0.85, 0.6)
    assert detect_dd(_rows_with_mass(ramp), 1) == 100
    assert detect_dd(_rows_with_mass(1 - ramp), -1) == 100


def test_bins_labels():
    b = DDBins()
    assert [b.label(t) for t in (29, 30, 79, 80, 139, 140, 170, 171, None)] == \
        [None, "early", "early", "mid", "mid", "late", "late", None, None]


def test_sign_convention():
    np.testing.assert_array_equal(sign([-1.0, 0.0, 2.0]), [-1, 1, 1])


def test_dataset_generation(slow_params, small_dataset, tmp_path):
    ds = small_dataset
    assert len(ds.trajectories) == 6
    for b in ("early", "mid", "late"):
        assert len(ds.by_bin(b)) == 2
    assert ds.stats["rejected_fraction"] > 0
    for tr in ds.trajectories:
        assert DDBins().label(tr.dd_time) == tr.dd_bin
        assert tr.true_basin == int(sign(tr.latent[-1]))
        post = filter_posterior(tr.obs, slow_params)
        assert detect_dd(post, tr.true_basin) == tr.dd_time
    again = generate_dataset(slow_params, per_bin=2, root_seed=0, batch_size=7)
    assert [t.traj_id for t in again.trajectories] == [t.traj_id for t in ds.trajectories]
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.params == ds.params and back.stats == ds.stats
    for a, b in zip(back.trajectories, ds.trajectories):
        np.testing.assert_array_equal(a.obs, b.obs)
        assert (a.traj_id, a.dd_time, a.dd_bin) == (b.traj_id, b.dd_time, b.dd_bin)


def test_dataset_per_bin_one_deterministic(slow_params):
    a = generate_dataset(slow_params, per_bin=1, root_seed=4)
    b = generate_dataset(slow_params, per_bin=1, root_seed=4)
    assert [t.traj_id for t in a.trajectories] == [t.traj_id for t in b.trajectories]


def test_dataset_exhaustion_reports_stats(params):
    with pytest.raises(ExhaustedAttempts) as info:
        generate_dataset(params, per_bin=1, max_attempts=300)
    assert info.value.stats["simulated"] == 300
    assert info.value.stats["too_early"] > 250
