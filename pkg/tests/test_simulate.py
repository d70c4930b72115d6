import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from geoformer.simulate import (
    SimConfig,
    SimulationError,
    empirical_spatial_correlation,
    jittered_cholesky,
    lag1_autocorrelation,
    load_dataset,
    make_windows,
    save_dataset,
    simulate,
    simulate_replicate,
    split,
)

# (1 + sqrt3) exp(-sqrt3) / 1.05, mpmath at 40 digits: the nugget attenuates the
# observed correlation by sigma2 / (sigma2 + nugget)
ATTENUATED_CORR_AT_RANGE = 0.46034069009191204819


@pytest.fixture(scope="module")
def default_replicate():
    return simulate_replicate(SimConfig(n_replicates=1), 0)


def test_degenerate_variance_gives_zeros():
    ds = simulate(SimConfig(grid_side=4, sigma2=0.0, nugget=0.0, t_steps=50, n_replicates=2))
    for d in ds:
        assert_array_equal(d.observations, 0.0)


def test_white_in_time():
    ds = simulate_replicate(SimConfig(phi_t=0.0, n_replicates=1), 0)
    assert np.all(np.abs(lag1_autocorrelation(ds.latent)) < 0.1)


def test_ar1_persistence():
    ds = simulate_replicate(SimConfig(grid_side=5, n_replicates=1), 0)
    assert abs(lag1_autocorrelation(ds.latent).mean() - 0.8) < 0.03


def test_marginal_variance(default_replicate):
    # per-site sampling sd is ~0.06 at T=2000 with phi_t=0.8, so a 0.15 band is
    # ~2.4 sd: a handful of the 400 sites may fall outside it
    var = default_replicate.observations.var(axis=0)
    assert abs(var.mean() - 1.05) < 0.15
    assert np.mean(np.abs(var - 1.05) < 0.15) >= 0.95


def test_observation_is_latent_plus_noise(default_replicate):
    noise = default_replicate.observations - default_replicate.latent
    assert abs(noise.var() - 0.05) < 0.005
    assert np.all(np.isfinite(default_replicate.observations))


def test_self_pairs_bin(default_replicate):
    _, corr, counts = empirical_spatial_correlation(default_replicate, [0.0, 1e-9, 0.5, 1.5])
    assert counts[0] == default_replicate.n_sites
    assert_allclose(corr[0], 1.0)


def test_correlogram_at_range(default_replicate):
    centers, corr, _ = empirical_spatial_correlation(default_replicate, [0.0, 1e-9, 0.175, 0.225, 2.0])
    assert_allclose(centers[2], 0.2)
    assert abs(corr[2] - ATTENUATED_CORR_AT_RANGE) < 0.05


def test_correlogram_far_bin(default_replicate):
    _, corr, counts = empirical_spatial_correlation(default_replicate, [0.0, 1.0, 1.5])
    assert counts[1] > 0
    assert abs(corr[1]) < 0.05


def test_replicates_differ_and_reproduce():
    cfg = SimConfig(grid_side=4, t_steps=30, n_replicates=3, seed=7)
    a, b = simulate(cfg), simulate(cfg)
    for x, y in zip(a, b):
        assert_array_equal(x.observations, y.observations)
    assert not np.allclose(a[0].observations, a[1].observations)
    # a replicate drawn alone matches the same replicate from the batch
    assert_array_equal(simulate(cfg, replicates=[2])[0].observations, a[2].observations)


@pytest.mark.parametrize("field,value,word", [("phi_t", 1.2, "phi_t"), ("rho_true", 0.0, "rho_true"),
                                              ("nugget", -0.1, "nugget"), ("grid_side", 1, "grid_side"),
                                              ("nu", 0.7, "nu")])
def test_config_invariants(field, value, word):
    with pytest.raises(ValueError, match=word):
        SimConfig(**{field: value})


def test_jitter_rescues_singular_matrix():
    v = np.ones((3, 1))
    L, jitter = jittered_cholesky(v @ v.T)
    assert jitter > 0
    assert_allclose(L @ L.T, v @ v.T, atol=1e-5)


def test_jitter_gives_up_with_diagnostics():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(SimulationError, match="eigenvalue"):
        jittered_cholesky(bad)


def test_split_counts():
    obs = np.zeros((100, 3))
    tr, te = split(obs, 50, 20, 12)
    assert len(tr) == 38
    assert tr.inputs.shape == (38, 3, 12)
    assert tr.target_index.max() < te.target_index.min()


def test_split_default_test_block():
    obs = np.zeros((2000, 2))
    _, te = split(obs, 100, 500, 12)
    assert len(te) == 500
    assert_array_equal(te.target_index, np.arange(1500, 2000))


def test_split_too_short():
    with pytest.raises(ValueError, match="too short"):
        split(np.zeros((100, 2)), 80, 30, 12)


def test_window_contents():
    obs = np.arange(20.0).reshape(10, 2)  # obs[t, s] = 2 t + s
    w = make_windows(obs, [4], 3)
    assert_array_equal(w.inputs[0], [[2, 4, 6], [3, 5, 7]])
    assert_array_equal(w.targets[0], [8, 9])


def test_save_load_roundtrip_and_bytes(tmp_path):
    cfg = SimConfig(grid_side=3, t_steps=40, n_replicates=1, seed=3)
    ds = simulate(cfg)[0]
    save_dataset(ds, tmp_path / "a")
    save_dataset(simulate(cfg)[0], tmp_path / "b")
    for name in ("observations.csv", "locations.csv", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = load_dataset(tmp_path / "a")
    assert_array_equal(back.observations, ds.observations)
    assert_array_equal(back.grid.locations, ds.grid.locations)
    assert back.config == cfg
