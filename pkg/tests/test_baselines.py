import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from geoformer.baselines import KrigingOracle, historical_average, kriging_predict
from geoformer.checks import brute_force_conditional, kriging_bruteforce_error
from geoformer.kernels import SensorGrid
from geoformer.simulate import SimConfig, simulate_replicate


def test_noise_free_persistence_reproduces_last_value():
    grid = SensorGrid.lattice(3)
    hist = np.random.default_rng(0).standard_normal((9, 5))
    one = KrigingOracle(grid, rho=0.3, phi_t=1.0, nugget=0.0, depth=1)
    mu, var = one.predict(hist)
    assert_allclose(mu, hist[:, -1], rtol=0, atol=1e-8)
    assert np.all(var < 1e-8)
    # deeper histories are only consistent with phi=1 when they are constant in time
    flat = np.repeat(hist[:, -1:], 3, axis=1)
    mu3, _ = KrigingOracle(grid, rho=0.3, phi_t=1.0, nugget=0.0, depth=3).predict(flat)
    assert_allclose(mu3, hist[:, -1], rtol=0, atol=1e-8)


def test_no_temporal_dependence_predicts_zero():
    grid = SensorGrid.lattice(3)
    hist = np.random.default_rng(1).standard_normal((4, 9, 6))
    mu, var = KrigingOracle(grid, rho=0.2, phi_t=0.0).predict(hist)
    assert_array_equal(mu, 0.0)
    assert_allclose(var, 1.05)


def test_toy_instance_matches_brute_force_conditioning():
    assert kriging_bruteforce_error(seed=0) < 1e-8
    assert kriging_bruteforce_error(seed=1) < 1e-8


@pytest.mark.parametrize("horizon", [1, 2, 4])
def test_brute_force_all_horizons(horizon):
    grid = SensorGrid.lattice(3)
    oracle = KrigingOracle(grid, rho=0.25, nu=2.5, depth=3)
    hist = np.random.default_rng(horizon).standard_normal((9, 3))
    mu, var = oracle.predict(hist, horizon)
    mu2, var2 = brute_force_conditional(oracle, hist, horizon)
    assert_allclose(mu, mu2, rtol=0, atol=1e-8)
    assert_allclose(var, var2, rtol=0, atol=1e-8)


def test_batch_and_truncation():
    grid = SensorGrid.lattice(2)
    oracle = KrigingOracle(grid, rho=0.2, depth=2)
    hist = np.random.default_rng(2).standard_normal((3, 4, 7))
    mu, var = kriging_predict(oracle, hist)
    assert mu.shape == var.shape == (3, 4)
    assert_allclose(mu[1], oracle.predict(hist[1, :, -2:])[0])
    with pytest.raises(ValueError):
        oracle.predict(hist[..., :1])


def test_oracle_beats_persistence_on_simulated_data():
    cfg = SimConfig(grid_side=5, t_steps=400, n_replicates=1)
    obs = simulate_replicate(cfg, 0).observations
    oracle = KrigingOracle.from_config(SensorGrid.lattice(5), cfg)
    hist = np.stack([obs[t - 3:t].T for t in range(3, 400)])
    mu, var = oracle.predict(hist)
    err = obs[3:] - mu
    assert np.mean(err**2) < np.mean((obs[3:] - obs[2:-1]) ** 2)
    # predictive variance is calibrated in the mean
    assert abs(np.mean(err**2) / np.mean(var) - 1) < 0.1


def test_historical_average_cases():
    assert_allclose(historical_average(np.full((20, 3), 2.5)), 2.5)
    assert_allclose(historical_average(np.array([[1.0], [3.0]])), [2.0])
    z = np.random.default_rng(0).standard_normal((20000, 4))
    assert np.all(np.abs(historical_average(z)) < 0.05)
    with pytest.raises(ValueError):
        historical_average(np.empty((0, 3)))
