import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from geoformer import autodiff as ad
from geoformer.checks import nadaraya_watson_deviation, tiny_model
from geoformer.kernels import SensorGrid, matern_correlation
from geoformer.model import GeoTransformer, ModelConfig, export_attention_maps


def window(model, batch=None, seed=0):
    shape = (model.grid.n, model.config.lookback) if batch is None else (batch, model.grid.n, model.config.lookback)
    return np.random.default_rng(seed).standard_normal(shape)


def zero_qk(model):
    for i in range(model.config.n_layers):
        for m in ("q", "k"):
            model.params[f"layer{i}.attn.w{m}"].data[:] = 0.0
            model.params[f"layer{i}.attn.b{m}"].data[:] = 0.0


def test_embedding_shape_full_grid():
    model = GeoTransformer(ModelConfig(seed=0), SensorGrid.lattice(20))
    assert model.embed(np.zeros((400, 12))).shape == (400, 64)


def test_vanilla_zero_window_embeds_to_position():
    model = tiny_model("vanilla")
    model.params["embed.w"].data[:] = 0.0
    assert_array_equal(model.embed(np.zeros((9, 3))).data, model.params["pos"].data)


def test_position_init_scale():
    model = GeoTransformer(ModelConfig(variant="vanilla", seed=0), SensorGrid.lattice(20))
    assert abs(model.params["pos"].data.std() - 0.02) < 0.001


def test_geo_embedding_is_row_wise():
    model = tiny_model("geo")
    x = window(model)
    perm = np.random.default_rng(1).permutation(model.grid.n)
    assert_allclose(model.embed(x[perm]).data, model.embed(x).data[perm], rtol=0, atol=0)


def test_window_shape_checked():
    model = tiny_model("geo")
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((5, 3)))


def test_zero_lambda_recovers_plain_attention():
    model = tiny_model("geo")
    h = model.embed(window(model))
    plain = model.attention(h, 0, None).data
    disabled = model.attention(h, 0, model.geo_bias(lam_override=0.0)).data
    assert_array_equal(plain, disabled)


def test_zero_query_key_gives_kernel_smoother():
    assert nadaraya_watson_deviation(seed=0) < 1e-12
    assert nadaraya_watson_deviation(seed=1) < 1e-12


def test_zero_query_key_weights_ignore_tokens():
    model = tiny_model("geo", n_side=4)
    zero_qk(model)
    a = model.attention_maps(window(model, seed=0))
    b = model.attention_maps(window(model, seed=1))
    for ra, rb in zip(a, b):
        assert_allclose(ra.weights, rb.weights, rtol=0, atol=1e-15)


def test_colocated_sensors_share_attention_rows():
    locs = np.array([[0.1, 0.1], [0.1, 0.1], [0.6, 0.2], [0.4, 0.9]])
    model = GeoTransformer(ModelConfig(d_model=8, n_heads=2, lookback=3, rho_init=0.3, seed=0), SensorGrid(locs))
    zero_qk(model)
    rec = model.attention_maps(np.random.default_rng(0).standard_normal((4, 3)))
    for r in rec:
        assert_allclose(r.weights[:, 0], r.weights[:, 1], rtol=0, atol=1e-15)


def test_attention_rows_are_stochastic():
    for variant in ("geo", "vanilla"):
        model = tiny_model(variant, n_side=4)
        rec: list = []
        model.forward(window(model, batch=3), dropout_active=False, record=rec)
        for r in rec:
            assert np.all(r.weights >= 0)
            assert np.abs(r.weights.sum(axis=-1) - 1).max() < 1e-9


@pytest.mark.parametrize("variant", ["geo", "vanilla"])
def test_output_shape(variant):
    model = tiny_model(variant)
    assert model.forward(window(model)).shape == (9,)
    assert model.forward(window(model, batch=5)).shape == (5, 9)


def test_vanilla_without_positions_is_permutation_equivariant():
    model = tiny_model("vanilla", n_side=4)
    model.params["pos"].data[:] = 0.0
    x = window(model)
    perm = np.random.default_rng(2).permutation(model.grid.n)
    out = model.predict(x)
    out_perm = model.predict(x[perm])
    assert_allclose(out_perm[np.argsort(perm)], out, rtol=0, atol=1e-12)


def test_geo_equivariant_only_with_permuted_geometry():
    model = tiny_model("geo", n_side=4)
    model.params["theta_lambda"].data[...] = 2.0  # strong prior so geometry visibly matters
    x = window(model)
    perm = np.random.default_rng(3).permutation(model.grid.n)
    moved = GeoTransformer(model.config, model.grid.permuted(perm))
    moved.load_state_dict(model.state_dict())
    out = model.predict(x)
    assert_allclose(moved.predict(x[perm])[np.argsort(perm)], out, rtol=0, atol=1e-12)
    assert np.abs(model.predict(x[perm])[np.argsort(perm)] - out).max() > 1e-6


def test_no_dropout_distribution_is_floor_only():
    cfg = ModelConfig(d_model=8, n_heads=2, lookback=3, dropout_p=0.0, seed=0)
    model = GeoTransformer(cfg, SensorGrid.lattice(3))
    model.noise_var = 0.05
    mean, var = model.predict_distribution(window(model), n_mc=10)
    assert_allclose(mean, model.predict(window(model)), rtol=0, atol=1e-14)
    assert_allclose(var, 0.05, rtol=0, atol=1e-14)


def test_variance_positive_without_fitted_floor():
    cfg = ModelConfig(d_model=8, n_heads=2, lookback=3, dropout_p=0.0, seed=0)
    model = GeoTransformer(cfg, SensorGrid.lattice(3))
    _, var = model.predict_distribution(window(model), n_mc=4)
    assert np.all(var > 0)


@pytest.fixture(scope="module")
def mc_reference():
    model = GeoTransformer(ModelConfig(seed=0, rho_init=0.2), SensorGrid.lattice(4))
    x = np.random.default_rng(0).standard_normal((16, 12))
    samples = np.stack([model.forward(x, dropout_active=True).data for _ in range(4000)])
    return model, x, samples


def test_mc_mean_converges_to_dropout_expectation(mc_reference):
    model, x, samples = mc_reference
    mean, var = model.predict_distribution(x, n_mc=500, rng=np.random.default_rng(1))
    se = samples.std(axis=0, ddof=1) * np.sqrt(1 / 500 + 1 / 4000)
    assert np.all(np.abs(mean - samples.mean(axis=0)) < 4 * se)
    assert np.all(var > 0)


def test_mc_mean_close_to_eval_output(mc_reference):
    model, x, samples = mc_reference
    # the dropout bias stays well inside the predictive spread
    assert np.all(np.abs(samples.mean(axis=0) - model.predict(x)) < 0.5 * samples.std(axis=0))


@pytest.mark.xfail(strict=True, reason="dropout is not mean preserving through LayerNorm/ReLU/softmax: the "
                   "MC expectation sits ~0.1-0.2 away from the eval-mode output, far beyond MC error at 500 draws")
def test_mc_mean_equals_eval_output_within_mc_error(mc_reference):
    model, x, samples = mc_reference
    mean, _ = model.predict_distribution(x, n_mc=500, rng=np.random.default_rng(1))
    se = samples.std(axis=0, ddof=1) / np.sqrt(500)
    assert np.all(np.abs(mean - model.predict(x)) < 4 * se)


def test_mc_requires_two_samples():
    model = tiny_model("geo")
    with pytest.raises(ValueError):
        model.predict_distribution(window(model), n_mc=1)


def test_recursive_forecast_one_step_matches_predict():
    model = tiny_model("geo")
    x = window(model, batch=2)
    assert_array_equal(model.forecast(x, 1), model.predict(x))
    w = np.concatenate([x[..., 1:], model.predict(x)[..., None]], axis=-1)
    assert_allclose(model.forecast(x, 2), model.predict(w))


def test_per_head_kernels():
    model = tiny_model("geo", share=False)
    assert np.shape(model.rho) == (2,)
    rec = model.attention_maps(window(model))
    assert rec[0].bias.shape == (2, 9, 9)
    assert_allclose(rec[0].bias[1], model.lam[1] * matern_correlation(model.grid.dist_matrix, model.rho[1]))


def test_random_range_init():
    rhos = [GeoTransformer(ModelConfig(seed=s, d_model=8, n_heads=2), SensorGrid.lattice(3)).rho for s in range(30)]
    assert all(0.01 <= r <= 0.5 for r in rhos)
    assert np.std(rhos) > 0.05


@pytest.mark.parametrize("variant,share", [("geo", True), ("geo", False), ("vanilla", True)])
def test_checkpoint_roundtrip(tmp_path, variant, share):
    model = tiny_model(variant, share=share)
    model.noise_var = 0.123
    for p in model.params.values():
        p.data += 0.01
    path = model.save(tmp_path / "ck.json", step=7, extra={"note": "x"})
    back = GeoTransformer.load(path)
    for k, v in model.state_dict().items():
        assert_array_equal(back.params[k].data, v)
        assert back.params[k].shape == v.shape
    assert back.noise_var == 0.123
    x = window(model)
    assert_array_equal(back.predict(x), model.predict(x))
    manifest = json.loads(path.read_text())
    assert manifest["step"] == 7 and manifest["note"] == "x"
    assert (tmp_path / "ck.bin").stat().st_size == 8 * model.n_parameters()


def test_attention_export(tmp_path):
    model = tiny_model("geo")
    paths = export_attention_maps(model.attention_maps(window(model)), tmp_path)
    assert (tmp_path / "geo_bias.csv").exists()
    w = np.loadtxt(paths[0], delimiter=",")
    assert w.shape == (9, 9)
    assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
