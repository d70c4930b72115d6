import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from geoformer import autodiff as ad
from geoformer.checks import model_gradient_error, tiny_model
from geoformer.kernels import SensorGrid


def fd_check(build, *leaves, eps=1e-6):
    """Backprop vs central differences for every leaf; returns the worst relative error."""
    for leaf in leaves:
        leaf.zero_grad()
    build().backward()
    worst = 0.0
    for leaf in leaves:
        num = ad.numerical_grad(lambda: float(build().data), leaf.data, eps)
        worst = max(worst, ad.relative_error(leaf.grad, num))
    return worst


def test_identity_matmul():
    x = np.arange(12.0).reshape(3, 4)
    assert_array_equal(ad.matmul(np.eye(3), x).data, x)


def test_small_matmul_by_hand():
    assert_array_equal(ad.matmul([[1, 2], [3, 4]], [[0], [1]]).data, [[2], [4]])


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a = ad.parameter(rng.standard_normal((5, 4)), "a")
    b = ad.parameter(rng.standard_normal((4, 3)), "b")
    assert fd_check(lambda: ad.tsum(ad.matmul(a, b)), a, b) <= 1e-6
    # d sum(AB) / dA = 1 B^T
    a.zero_grad(), b.zero_grad()
    ad.tsum(ad.matmul(a, b)).backward()
    assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    x = ad.parameter(rng.standard_normal((2, 3, 5, 4)), "x")
    w = ad.parameter(rng.standard_normal((4, 3)), "w")
    c = rng.standard_normal((2, 3, 5, 3))
    assert fd_check(lambda: ad.tsum(ad.mul(ad.matmul(x, w), c)), x, w) <= 1e-6


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_equal_logits():
    assert_allclose(ad.softmax_rows([[5.0, 5.0, 5.0]]).data, [[1 / 3] * 3], rtol=1e-15)


def test_softmax_no_overflow():
    s = ad.softmax_rows([[1000.0, 0.0]]).data
    assert np.all(np.isfinite(s))
    assert abs(s[0, 0] - 1.0) < 1e-12 and abs(s[0, 1]) < 1e-12


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = ad.parameter(rng.standard_normal((3, 6)), "x")
    c = rng.standard_normal((3, 6))
    assert fd_check(lambda: ad.tsum(ad.mul(ad.softmax_rows(x), c)), x) <= 1e-6


def test_dropout_p0_identity():
    x = np.random.default_rng(0).standard_normal((4, 4))
    assert_array_equal(ad.dropout(x, 0.0, np.random.default_rng(1), active=True).data, x)
    assert_array_equal(ad.dropout(x, 0.5, np.random.default_rng(1), active=False).data, x)


def test_dropout_rejects_bad_probability():
    with pytest.raises(ValueError):
        ad.dropout(np.ones(3), 1.0, np.random.default_rng(0), True)


def test_dropout_inverted_scaling():
    x = np.ones(200_000)
    out = ad.dropout(x, 0.25, np.random.default_rng(0), True).data
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    assert abs(out.mean() - 1.0) < 0.01


def test_layer_norm_constant_vector():
    out = ad.layer_norm(np.full((2, 5), 3.7), np.ones(5), np.zeros(5)).data
    assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_gradient():
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.standard_normal((4, 6)), "x")
    g = ad.parameter(1 + 0.1 * rng.standard_normal(6), "g")
    b = ad.parameter(rng.standard_normal(6), "b")
    c = rng.standard_normal((4, 6))
    assert fd_check(lambda: ad.tsum(ad.mul(ad.layer_norm(x, g, b), c)), x, g, b) <= 1e-6


def test_relu_negative_gradient_zero():
    x = ad.parameter([-2.0, -0.5, 0.5, 3.0], "x")
    ad.tsum(ad.relu(x)).backward()
    assert_array_equal(x.grad, [0, 0, 1, 1])


def test_elementwise_gradients():
    rng = np.random.default_rng(4)
    a = ad.parameter(rng.standard_normal((3, 4)), "a")
    b = ad.parameter(rng.standard_normal(4), "b")
    assert fd_check(lambda: ad.mean(ad.square(ad.add(ad.mul(a, b), ad.scale(ad.softplus(a), 0.3)))), a, b) <= 1e-6


def test_linear_sum_gradient():
    x = np.array([1.0, -2.0, 0.5])
    w = ad.parameter(np.zeros((2, 3)), "w")
    ad.tsum(ad.matmul(w, x[:, None])).backward()
    assert_array_equal(w.grad, np.outer(np.ones(2), x))


def test_matern_bias_gradient():
    grid = SensorGrid.lattice(4)
    c = np.random.default_rng(5).standard_normal((16, 16))
    for shape in ((), (3,)):
        tr = ad.parameter(np.full(shape, -1.2), "theta_rho")
        tl = ad.parameter(np.full(shape, 0.4), "theta_lambda")
        fn = lambda: ad.tsum(ad.mul(ad.matern_bias(grid.dist_matrix, tr, tl, "matern15"), c))  # noqa: E731
        assert fd_check(fn, tr, tl) <= 1e-6


def test_full_model_range_gradient():
    model = tiny_model("geo", seed=3)
    x = np.random.default_rng(0).standard_normal((model.grid.n, model.config.lookback))
    p = model.params["theta_rho"]

    def loss():
        return ad.tsum(model.forward(x, dropout_active=False))

    model.zero_grad()
    loss().backward()
    num = ad.numerical_grad(lambda: float(loss().data), p.data, 1e-6)
    assert float(np.abs(p.grad)) > 0
    assert ad.relative_error(p.grad, num) <= 1e-5


@pytest.mark.parametrize("variant,share", [("geo", True), ("geo", False), ("vanilla", True)])
def test_full_model_gradient(variant, share):
    assert model_gradient_error(variant, seed=1, share=share) <= 1e-4


def test_second_backward_raises():
    w = ad.parameter(np.ones(3), "w")
    loss = ad.tsum(ad.square(w))
    loss.backward()
    with pytest.raises(ad.GradientError):
        loss.backward()


def test_backward_with_stale_grad_raises():
    w = ad.parameter(np.ones(3), "w")
    ad.tsum(w).backward()
    with pytest.raises(ad.GradientError, match="zero_grad"):
        ad.tsum(ad.scale(w, 2.0)).backward()
    w.zero_grad()
    ad.tsum(ad.scale(w, 2.0)).backward()
    assert_array_equal(w.grad, [2, 2, 2])


def test_backward_needs_scalar():
    w = ad.parameter(np.ones(3), "w")
    with pytest.raises(ad.GradientError):
        ad.scale(w, 2.0).backward()


def test_shared_subexpression_accumulates():
    w = ad.parameter([3.0], "w")
    y = ad.mul(w, w)
    ad.tsum(ad.add(y, y)).backward()
    assert_allclose(w.grad, [12.0])


def test_grads_finite_after_backward():
    model = tiny_model("geo", seed=0)
    x = np.random.default_rng(0).standard_normal((2, model.grid.n, model.config.lookback))
    model.zero_grad()
    ad.mse(model.forward(x), np.zeros((2, model.grid.n))).backward()
    for name, p in model.params.items():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name
