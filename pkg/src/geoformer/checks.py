"""
Numerical self-checks that do not depend on training outcomes.

Each check returns ``{"name", "value", "tol", "pass"}``; the experiment
summary embeds them and the test-suite asserts them.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np
from scipy import integrate, stats

from . import autodiff as ad
from . import metrics as M
from .baselines import KrigingOracle
from .kernels import KernelFamily, SensorGrid, matern_correlation, matern_correlation_grad_rho
from .model import GeoTransformer, ModelConfig
from .simulate import SimConfig, empirical_spatial_correlation, simulate_replicate


def _check(name, value, tol, passed=None):
    value = float(value)
    return {"name": name, "value": value, "tol": tol, "pass": bool(value <= tol if passed is None else passed)}


def _psi_mp(d, rho, fam):
    # same closed forms at 50 significant digits, so the difference quotient
    # is not swamped by float64 roundoff where the derivative is tiny
    r = mpmath.mpf(d) / rho
    if fam is KernelFamily.EXPONENTIAL:
        return mpmath.exp(-r)
    if fam is KernelFamily.MATERN15:
        s = mpmath.sqrt(3) * r
        return (1 + s) * mpmath.exp(-s)
    if fam is KernelFamily.MATERN25:
        s = mpmath.sqrt(5) * r
        return (1 + s + s * s / 3) * mpmath.exp(-s)
    return mpmath.exp(-r * r / 2)


def kernel_gradient_error(families=tuple(KernelFamily), seed: int = 0) -> float:
    """Worst relative error of the analytic dPsi/drho against central differences at step 1e-5 rho."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with mpmath.workdps(50):
        for fam in families:
            for _ in range(50):
                rho = rng.uniform(0.05, 1.0)
                d = rng.uniform(0.0, 3.0 * rho)
                h = mpmath.mpf(rho) * mpmath.mpf("1e-5")
                fd = (_psi_mp(d, rho + h, fam) - _psi_mp(d, rho - h, fam)) / (2 * h)
                an = matern_correlation_grad_rho(d, rho, fam)
                if fd != 0:
                    worst = max(worst, float(abs(an - fd) / abs(fd)))
    return worst


def tiny_model(variant="geo", seed=0, n_side=3, lookback=3, d_model=8, n_heads=2, share=True):
    grid = SensorGrid.lattice(n_side)
    cfg = ModelConfig(d_model=d_model, n_heads=n_heads, n_layers=2, lookback=lookback, dropout_p=0.1,
                      variant=variant, rho_init=0.3, share_kernel_across_heads=share, seed=seed)
    return GeoTransformer(cfg, grid)


def model_gradient_error(variant="geo", seed=0, share=True) -> float:
    """Max-norm relative error of backprop vs central differences over the concatenated gradient.

    Measured on the whole gradient vector rather than per tensor: the key
    biases have an exactly zero gradient (softmax is shift invariant), so a
    per-tensor ratio would divide roundoff by roundoff.
    """
    model = tiny_model(variant, seed, share=share)
    rng = np.random.default_rng(seed + 100)
    # break the zero-bias / unit-gain symmetry so every path is exercised
    for name, p in model.params.items():
        p.data += 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((2, model.grid.n, model.config.lookback))
    y = rng.standard_normal((2, model.grid.n))

    def loss_value():
        return float(ad.mse(model.forward(x, dropout_active=False), y).data)

    model.zero_grad()
    ad.mse(model.forward(x, dropout_active=False), y).backward()
    an, num = [], []
    for p in model.params.values():
        num.append(ad.numerical_grad(loss_value, p.data, eps=1e-6).ravel())
        an.append(np.asarray(p.grad).ravel())
    return ad.relative_error(np.concatenate(an), np.concatenate(num))


def nadaraya_watson_deviation(seed=0) -> float:
    model = tiny_model("geo", seed, n_side=4, lookback=3)
    for i in range(model.config.n_layers):
        for m in ("q", "k"):
            model.params[f"layer{i}.attn.w{m}"].data[:] = 0.0
            model.params[f"layer{i}.attn.b{m}"].data[:] = 0.0
    x = np.random.default_rng(seed).standard_normal((model.grid.n, model.config.lookback))
    rec = model.attention_maps(x)
    bias = model.lam * matern_correlation(model.grid.dist_matrix, model.rho, model.config.kernel_family)
    e = np.exp(bias - bias.max(axis=1, keepdims=True))
    expected = e / e.sum(axis=1, keepdims=True)
    return max(float(np.abs(r.weights - expected[None]).max()) for r in rec)


def crps_integral(y, mu, sigma) -> float:
    cdf = lambda x: stats.norm.cdf(x, mu, sigma)  # noqa: E731
    lo, hi = mu - 12 * sigma, mu + 12 * sigma
    a = integrate.quad(lambda x: cdf(x) ** 2, min(lo, y) - 1.0, y, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    b = integrate.quad(lambda x: (1 - cdf(x)) ** 2, y, max(hi, y) + 1.0, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    return a + b


def crps_integration_error(n=100, seed=0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mu, sigma = rng.normal(0, 2), rng.uniform(0.1, 3.0)
        y = mu + sigma * rng.normal(0, 1.5)
        worst = max(worst, abs(M.crps_gaussian(y, mu, sigma) - crps_integral(y, mu, sigma)))
    return worst


def brute_force_conditional(oracle: KrigingOracle, history: np.ndarray, horizon: int = 1):
    """Condition the full joint Gaussian of (target, history) directly."""
    n, k = oracle.grid.n, oracle.depth
    S = oracle.spatial
    # time stamps: history at 0, -1, ..., -(k-1); target at +horizon
    times = np.concatenate([[horizon], -np.arange(k)])
    lag = np.abs(np.subtract.outer(times, times)).astype(float)
    big = np.kron(oracle.phi_t ** lag, S) + oracle.nugget * np.eye(n * (k + 1))
    cxx = big[n:, n:]
    cyx = big[:n, n:]
    stacked = history[:, ::-1][:, :k].T.reshape(-1)
    mean = cyx @ np.linalg.solve(cxx, stacked)
    cov = big[:n, :n] - cyx @ np.linalg.solve(cxx, cyx.T)
    return mean, np.diag(cov)


def kriging_bruteforce_error(seed=0) -> float:
    grid = SensorGrid.lattice(2)
    oracle = KrigingOracle(grid, rho=0.2, nu=1.5, sigma2=1.0, phi_t=0.8, nugget=0.05, depth=2)
    hist = np.random.default_rng(seed).standard_normal((4, 2))
    mu, var = oracle.predict(hist)
    mu2, var2 = brute_force_conditional(oracle, hist)
    return max(float(np.abs(mu - mu2).max()), float(np.abs(var - var2).max()))


def morans_null(n_draws=1000, side=20, seed=0):
    grid = SensorGrid.lattice(side)
    w = M.SpatialWeights.inverse_distance(grid.dist_matrix)
    rng = np.random.default_rng(seed)
    vals = np.array([M.morans_i(rng.standard_normal(grid.n), w) for _ in range(n_draws)])
    return vals.mean(), vals.std(ddof=1) / math.sqrt(n_draws), -1.0 / (grid.n - 1)


def correlogram_deviation(seed=0):
    cfg = SimConfig(seed=seed, n_replicates=1)
    ds = simulate_replicate(cfg, 0)
    edges = np.arange(0.025, 1.0, 0.05)
    centers, corr, counts = empirical_spatial_correlation(ds, edges)
    # analytic value averaged over the actual pair distances in each bin
    d = ds.grid.dist_matrix[np.triu_indices(ds.grid.n, k=1)]
    expected = np.full_like(corr, np.nan)
    idx = np.digitize(d, edges) - 1
    atten = cfg.sigma2 / (cfg.sigma2 + cfg.nugget)
    for b in range(len(corr)):
        sel = idx == b
        if sel.any():
            expected[b] = atten * matern_correlation(d[sel], cfg.rho_true, cfg.family).mean()
    ok = counts >= 100
    return float(np.nanmax(np.abs(corr[ok] - expected[ok])))


def attention_row_deviation(seed=0) -> float:
    worst = 0.0
    for variant in ("geo", "vanilla"):
        model = tiny_model(variant, seed, n_side=4)
        x = np.random.default_rng(seed).standard_normal((3, model.grid.n, model.config.lookback))
        rec: list = []
        model.forward(x, dropout_active=False, record=rec)
        for r in rec:
            worst = max(worst, float(np.abs(r.weights.sum(axis=-1) - 1.0).max()))
            if np.any(r.weights < 0):
                return math.inf
    return worst


def dm_antisymmetry(seed=0) -> float:
    rng = np.random.default_rng(seed)
    e1, e2 = rng.standard_normal(200), rng.standard_normal(200)
    a = M.diebold_mariano(e1, e2, horizon=3).statistic
    b = M.diebold_mariano(e2, e1, horizon=3).statistic
    return abs(a + b)


def run_numerical_checks() -> list[dict]:
    out = [
        _check("kernel_grad_rel_err", kernel_gradient_error(), 1e-6),
        _check("model_grad_rel_err_geo", model_gradient_error("geo"), 1e-4),
        _check("model_grad_rel_err_vanilla", model_gradient_error("vanilla"), 1e-4),
        _check("nadaraya_watson_max_dev", nadaraya_watson_deviation(), 1e-12, None),
        _check("crps_vs_integration", crps_integration_error(), 1e-6),
        _check("kriging_bruteforce_max_diff", kriging_bruteforce_error(), 1e-8),
    ]
    mean, se, target = morans_null()
    out.append({"name": "morans_i_null_mean", "value": float(mean), "tol": float(3 * se), "expected": target,
                "pass": bool(abs(mean - target) <= 3 * se)})
    out.append(_check("correlogram_max_dev", correlogram_deviation(), 0.05))
    out.append(_check("attention_row_sum_dev", attention_row_deviation(), 1e-9))
    out.append(_check("dm_antisymmetry", dm_antisymmetry(), 0.0))
    return out
