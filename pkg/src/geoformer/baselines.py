"""
Reference predictors: simple Kriging with the generating covariance, and
the per-site historical mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .kernels import KernelFamily, SensorGrid, matern_correlation
from .simulate import SimConfig, SimulationError, jittered_cholesky


@dataclass
class KrigingOracle:
    """Zero-mean space-time simple Kriging under the separable model

        Cov(Y(s,t), Y(s',t')) = sigma2 * Psi(d; rho) * phi^|t-t'| + nugget * [s=s', t=t']

    conditioned on the last ``depth`` snapshots of all sites.  The
    parameters are taken as given, never estimated.
    """

    grid: SensorGrid
    rho: float
    nu: float = 1.5
    sigma2: float = 1.0
    phi_t: float = 0.8
    nugget: float = 0.05
    depth: int = 3
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    @classmethod
    def from_config(cls, grid: SensorGrid, config: SimConfig, depth: int = 3) -> "KrigingOracle":
        return cls(grid, config.rho_true, config.nu, config.sigma2, config.phi_t, config.nugget, depth)

    @property
    def spatial(self) -> np.ndarray:
        return self.sigma2 * matern_correlation(self.grid.dist_matrix, self.rho, KernelFamily.from_nu(self.nu))

    def history_covariance(self) -> np.ndarray:
        """Covariance of the stacked history ``[Y_t, Y_{t-1}, ..., Y_{t-k+1}]`` (size N*k)."""
        S, n, k = self.spatial, self.grid.n, self.depth
        lags = np.abs(np.subtract.outer(np.arange(k), np.arange(k)))
        cov = np.kron(self.phi_t ** lags.astype(float), S)
        cov[np.diag_indices(n * k)] += self.nugget
        return cov

    def cross_covariance(self, horizon: int = 1) -> np.ndarray:
        """Covariance between ``Y_{t+h}`` (rows) and the stacked history (columns)."""
        S, k = self.spatial, self.depth
        return np.hstack([self.phi_t ** (horizon + j) * S for j in range(k)])

    def _factor(self, horizon: int):
        if horizon not in self._cache:
            cov = self.history_covariance()
            scale = max(self.sigma2 + self.nugget, 1e-300)
            try:
                chol, _ = jittered_cholesky(cov, scale)
            except SimulationError as exc:
                raise SimulationError(f"Kriging system is singular: {exc}") from exc
            c = self.cross_covariance(horizon)
            weights = sla.cho_solve((chol, True), c.T).T  # (N, N*k)
            var = self.sigma2 + self.nugget - np.einsum("ij,ij->i", weights, c)
            self._cache[horizon] = (weights, np.maximum(var, 0.0))
        return self._cache[horizon]

    def predict(self, history, horizon: int = 1):
        """Conditional mean and variance of ``Y_{t+horizon}``.

        ``history`` is ``(N, k)`` in chronological order (last column is
        ``Y_t``) or a batch ``(B, N, k)``; longer windows are truncated to
        the last ``depth`` columns.
        """
        h = np.asarray(history, dtype=np.float64)
        if h.shape[-1] < self.depth:
            raise ValueError(f"need at least {self.depth} history steps, got {h.shape[-1]}")
        if h.shape[-2] != self.grid.n:
            raise ValueError(f"history has {h.shape[-2]} sites, grid has {self.grid.n}")
        weights, var = self._factor(horizon)
        recent = h[..., ::-1][..., : self.depth]  # newest first
        stacked = np.swapaxes(recent, -1, -2).reshape(*h.shape[:-2], -1)
        mean = stacked @ weights.T
        return mean, np.broadcast_to(var, mean.shape).copy()


def kriging_predict(oracle: KrigingOracle, history, horizon: int = 1):
    return oracle.predict(history, horizon)


def historical_average(train_obs) -> np.ndarray:
    """Per-site mean of the training observations ``(T, N)``."""
    y = np.atleast_2d(np.asarray(train_obs, dtype=np.float64))
    if y.shape[0] < 1:
        raise ValueError("need at least one training step")
    return y.mean(axis=0)
