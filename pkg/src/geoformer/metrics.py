"""
Forecast evaluation: point scores, Gaussian CRPS, Diebold-Mariano,
PIT calibration, Moran's I and the empirical semivariogram.

Everything here is model-agnostic and operates on plain arrays or on a
:class:`ForecastResult`.
"""

from __future__ import annotations

import csv
import json
import math
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats


class DegenerateStatistic(ValueError):
    """Raised when a statistic is undefined for the given input."""


# ---------------------------------------------------------------------------
# forecast container and its on-disk format
# ---------------------------------------------------------------------------

FORECAST_COLUMNS = ["t", "site", "target", "prediction", "variance"]


@dataclass
class ForecastResult:
    model_name: str
    horizon: int
    predictions: np.ndarray  # (T_test, N)
    targets: np.ndarray  # (T_test, N)
    variances: np.ndarray | None = None
    time_index: np.ndarray | None = None

    def __post_init__(self):
        self.predictions = np.atleast_2d(np.asarray(self.predictions, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.predictions.shape != self.targets.shape:
            raise ValueError(f"predictions {self.predictions.shape} and targets {self.targets.shape} differ in shape")
        if self.variances is not None:
            self.variances = np.broadcast_to(np.asarray(self.variances, dtype=np.float64), self.targets.shape).copy()
            if not np.all(self.variances > 0):
                raise ValueError("predictive variances must be strictly positive")
        if self.time_index is None:
            self.time_index = np.arange(self.targets.shape[0])
        self.time_index = np.asarray(self.time_index, dtype=int)

    @property
    def residuals(self) -> np.ndarray:
        return self.targets - self.predictions

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        has_var = self.variances is not None
        cols = FORECAST_COLUMNS if has_var else FORECAST_COLUMNS[:-1]
        T, N = self.targets.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(T):
                for s in range(N):
                    row = [int(self.time_index[i]), s, repr(float(self.targets[i, s])),
                           repr(float(self.predictions[i, s]))]
                    if has_var:
                        row.append(repr(float(self.variances[i, s])))
                    w.writerow(row)
        path.with_suffix(".json").write_text(json.dumps(
            {"model_name": self.model_name, "horizon": int(self.horizon), "columns": cols,
             "n_steps": T, "n_sites": N}, indent=2) + "\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "ForecastResult":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header not in (FORECAST_COLUMNS, FORECAST_COLUMNS[:-1]):
                raise ValueError(f"{path}: unexpected columns {header}")
            rows = [r for r in reader if r]
        t = np.array([int(r[0]) for r in rows])
        s = np.array([int(r[1]) for r in rows])
        vals = np.array([[float(x) for x in r[2:]] for r in rows])
        times = np.unique(t)
        T, N = len(times), int(s.max()) + 1
        ti = np.searchsorted(times, t)
        out = np.full((vals.shape[1], T, N), np.nan)
        out[:, ti, s] = vals.T
        if np.isnan(out).any():
            raise ValueError(f"{path}: incomplete (t, site) grid")
        var = out[2] if len(header) == 5 else None
        return cls(side["model_name"], int(side["horizon"]), out[1], out[0], var, times)


# ---------------------------------------------------------------------------
# point and probabilistic scores
# ---------------------------------------------------------------------------


def rmse(result_or_residuals) -> float:
    r = _residuals(result_or_residuals)
    return float(np.sqrt(np.mean(r * r)))


def mae(result_or_residuals) -> float:
    r = _residuals(result_or_residuals)
    return float(np.mean(np.abs(r)))


def _residuals(x) -> np.ndarray:
    r = x.residuals if isinstance(x, ForecastResult) else np.asarray(x, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no residuals")
    return r


def crps_gaussian(y, mu, sigma):
    """Closed-form CRPS of N(mu, sigma^2) at observation ``y`` (elementwise)."""
    y, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (y, mu, sigma))
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be > 0")
    z = (y - mu) / sigma
    out = sigma * (z * (2.0 * stats.norm.cdf(z) - 1.0) + 2.0 * stats.norm.pdf(z) - 1.0 / math.sqrt(math.pi))
    return out if out.ndim else float(out)


def crps(result: ForecastResult) -> float:
    if result.variances is None:
        raise ValueError(f"{result.model_name}: CRPS needs predictive variances")
    return float(np.mean(crps_gaussian(result.targets, result.predictions, np.sqrt(result.variances))))


# ---------------------------------------------------------------------------
# Diebold-Mariano
# ---------------------------------------------------------------------------

DMResult = namedtuple("DMResult", "statistic p_value p_one_sided lag mean_diff")


def newey_west_variance(d: np.ndarray, lag: int) -> float:
    """Bartlett-weighted long-run variance of ``d`` (autocovariances divided by T)."""
    d = np.asarray(d, dtype=np.float64)
    T = d.size
    dc = d - d.mean()
    v = float(dc @ dc) / T
    for k in range(1, lag + 1):
        gk = float(dc[k:] @ dc[:-k]) / T
        v += 2.0 * (1.0 - k / (lag + 1.0)) * gk
    return v


def diebold_mariano(e1, e2, horizon: int = 1, lag: int | None = None) -> DMResult:
    """Test equal squared-error accuracy of two forecast error series.

    ``d_t = e1_t^2 - e2_t^2``.  For 2-D errors ``(T, N)`` the differential is
    averaged over sites first, so the test runs on one series in time.
    Positive statistics mean ``e2`` is the more accurate forecast;
    ``p_one_sided`` is ``P(Z >= DM)`` for that alternative.
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ValueError(f"error series differ in shape: {e1.shape} vs {e2.shape}")
    d = e1 * e1 - e2 * e2
    if d.ndim > 1:
        d = d.reshape(d.shape[0], -1).mean(axis=1)
    T = d.size
    if T < 10:
        raise ValueError(f"Diebold-Mariano needs T >= 10, got {T}")
    lag = horizon - 1 if lag is None else lag
    v = newey_west_variance(d, lag)
    if not v > 1e-300 or np.all(d == d[0]):
        raise DegenerateStatistic("degenerate loss differential")
    dbar = float(d.mean())
    stat = dbar / math.sqrt(v / T)
    p2 = 2.0 * float(stats.norm.sf(abs(stat)))
    p1 = float(stats.norm.sf(stat))
    return DMResult(stat, p2, p1, lag, dbar)


# ---------------------------------------------------------------------------
# PIT
# ---------------------------------------------------------------------------


def pit_values(result: ForecastResult) -> np.ndarray:
    """Pooled PIT values Phi((y - mu) / sigma) over all (t, site)."""
    if result.variances is None:
        raise ValueError(f"{result.model_name}: PIT needs predictive variances")
    z = (result.targets - result.predictions) / np.sqrt(result.variances)
    return stats.norm.cdf(z).ravel()


def pit_uniformity(pit, bins: int = 10):
    """Normalised histogram (fractions per bin) and KS distance to U[0, 1]."""
    pit = np.asarray(pit, dtype=np.float64).ravel()
    counts, _ = np.histogram(pit, bins=bins, range=(0.0, 1.0))
    ks = float(stats.kstest(pit, "uniform").statistic)
    return counts / pit.size, ks


def outer_mass(hist) -> float:
    hist = np.asarray(hist)
    return float(hist[0] + hist[-1])


# ---------------------------------------------------------------------------
# spatial diagnostics
# ---------------------------------------------------------------------------


@dataclass
class SpatialWeights:
    w: np.ndarray

    @classmethod
    def inverse_distance(cls, dist: np.ndarray) -> "SpatialWeights":
        dist = np.asarray(dist, dtype=np.float64)
        off = ~np.eye(dist.shape[0], dtype=bool)
        if np.any(dist[off] <= 0):
            raise ValueError("inverse-distance weights need distinct locations")
        w = np.zeros_like(dist)
        w[off] = 1.0 / dist[off]
        return cls(w)


def morans_i(residuals, weights: SpatialWeights | np.ndarray) -> float:
    """Global Moran's I of one residual snapshot."""
    w = weights.w if isinstance(weights, SpatialWeights) else np.asarray(weights, dtype=np.float64)
    e = np.asarray(residuals, dtype=np.float64).ravel()
    if w.shape != (e.size, e.size):
        raise ValueError(f"weights {w.shape} do not match {e.size} residuals")
    ec = e - e.mean()
    den = float(ec @ ec)
    if den <= 1e-300 * max(1.0, e.size):
        raise DegenerateStatistic("zero residual variance")
    return float(e.size / w.sum() * (ec @ w @ ec) / den)


def mean_morans_i(residual_snapshots, weights) -> float:
    """Mean Moran's I over snapshots (rows of ``(T, N)``); constant rows are skipped."""
    vals = []
    for row in np.atleast_2d(residual_snapshots):
        try:
            vals.append(morans_i(row, weights))
        except DegenerateStatistic:
            continue
    if not vals:
        raise DegenerateStatistic("zero residual variance in every snapshot")
    return float(np.mean(vals))


def empirical_variogram(values, dist: np.ndarray, bins, min_pairs: int = 50):
    """Matheron semivariance averaged over time.

    ``values`` is ``(T, N)`` (or one snapshot ``(N,)``).  Returns
    ``(centers, gamma, pair_counts)``; bins with fewer than ``min_pairs``
    distinct site pairs are reported as ``nan``.
    """
    z = np.atleast_2d(np.asarray(values, dtype=np.float64))
    edges = np.asarray(bins, dtype=np.float64)
    iu = np.triu_indices(dist.shape[0], k=1)
    dd = dist[iu]
    idx = np.digitize(dd, edges) - 1
    nb = edges.size - 1
    gamma = np.full(nb, np.nan)
    counts = np.zeros(nb, dtype=int)
    diffs = z[:, iu[0]] - z[:, iu[1]]  # (T, P)
    half_sq = 0.5 * (diffs * diffs).mean(axis=0)
    for b in range(nb):
        sel = idx == b
        counts[b] = sel.sum()
        if counts[b] >= min_pairs:
            gamma[b] = half_sq[sel].mean()
    return 0.5 * (edges[:-1] + edges[1:]), gamma, counts


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------


def summarize(result: ForecastResult, weights: SpatialWeights | None = None) -> dict:
    """Metrics dictionary for one forecast (keys absent when not computable)."""
    out = {"model": result.model_name, "horizon": int(result.horizon), "rmse": rmse(result), "mae": mae(result)}
    out["crps"] = crps(result) if result.variances is not None else None
    if weights is not None:
        out["morans_i"] = mean_morans_i(result.residuals, weights)
    if result.variances is not None:
        hist, ks = pit_uniformity(pit_values(result))
        out["pit_ks"] = ks
        out["pit_hist"] = hist.tolist()
    return out


def write_histogram_csv(path, hist, bins: int | None = None) -> Path:
    path = Path(path)
    hist = np.asarray(hist)
    bins = bins or hist.size
    edges = np.linspace(0.0, 1.0, bins + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "fraction"])
        for lo, hi, f in zip(edges[:-1], edges[1:], hist):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(f))])
    return path


def write_variogram_csv(path, centers, gamma, counts) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "semivariance", "pairs"])
        for c, g, n in zip(centers, gamma, counts):
            w.writerow([repr(float(c)), "" if not np.isfinite(g) else repr(float(g)), int(n)])
    return path
