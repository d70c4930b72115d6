"""
Stationary isotropic correlation functions on point sets in the plane.

Only the half-integer Matérn members with closed forms are supported
(nu = 0.5, 1.5, 2.5) plus the Gaussian limit nu -> inf.  Every function
works elementwise on numpy arrays of distances.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

SQRT3 = math.sqrt(3.0)
SQRT5 = math.sqrt(5.0)


class KernelFamily(str, enum.Enum):
    EXPONENTIAL = "exponential"
    MATERN15 = "matern15"
    MATERN25 = "matern25"
    GAUSSIAN = "gaussian"

    @property
    def nu(self) -> float:
        return {"exponential": 0.5, "matern15": 1.5, "matern25": 2.5, "gaussian": math.inf}[self.value]

    @classmethod
    def from_nu(cls, nu: float) -> "KernelFamily":
        for fam in cls:
            if fam.nu == nu:
                return fam
        raise ValueError(f"unsupported smoothness nu={nu}; expected one of 0.5, 1.5, 2.5, inf")


def _family(family) -> KernelFamily:
    if isinstance(family, KernelFamily):
        return family
    if isinstance(family, (int, float)):
        return KernelFamily.from_nu(float(family))
    return KernelFamily(str(family).lower())


# --------------------------------------------------------------------------
# softplus parameterization
# --------------------------------------------------------------------------


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Raw parameter whose softplus equals ``y`` (``y > 0``)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inverse requires strictly positive input")
    # log(exp(y) - 1) = y + log(1 - exp(-y))
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def pairwise_distances(locations) -> np.ndarray:
    """Euclidean distance matrix of an ``(n, 2)`` coordinate array."""
    pts = np.atleast_2d(np.asarray(locations, dtype=np.float64))
    if pts.shape[0] < 1 or pts.ndim != 2:
        raise ValueError(f"expected a non-empty (n, dim) coordinate array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinate in locations")
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    # exact symmetry and zero diagonal regardless of rounding
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def lattice_locations(side: int) -> np.ndarray:
    """Regular ``side * side`` lattice spanning the unit square corner to corner, row-major.

    A single point sits at the centre.
    """
    if side < 1:
        raise ValueError("lattice side must be >= 1")
    c = np.linspace(0.0, 1.0, side) if side > 1 else np.array([0.5])
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass
class SensorGrid:
    """Fixed sensor locations and their distance matrix."""

    locations: np.ndarray
    dist_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=np.float64))
        self.dist_matrix = pairwise_distances(self.locations)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @classmethod
    def lattice(cls, side: int) -> "SensorGrid":
        return cls(lattice_locations(side))

    def permuted(self, perm) -> "SensorGrid":
        return SensorGrid(self.locations[np.asarray(perm)])


# --------------------------------------------------------------------------
# correlation functions
# --------------------------------------------------------------------------


def _check(d, rho):
    d = np.asarray(d, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(~(rho > 0)):
        raise ValueError(f"range rho must be > 0, got {rho}")
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    return d, rho


def matern_correlation(d, rho, family=KernelFamily.MATERN15):
    """Correlation Psi(d; rho) of the chosen family; Psi(0) = 1.

    Parameters
    ----------
    d : array_like
        Non-negative distances.
    rho : float or array_like
        Range parameter(s), broadcast against ``d``.
    family : KernelFamily, str or float nu
    """
    d, rho = _check(d, rho)
    fam = _family(family)
    r = d / rho
    if fam is KernelFamily.EXPONENTIAL:
        return np.exp(-r)
    if fam is KernelFamily.MATERN15:
        s = SQRT3 * r
        return (1.0 + s) * np.exp(-s)
    if fam is KernelFamily.MATERN25:
        s = SQRT5 * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)
    return np.exp(-0.5 * r * r)


def matern_correlation_grad_rho(d, rho, family=KernelFamily.MATERN15):
    """Analytic derivative dPsi/drho of :func:`matern_correlation`."""
    d, rho = _check(d, rho)
    fam = _family(family)
    r = d / rho
    if fam is KernelFamily.EXPONENTIAL:
        return d / rho**2 * np.exp(-r)
    if fam is KernelFamily.MATERN15:
        # d/drho (1+s)e^{-s} = s^2 e^{-s} / rho, s = sqrt3 d / rho
        s = SQRT3 * r
        return s * s * np.exp(-s) / rho
    if fam is KernelFamily.MATERN25:
        s = SQRT5 * r
        return s * s * (1.0 + s) * np.exp(-s) / (3.0 * rho)
    return r * r * np.exp(-0.5 * r * r) / rho


# --------------------------------------------------------------------------
# kernel parameters
# --------------------------------------------------------------------------


@dataclass
class KernelSpec:
    """Covariance family plus raw (unconstrained) range and bias weight.

    ``rho = softplus(theta_rho)`` and ``lambda = softplus(theta_lambda)``.
    ``theta_*`` may be scalars or per-head vectors.
    """

    family: KernelFamily = KernelFamily.MATERN15
    theta_rho: np.ndarray | float = 0.0
    theta_lambda: np.ndarray | float = float(softplus_inverse(1.0))
    sigma2: float = 1.0

    def __post_init__(self):
        self.family = _family(self.family)
        self.theta_rho = np.asarray(self.theta_rho, dtype=np.float64)
        self.theta_lambda = np.asarray(self.theta_lambda, dtype=np.float64)

    @property
    def rho(self):
        return softplus(self.theta_rho)

    @property
    def lam(self):
        return softplus(self.theta_lambda)

    @classmethod
    def from_effective(cls, family, rho, lam=1.0, sigma2=1.0) -> "KernelSpec":
        return cls(family, softplus_inverse(rho), softplus_inverse(lam), sigma2)

    @classmethod
    def random_init(cls, rng: np.random.Generator, family=KernelFamily.MATERN15, shape=(), lam=1.0,
                    low=0.01, high=0.5) -> "KernelSpec":
        rho0 = rng.uniform(low, high, size=shape)
        return cls(family, softplus_inverse(rho0), softplus_inverse(np.full(shape, lam)))


class _BiasCache:
    """Per-grid cache of Psi(D; rho), invalidated whenever rho changes."""

    def __init__(self):
        self._key = None
        self._value = None

    def get(self, dist, rho, family):
        key = (id(dist), dist.shape, family, np.asarray(rho).tobytes())
        if key != self._key:
            rho_b = np.asarray(rho, dtype=np.float64)
            if rho_b.ndim:
                rho_b = rho_b[:, None, None]
            self._value = (matern_correlation(dist, rho_b, family), matern_correlation_grad_rho(dist, rho_b, family))
            self._key = key
        return self._value


def kernel_bias_matrix(grid: SensorGrid, spec: KernelSpec, lam=None) -> np.ndarray:
    """lambda * Psi(d_ij; rho) over all sensor pairs (plain numpy, no gradient).

    ``lam`` overrides the softplus-constrained weight, e.g. ``lam=0`` to
    disable the prior.
    """
    dist = grid.dist_matrix
    rho = spec.rho
    lam = spec.lam if lam is None else np.asarray(lam, dtype=np.float64)
    if np.ndim(rho):
        psi = matern_correlation(dist, np.asarray(rho)[:, None, None], spec.family)
        return np.asarray(lam).reshape(-1, 1, 1) * psi
    return lam * matern_correlation(dist, rho, spec.family)
