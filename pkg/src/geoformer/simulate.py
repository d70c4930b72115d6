"""
Synthetic spatio-temporal Gaussian fields: Matérn in space, AR(1) in time,
plus white measurement noise.

The latent field evolves as

    F_0     ~ N(0, S)
    F_{t+1} = phi * F_t + sqrt(1 - phi^2) * eta_t,   eta_t ~ N(0, S)
    Y_t     = F_t + eps_t,                             eps_t ~ N(0, nugget * I)

with ``S = sigma2 * Psi(D; rho_true, nu)``, which yields the separable
covariance ``S(d) * phi^|tau| + nugget * delta``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import KernelFamily, SensorGrid, matern_correlation


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    grid_side: int = 20
    nu: float = 1.5
    rho_true: float = 0.2
    sigma2: float = 1.0
    phi_t: float = 0.8
    nugget: float = 0.05
    t_steps: int = 2000
    n_replicates: int = 50
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not abs(self.phi_t) < 1:
            raise ValueError(f"phi_t must satisfy |phi_t| < 1, got {self.phi_t}")
        if not self.rho_true > 0:
            raise ValueError(f"rho_true must be > 0, got {self.rho_true}")
        if self.nugget < 0:
            raise ValueError(f"nugget must be >= 0, got {self.nugget}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.grid_side < 2:
            raise ValueError(f"grid_side must be >= 2, got {self.grid_side}")
        if self.t_steps < 1 or self.n_replicates < 1:
            raise ValueError("t_steps and n_replicates must be >= 1")
        KernelFamily.from_nu(self.nu)

    @property
    def family(self) -> KernelFamily:
        return KernelFamily.from_nu(self.nu)

    @property
    def n_sites(self) -> int:
        return self.grid_side**2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class StDataset:
    grid: SensorGrid
    observations: np.ndarray  # (T, N)
    config: SimConfig
    replicate_id: int = 0
    latent: np.ndarray | None = field(default=None, repr=False)

    @property
    def t_steps(self) -> int:
        return self.observations.shape[0]

    @property
    def n_sites(self) -> int:
        return self.observations.shape[1]


def spatial_covariance(grid: SensorGrid, config: SimConfig) -> np.ndarray:
    return config.sigma2 * matern_correlation(grid.dist_matrix, config.rho_true, config.family)


def jittered_cholesky(cov: np.ndarray, scale: float = 1.0, start: float = 1e-10, stop: float = 1e-6):
    """Cholesky factor of ``cov + j * scale * I`` for the smallest working jitter.

    Jitter starts at ``start * scale`` and grows tenfold up to
    ``stop * scale``.  Returns ``(L, jitter)``.
    """
    n = cov.shape[0]
    eye = np.eye(n)
    scale = scale if scale > 0 else 1.0
    j = start
    while j <= stop * (1 + 1e-9):
        try:
            return np.linalg.cholesky(cov + j * scale * eye), j * scale
        except np.linalg.LinAlgError:
            j *= 10.0
    eig = np.linalg.eigvalsh(cov)
    raise SimulationError(
        f"Cholesky failed up to jitter {stop * scale:.1e}: min eigenvalue {eig[0]:.3e}, "
        f"max eigenvalue {eig[-1]:.3e}, condition ~{abs(eig[-1] / eig[0]) if eig[0] else np.inf:.3e}"
    )


def replicate_seeds(config: SimConfig) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(config.seed).spawn(config.n_replicates)


def simulate_replicate(config: SimConfig, replicate_id: int, grid: SensorGrid | None = None,
                       chol: np.ndarray | None = None, keep_latent: bool = True) -> StDataset:
    grid = grid or SensorGrid.lattice(config.grid_side)
    n, T = grid.n, config.t_steps
    if chol is None:
        if config.sigma2 > 0:
            chol, _ = jittered_cholesky(spatial_covariance(grid, config), config.sigma2)
        else:
            chol = np.zeros((n, n))
    seq = replicate_seeds(config)[replicate_id]
    rng = np.random.default_rng(seq)
    innov = rng.standard_normal((T, n)) @ chol.T
    noise = rng.standard_normal((T, n)) * np.sqrt(config.nugget)
    phi = config.phi_t
    c = np.sqrt(1.0 - phi * phi)
    latent = np.empty((T, n))
    latent[0] = innov[0]
    for t in range(1, T):
        latent[t] = phi * latent[t - 1] + c * innov[t]
    obs = latent + noise
    return StDataset(grid, obs, config, replicate_id, latent if keep_latent else None)


def simulate(config: SimConfig, keep_latent: bool = True, replicates=None) -> list[StDataset]:
    """All replicates of ``config`` (or the subset of ids in ``replicates``)."""
    config.validate()
    grid = SensorGrid.lattice(config.grid_side)
    if config.sigma2 > 0:
        chol, _ = jittered_cholesky(spatial_covariance(grid, config), config.sigma2)
    else:
        chol = np.zeros((grid.n, grid.n))
    ids = range(config.n_replicates) if replicates is None else replicates
    return [simulate_replicate(config, r, grid, chol, keep_latent) for r in ids]


# ---------------------------------------------------------------------------
# empirical checks
# ---------------------------------------------------------------------------


def empirical_spatial_correlation(dataset: StDataset, distance_bins, use_latent: bool = False):
    """Average sample correlation of site pairs grouped by distance.

    Returns ``(centers, corr, counts)``; bins without pairs carry ``nan``.
    A bin whose lower edge is 0 includes the self pairs.
    """
    edges = np.asarray(distance_bins, dtype=np.float64)
    if edges.size < 3:
        raise ValueError("need at least 2 distance bins")
    if dataset.t_steps < 100:
        raise ValueError("empirical correlation needs T >= 100")
    z = dataset.latent if use_latent else dataset.observations
    corr = np.corrcoef(z, rowvar=False)
    d = dataset.grid.dist_matrix
    iu = np.triu_indices_from(d)
    dd, cc = d[iu], corr[iu]
    idx = np.digitize(dd, edges) - 1
    nb = edges.size - 1
    out = np.full(nb, np.nan)
    counts = np.zeros(nb, dtype=int)
    for b in range(nb):
        sel = idx == b
        # the closing edge is inclusive
        if b == nb - 1:
            sel |= dd == edges[-1]
        counts[b] = sel.sum()
        if counts[b]:
            out[b] = cc[sel].mean()
    return 0.5 * (edges[:-1] + edges[1:]), out, counts


def lag1_autocorrelation(z: np.ndarray) -> np.ndarray:
    zc = z - z.mean(axis=0)
    return (zc[1:] * zc[:-1]).sum(axis=0) / (zc * zc).sum(axis=0)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class Windows:
    """One-step-ahead samples: ``inputs[k]`` is ``(N, L)``, ``targets[k]`` is ``(N,)``.

    ``target_index[k]`` is the time index of ``targets[k]``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_index: np.ndarray

    def __len__(self):
        return len(self.target_index)

    def subset(self, idx) -> "Windows":
        return Windows(self.inputs[idx], self.targets[idx], self.target_index[idx])


def make_windows(obs: np.ndarray, target_indices, lookback: int) -> Windows:
    t_idx = np.asarray(list(target_indices), dtype=int)
    if t_idx.size and (t_idx.min() < lookback or t_idx.max() >= obs.shape[0]):
        raise ValueError("window target index out of range")
    offs = np.arange(-lookback, 0)
    if t_idx.size:
        x = obs[t_idx[:, None] + offs[None, :]]  # (K, L, N)
        x = np.ascontiguousarray(np.transpose(x, (0, 2, 1)))
    else:
        x = np.empty((0, obs.shape[1], lookback))
    return Windows(x, obs[t_idx].copy(), t_idx)


def split(dataset: StDataset | np.ndarray, t_train: int, t_test: int, lookback: int = 12):
    """Chronological train/test windows.

    Training targets are time steps ``lookback .. t_train - 1``; test targets
    are the final ``t_test`` steps of the series, so the test block stays
    fixed when ``t_train`` varies.  Test inputs may reach back into the
    training period but no target appears in both sets.
    """
    obs = dataset.observations if isinstance(dataset, StDataset) else np.asarray(dataset)
    T = obs.shape[0]
    if lookback < 1 or t_test < 1:
        raise ValueError("lookback and t_test must be >= 1")
    if t_train <= lookback:
        raise ValueError(f"t_train={t_train} leaves no training windows with lookback {lookback}")
    if t_train + t_test > T:
        raise ValueError(f"series too short: t_train + t_test = {t_train + t_test} > T = {T}")
    train = make_windows(obs, range(lookback, t_train), lookback)
    test = make_windows(obs, range(T - t_test, T), lookback)
    return train, test


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _write_matrix_csv(path: Path, header: list[str], rows: np.ndarray):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_matrix_csv(path: Path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    return header, data


def save_dataset(dataset: StDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = dataset.n_sites
    _write_matrix_csv(directory / "observations.csv", [str(i) for i in range(n)], dataset.observations)
    _write_matrix_csv(directory / "locations.csv", ["x", "y"], dataset.grid.locations)
    meta = {"config": dataset.config.to_dict(), "seed": dataset.config.seed, "replicate_id": dataset.replicate_id,
            "t_steps": dataset.t_steps, "n_sites": n}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> StDataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    header, obs = _read_matrix_csv(directory / "observations.csv")
    if header != [str(i) for i in range(obs.shape[1])]:
        raise ValueError(f"{directory}/observations.csv: unexpected header")
    _, locs = _read_matrix_csv(directory / "locations.csv")
    return StDataset(SensorGrid(locs), obs, SimConfig.from_dict(meta["config"]), int(meta["replicate_id"]))
