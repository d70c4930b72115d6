"""
Experiment orchestration: simulate, train both transformer variants,
evaluate them next to the Kriging oracle and the historical average, and
write every table and figure as CSV/JSON.

The on-disk layout under ``output_dir`` is::

    data/rep{r}/{observations.csv, locations.csv, meta.json}
    runs/rep{r}/ttrain{T}/{geo,vanilla}/{checkpoint.json, checkpoint.bin, trainlog.csv}
    runs/rep{r}/ttrain{T}/{model}/forecast_h{h}.csv (+ .json sidecar)
    figures/...   aggregated CSVs (rho trajectory, sample efficiency, ...)
    summary.json  acceptance verdicts

Aggregation (:func:`evaluate_criteria`) reads only these files.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .baselines import KrigingOracle, historical_average
from .kernels import SensorGrid
from .model import GeoTransformer, ModelConfig, Variant, export_attention_maps
from .simulate import SimConfig, StDataset, load_dataset, make_windows, save_dataset, simulate, split
from .training import TrainConfig, TrainLog, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("variography", "sample_efficiency", "horizon_decay", "residual_whitening", "calibration",
               "full_table")
MODELS = ("kriging", "geo", "vanilla", "historical_average")


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: str = "full_table"
    output_dir: str = "geoformer_out"
    desk_scale: bool = False
    t_train: int = 500
    t_train_sizes: list = field(default_factory=lambda: [100, 500, 1500])
    t_test: int = 500
    horizons: list = field(default_factory=lambda: [1, 2, 3, 4])
    kriging_depth: int = 3
    n_mc: int = 50
    jobs: int = 1
    emit_svg: bool = False
    runtime_budget_s: float = 900.0

    def __post_init__(self):
        if isinstance(self.sim, dict):
            self.sim = SimConfig.from_dict(self.sim)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if self.desk_scale:
            self.apply_desk_scale()
        self.validate()

    def apply_desk_scale(self):
        self.desk_scale = True
        self.sim.grid_side = 10
        self.sim.t_steps = 600
        self.sim.n_replicates = 5
        self.t_test = 100
        self.t_train = 500
        self.t_train_sizes = [100, 300, 500]
        if self.train.early_stopping is None:
            self.train.early_stopping = 20

    def validate(self):
        self.sim.validate()
        self.model.validate()
        self.train.validate()
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        sizes = sorted(set(self.t_train_sizes) | {self.t_train})
        for t in sizes:
            if t <= self.model.lookback:
                raise ValueError(f"t_train={t} must exceed the lookback {self.model.lookback}")
            if t + self.t_test > self.sim.t_steps:
                raise ValueError(f"t_train={t} + t_test={self.t_test} exceeds t_steps={self.sim.t_steps}")
        if max(self.horizons) + self.model.lookback > self.sim.t_steps - self.t_test + 1:
            raise ValueError("horizon too long for the test block")
        if self.n_mc < 2:
            raise ValueError("n_mc must be >= 2")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["sim"] = self.sim.to_dict()
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict, apply_desk_scale: bool = False) -> "ExperimentConfig":
        """Rebuild from :meth:`to_dict` output.

        A stored ``desk_scale=True`` is taken as already applied (the sizes in
        ``d`` win) unless ``apply_desk_scale`` asks for the shrink again.
        """
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = copy.deepcopy(d)
        desk = bool(d.pop("desk_scale", False))
        cfg = cls(**d, desk_scale=desk and apply_desk_scale)
        cfg.desk_scale = desk
        return cfg


def set_dotted(d: dict, key: str, value):
    """Set ``d['a']['b'] = value`` for ``key='a.b'``; the leaf must already exist."""
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise KeyError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def dataset_dir(out: Path, rep: int) -> Path:
    return out / "data" / f"rep{rep}"


def ensure_datasets(cfg: ExperimentConfig) -> list[Path]:
    out = Path(cfg.output_dir)
    dirs = [dataset_dir(out, r) for r in range(cfg.sim.n_replicates)]
    missing = [r for r, d in enumerate(dirs) if not (d / "meta.json").exists() or _stale(d, cfg.sim)]
    if missing:
        for ds in simulate(cfg.sim, keep_latent=False, replicates=missing):
            save_dataset(ds, dataset_dir(out, ds.replicate_id))
    return dirs


def _stale(directory: Path, sim: SimConfig) -> bool:
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("config") != sim.to_dict() or not (directory / "locations.csv").exists():
        return True
    locs = np.loadtxt(directory / "locations.csv", delimiter=",", skiprows=1, ndmin=2)
    return locs.shape != (sim.n_sites, 2) or not np.allclose(locs, SensorGrid.lattice(sim.grid_side).locations)


# ---------------------------------------------------------------------------
# one (replicate, t_train) cell
# ---------------------------------------------------------------------------


def cell_dir(out: Path, rep: int, t_train: int) -> Path:
    return out / "runs" / f"rep{rep}" / f"ttrain{t_train}"


def horizon_windows(obs: np.ndarray, t_test: int, lookback: int, horizon: int):
    """Inputs ending ``horizon`` steps before each test target."""
    T = obs.shape[0]
    targets = np.arange(T - t_test, T)
    w = make_windows(obs, targets - (horizon - 1), lookback)
    return w.inputs, obs[targets], targets


def _model_config(cfg: ExperimentConfig, variant: Variant, rep: int, t_train: int) -> ModelConfig:
    mc = ModelConfig.from_dict(cfg.model.to_dict())
    mc.variant = variant
    # distinct, reproducible streams per cell; both variants share the init seed
    mc.seed = int(np.random.SeedSequence([cfg.model.seed, rep, t_train]).generate_state(1)[0])
    mc.n_mc = cfg.n_mc
    return mc


def run_cell(cfg: ExperimentConfig, rep: int, t_train: int, variants=("geo", "vanilla"),
             horizons=(1,), baselines: bool = True, attention: bool = False) -> dict:
    out = Path(cfg.output_dir)
    ds = load_dataset(dataset_dir(out, rep))
    cdir = cell_dir(out, rep, t_train)
    cdir.mkdir(parents=True, exist_ok=True)
    L = cfg.model.lookback
    tr, te = split(ds, t_train, cfg.t_test, L)
    obs = ds.observations
    info = {"rep": rep, "t_train": t_train, "models": {}}

    for v in variants:
        variant = Variant(v)
        mc = _model_config(cfg, variant, rep, t_train)
        model = GeoTransformer(mc, ds.grid)
        tc = TrainConfig.from_dict(cfg.train.to_dict())
        tc.seed = mc.seed
        rho0 = model.rho
        t0 = time.perf_counter()
        model, tlog = train(model, tr, tc)
        secs = time.perf_counter() - t0
        mdir = cdir / v
        mdir.mkdir(exist_ok=True)
        tlog.to_csv(mdir / "trainlog.csv", include_kernel=model.is_geo)
        ck = model.save(mdir / "checkpoint.json", step=len(tlog),
                        extra={"rho_init": rho0, "best_epoch": tlog.best_epoch, "train_seconds": secs,
                               "diverged": tlog.diverged})
        info["models"][v] = {"checkpoint": str(ck), "rho": model.rho, "seconds": secs}
        rng = np.random.default_rng(mc.seed + 1)
        for h in horizons:
            x, y, tidx = horizon_windows(obs, cfg.t_test, L, h)
            if h == 1:
                _, var = model.predict_distribution(x, cfg.n_mc, rng)
                pred = model.predict(x)
            else:
                pred, var = model.forecast(x, h), None
            M.ForecastResult(v, h, pred, y, var, tidx).to_csv(mdir / f"forecast_h{h}.csv")
        if attention:
            export_attention_maps(model.attention_maps(te.inputs[0]), mdir / "attention")

    if baselines:
        oracle = KrigingOracle.from_config(ds.grid, ds.config, cfg.kriging_depth)
        for h in horizons:
            x, y, tidx = horizon_windows(obs, cfg.t_test, L, h)
            mu, var = oracle.predict(x, h)
            M.ForecastResult("kriging", h, mu, y, var, tidx).to_csv(cdir / "kriging" / f"forecast_h{h}.csv")
        ha = historical_average(obs[:t_train])
        x, y, tidx = horizon_windows(obs, cfg.t_test, L, 1)
        M.ForecastResult("historical_average", 1, np.broadcast_to(ha, y.shape), y, None, tidx).to_csv(
            cdir / "historical_average" / "forecast_h1.csv")
    return info


def _run_cell_safe(args):
    cfg_dict, rep, t_train, kw = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return {"ok": True, **run_cell(cfg, rep, t_train, **kw)}
    except Exception as exc:  # one failed replicate must not abort the suite
        log.error("cell rep=%d t_train=%d failed: %s", rep, t_train, exc)
        return {"ok": False, "rep": rep, "t_train": t_train, "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def plan_cells(cfg: ExperimentConfig) -> list[tuple[int, int, dict]]:
    reps = range(cfg.sim.n_replicates)
    main = cfg.t_train
    hz = tuple(cfg.horizons)
    e = cfg.experiment
    if e == "variography":
        return [(r, main, {"variants": ("geo",), "baselines": False, "attention": r == 0}) for r in reps]
    if e == "sample_efficiency":
        return [(r, t, {"variants": ("geo", "vanilla"), "baselines": False}) for r in reps
                for t in sorted(cfg.t_train_sizes)]
    if e == "horizon_decay":
        return [(r, main, {"horizons": hz, "baselines": True}) for r in reps]
    if e in ("residual_whitening", "calibration"):
        return [(r, main, {"baselines": True}) for r in reps]
    cells = []
    for r in reps:
        for t in sorted(set(cfg.t_train_sizes) | {main}):
            if t == main:
                cells.append((r, t, {"horizons": hz, "baselines": True, "attention": r == 0}))
            else:
                cells.append((r, t, {"baselines": False}))
    return cells


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run all cells of ``cfg.experiment`` and write the aggregated artifacts."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    ensure_datasets(cfg)
    cells = plan_cells(cfg)
    args = [(cfg.to_dict(), r, t, kw) for r, t, kw in cells]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_cell_safe, args))
    else:
        results = [_run_cell_safe(a) for a in args]
    failures = [r for r in results if not r["ok"]]
    (out / "cells.json").write_text(json.dumps(
        [{k: v for k, v in r.items() if k != "traceback"} for r in results], indent=2, default=str) + "\n")
    summary = evaluate_criteria(out, cfg, experiment=cfg.experiment)
    summary["failures"] = [{k: r[k] for k in ("rep", "t_train", "error")} for r in failures]
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if cfg.emit_svg:
        from .svg import emit_figures

        emit_figures(out, cfg.sim.rho_true)
    return summary


# ---------------------------------------------------------------------------
# aggregation: everything below reads from disk only
# ---------------------------------------------------------------------------


def _load_forecast(cdir: Path, model: str, h: int = 1) -> M.ForecastResult | None:
    p = cdir / model / f"forecast_h{h}.csv"
    return M.ForecastResult.from_csv(p) if p.exists() else None


def _reps_with(out: Path, cfg: ExperimentConfig, t_train: int, models, h: int = 1) -> list[int]:
    ok = []
    for r in range(cfg.sim.n_replicates):
        cdir = cell_dir(out, r, t_train)
        if all((cdir / m / f"forecast_h{h}.csv").exists() for m in models):
            ok.append(r)
    return ok


def _verdict(name, passed, reps, detail, min_reps=3) -> dict:
    if len(reps) < min_reps:
        return {"criterion": name, "status": "indeterminate", "replicates": len(reps), **detail}
    return {"criterion": name, "status": "pass" if passed else "fail", "replicates": len(reps), **detail}


def _write_rows(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    _check_schema(path, header)


def _check_schema(path: Path, header):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if rows[0] != list(header) or any(len(r) != len(header) for r in rows[1:]):
        raise ValueError(f"schema check failed for {path}")


def criterion_variography(out: Path, cfg: ExperimentConfig) -> dict:
    rows, finals, closer, secs, reps = [], [], [], 0.0, []
    rho_true = cfg.sim.rho_true
    for r in range(cfg.sim.n_replicates):
        mdir = cell_dir(out, r, cfg.t_train) / "geo"
        if not (mdir / "trainlog.csv").exists():
            continue
        manifest = json.loads((mdir / "checkpoint.json").read_text())
        tlog = TrainLog.from_csv(mdir / "trainlog.csv")
        rho0 = float(np.mean(manifest["rho_init"]))
        traj = [rho0] + [float(x) for x in tlog.column("rho")]
        rows += [(r, e, v, v * cfg.sim.grid_side) for e, v in enumerate(traj)]
        finals.append(traj[-1])
        closer.append(abs(traj[-1] - rho_true) < abs(traj[0] - rho_true))
        secs += float(np.nansum(tlog.column("seconds")))
        reps.append(r)
    _write_rows(out / "figures" / "rho_trajectory.csv", ["replicate", "epoch", "rho", "rho_cells"], rows)
    _write_rows(out / "figures" / "rho_final.csv", ["replicate", "rho_final", "moved_closer"],
                [(r, f, int(c)) for r, f, c in zip(reps, finals, closer)])
    mean = float(np.mean(finals)) if finals else math.nan
    n_closer = int(sum(closer))
    need = max(len(reps) - 1, 0)
    passed = 0.12 <= mean <= 0.30 and n_closer >= need and secs <= cfg.runtime_budget_s
    return _verdict("1_deep_variography", passed, reps, {
        "rho_mean": mean, "rho_sd": float(np.std(finals, ddof=1)) if len(finals) > 1 else math.nan,
        "rho_final": finals, "band": [0.12, 0.30], "moved_closer": n_closer, "moved_closer_required": need,
        "train_seconds": secs, "budget_seconds": cfg.runtime_budget_s})


def criterion_whitening(out: Path, cfg: ExperimentConfig) -> dict:
    reps = _reps_with(out, cfg, cfg.t_train, ("geo", "vanilla"))
    vals = {"geo": [], "vanilla": [], "kriging": []}
    for r in reps:
        cdir = cell_dir(out, r, cfg.t_train)
        ds_grid = SensorGrid(np.loadtxt(dataset_dir(out, r) / "locations.csv", delimiter=",", skiprows=1))
        w = M.SpatialWeights.inverse_distance(ds_grid.dist_matrix)
        for m in vals:
            fr = _load_forecast(cdir, m)
            if fr is not None:
                vals[m].append(M.mean_morans_i(fr.residuals, w))
                if r == reps[0]:
                    _write_rows(out / "figures" / f"residual_snapshot_{m}.csv", ["x", "y", "residual"],
                                [(x, y, e) for (x, y), e in zip(ds_grid.locations, fr.residuals[0])])
    ig = float(np.mean(vals["geo"])) if vals["geo"] else math.nan
    iv = float(np.mean(vals["vanilla"])) if vals["vanilla"] else math.nan
    ik = float(np.mean(vals["kriging"])) if vals["kriging"] else math.nan
    _write_rows(out / "figures" / "morans_i.csv", ["model", "replicate", "morans_i"],
                [(m, r, v) for m in vals for r, v in zip(reps, vals[m])])
    passed = abs(ig) < 0.10 and iv > ig + 0.05
    return _verdict("2_residual_whitening", passed, reps, {"morans_i_geo": ig, "morans_i_vanilla": iv,
                                                         "morans_i_kriging_oracle": ik})


def criterion_ordering(out: Path, cfg: ExperimentConfig) -> dict:
    reps = _reps_with(out, cfg, cfg.t_train, MODELS)
    table, ok = [], 0
    for r in reps:
        cdir = cell_dir(out, r, cfg.t_train)
        rm = {m: M.rmse(_load_forecast(cdir, m)) for m in MODELS}
        table.append((r, *[rm[m] for m in MODELS]))
        ok += rm["kriging"] < rm["geo"] < rm["vanilla"] < rm["historical_average"]
    _write_rows(out / "figures" / "ordering.csv", ["replicate", *[f"rmse_{m}" for m in MODELS]], table)
    return _verdict("3_ordering_oracle_bound", ok >= max(len(reps) - 1, 1), reps,
                    {"replicates_ordered": int(ok), "required": max(len(reps) - 1, 1)})


def criterion_sample_efficiency(out: Path, cfg: ExperimentConfig) -> dict:
    sizes = sorted(cfg.t_train_sizes)
    rows, imp, reps_all = [], {}, None
    for t in sizes:
        reps = _reps_with(out, cfg, t, ("geo", "vanilla"))
        if not reps:
            continue
        g = np.mean([M.rmse(_load_forecast(cell_dir(out, r, t), "geo")) for r in reps])
        v = np.mean([M.rmse(_load_forecast(cell_dir(out, r, t), "vanilla")) for r in reps])
        imp[t] = 100.0 * (v - g) / v
        rows.append((t, float(v), float(g), imp[t], len(reps)))
        reps_all = reps if reps_all is None else [r for r in reps_all if r in reps]
    _write_rows(out / "figures" / "sample_efficiency.csv",
                ["t_train", "rmse_vanilla", "rmse_geo", "improvement_pct", "replicates"], rows)
    lo, hi = sizes[0], cfg.t_train
    if lo not in imp or hi not in imp:
        return {"criterion": "4_sample_efficiency", "status": "indeterminate", "improvement_pct": imp}
    passed = imp[lo] > imp[hi] and imp[lo] > 5.0
    return _verdict("4_sample_efficiency", passed, reps_all or [],
                    {"improvement_pct": {str(k): float(v) for k, v in imp.items()}, "low": lo, "high": hi})


def criterion_horizon(out: Path, cfg: ExperimentConfig) -> dict:
    rows, ratios, reps_used = [], [], None
    for h in cfg.horizons:
        reps = _reps_with(out, cfg, cfg.t_train, ("geo", "vanilla"), h)
        if not reps:
            continue
        per = {m: float(np.mean([M.rmse(_load_forecast(cell_dir(out, r, cfg.t_train), m, h)) for r in reps]))
               for m in ("geo", "vanilla", "kriging")
               if all((cell_dir(out, r, cfg.t_train) / m / f"forecast_h{h}.csv").exists() for r in reps)}
        ratio = per["vanilla"] / per["geo"]
        ratios.append(ratio)
        rows.append((h, per["geo"], per["vanilla"], per.get("kriging", math.nan), ratio))
        reps_used = reps if reps_used is None else [r for r in reps_used if r in reps]
    _write_rows(out / "figures" / "horizon_decay.csv",
                ["horizon", "rmse_geo", "rmse_vanilla", "rmse_kriging", "ratio_vanilla_over_geo"], rows)
    passed = len(ratios) == len(cfg.horizons) and all(b >= a for a, b in zip(ratios, ratios[1:]))
    return _verdict("5_horizon_stability", passed, reps_used or [], {"ratios": ratios})


def _pooled(out: Path, cfg: ExperimentConfig, model: str, reps) -> M.ForecastResult:
    frs = [_load_forecast(cell_dir(out, r, cfg.t_train), model) for r in reps]
    var = None if frs[0].variances is None else np.vstack([f.variances for f in frs])
    return M.ForecastResult(model, 1, np.vstack([f.predictions for f in frs]), np.vstack([f.targets for f in frs]),
                            var)


def criterion_dm(out: Path, cfg: ExperimentConfig) -> dict:
    reps = _reps_with(out, cfg, cfg.t_train, ("geo", "vanilla"))
    if not reps:
        return {"criterion": "6_diebold_mariano", "status": "indeterminate"}
    g, v = _pooled(out, cfg, "geo", reps), _pooled(out, cfg, "vanilla", reps)
    try:
        dm = M.diebold_mariano(v.residuals, g.residuals)
    except M.DegenerateStatistic as exc:
        return {"criterion": "6_diebold_mariano", "status": "indeterminate", "error": str(exc)}
    return _verdict("6_diebold_mariano", dm.p_one_sided < 0.05, reps,
                    {"dm_statistic": dm.statistic, "p_one_sided": dm.p_one_sided, "p_two_sided": dm.p_value,
                     "orientation": "d_t = e_vanilla^2 - e_geo^2; positive favours geo"})


def criterion_calibration(out: Path, cfg: ExperimentConfig) -> dict:
    reps = _reps_with(out, cfg, cfg.t_train, ("geo", "vanilla"))
    if not reps:
        return {"criterion": "7_calibration", "status": "indeterminate"}
    res = {}
    for m in ("geo", "vanilla", "kriging"):
        if not all((cell_dir(out, r, cfg.t_train) / m / "forecast_h1.csv").exists() for r in reps):
            continue
        hist, ks = M.pit_uniformity(M.pit_values(_pooled(out, cfg, m, reps)))
        M.write_histogram_csv(out / "figures" / f"pit_{m}.csv", hist)
        res[m] = {"ks": ks, "outer_mass": M.outer_mass(hist), "hist": hist.tolist()}
    g, v = res["geo"], res["vanilla"]
    passed = g["ks"] < v["ks"] and (v["outer_mass"] > 0.2 or v["ks"] > g["ks"])
    return _verdict("7_calibration", passed, reps, {"pit": res})


def full_table(out: Path, cfg: ExperimentConfig) -> list[dict]:
    reps = _reps_with(out, cfg, cfg.t_train, MODELS)
    rows = []
    for m in MODELS:
        mets = [M.summarize(_load_forecast(cell_dir(out, r, cfg.t_train), m)) for r in reps]
        params = None
        if m in ("geo", "vanilla") and reps:
            man = json.loads((cell_dir(out, reps[0], cfg.t_train) / m / "checkpoint.json").read_text())
            params = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in man["parameters"])
        secs = None
        if m in ("geo", "vanilla") and reps:
            secs = float(np.mean([json.loads((cell_dir(out, r, cfg.t_train) / m / "checkpoint.json").read_text())
                                  ["train_seconds"] for r in reps]))
        crps_vals = [x["crps"] for x in mets if x["crps"] is not None]
        rows.append({"model": m, "params": params, "rmse": float(np.mean([x["rmse"] for x in mets])) if mets else None,
                     "mae": float(np.mean([x["mae"] for x in mets])) if mets else None,
                     "crps": float(np.mean(crps_vals)) if crps_vals else None, "train_seconds": secs,
                     "replicates": len(reps)})
    _write_rows(out / "figures" / "table_full.csv", ["model", "params", "rmse", "mae", "crps", "train_seconds"],
                [(r["model"], "" if r["params"] is None else r["params"], _blank(r["rmse"]), _blank(r["mae"]),
                  _blank(r["crps"]), _blank(r["train_seconds"])) for r in rows])
    return rows


def _blank(x):
    return "" if x is None else float(x)


CRITERIA = {
    "variography": [criterion_variography],
    "sample_efficiency": [criterion_sample_efficiency],
    "horizon_decay": [criterion_horizon],
    "residual_whitening": [criterion_whitening],
    "calibration": [criterion_calibration],
    "full_table": [criterion_variography, criterion_whitening, criterion_ordering, criterion_sample_efficiency,
                   criterion_horizon, criterion_dm, criterion_calibration],
}


def evaluate_criteria(out, cfg: ExperimentConfig | None = None, experiment: str | None = None,
                      numerical: bool = True) -> dict:
    """Recompute every verdict of ``experiment`` from the files under ``out``."""
    out = Path(out)
    if cfg is None:
        cfg = ExperimentConfig.from_dict(json.loads((out / "config.json").read_text()))
    experiment = experiment or cfg.experiment
    verdicts = []
    for fn in CRITERIA[experiment]:
        try:
            verdicts.append(fn(out, cfg))
        except Exception as exc:
            verdicts.append({"criterion": fn.__name__, "status": "indeterminate", "error": f"{type(exc).__name__}: {exc}"})
    summary = {"experiment": experiment, "output_dir": str(out), "criteria": verdicts}
    if experiment == "full_table":
        summary["table"] = full_table(out, cfg)
        if numerical:
            from .checks import run_numerical_checks

            num = run_numerical_checks()
            summary["criteria"].append({"criterion": "8_numerical_properties",
                                        "status": "pass" if all(c["pass"] for c in num) else "fail",
                                        "checks": num})
    summary["all_passed"] = all(v["status"] == "pass" for v in summary["criteria"])
    return summary


def default_output_dir() -> str:
    return os.environ.get("GEOFORMER_OUTPUT_DIR", "geoformer_out")


__all__ = ["ExperimentConfig", "run_experiment", "run_cell", "evaluate_criteria", "plan_cells", "set_dotted",
           "parse_value", "ensure_datasets", "EXPERIMENTS", "StDataset"]
