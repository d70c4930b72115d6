"""
Command-line entry point: ``geoformer {simulate,train,evaluate,experiment,validate}``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 an acceptance
criterion did not pass (``experiment`` only).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .baselines import KrigingOracle, historical_average
from .experiments import (
    EXPERIMENTS,
    ExperimentConfig,
    cell_dir,
    dataset_dir,
    default_output_dir,
    ensure_datasets,
    horizon_windows,
    parse_value,
    run_experiment,
    set_dotted,
)
from .kernels import SensorGrid
from .model import GeoTransformer, ModelConfig, Variant
from .simulate import load_dataset, save_dataset, simulate, split
from .training import TrainConfig, train

log = logging.getLogger("geoformer")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3


class InputError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _merge(base: dict, over: dict, path=""):
    for k, v in over.items():
        if k not in base:
            raise InputError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v


def resolve_config(args) -> ExperimentConfig:
    """Defaults, then the JSON file, then desk scale, then ``--set`` and the other flags."""
    d = ExperimentConfig().to_dict()
    explicit_out = False
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise InputError("config file must hold a JSON object")
        explicit_out = "output_dir" in user
        _merge(d, user)
    desk = bool(args.desk_scale or d.get("desk_scale"))
    d["desk_scale"] = desk
    d = ExperimentConfig.from_dict(d, apply_desk_scale=desk).to_dict()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        set_dotted(d, key.strip(), parse_value(value))
        explicit_out |= key.strip() == "output_dir"
    if args.seed is not None:
        for section in ("sim", "model", "train"):
            d[section]["seed"] = args.seed
    if getattr(args, "output_dir", None):
        d["output_dir"] = args.output_dir
    elif not explicit_out:
        d["output_dir"] = default_output_dir()
    if getattr(args, "jobs", None):
        d["jobs"] = args.jobs
    if getattr(args, "emit_svg", False):
        d["emit_svg"] = True
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    for ds in simulate(cfg.sim, keep_latent=False):
        print(save_dataset(ds, dataset_dir(out, ds.replicate_id)))
    return EXIT_OK


def _dataset(cfg: ExperimentConfig, rep: int):
    if not 0 <= rep < cfg.sim.n_replicates:
        raise InputError(f"replicate {rep} outside 0..{cfg.sim.n_replicates - 1}")
    ensure_datasets(cfg)
    return load_dataset(dataset_dir(Path(cfg.output_dir), rep))


def cmd_train(cfg: ExperimentConfig, args) -> int:
    ds = _dataset(cfg, args.replicate)
    t_train = args.t_train or cfg.t_train
    mc = ModelConfig.from_dict(cfg.model.to_dict())
    mc.variant = Variant(args.variant)
    tr, _ = split(ds, t_train, cfg.t_test, mc.lookback)
    model = GeoTransformer(mc, ds.grid)
    rho0 = model.rho
    model, tlog = train(model, tr, TrainConfig.from_dict(cfg.train.to_dict()))
    mdir = cell_dir(Path(cfg.output_dir), args.replicate, t_train) / args.variant
    mdir.mkdir(parents=True, exist_ok=True)
    tlog.to_csv(mdir / "trainlog.csv", include_kernel=model.is_geo)
    ck = model.save(mdir / "checkpoint.json", step=len(tlog),
                    extra={"rho_init": rho0, "best_epoch": tlog.best_epoch, "diverged": tlog.diverged,
                           "replicate": args.replicate, "t_train": t_train})
    if tlog.diverged:
        log.warning("%s", tlog.message)
    print(ck)
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    if bool(args.checkpoint) == bool(args.baseline):
        raise InputError("give exactly one of --checkpoint or --baseline")
    if args.horizon < 1:
        raise InputError("--horizon must be >= 1")
    ds = _dataset(cfg, args.replicate)
    L = cfg.model.lookback
    x, y, tidx = horizon_windows(ds.observations, cfg.t_test, L, args.horizon)
    if args.checkpoint:
        model = GeoTransformer.load(args.checkpoint)
        if model.grid.n != ds.grid.n:
            raise InputError(f"checkpoint has {model.grid.n} sites, dataset has {ds.grid.n}")
        L = model.config.lookback
        x, y, tidx = horizon_windows(ds.observations, cfg.t_test, L, args.horizon)
        rng = np.random.default_rng(model.config.seed + 1)
        _, var = model.forecast_distribution(x, args.horizon, cfg.n_mc, rng)
        pred = model.forecast(x, args.horizon)
        name = model.config.variant.value
        dest = Path(args.out) if args.out else Path(args.checkpoint).parent
    elif args.baseline == "kriging":
        oracle = KrigingOracle.from_config(ds.grid, ds.config, cfg.kriging_depth)
        pred, var = oracle.predict(x, args.horizon)
        name = "kriging"
    else:
        t_train = args.t_train or cfg.t_train
        pred, var = np.broadcast_to(historical_average(ds.observations[:t_train]), y.shape), None
        name = "historical_average"
    if not args.checkpoint:
        dest = Path(args.out) if args.out else Path(cfg.output_dir) / "eval" / f"rep{args.replicate}" / name
    dest.mkdir(parents=True, exist_ok=True)
    fr = M.ForecastResult(name, args.horizon, pred, y, var, tidx)
    fr.to_csv(dest / f"forecast_h{args.horizon}.csv")
    mets = M.summarize(fr, M.SpatialWeights.inverse_distance(ds.grid.dist_matrix))
    path = dest / f"metrics_h{args.horizon}.json"
    path.write_text(json.dumps(mets, indent=2) + "\n")
    print(path)
    return EXIT_OK


def cmd_experiment(cfg: ExperimentConfig, args) -> int:
    if args.name:
        cfg.experiment = args.name
        cfg.validate()
    summary = run_experiment(cfg)
    for v in summary["criteria"]:
        print(f"{v['criterion']}: {v['status']}")
    for f in summary.get("failures", []):
        print(f"cell rep={f['rep']} t_train={f['t_train']} failed: {f['error']}", file=sys.stderr)
    print(Path(cfg.output_dir) / "summary.json")
    return EXIT_OK if summary["all_passed"] else EXIT_ACCEPTANCE


def cmd_validate(cfg: ExperimentConfig, args) -> int:
    results = [M.ForecastResult.from_csv(p) for p in args.files]
    weights = None
    if args.locations:
        grid = SensorGrid(np.loadtxt(args.locations, delimiter=",", skiprows=1, ndmin=2))
        weights = M.SpatialWeights.inverse_distance(grid.dist_matrix)
    report = {"forecasts": []}
    for path, fr in zip(args.files, results):
        if weights is not None and weights.w.shape[0] != fr.targets.shape[1]:
            raise InputError(f"{path}: {fr.targets.shape[1]} sites but {weights.w.shape[0]} locations")
        report["forecasts"].append({"file": str(path), **M.summarize(fr, weights)})
    if len(results) == 2:
        a, b = results
        if a.targets.shape != b.targets.shape or not np.array_equal(a.targets, b.targets):
            raise InputError("the two forecasts must share their targets for a Diebold-Mariano comparison")
        dm = M.diebold_mariano(a.residuals, b.residuals, horizon=max(a.horizon, b.horizon))
        report["diebold_mariano"] = {"first": a.model_name, "second": b.model_name, "statistic": dm.statistic,
                                     "p_two_sided": dm.p_value, "p_one_sided": dm.p_one_sided, "lag": dm.lag,
                                     "orientation": "positive favours the second file"}
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment configuration")
    common.add_argument("--set", action="append", metavar="K=V", help="override a config leaf by dotted path")
    common.add_argument("--seed", type=int, help="seed for simulation, initialisation and training")
    common.add_argument("--desk-scale", action="store_true", help="10x10 grid, T=600, 5 replicates")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    common.add_argument("--emit-svg", action="store_true", help="also render figure CSVs as SVG")
    common.add_argument("--output-dir", help="defaults to $GEOFORMER_OUTPUT_DIR or ./geoformer_out")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="geoformer", description="Geostatistical attention for spatio-temporal forecasting.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="write replicate datasets")
    t = sub.add_parser("train", parents=[common], help="train one variant on one replicate")
    t.add_argument("--variant", choices=[v.value for v in Variant], default="geo")
    t.add_argument("--replicate", type=int, default=0)
    t.add_argument("--t-train", type=int)
    e = sub.add_parser("evaluate", parents=[common], help="forecast the test block and score it")
    e.add_argument("--checkpoint", help="checkpoint.json written by 'train'")
    e.add_argument("--baseline", choices=["kriging", "historical_average"])
    e.add_argument("--horizon", type=int, default=1)
    e.add_argument("--replicate", type=int, default=0)
    e.add_argument("--t-train", type=int, help="training length for the historical average")
    e.add_argument("--out", help="directory for forecast and metrics files")
    x = sub.add_parser("experiment", parents=[common], help="run an experiment and its acceptance checks")
    x.add_argument("name", nargs="?", choices=EXPERIMENTS)
    v = sub.add_parser("validate", parents=[common], help="score ForecastResult CSV files")
    v.add_argument("files", nargs="+")
    v.add_argument("--locations", help="locations.csv for Moran's I")
    v.add_argument("--out", help="write the JSON report here")
    return p


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate, "experiment": cmd_experiment,
            "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"geoformer: invalid input: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"geoformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
