import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from geoformer.cli import main
from geoformer.experiments import ExperimentConfig, evaluate_criteria, plan_cells
from geoformer.metrics import ForecastResult

TINY = {
    "sim": {"grid_side": 4, "t_steps": 120, "n_replicates": 3},
    "model": {"d_model": 8, "n_heads": 2, "n_layers": 1, "lookback": 4},
    "train": {"max_epochs": 2, "batch_size": 16},
    "t_train": 60, "t_train_sizes": [30, 60], "t_test": 30, "horizons": [1, 2], "n_mc": 5,
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return ["--config", str(path), "--output-dir", str(tmp_path / "out")]


def test_simulate_is_byte_reproducible(tmp_path, tiny, capsys):
    assert main(["simulate", *tiny]) == 0
    first = (tmp_path / "out" / "data" / "rep2" / "observations.csv").read_bytes()
    assert main(["simulate", *tiny]) == 0
    assert (tmp_path / "out" / "data" / "rep2" / "observations.csv").read_bytes() == first
    assert len(capsys.readouterr().out.split()) == 6


def test_simulate_desk_scale_writes_five_replicates(tmp_path):
    assert main(["simulate", "--desk-scale", "--output-dir", str(tmp_path)]) == 0
    reps = sorted(p.name for p in (tmp_path / "data").iterdir())
    assert reps == [f"rep{r}" for r in range(5)]
    for r in reps:
        names = {p.name for p in (tmp_path / "data" / r).iterdir()}
        assert {"observations.csv", "meta.json", "locations.csv"} <= names
    obs = np.loadtxt(tmp_path / "data" / "rep0" / "observations.csv", delimiter=",", skiprows=1)
    assert obs.shape == (600, 100)


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    code = main(["simulate", "--set", "sim.phi_t=1.2", "--output-dir", str(tmp_path)])
    assert code == 1
    assert "phi_t" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["simulate", "--set", "sim.nope=1"], ["simulate", "--set", "novalue"],
                                  ["simulate", "--config", "/does/not/exist.json"], ["frobnicate"],
                                  ["evaluate", "--horizon", "1"]])
def test_bad_arguments_exit_one(tmp_path, argv):
    with_out = argv + ["--output-dir", str(tmp_path)] if argv[0] != "frobnicate" else argv
    try:
        code = main(with_out)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_train_evaluate_validate_roundtrip(tmp_path, tiny, capsys):
    assert main(["train", *tiny, "--variant", "geo", "--replicate", "1"]) == 0
    ck = capsys.readouterr().out.strip().splitlines()[-1]
    assert ck.endswith("checkpoint.json") and "rep1" in ck and "ttrain60" in ck
    manifest = json.loads(open(ck).read())
    assert manifest["replicate"] == 1

    assert main(["evaluate", *tiny, "--checkpoint", ck, "--replicate", "1", "--horizon", "2"]) == 0
    mpath = capsys.readouterr().out.strip().splitlines()[-1]
    mets = json.loads(open(mpath).read())
    assert {"rmse", "mae", "crps", "morans_i"} <= set(mets)
    geo = ForecastResult.from_csv(mpath.replace("metrics_h2.json", "forecast_h2.csv"))
    assert geo.horizon == 2 and geo.targets.shape == (30, 16)

    kdir = tmp_path / "krig"
    assert main(["evaluate", *tiny, "--baseline", "kriging", "--replicate", "1", "--horizon", "2",
                 "--out", str(kdir)]) == 0
    capsys.readouterr()
    krig = ForecastResult.from_csv(kdir / "forecast_h2.csv")
    assert_array_equal(krig.targets, geo.targets)

    locs = tmp_path / "out" / "data" / "rep1" / "locations.csv"
    report_path = tmp_path / "report.json"
    assert main(["validate", str(kdir / "forecast_h2.csv"), mpath.replace("metrics_h2.json", "forecast_h2.csv"),
                 "--locations", str(locs), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert len(report["forecasts"]) == 2
    assert report["diebold_mariano"]["lag"] == 1
    assert "morans_i" in report["forecasts"][0]


def test_evaluate_historical_average_has_no_crps(tmp_path, tiny, capsys):
    assert main(["evaluate", *tiny, "--baseline", "historical_average"]) == 0
    mets = json.loads(open(capsys.readouterr().out.strip()).read())
    assert mets["crps"] is None and mets["rmse"] > 0


def test_seed_flag_sets_every_stream(tmp_path, tiny):
    from geoformer.cli import build_parser, resolve_config

    cfg = resolve_config(build_parser().parse_args(["simulate", *tiny, "--seed", "11"]))
    assert cfg.sim.seed == cfg.model.seed == cfg.train.seed == 11
    assert cfg.sim.grid_side == 4


def test_output_dir_from_environment(tmp_path, monkeypatch):
    from geoformer.cli import build_parser, resolve_config

    monkeypatch.setenv("GEOFORMER_OUTPUT_DIR", str(tmp_path / "env"))
    cfg = resolve_config(build_parser().parse_args(["simulate"]))
    assert cfg.output_dir == str(tmp_path / "env")


def test_desk_scale_config():
    cfg = ExperimentConfig(desk_scale=True)
    assert (cfg.sim.grid_side, cfg.sim.t_steps, cfg.sim.n_replicates) == (10, 600, 5)
    assert cfg.train.early_stopping == 20
    # round trip does not shrink twice or drop the flag
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_plan_covers_all_sizes():
    cfg = ExperimentConfig.from_dict({**TINY, "sim": dict(TINY["sim"]), "model": dict(TINY["model"]),
                                      "train": dict(TINY["train"])})
    cells = plan_cells(cfg)
    assert {(r, t) for r, t, _ in cells} == {(r, t) for r in range(3) for t in (30, 60)}


def test_experiment_end_to_end(tmp_path, tiny, capsys):
    code = main(["experiment", "full_table", *tiny, "--emit-svg"])
    lines = capsys.readouterr().out.strip().splitlines()
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert code == (0 if summary["all_passed"] else 3)
    names = [v["criterion"] for v in summary["criteria"]]
    assert len(names) == 8 and names[-1] == "8_numerical_properties"
    assert all(f"{n}: " in "\n".join(lines) for n in names)
    assert summary["failures"] == []
    assert {r["model"] for r in summary["table"]} == {"kriging", "geo", "vanilla", "historical_average"}
    for name in ("rho_trajectory", "sample_efficiency", "horizon_decay", "table_full"):
        assert (out / "figures" / f"{name}.csv").exists()
        assert (out / "figures" / f"{name}.svg").exists() or name == "table_full"
    assert (out / "runs" / "rep0" / "ttrain60" / "geo" / "attention").is_dir()
    # verdicts are a pure function of the files on disk
    again = evaluate_criteria(out, numerical=False)
    assert [v["status"] for v in again["criteria"]] == [v["status"] for v in summary["criteria"][:-1]]
