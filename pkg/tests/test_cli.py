from __future__ import annotations

import csv
import json
from importlib import resources

import pytest

from jccopf import cli
from jccopf.pipeline import FIGURE_COLUMNS, ConfigError, RunConfig, run_pipeline

SMALL = {"ns": 400, "nm": 400, "train_days": 1, "test_days": 1, "seed": 11}


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tmp_path_factory.mktemp("cfg") / "c.json"
    cfg.write_text(json.dumps(SMALL))
    code = cli.main(["run", "--config", str(cfg), "--out", str(out)])
    return code, out


def test_run_writes_artifacts(small_run):
    code, out = small_run
    assert code == 0
    for name in ("bounds.json", "policies.json", "validation.csv", "summary.json", "classifiers.json",
                 *FIGURE_COLUMNS):
        assert (out / name).exists(), name
    for name, cols in FIGURE_COLUMNS.items():
        with open(out / name, newline="") as fh:
            assert next(csv.reader(fh)) == cols
    summary = json.loads((out / "summary.json").read_text())
    table = summary["table"]
    det, imp, boole = (table[m]["Total Objective Function Value"] for m in ("deterministic", "improved", "boole"))
    assert det <= imp <= boole
    assert set(summary["stage_seeds"]) >= {"estimate", "validate"}


def test_policies_match_validation_rows(small_run):
    _, out = small_run
    pols = json.loads((out / "policies.json").read_text())
    val = rows(out / "validation.csv")
    assert len(pols) == len(val) == 3 * 288
    assert {p["status"] for p in pols} == {"optimal"}


def test_zero_budget_report_is_boole(tmp_path, capsys):
    out = tmp_path / "r.json"
    code = cli.main(["jcc", "estimate", "--days", "1", "--t", "150", "--active", "31,32,33,34",
                     "--time-budget-ms", "0", "--ns", "500", "-o", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["K"] == 0 and len(doc["B"]) == 1 and doc["Pc"] == 0.0


def test_deterministic_without_uncertainty_never_violates():
    cfg = RunConfig(**{**SMALL, "modes": ("det",), "forecast_sd": 0.0})
    result = run_pipeline(cfg)
    assert result.exit_code == 0
    # binding rows sit on v_max up to round-off
    assert all(s.max_voltage["deterministic"] <= 1.05 + 1e-9 for s in result.steps)
    assert all(s.validations["deterministic"].joint in (0.0, 1.0) for s in result.steps)


def test_thread_count_does_not_change_results():
    one = run_pipeline(RunConfig(**{**SMALL, "test_days": 1, "ns": 200, "nm": 200}))
    three = run_pipeline(RunConfig(**{**SMALL, "test_days": 1, "ns": 200, "nm": 200, "threads": 3}))
    assert one.summary()["table"] == three.summary()["table"]


def test_infeasible_solve_exits_3(tmp_path):
    # below the no-solar voltage no curtailment can help
    (tmp_path / "c.json").write_text(json.dumps({**SMALL, "v_max": 0.9, "modes": ["det"]}))
    code = cli.main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")])
    assert code == 3


@pytest.mark.parametrize("doc, match", [
    ({"epsilon": 0.7}, "epsilon"),
    ({"v_max": -1}, "v_max"),
    ({"ns": 0}, "ns"),
    ({"bogus": 1}, "unknown keys"),
    ({"modes": ["robust"]}, "unknown mode"),
])
def test_config_errors(tmp_path, doc, match, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_file(path)
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert str(path) in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "none.json")]) == 2
    assert "none.json" in capsys.readouterr().err
    assert cli.main(["svc", "train", "--labels", str(tmp_path / "none.csv"), "-o", str(tmp_path / "c.json")]) == 2


def test_help_documents_figure_columns(capsys):
    with pytest.raises(SystemExit):
        cli.main(["run", "--help"])
    text = capsys.readouterr().out
    for name, cols in FIGURE_COLUMNS.items():
        assert f"{name}: {', '.join(cols)}" in text


def test_schema_matches_config():
    schema = json.loads(resources.files("jccopf").joinpath("data/schema.json").read_text())
    assert set(schema["properties"]) == set(RunConfig().to_dict())
    assert schema["x-figure-csv-columns"] == FIGURE_COLUMNS
    default = json.loads(resources.files("jccopf").joinpath("data/default_config.json").read_text())
    cfg = RunConfig.from_dict(default)
    assert (cfg.epsilon, cfg.v_max, cfg.ns, cfg.nm, cfg.weight_a) == (0.02, 1.05, 10_000, 10_000, 10.0)


@pytest.mark.filterwarnings("ignore:per-constraint budget")
def test_step_commands_chain(tmp_path):
    sc = tmp_path / "sc"
    args = ["--series", str(sc / "series.csv"), "--cov", str(sc / "covariance.json"), "--seed", "5"]
    assert cli.main(["scenario", "gen", "--days", "1", "--seed", "5", "-o", str(sc)]) == 0
    assert cli.main(["labels", "gen", *args, "-o", str(tmp_path / "l.csv")]) == 0
    assert cli.main(["svc", "train", "--labels", str(tmp_path / "l.csv"), "-o", str(tmp_path / "c.json")]) == 0
    step = [*args, "--t", "144"]
    assert cli.main(["jcc", "estimate", *step, "--classifiers", str(tmp_path / "c.json"), "--ns", "2000",
                     "-o", str(tmp_path / "r.json")]) == 0
    assert cli.main(["opf", "solve", *step, "--mode", "improved", "--report", str(tmp_path / "r.json"),
                     "-o", str(tmp_path / "p.json")]) == 0
    assert cli.main(["validate", *step, "--policy", str(tmp_path / "p.json"), "--nm", "2000",
                     "-o", str(tmp_path / "v.csv")]) == 0
    assert rows(tmp_path / "v.csv")[0]["mode"] == "improved"
    assert cli.main(["feeder", "build", "-o", str(tmp_path / "f.json")]) == 0


def test_report_prints_table(small_run, capsys):
    _, out = small_run
    assert cli.main(["report", str(out)]) == 0
    assert "boole" in capsys.readouterr().out
