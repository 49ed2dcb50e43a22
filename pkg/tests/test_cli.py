import csv
import json

import numpy as np
import pytest

from pushsum_gne import cli
from pushsum_gne.cli import EXIT_CONFIG, EXIT_INVALID, EXIT_OK, main
from pushsum_gne.game import make_quadratic_toy, quadratic_toy_solution
from pushsum_gne.metrics import SUMMARY_HEADER


def write_cfg(tmp_path, **fields):
    base = {"scenario": "electricity-market", "graph": "paper-fig1", "exponents": [0.8, 0.2, 0.2],
            "regime": "online-T1", "T": 256, "seed": 7, "runs": 2, "checkpoint_start": 6}
    base.update(fields)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(base))
    return path


def test_validate_preset_passes(capsys):
    assert main(["validate", "--preset", "paper-online"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out


def test_validate_rejects_bad_exponents(capsys):
    code = main(["validate", "--preset", "paper-online", "--set", "exponents=[0.5,0.3,0.2]"])
    assert code == EXIT_INVALID
    out = capsys.readouterr().out
    assert "a1 > 2*a2" in out or "2a2" in out or "a1" in out


def test_validate_reports_missing_self_loops(capsys):
    P = np.roll(np.eye(5), 1, axis=0).tolist()
    graph = {"n": 5, "window": 1, "slots": [{"matrix": P}]}
    code = main(["validate", "--preset", "paper-online", "--set", "graph=" + json.dumps(graph)])
    assert code == EXIT_INVALID
    assert "self-loop" in capsys.readouterr().out


def test_unknown_scenario_is_config_error(capsys):
    assert main(["validate", "--preset", "paper-online", "--set", "scenario=nowhere-market"]) == EXIT_CONFIG
    assert "scenario" in capsys.readouterr().err


def test_unknown_field_is_config_error(tmp_path, capsys):
    assert main(["validate", "--config", str(write_cfg(tmp_path, horizon=5))]) == EXIT_CONFIG
    assert "horizon" in capsys.readouterr().err


def test_parse_error_reports_line_and_column(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "T": 10,\n  "seed": ,\n}\n')
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    assert f"{path}:3:11" in capsys.readouterr().err


def test_overrides_dotted_keys():
    data = cli.apply_overrides(cli.PRESETS["paper-online"], ["scenario.N=3", "T=50"])
    assert data["scenario"]["N"] == 3 and data["T"] == 50
    assert cli.PRESETS["paper-online"]["T"] == 100_000


def test_run_seeds_stable_prefix():
    assert cli.run_seeds(3, 5)[:2] == cli.run_seeds(3, 2)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root)
    out = root / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return root, cfg, out


def test_run_writes_manifest_and_files(small_run):
    _, _, out = small_run
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["seeds"]) == 2
    assert set(man["constants"]) >= {"L", "M", "S", "L_sigma", "iota", "r_estimate"}
    paths = {e["path"] for e in man["outputs"]}
    assert {"config.json", "summary.csv", "run_000/log.npz", "run_001/timeseries.csv", "run_001/regret.csv"} <= paths
    for e in man["outputs"]:
        assert (out / e["path"]).stat().st_size > 0
    rows = list(csv.reader((out / "summary.csv").open()))
    assert rows[0] == SUMMARY_HEADER
    assert {r[0] for r in rows[1:]} == {"0", "1"}


def test_run_is_deterministic(small_run, tmp_path):
    _, cfg, out = small_run
    again = tmp_path / "again"
    assert main(["run", "--config", str(cfg), "--out", str(again), "--workers", "2"]) == EXIT_OK
    a = json.loads((out / "manifest.json").read_text())
    b = json.loads((again / "manifest.json").read_text())
    assert a["outputs_digest"] == b["outputs_digest"]
    assert a["seeds"] == b["seeds"]


def test_metrics_recomputes_summary(small_run):
    _, _, out = small_run
    before = (out / "summary.csv").read_text()
    (out / "summary.csv").unlink()
    assert main(["metrics", str(out)]) == EXIT_OK
    assert (out / "summary.csv").read_text() == before


def test_solve_comparators_from_log(small_run, tmp_path):
    _, cfg, out = small_run
    dest = tmp_path / "solve"
    assert main(["solve", "--config", str(cfg), "--log", str(out / "run_000" / "log.npz"), "--out", str(dest)]) == EXIT_OK
    rec = json.loads((dest / "comparator.json").read_text())
    assert rec["T"] == 256 and len(rec["players"]) == 5
    p0 = rec["players"][0]
    assert len(p0["intervals"]) == 256
    assert {"x_star", "objective", "feasible", "excluded_steps"} <= set(p0)


def test_solve_quadratic_toy_matches_closed_form(tmp_path):
    cfg = write_cfg(tmp_path, scenario={"template": "quadratic-toy", "N": 3, "seed": 2, "cap": 0.5},
                    regime="offline-T3", exponents=[0.75, 0.25, 0.25])
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    rec = json.loads((tmp_path / "o" / "vgne.json").read_text())
    x_cf, _ = quadratic_toy_solution(make_quadratic_toy(N=3, seed=2, cap=0.5))
    assert np.allclose(np.ravel(rec["x_star"]), x_cf, atol=1e-8)
    assert rec["closed_form"]["max_abs_diff"] <= 1e-8


def test_solve_market_residual(tmp_path):
    cfg = write_cfg(tmp_path, scenario={"template": "electricity-market", "time_varying": False},
                    regime="offline-T3", exponents=[0.75, 0.25, 0.25])
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    rec = json.loads((tmp_path / "o" / "vgne.json").read_text())
    assert rec["residuals"]["total"] <= 1e-8


def test_solve_time_varying_without_log_is_config_error(tmp_path):
    assert main(["solve", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    cfg = write_cfg(tmp_path, T=32, runs=1, checkpoint_start=3, outputs=["log"])
    assert main(["run", "--config", str(cfg)]) == EXIT_OK
    made = list((tmp_path / "root").glob("cfg-*/manifest.json"))
    assert len(made) == 1
