import json

import pytest

from inverse_ecg.cli import EXIT_CELL, EXIT_CONFIG, EXIT_OK, main


@pytest.fixture
def config_file(tmp_path):
    raw = {
        "domain": {"kind": "grid2d", "nx": 6, "ny": 6, "h": 1.0},
        "sim": {"dt": 0.01, "steps": 40, "record_every": 2},
        "stimulus": {"corner_size": 2},
        "transfer": {"sensors": 9, "standoff": 3.0},
        "noise_levels": [0.01],
        "methods": [{"kind": "tikh0", "options": {"lam": 0.05}},
                    {"kind": "stre", "options": {"lam_s": 0.1, "lam_t": 0.1, "window": 4,
                                                 "max_iter": 1, "tol": 1e-30}},
                    {"kind": "pdl", "options": {"epochs": 3, "batch_times": 4,
                                                "batch_colloc": 16, "batch_boundary": 8,
                                                "N_f": 100, "N_bc": 20, "w": "tune",
                                                "tune": {"max_iter": 2}}}],
        "trials": 1,
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def test_run_success(config_file, tmp_path, capsys):
    assert main(["run", "--config", str(config_file), "--methods", "tikh0"]) == EXIT_OK
    assert "tikh0" in capsys.readouterr().out
    assert (tmp_path / "out" / "summary.csv").exists()


def test_run_with_failing_cell(config_file):
    assert main(["run", "--config", str(config_file), "--methods", "tikh0", "stre"]) == EXIT_CELL


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"trials": -1}))
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_method_subset(config_file):
    assert main(["run", "--config", str(config_file), "--methods", "nope"]) == EXIT_CONFIG


def test_worker_flag_overrides_environment(config_file, monkeypatch):
    monkeypatch.setenv("INVERSE_ECG_WORKERS", "many")
    args = ["run", "--config", str(config_file), "--methods", "tikh0"]
    assert main(args) == EXIT_CONFIG
    assert main(args + ["--workers", "1"]) == EXIT_OK


def test_make_data_and_simulate(config_file, tmp_path):
    assert main(["simulate", "--config", str(config_file)]) == EXIT_OK
    assert (tmp_path / "out" / "truth").exists()
    assert main(["make-data", "--config", str(config_file), "--trials", "2"]) == EXIT_OK
    data = tmp_path / "out" / "data"
    assert (data / "transfer.csv.gz").exists()
    assert len(list(data.glob("bspm_*.csv"))) == 2


def test_solve_then_evaluate(config_file, tmp_path, capsys):
    assert main(["solve", "--config", str(config_file), "--method", "tikh0",
                 "--sigma", "0.01"]) == EXIT_OK
    solved = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    cell = tmp_path / "out" / "solve" / "tikh0_sigma0.01_trial0"
    main(["simulate", "--config", str(config_file)])
    capsys.readouterr()
    out = tmp_path / "metrics.json"
    assert main(["evaluate", "--estimate", str(cell / "estimate"),
                 "--truth", str(tmp_path / "out" / "truth"), "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["RE"] == pytest.approx(solved["RE"], rel=1e-12)


def test_tune_writes_trace(config_file, tmp_path, capsys):
    assert main(["tune", "--config", str(config_file), "--method", "pdl",
                 "--sigma", "0.01"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert doc["iterations"] == 2
    lines = (tmp_path / "out" / "pdl_tune_trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,w,L_hb,L_ph,L_total,m,converged_flag" and len(lines) == 3


def test_tune_rejects_baseline(config_file):
    assert main(["tune", "--config", str(config_file), "--method", "tikh0",
                 "--sigma", "0.01"]) == EXIT_CONFIG


def test_report_rebuilds_summary(config_file, tmp_path, capsys):
    main(["run", "--config", str(config_file), "--methods", "tikh0"])
    first = (tmp_path / "out" / "summary.csv").read_bytes()
    (tmp_path / "out" / "summary.csv").unlink()
    assert main(["report", "--dir", str(tmp_path / "out")]) == EXIT_OK
    assert (tmp_path / "out" / "summary.csv").read_bytes() == first


def test_report_without_results(tmp_path):
    assert main(["report", "--dir", str(tmp_path)]) == EXIT_CONFIG
