import json

import numpy as np
import pytest

from esfem_ocp.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main, parse_levels, ConfigError
from esfem_ocp.evolution import read_dg_csv
from esfem_ocp.geometry import read_off


def test_parse_levels():
    assert parse_levels("2..5") == [2, 3, 4, 5]
    for bad in ("5..2", "x", "1-3"):
        with pytest.raises(ConfigError):
            parse_levels(bad)


def test_mesh_info(capsys, tmp_path):
    assert main(["mesh-info", "--level", "0", "--out", str(tmp_path)]) == EXIT_OK
    row = capsys.readouterr().out.splitlines()[1].split(",")
    assert row[:5] == ["0", "8", "18", "12", "2"]
    v, t = read_off(tmp_path / "mesh_R0.off")
    assert v.shape == (8, 3) and t.shape == (12, 3)
    assert "level = 0" in (tmp_path / "run_config.txt").read_text()


def test_state_solve_decays(capsys, tmp_path):
    code = main(["state-solve", "--level", "2", "--N", "20", "--init", "harmonic-z", "--flow", "static", "--out", str(tmp_path)])
    assert code == EXIT_OK
    prof = np.loadtxt(tmp_path / "profile.csv", delimiter=",", skiprows=1)
    assert np.all(np.diff(prof[:, 2]) < 0)
    header, slabs = read_dg_csv(tmp_path / "state.csv")
    assert slabs.shape == (20, 26)
    assert len(list((tmp_path / "snapshots").glob("*.off"))) == 21


def test_state_solve_from_file(tmp_path):
    init = tmp_path / "y0.txt"
    np.savetxt(init, np.ones(14))
    assert main(["state-solve", "--level", "1", "--N", "4", "--init", "file", "--init-file", str(init)]) == EXIT_OK
    np.savetxt(init, np.ones(3))
    assert main(["state-solve", "--level", "1", "--N", "4", "--init", "file", "--init-file", str(init)]) == EXIT_CONFIG


def test_solve_distributed(capsys, tmp_path):
    assert main(["solve", "pd", "--level", "2", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("iterations,residual")
    assert out[1].split(",")[3] == "True"
    recs = [json.loads(line) for line in (tmp_path / "report.jsonl").read_text().splitlines()]
    assert recs[-1]["residual"] <= 1e-9
    assert (tmp_path / "control.csv").exists()


def test_solve_terminal(capsys):
    assert main(["solve", "pt", "--level", "1"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[1].split(",")[3] == "True"


def test_convergence_from_config(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# study\nexample = 1\nlevels = 0..2\n")
    assert main(["convergence", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[3].split(",")[6] != "nan"


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "pd", "--alpha", "0"],
        ["solve", "pd", "--lo", "1", "--hi", "0"],
        ["convergence", "--levels", "0..2"],
        ["convergence", "--example", "1"],
        ["solve", "pt", "--example", "1"],
        ["state-solve", "--init", "file"],
        ["mesh-info", "--sample", "2"],
        ["bogus"],
    ],
)
def test_configuration_errors(argv, capsys):
    assert main(argv) == EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    assert main(["mesh-info", "--config", str(cfg)]) == EXIT_CONFIG


def test_numerical_failure_exit_code():
    # the Newton iteration cannot reach a zero tolerance
    assert main(["solve", "pd", "--level", "1", "--tol", "0", "--lo", "-0.1", "--hi", "0.1"]) == EXIT_NUMERIC
