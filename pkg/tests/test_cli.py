import json
import subprocess
import sys
from pathlib import Path

import pytest

from reiterhom import cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_nf_check_power(capsys):
    code, out, _ = run(["nf-check", "--family", "scaled_power", "--p", "2"], capsys)
    assert code == 0
    assert "indices: (2, 2)" in out
    assert "alpha 4" in out


def test_missing_config_is_usage_error(tmp_path, capsys):
    code, _, err = run(["study", "--config", str(tmp_path / "nope.json")], capsys)
    assert code == 2 and "not found" in err


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"], capsys)[0] == 2


def test_solve_cell_inner(tmp_path, capsys):
    out_csv, manifest = tmp_path / "w.csv", tmp_path / "m.json"
    code, out, _ = run(["solve-cell", "--level", "inner", "--config", str(CONFIGS / "linear_sin.json"),
                        "--xi", "1", "--out", str(out_csv), "--manifest", str(manifest)], capsys)
    assert code == 0
    flux = float(out.split("averaged flux:")[1].split()[0])
    assert flux == pytest.approx(3**0.5, abs=1e-3)
    assert out_csv.exists()
    assert json.loads(manifest.read_text())["level"] == "inner"


def test_convergence_failure_exit_code(tmp_path, capsys):
    cfg = {"flux": {"family": "phi_laplacian", "nf": {"family": "scaled_power", "p": 4},
                    "c_y": 1.0, "c_z": "piecewise:[1,40]"},
           "grids": {"Y": 32, "Z": 32}, "solver": {"max_iter": 1}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    code, _, err = run(["solve-cell", "--level", "inner", "--config", str(path), "--xi", "1"], capsys)
    assert code == 3 and "convergence" in err


def test_strict_verify_flux(tmp_path, capsys, monkeypatch):
    path = tmp_path / "f.json"
    path.write_text(json.dumps({"flux": {"family": "identity"}}))
    assert run(["verify-flux", "--config", str(path), "--n-points", "20"], capsys)[0] == 0

    class Failing:
        passed = False

        def summary_lines(self):
            return ["H4 FAIL"]

    monkeypatch.setattr(cli, "verify_hypotheses", lambda a, s: Failing())
    assert run(["verify-flux", "--config", str(path), "--strict"], capsys)[0] == 4
    assert run(["verify-flux", "--config", str(path)], capsys)[0] == 0


def test_tabulate_then_macro(tmp_path, capsys):
    cfg = {"flux": {"family": "linear_separable", "c_y": "2+sin(2*pi*y1)", "c_z": "2+sin(2*pi*z1)"},
           "grids": {"omega": 32, "Y": 32, "Z": 32}, "table": {"r": [-1, 1, 2], "xi_box": [-1, 1], "xi_n": 5}}
    path = tmp_path / "t.json"
    path.write_text(json.dumps(cfg))
    table = tmp_path / "q.json"
    assert run(["tabulate", "--config", str(path), "--out", str(table)], capsys)[0] == 0
    code, out, _ = run(["macro", "--config", str(path), "--table", str(table)], capsys)
    assert code == 0
    # -3 u'' = 1 with zero boundary values peaks at 1/24
    peak = float(out.split("max|u0|")[1])
    assert peak == pytest.approx(1 / 24, abs=1e-4)


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "reiterhom.cli", "nf-check", "--family", "power", "--p", "3"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "indices: (3, 3)" in proc.stdout
