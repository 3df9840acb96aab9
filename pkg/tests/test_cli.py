import json
import subprocess
import sys
from pathlib import Path

import pytest

from bslq.cli import main
from bslq.config import OUTPUT_ENV
from bslq.io import MANIFEST, read_csv

DEMOS = Path(__file__).resolve().parents[1] / "demos" / "problems"
EX1 = str(DEMOS / "example1.cfg")
FAST = ["--steps", "50", "--paths", "2000"]

SOLVE_FILES = {"phi.csv", "gamma.csv", "lambda_sweep.csv", "adjoint.csv", "coefficients.csv",
               "paths.csv", "value.csv"}


def _bodies(d: Path):
    return {f.name: "\n".join(l for l in f.read_text().splitlines() if not l.startswith("#"))
            for f in sorted(d.glob("*.csv"))}


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve")
    assert main(["solve", EX1, "--out", str(out)] + FAST) == 0
    return out


def test_solve_writes_artifacts(solved):
    assert SOLVE_FILES <= {f.name for f in solved.iterdir()}
    doc = json.loads((solved / MANIFEST).read_text())
    assert set(doc["files"]) == SOLVE_FILES
    assert doc["seed"] == 7 and doc["paths"] == 2000
    prov, cols, rows = read_csv(solved / "gamma.csv")
    assert {"problem_hash", "seed", "grid"} <= set(prov)
    assert "created" not in prov
    assert cols == ["t", "Gamma[0,0]", "gamma_min_eig", "n_gamma_min_sv"]
    assert len(rows) == 51
    _, cols, rows = read_csv(solved / "value.csv")
    assert cols == ["quantity", "value", "standard_error"]


def test_solve_is_reproducible(solved, tmp_path):
    assert main(["solve", EX1, "--out", str(tmp_path), "--timestamps"] + FAST) == 0
    assert _bodies(tmp_path) == _bodies(solved)
    prov, _, _ = read_csv(tmp_path / "phi.csv")
    assert "created" in prov


def test_verify_passes_and_records(tmp_path):
    assert main(["solve", EX1, "--out", str(tmp_path)] + FAST) == 0
    assert main(["verify", EX1, "--out", str(tmp_path), "--probes", "20"] + FAST) == 0
    _, cols, rows = read_csv(tmp_path / "verification.csv")
    assert cols == ["check", "statistic", "threshold", "status"]
    assert {r[3] for r in rows} == {"pass"}
    assert "verification.csv" in json.loads((tmp_path / MANIFEST).read_text())["files"]


def test_verify_detects_injected_offset(tmp_path):
    code = main(["verify", EX1, "--out", str(tmp_path), "--probes", "20", "--inject-offset", "0.3"] + FAST)
    assert code == 7
    _, _, rows = read_csv(tmp_path / "verification.csv")
    assert "fail" in {r[3] for r in rows}


def test_verify_rejects_corrupted_artifact(tmp_path):
    assert main(["solve", EX1, "--out", str(tmp_path)] + FAST) == 0
    f = tmp_path / "gamma.csv"
    f.write_text(f.read_text().replace("0.", "1.", 1) + "")
    lines = f.read_text().splitlines()
    lines[-1] = lines[-1][:-1] + ("1" if lines[-1][-1] != "1" else "2")
    f.write_text("\n".join(lines) + "\n")
    assert main(["verify", EX1, "--out", str(tmp_path)] + FAST) == 3


def test_bad_steps_is_config_error(tmp_path, capsys):
    assert main(["solve", EX1, "--out", str(tmp_path), "--steps", "0"]) == 2
    assert "bslq:" in capsys.readouterr().err


def test_missing_problem_file(tmp_path):
    assert main(["solve", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2


def test_h3_violation_exit_code(tmp_path):
    assert main(["solve", str(DEMOS / "h3_violation.cfg"), "--out", str(tmp_path)]) in (4, 5)


def test_sweep_reports_admissible_lambdas(tmp_path):
    assert main(["sweep-lambda", EX1, "--out", str(tmp_path), "--steps", "50"]) == 0
    _, cols, rows = read_csv(tmp_path / "lambda_sweep.csv")
    assert cols[:2] == ["lambda", "status"]
    assert len(rows) == 8


def test_oracle_zero_problem(tmp_path):
    assert main(["oracle", str(DEMOS / "zero.cfg"), "--out", str(tmp_path)]) == 0
    _, cols, rows = read_csv(tmp_path / "oracle.csv")
    assert [r[0] for r in rows] == [2.0, 3.0, 4.0]
    assert all(r[1] == 0.0 for r in rows)


def test_oracle_example(tmp_path):
    assert main(["oracle", EX1, "--out", str(tmp_path), "--steps", "100"]) == 0
    _, cols, rows = read_csv(tmp_path / "oracle.csv")
    gaps = [abs(r[cols.index("gap")]) for r in rows]
    assert gaps[0] > gaps[1] > gaps[2]


def test_oracle_overflow_exit_code(tmp_path):
    assert main(["oracle", str(DEMOS / "coupled2d.cfg"), "--out", str(tmp_path), "--tree-max", "6"]) == 2


def test_output_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env-out"))
    assert main(["sweep-lambda", EX1, "--steps", "20"]) == 0
    assert (tmp_path / "env-out" / "lambda_sweep.csv").exists()


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "bslq", "sweep-lambda", EX1, "--steps", "20",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
