import csv
import json
import subprocess
import sys

import pytest

from sbsvie import __version__
from sbsvie.cli import EXIT_ASSUMPTION, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main, parse_sweep

SMALL = ["--paths", "300", "--grid", "8"]


def _run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def test_list(capsys):
    assert main(["list"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 8 and out[0].startswith("zero_coefficients\t")
    assert main(["list", "--tag", "deterministic"]) == EXIT_OK
    assert capsys.readouterr().out.split("\t")[0] == "mittag_leffler_lambda0.1"


def test_solve_writes_artifacts(tmp_path):
    out = tmp_path / "fresh" / "nested"
    assert main(["solve", "--grid", "16", "--out", str(out)]) == EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert names == ["audit.json", "solution.csv", "trace.csv", "trace.json"]
    audit = json.loads((out / "audit.json").read_text())
    assert audit["status"] == "converged" and audit["workers"] == 1
    assert audit["oracle_error"] < 5e-3
    assert audit["constants"]["steps"] == 93 and audit["windows"] == 17
    assert audit["iterate_bounds"]["violations"] == []
    rows = list(csv.DictReader((out / "solution.csv").open()))
    assert len(rows) == 17 and float(rows[-1]["x_mean_0"]) == 1.0
    header = (out / "trace.csv").read_text().splitlines()[0]
    assert header == "window,j,m_norm_diff,sup_x_sq,y_mass,inner_iterations,residual"


def test_solve_is_byte_reproducible(tmp_path):
    argv = ["solve", "--scenario", "lipschitz_random", *SMALL, "--seed", "3", "--export-paths"]
    names = ("audit.json", "solution.csv", "trace.csv", "trace.json", "paths.csv")
    assert _run(tmp_path, *argv) == EXIT_OK
    first = {name: (tmp_path / name).read_bytes() for name in names}
    assert _run(tmp_path, *argv) == EXIT_OK
    for name in names:
        assert (tmp_path / name).read_bytes() == first[name], name


@pytest.mark.parametrize("scenario", ["h11_violation", "h3_violation"])
def test_intended_failures_exit_with_assumption_code(tmp_path, scenario, capsys):
    assert _run(tmp_path, "solve", "--scenario", scenario, *SMALL) == EXIT_ASSUMPTION
    audit = json.loads((tmp_path / "audit.json").read_text())
    assert audit["status"] == "assumption_failure"
    assert not (tmp_path / "solution.csv").exists()
    if scenario == "h3_violation":
        witness = audit["assumptions"]["h3"]["witness"]
        assert witness["lhs"] > witness["rhs"]
    assert "assumption check failed" in capsys.readouterr().err


def test_not_converged_exits_two(tmp_path):
    argv = ["solve", "--scenario", "lipschitz_random", *SMALL, "--max-iter", "1", "--stepping", "off"]
    assert _run(tmp_path, *argv) == EXIT_DIVERGED
    assert json.loads((tmp_path / "audit.json").read_text())["status"] == "not_converged"


def test_audit_command(tmp_path):
    assert _run(tmp_path, "audit", *SMALL, "--phi-terms", "4") == EXIT_OK
    payload = json.loads((tmp_path / "audit.json").read_text())
    assert payload["constants"]["C2"] == pytest.approx(292.0)
    assert len(payload["phi"]["phi_at_T0"]) == 4
    assert _run(tmp_path, "audit", "--scenario", "h11_violation", *SMALL) == EXIT_ASSUMPTION


def test_study_and_paths(tmp_path):
    assert _run(tmp_path, "study", "--sweep", "N=8,16", "--paths", "200") == EXIT_OK
    rows = list(csv.reader((tmp_path / "study.csv").open()))
    assert rows[0] == ["N", "error", "residual", "iterations"]
    assert [r[0] for r in rows[1:]] == ["8", "16"]
    assert _run(tmp_path, "study", "--sweep", "M=100", "--grid", "4", "--timing") == EXIT_OK
    assert list(csv.reader((tmp_path / "study.csv").open()))[0][-1] == "runtime_s"
    assert _run(tmp_path, "paths", "--scenario", "martingale_xi", *SMALL) == EXIT_OK
    assert (tmp_path / "paths.csv").exists()


def test_parse_sweep():
    assert parse_sweep("alpha=0.6, 0.7") == ("alpha", [0.6, 0.7])
    assert parse_sweep("M=1e3") == ("M", [1000])


@pytest.mark.parametrize("argv", [
    ["solve", "--bogus"],
    ["solve", "--scenario", "nope"],
    ["study", "--sweep", "N="],
    ["study", "--sweep", "T=1,2"],
    ["solve", "--config", "/nonexistent/run.cfg"],
    ["solve", "--alpha", "0.4"],
    [],
])
def test_usage_errors(argv, tmp_path):
    try:
        code = main([*argv, "--out", str(tmp_path)] if argv else argv)
    except SystemExit as exc:
        code = exc.code
    assert code == EXIT_USAGE


def test_entry_point_version():
    proc = subprocess.run([sys.executable, "-m", "sbsvie.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == __version__
