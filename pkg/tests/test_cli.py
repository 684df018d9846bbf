import csv
import json
import subprocess
import sys

import pytest

from geoprofile.cli import bundled_dataset_path, main

FAST = ["--fix-kappa", "0.5", "--no-transform", "--points-main", "20", "--points-fixed", "10"]


def test_fit_on_bundled_data(tmp_path, capsys):
    assert main(["fit", "--out", str(tmp_path)]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["convergence"] in ("converged", "boundary")
    assert set(fit["beta"]) == {"(Intercept)", "elev"}
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["command"] == "fit" and run["outputs"] == ["fit.json", "fit_summary.txt"]
    assert "numpy" in run["versions"] and run["data"] == str(bundled_dataset_path())
    assert "log-likelihood at maximum" in capsys.readouterr().out


def test_fit_fixed_shape(tmp_path):
    assert main(["fit", "--fix-kappa", "0.5", "--out", str(tmp_path)]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["natural"]["kappa"] == 0.5 and fit["fixKappa"] == 0.5
    assert "kappaTilde" not in fit["hessianNames"]


def test_missing_data_file_exits_2(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_non_positive_response_exits_2(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,response\n0,0,1\n1,0,-2\n0,1,3\n1,1,2\n")
    assert main(["fit", "--data", str(bad), "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("argv", [
    ["profile", "--params", "shape,bogus"],
    ["profile", "--pairs", "range,bogus"],
    ["fit", "--mode", "XML"],
    ["frobnicate"],
])
def test_usage_errors_exit_4(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == 4


def test_profile_with_pairs_is_reproducible(tmp_path):
    args = ["profile", *FAST, "--params", "combinedRange,anisoRatio,nugget",
            "--pairs", "anisoRatio,anisoAngleRadians"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    with open(a / "surface_anisoRatio_anisoAngleRadians.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["anisoRatio", "anisoAngleRadians", "pll"]
    assert len(rows) == 101 * 101 + 1
    table = {r["name"]: r for r in csv.DictReader(open(a / "ci_table.csv"))}
    assert {"(Intercept)", "elev", "sdSpatial", "combinedRange", "anisoRatio", "nugget"} <= set(table)
    assert "shape" not in table
    run = json.loads((a / "run.json").read_text())
    assert "contours_anisoRatio_anisoAngleRadians.csv" in run["outputs"]
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "run.json")
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "run.json")
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_simulate_writes_replicates(tmp_path):
    assert main(["simulate", "--replicates", "3", "--n", "25", "--seed", "4", "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.glob("replicate_*.csv"))
    assert names == ["replicate_000.csv", "replicate_001.csv", "replicate_002.csv"]
    lines = (tmp_path / "replicate_000.csv").read_text().splitlines()
    assert len(lines) == 26
    design = json.loads((tmp_path / "design.json").read_text())
    assert design["seed"] == 4 and design["replicates"] == 3


def test_coverage_smoke(tmp_path):
    argv = ["coverage", "--replicates", "5", "--n", "30", "--inject-failures", "2",
            "--points-main", "20", "--out", str(tmp_path)]
    assert main(argv) == 0
    report = json.loads((tmp_path / "coverage.json").read_text())
    assert report["failures"] == [2]
    rows = list(csv.DictReader(open(tmp_path / "coverage.csv")))
    assert rows[0]["parameter"] == "(Intercept)" and rows[0]["failures"] == "1"


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "geoprofile.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip().startswith("geoprofile")
