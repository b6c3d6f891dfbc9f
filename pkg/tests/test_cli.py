import json
import os
import shutil
import subprocess
import sys

import pytest

from phgeo.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, EXIT_USAGE, main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("sub", ["validate", "geodesic", "delta", "jacobi", "conjugate", "expansion", "index",
                                 "bonnet-myers", "cartan-hadamard", "paper-suite", "list-manifolds"])
def test_every_subcommand_has_help(capsys, sub):
    with pytest.raises(SystemExit) as exc:
        main([sub, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "--manifold" in out and "--json" in out


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["geodesic", "--bogus"])
    assert exc.value.code == EXIT_USAGE


def test_missing_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


def test_list_manifolds(capsys):
    code, out, _ = run(capsys, "list-manifolds", "--json")
    assert code == EXIT_OK
    names = [m["name"] for m in json.loads(out)["manifolds"]]
    assert {"heisenberg1", "heisenberg2", "sphere3"} <= set(names)


def test_validate_json(capsys):
    code, out, _ = run(capsys, "validate", "--manifold", "heisenberg1", "--samples", "50", "--json")
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["passed"] and rep["chart"] == "heisenberg1" and rep["ledger_hash"]
    assert rep["version"] and rep["seed"] == 0
    assert any(a["name"].startswith("axiom.") for a in rep["assertions"])


def test_global_flags_before_subcommand(capsys):
    code, out, _ = run(capsys, "--manifold", "sphere3", "--seed", "4", "--json", "validate", "--samples", "20")
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["chart"] == "sphere3" and rep["seed"] == 4


def test_tol_scale_makes_validate_fail(capsys):
    code, out, _ = run(capsys, "validate", "--samples", "20", "--tol-scale", "1e-30")
    assert code == EXIT_FAIL
    assert "FAIL" in out


def test_geodesic_csv(capsys):
    code, out, _ = run(capsys, "geodesic", "--start", "0,0,0", "--dir", "1,0,0.5", "--length", "1", "--out", "csv")
    assert code == EXIT_OK
    lines = out.strip().splitlines()
    assert lines[0].split(",")[:4] == ["t", "x0", "x1", "x2"]
    last = [float(x) for x in lines[-1].split(",")]
    # Heisenberg geodesics are coordinate lines
    assert last[0] == pytest.approx(1.0)
    assert last[1:4] == pytest.approx([1.0, 0.0, 0.5], abs=1e-10)


def test_geodesic_dimension_mismatch(capsys):
    code, _, err = run(capsys, "geodesic", "--start", "0,0", "--dir", "1,0,0", "--length", "1")
    assert code == EXIT_USAGE and "dimension" in err


def test_geodesic_leaving_chart_is_computation_error(capsys):
    code, _, err = run(capsys, "--manifold", "sphere3", "geodesic", "--start", "0,0,0", "--dir", "1,0,0",
                       "--length", "200")
    assert code == EXIT_ERROR and "LeftDomain" in err


def test_bad_manifold(capsys):
    code, _, err = run(capsys, "--manifold", "klein-bottle", "validate")
    assert code == EXIT_USAGE
    code, _, err = run(capsys, "--manifold", "file:/nonexistent/chart.json", "validate")
    assert code == EXIT_USAGE


def test_delta_unit_pair(capsys):
    code, out, _ = run(capsys, "delta", "--from", "0,0,0", "--to", "1,0,0", "--json")
    assert code == EXIT_OK
    assert json.loads(out)["data"]["delta_upper_bound"] == pytest.approx(1.0, abs=1e-8)


def test_jacobi_sasakian_conservation(capsys):
    code, out, _ = run(capsys, "jacobi", "--start", "0,0,0", "--dir", "1,0,0.3", "--V0", "0,1,0", "--V0p",
                       "0,0,1", "--length", "2", "--mode", "sasakian", "--json")
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["parameters"]["mode"] == "sasakian"
    assert rep["assertions"][0]["name"] == "conservation_spread"


def test_conjugate_on_sphere(capsys):
    code, out, _ = run(capsys, "--manifold", "sphere3", "conjugate", "--start", "0,0,0", "--dir", "0,1,0",
                       "--max-length", "2", "--json")
    assert code == EXIT_OK
    # horizontal unit geodesic: first conjugate point at pi / 2
    assert json.loads(out)["data"]["first"] == pytest.approx(1.5707963, abs=1e-6)
    # xi is parallel to the first coordinate axis at the origin: a vertical geodesic, none expected
    code, out, _ = run(capsys, "--manifold", "sphere3", "conjugate", "--start", "0,0,0", "--dir", "1,0,0",
                       "--max-length", "2", "--json")
    assert code == EXIT_OK and json.loads(out)["data"]["first"] is None


def test_out_dir_artifacts(capsys, tmp_path):
    d = tmp_path / "art"
    code, _, _ = run(capsys, "--out-dir", str(d), "geodesic", "--start", "0,0,0", "--dir", "0,1,0",
                     "--length", "0.5")
    assert code == EXIT_OK
    files = os.listdir(d)
    assert "report.json" in files and "geodesic__heisenberg1.csv" in files
    assert "geodesic__samples.csv" in files


def test_paper_suite_filter_and_bad_config(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"charts": ["heisenberg1"], "sizes": {"flatness.samples": 10}}))
    code, out, _ = run(capsys, "paper-suite", "--config", str(cfg), "--filter", "flatness", "--json")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["passed"] and [r["experiment"] for r in doc["reports"]] == ["flatness"]
    code, _, err = run(capsys, "paper-suite", "--filter", "nope")
    assert code == EXIT_USAGE
    cfg.write_text('{"charts": 3}')
    code, _, _ = run(capsys, "paper-suite", "--config", str(cfg))
    assert code == EXIT_USAGE


@pytest.mark.skipif(shutil.which("phgeo") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["phgeo", "list-manifolds"], capture_output=True, text=True, timeout=300)
    assert res.returncode == 0 and "sphere3" in res.stdout
    res = subprocess.run([sys.executable, "-m", "phgeo.cli", "--version"], capture_output=True, text=True,
                         timeout=300)
    assert res.returncode == 0 and res.stdout.startswith("phgeo ")
